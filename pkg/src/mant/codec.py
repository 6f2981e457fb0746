"""Group-wise encode/decode of tensors.

Weights and KV-cache groups are encoded to 4-bit sign-magnitude codes on an
adaptive grid (or, via a sentinel coefficient, to plain signed INT4);
activation groups are encoded to symmetric INT8.  Every group carries a
scaling factor and its coefficient as metadata.

Code layout: a 4-bit code is one byte holding ``sign << 3 | magnitude``
(sign bit 1 means negative).  Two codes pack into one payload byte, low
nibble first.

Scales are kept at full float64 precision in memory; the container layer
(see :mod:`mant.container`) rounds them to IEEE half when serializing.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import MAX_COEFFICIENT, build_grid

DEFAULT_GROUP_SIZE = 64

# Sentinel coefficients stored in group metadata for non-adaptive groups.
INT4_COEFF = 128
INT8_COEFF = 255

SIGN_BIT = 0x8
MAGNITUDE_MASK = 0x7

KIND_MANT4 = "mant4"
KIND_INT8 = "int8"


@dataclass(frozen=True)
class MantCode:
    """One 4-bit sign-magnitude code."""

    sign: int
    magnitude: int

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")
        if not 0 <= self.magnitude <= 7:
            raise ValueError(f"magnitude must be in 0..7, got {self.magnitude}")

    @property
    def nibble(self) -> int:
        return (SIGN_BIT if self.sign < 0 else 0) | self.magnitude

    @classmethod
    def from_nibble(cls, nibble: int) -> "MantCode":
        return cls(-1 if nibble & SIGN_BIT else 1, nibble & MAGNITUDE_MASK)

    def value(self, a: int) -> int:
        """Decoded pre-scale integer value on the grid of coefficient ``a``."""
        return self.sign * int(magnitude_values(a)[self.magnitude])


@dataclass(frozen=True)
class GroupMeta:
    """Per-group metadata: scaling factor, coefficient, true group length.

    ``scale`` is zero only for all-zero groups, which decode to zeros.
    ``coefficient_a`` is 0..127 for adaptive groups, INT4_COEFF for plain
    INT4 groups, INT8_COEFF for INT8 groups.
    """

    scale: float
    coefficient_a: int
    length: int = DEFAULT_GROUP_SIZE


@lru_cache(maxsize=None)
def _magnitude_table(a: int) -> np.ndarray:
    if a == INT4_COEFF:
        table = np.arange(8, dtype=np.float64)
    else:
        table = np.array(build_grid(a).magnitudes, dtype=np.float64)
    table.setflags(write=False)  # cached and shared
    return table


def magnitude_values(a: int) -> np.ndarray:
    """Pre-scale magnitudes indexed by the 3-bit magnitude field."""
    if a == INT8_COEFF:
        raise ValueError("INT8 groups have no 4-bit magnitude table")
    return _magnitude_table(int(a))


def grid_max(a: int) -> float:
    """Largest representable pre-scale magnitude for coefficient ``a``."""
    if a == INT8_COEFF:
        return 127.0
    return float(magnitude_values(a)[-1])


def code_value_table(a: int) -> np.ndarray:
    """Pre-scale decoded values of all 16 nibbles (index = nibble pattern)."""
    mags = magnitude_values(a)
    return np.concatenate([mags, -mags])


def _check_finite(values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError("input contains non-finite values")


def quantize_weight_group(values, a: int, scale: float | None = None):
    """Encode one group of reals to 4-bit codes on the grid of ``a``.

    Returns ``(codes, meta)`` where ``codes`` is a uint8 array of nibble
    patterns.  The scale defaults to ``max|values| / grid_max(a)`` so the
    largest element always lands on the top grid point; pass ``scale`` to
    re-encode against a fixed factor.  Each element gets the code minimizing
    the absolute pre-scale error, ties broken toward the smaller magnitude.
    """
    values = np.asarray(values, dtype=np.float64)
    _check_finite(values)
    if a != INT4_COEFF and not 0 <= a <= MAX_COEFFICIENT:
        raise ValueError(f"coefficient out of range: {a}")

    if scale is None:
        absmax = float(np.max(np.abs(values))) if values.size else 0.0
        scale = absmax / grid_max(a)
    elif scale < 0.0:
        raise ValueError(f"scale must be non-negative, got {scale}")
    if scale == 0.0:
        return np.zeros(values.shape, dtype=np.uint8), GroupMeta(0.0, a, values.size)

    mags = magnitude_values(a)
    normalized = np.abs(values) / scale
    # argmin returns the first (smallest) magnitude on ties
    idx = np.argmin(np.abs(normalized[:, None] - mags[None, :]), axis=1)
    codes = idx.astype(np.uint8)
    negative = values < 0
    if a == INT4_COEFF:
        # magnitude 0 decodes to exact zero; keep its sign canonical
        negative &= idx != 0
    codes[negative] |= SIGN_BIT
    return codes, GroupMeta(float(scale), int(a), values.size)


def quantize_activation_group(values):
    """Encode one group of reals to symmetric INT8.

    ``scale = max|values| / 127``; codes round half away from zero and clamp
    to [-127, 127], so -128 is never emitted.
    """
    values = np.asarray(values, dtype=np.float64)
    _check_finite(values)
    absmax = float(np.max(np.abs(values))) if values.size else 0.0
    scale = absmax / 127.0
    if scale == 0.0:
        return np.zeros(values.shape, dtype=np.int8), GroupMeta(0.0, INT8_COEFF, values.size)
    scaled = values / scale
    codes = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    codes = np.clip(codes, -127, 127).astype(np.int8)
    return codes, GroupMeta(scale, INT8_COEFF, values.size)


def dequantize_group(codes, meta: GroupMeta) -> np.ndarray:
    """Decode a group back to reals: ``sign * magnitude_value * scale``."""
    codes = np.asarray(codes)
    if meta.coefficient_a == INT8_COEFF:
        if codes.dtype != np.int8:
            raise ValueError(f"INT8 group requires int8 codes, got {codes.dtype}")
        if meta.scale == 0.0:
            return np.zeros(codes.shape, dtype=np.float64)
        return codes.astype(np.float64) * meta.scale
    if codes.dtype != np.uint8:
        raise ValueError(f"4-bit group requires uint8 nibble codes, got {codes.dtype}")
    if meta.scale == 0.0:
        return np.zeros(codes.shape, dtype=np.float64)
    return code_value_table(meta.coefficient_a)[codes] * meta.scale


def pack_codes(codes) -> bytes:
    """Pack 4-bit codes two per byte, low nibble first (odd tail pads 0)."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size == 0:
        return b""
    if np.any(codes > 0xF):
        raise ValueError("codes exceed 4 bits")
    padded = codes
    if codes.size % 2:
        padded = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (padded[0::2] | (padded[1::2] << 4)).tobytes()


def unpack_codes(payload: bytes, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes` for a group of ``count`` codes."""
    expected = (count + 1) // 2
    if len(payload) != expected:
        raise ValueError(f"payload holds {len(payload)} bytes, expected {expected} for {count} codes")
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    raw = np.frombuffer(payload, dtype=np.uint8)
    codes = np.empty(2 * raw.size, dtype=np.uint8)
    codes[0::2] = raw & 0xF
    codes[1::2] = raw >> 4
    return codes[:count]


def packed_group_bytes(kind: str, length: int) -> int:
    """Payload bytes one group occupies in packed form."""
    if kind == KIND_MANT4:
        return (length + 1) // 2
    if kind == KIND_INT8:
        return length
    raise ValueError(f"unknown element kind {kind!r}")


@dataclass
class QuantizedTensor:
    """A group-quantized tensor with per-group metadata.

    Groups run along ``group_axis`` (the accumulation axis).  Rows are the
    flattened remaining axes in row-major order; group ``g`` of row ``r``
    covers elements ``[g*group_size, min((g+1)*group_size, axis_len))``.
    ``codes`` is (rows, n_groups, group_size): uint8 nibbles for 4-bit kinds,
    int8 for INT8, zero-padded past each group's true length.
    """

    shape: tuple[int, ...]
    element_kind: str
    group_axis: int
    group_size: int
    codes: np.ndarray
    scales: np.ndarray        # (rows, n_groups) float64
    coefficients: np.ndarray  # (rows, n_groups) uint8
    group_lengths: np.ndarray  # (rows, n_groups) uint16

    @property
    def axis_length(self) -> int:
        return self.shape[self.group_axis]

    @property
    def n_groups(self) -> int:
        return -(-self.axis_length // self.group_size)

    @property
    def n_rows(self) -> int:
        total = 1
        for d in self.shape:
            total *= d
        return total // self.axis_length

    def dequantize(self) -> np.ndarray:
        """Reconstruct the full real-valued tensor."""
        rows = np.zeros((self.n_rows, self.axis_length), dtype=np.float64)
        for r in range(self.n_rows):
            for g in range(self.n_groups):
                length = int(self.group_lengths[r, g])
                meta = GroupMeta(float(self.scales[r, g]), int(self.coefficients[r, g]), length)
                start = g * self.group_size
                rows[r, start:start + length] = dequantize_group(self.codes[r, g, :length], meta)
        return _rows_to_tensor(rows, self.shape, self.group_axis)


def _tensor_to_rows(values: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(values, axis, -1).reshape(-1, values.shape[axis])


def _rows_to_tensor(rows: np.ndarray, shape: tuple[int, ...], axis: int) -> np.ndarray:
    moved_shape = tuple(shape[i] for i in range(len(shape)) if i != axis) + (shape[axis],)
    return np.moveaxis(rows.reshape(moved_shape), -1, axis)


def _group_slices(axis_len: int, group_size: int):
    for start in range(0, axis_len, group_size):
        yield start // group_size, start, min(start + group_size, axis_len)


def quantize_activation_tensor(values, group_axis: int, group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedTensor:
    """Quantize a tensor to group-wise INT8 along ``group_axis``."""
    values = np.asarray(values, dtype=np.float64)
    _check_finite(values)
    rows = _tensor_to_rows(values, group_axis)
    n_rows, axis_len = rows.shape
    n_groups = -(-axis_len // group_size)

    codes = np.zeros((n_rows, n_groups, group_size), dtype=np.int8)
    scales = np.zeros((n_rows, n_groups))
    coeffs = np.full((n_rows, n_groups), INT8_COEFF, dtype=np.uint8)
    lengths = np.zeros((n_rows, n_groups), dtype=np.uint16)
    for r in range(n_rows):
        for g, start, stop in _group_slices(axis_len, group_size):
            group_codes, meta = quantize_activation_group(rows[r, start:stop])
            codes[r, g, :stop - start] = group_codes
            scales[r, g] = meta.scale
            lengths[r, g] = stop - start
    return QuantizedTensor(tuple(values.shape), KIND_INT8, group_axis, group_size,
                           codes, scales, coeffs, lengths)


def quantize_weight_tensor(values, coefficients, group_axis: int = 0,
                           group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedTensor:
    """Quantize a tensor to group-wise 4-bit codes along ``group_axis``.

    ``coefficients`` is either a single coefficient applied to every group or
    an array of shape (rows, n_groups) assigning one per group (INT4_COEFF
    entries select the plain INT4 grid).
    """
    values = np.asarray(values, dtype=np.float64)
    _check_finite(values)
    rows = _tensor_to_rows(values, group_axis)
    n_rows, axis_len = rows.shape
    n_groups = -(-axis_len // group_size)

    coeff_arr = np.asarray(coefficients)
    if coeff_arr.ndim == 0:
        coeff_arr = np.full((n_rows, n_groups), int(coeff_arr), dtype=np.uint8)
    elif coeff_arr.shape != (n_rows, n_groups):
        raise ValueError(f"coefficients shape {coeff_arr.shape} != {(n_rows, n_groups)}")

    codes = np.zeros((n_rows, n_groups, group_size), dtype=np.uint8)
    scales = np.zeros((n_rows, n_groups))
    lengths = np.zeros((n_rows, n_groups), dtype=np.uint16)
    for r in range(n_rows):
        for g, start, stop in _group_slices(axis_len, group_size):
            group_codes, meta = quantize_weight_group(rows[r, start:stop], int(coeff_arr[r, g]))
            codes[r, g, :stop - start] = group_codes
            scales[r, g] = meta.scale
            lengths[r, g] = stop - start
    return QuantizedTensor(tuple(values.shape), KIND_MANT4, group_axis, group_size,
                           codes, scales, coeff_arr.astype(np.uint8), lengths)
