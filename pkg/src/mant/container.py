"""Binary container formats.

Quantized container (magic "MNTQ", little-endian):
    magic       4s
    version     u16   (currently 1)
    element_kind u8   (0 = 4-bit codes, 1 = INT8)
    group_size  u16
    ndim        u8
    dims        u64 * ndim
    group_axis  u8
    group metadata, one record per group in row-major (row, group) order:
        scale     u16 (IEEE binary16 bits)
        a         u8
        group_len u16
    payload: packed codes per group in the same order, each group
    byte-aligned (two 4-bit codes per byte, low nibble first).

Raw tensor container (magic "MNTT"):
    magic 4s, version u16, dtype u8 (0 = float32), ndim u8, dims u64 * ndim,
    row-major float32 payload.

Scales are rounded to IEEE half on write; files round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .codec import (
    KIND_INT8,
    KIND_MANT4,
    QuantizedTensor,
    pack_codes,
    packed_group_bytes,
    unpack_codes,
)

QUANT_MAGIC = b"MNTQ"
TENSOR_MAGIC = b"MNTT"
FORMAT_VERSION = 1

_KIND_CODES = {KIND_MANT4: 0, KIND_INT8: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class ContainerError(ValueError):
    """Malformed or inconsistent container data."""


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContainerError(f"truncated container: wanted {n} bytes, got {len(data)}")
    return data


def half_bits(scale: float) -> int:
    """IEEE binary16 bit pattern of a scale (round to nearest, clamp to finite)."""
    h = np.float16(scale)
    if np.isinf(h):
        h = np.float16(np.sign(scale) * 65504.0)
    return int(h.view(np.uint16))


def write_quantized(fh: BinaryIO, qt: QuantizedTensor) -> None:
    """Serialize a quantized tensor; scales are rounded to IEEE half."""
    fh.write(QUANT_MAGIC)
    fh.write(struct.pack("<HBHB", FORMAT_VERSION, _KIND_CODES[qt.element_kind],
                         qt.group_size, len(qt.shape)))
    fh.write(struct.pack(f"<{len(qt.shape)}Q", *qt.shape))
    fh.write(struct.pack("<B", qt.group_axis))

    payload = bytearray()
    meta = bytearray()
    for r in range(qt.n_rows):
        for g in range(qt.n_groups):
            length = int(qt.group_lengths[r, g])
            meta += struct.pack("<HBH", half_bits(float(qt.scales[r, g])),
                                int(qt.coefficients[r, g]), length)
            group_codes = qt.codes[r, g, :length]
            if qt.element_kind == KIND_MANT4:
                payload += pack_codes(group_codes)
            else:
                payload += group_codes.astype(np.int8).tobytes()
    fh.write(bytes(meta))
    fh.write(bytes(payload))


def read_quantized(fh: BinaryIO) -> QuantizedTensor:
    """Deserialize a quantized tensor written by :func:`write_quantized`."""
    magic = _read_exact(fh, 4)
    if magic != QUANT_MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {QUANT_MAGIC!r}")
    version, kind_code, group_size, ndim = struct.unpack("<HBHB", _read_exact(fh, 6))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if kind_code not in _KIND_NAMES:
        raise ContainerError(f"unknown element kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    (group_axis,) = struct.unpack("<B", _read_exact(fh, 1))
    if group_axis >= ndim:
        raise ContainerError(f"group axis {group_axis} out of range for {ndim} dims")
    if group_size == 0:
        raise ContainerError("group size must be positive")

    axis_len = shape[group_axis]
    n_groups = -(-axis_len // group_size)
    n_rows = 1
    for i, d in enumerate(shape):
        if i != group_axis:
            n_rows *= d

    scales = np.zeros((n_rows, n_groups))
    coeffs = np.zeros((n_rows, n_groups), dtype=np.uint8)
    lengths = np.zeros((n_rows, n_groups), dtype=np.uint16)
    meta_raw = _read_exact(fh, 5 * n_rows * n_groups)
    for idx in range(n_rows * n_groups):
        bits, a, length = struct.unpack_from("<HBH", meta_raw, 5 * idx)
        r, g = divmod(idx, n_groups)
        scales[r, g] = float(np.uint16(bits).view(np.float16))
        coeffs[r, g] = a
        lengths[r, g] = length
        expected = axis_len - g * group_size if g == n_groups - 1 else group_size
        if length != min(expected, group_size):
            raise ContainerError(f"group ({r},{g}) length {length} inconsistent with dims")

    code_dtype = np.uint8 if kind == KIND_MANT4 else np.int8
    codes = np.zeros((n_rows, n_groups, group_size), dtype=code_dtype)
    for r in range(n_rows):
        for g in range(n_groups):
            length = int(lengths[r, g])
            nbytes = packed_group_bytes(kind, length)
            blob = _read_exact(fh, nbytes)
            if kind == KIND_MANT4:
                codes[r, g, :length] = unpack_codes(blob, length)
            else:
                codes[r, g, :length] = np.frombuffer(blob, dtype=np.int8)
    trailing = fh.read(1)
    if trailing:
        raise ContainerError("trailing bytes after payload")
    return QuantizedTensor(tuple(int(d) for d in shape), kind, int(group_axis),
                           int(group_size), codes, scales, coeffs, lengths)


def write_tensor(fh: BinaryIO, values: np.ndarray) -> None:
    """Serialize a raw float32 tensor."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<HBB", FORMAT_VERSION, 0, values.ndim))
    fh.write(struct.pack(f"<{values.ndim}Q", *values.shape))
    fh.write(values.tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    """Deserialize a raw float32 tensor written by :func:`write_tensor`."""
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version, dtype_code, ndim = struct.unpack("<HBB", _read_exact(fh, 4))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if dtype_code != 0:
        raise ContainerError(f"unsupported dtype code {dtype_code}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = 1
    for d in shape:
        count *= d
    payload = _read_exact(fh, 4 * count)
    if fh.read(1):
        raise ContainerError("trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


def save_quantized(path, qt: QuantizedTensor) -> None:
    with open(path, "wb") as fh:
        write_quantized(fh, qt)


def load_quantized(path) -> QuantizedTensor:
    with open(path, "rb") as fh:
        return read_quantized(fh)


def save_tensor(path, values) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, np.asarray(values))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
