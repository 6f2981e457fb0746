"""Real-time KV-cache quantization.

K and V are both quantized along their accumulation axes, which differ: a
new key vector completes its groups (along the head dimension) immediately,
while a new value vector contributes one element to every group running
along the sequence axis.  Keys are therefore encoded spatially per step;
values go through a two-phase process window: each decode step stages the
vector as INT8 (channel-wise scales fixed at prefill) and updates running
max / sum / sum-of-squares per channel, and when the window holds a full
group the staged rows are re-encoded to 4-bit codes using a coefficient
picked from the streaming variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import (
    DEFAULT_GROUP_SIZE,
    GroupMeta,
    dequantize_group,
    quantize_weight_group,
)
from .selection import VarianceTable, select_by_variance, variance_from_sums


@dataclass
class ProcessWindow:
    """Staging window of one attention head's value stream.

    Holds up to ``group_size`` INT8 rows plus per-channel running statistics
    of their dequantized values.  ``flush`` is only legal when the window is
    full, and resets every counter.
    """

    channel_scales: np.ndarray
    group_size: int = DEFAULT_GROUP_SIZE
    fill_count: int = 0
    clamp_count: int = 0
    staged: np.ndarray = field(init=False)
    running_max: np.ndarray = field(init=False)
    sum_v: np.ndarray = field(init=False)
    sum_v2: np.ndarray = field(init=False)

    def __post_init__(self):
        self.channel_scales = np.asarray(self.channel_scales, dtype=np.float64)
        channels = self.channel_scales.size
        self.staged = np.zeros((self.group_size, channels), dtype=np.int8)
        self.running_max = np.zeros(channels)
        self.sum_v = np.zeros(channels)
        self.sum_v2 = np.zeros(channels)

    @property
    def channels(self) -> int:
        return self.channel_scales.size

    @property
    def is_full(self) -> bool:
        return self.fill_count == self.group_size

    def push(self, values) -> None:
        """Stage one value vector; the window must not be full.

        Channels with a zero scale stage zero; values beyond a channel's
        INT8 range clamp, and both cases bump ``clamp_count``.
        """
        if self.is_full:
            raise ValueError("process window is full; flush before pushing")
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.channels,):
            raise ValueError(f"expected {self.channels} channels, got {values.shape}")

        codes = np.zeros(self.channels)
        live = self.channel_scales > 0.0
        scaled = np.divide(values, self.channel_scales, out=np.zeros_like(values), where=live)
        codes[live] = np.sign(scaled[live]) * np.floor(np.abs(scaled[live]) + 0.5)
        out_of_range = live & (np.abs(codes) > 127)
        dead_loss = ~live & (values != 0.0)
        self.clamp_count += int(np.count_nonzero(out_of_range) + np.count_nonzero(dead_loss))
        codes = np.clip(codes, -127, 127).astype(np.int8)

        self.staged[self.fill_count] = codes
        decoded = codes.astype(np.float64) * self.channel_scales
        self.running_max = np.maximum(self.running_max, np.abs(decoded))
        self.sum_v += decoded
        self.sum_v2 += decoded * decoded
        self.fill_count += 1

    def staged_dequantized(self) -> np.ndarray:
        """Real values of the staged rows, shape (fill_count, channels)."""
        return self.staged[:self.fill_count].astype(np.float64) * self.channel_scales[None, :]

    def flush(self, table: VarianceTable):
        """Convert the staged window to 4-bit groups, one per channel.

        Per channel the normalized variance comes from the running sums
        (``var(x/c) == var(x)/c**2``), the coefficient from the table, and
        the codes from re-encoding the dequantized staged column.  Returns
        (codes, metas) with codes shaped (channels, group_size); the window
        resets afterwards.
        """
        if not self.is_full:
            raise ValueError(f"flush requires a full window, have {self.fill_count}/{self.group_size}")
        decoded = self.staged_dequantized()
        codes = np.zeros((self.channels, self.group_size), dtype=np.uint8)
        metas: list[GroupMeta] = []
        smallest = table.entries[0][0]
        for c in range(self.channels):
            if self.running_max[c] == 0.0:
                a = smallest
            else:
                var = variance_from_sums(float(self.sum_v[c]), float(self.sum_v2[c]),
                                         self.group_size, float(self.running_max[c]))
                a = table.lookup(var)
            codes[c], meta = quantize_weight_group(decoded[:, c], a)
            metas.append(meta)
        self.fill_count = 0
        self.staged[:] = 0
        self.running_max[:] = 0.0
        self.sum_v[:] = 0.0
        self.sum_v2[:] = 0.0
        return codes, metas


@dataclass
class _VBlock:
    """One flushed sequence block: per-channel 4-bit groups."""

    codes: np.ndarray   # (channels, group_size) uint8
    scales: np.ndarray  # (channels,)
    coeffs: np.ndarray  # (channels,)
    length: int


class KvCache:
    """Quantized K/V store for one attention layer.

    Keys are grouped along the head dimension and encoded completely at
    every step; values are grouped along the sequence axis through a
    per-head process window.  Coefficients come from per-role variance
    tables.
    """

    def __init__(self, heads: int, head_dim: int, k_table: VarianceTable,
                 v_table: VarianceTable, group_size: int = DEFAULT_GROUP_SIZE,
                 max_seq: int | None = None):
        if heads < 1 or head_dim < 1 or group_size < 1:
            raise ValueError("geometry must be positive")
        if max_seq is not None and max_seq < 1:
            raise ValueError("max_seq must be positive")
        self.heads = heads
        self.head_dim = head_dim
        self.group_size = group_size
        self.max_seq = max_seq
        self.k_table = k_table
        self.v_table = v_table
        self.k_group_slices = [(start, min(start + group_size, head_dim))
                               for start in range(0, head_dim, group_size)]
        # per token: codes (heads, n_kgroups, G), scales/coeffs (heads, n_kgroups)
        self._k_codes: list[np.ndarray] = []
        self._k_scales: list[np.ndarray] = []
        self._k_coeffs: list[np.ndarray] = []
        self._k_stacked = None
        self._v_blocks: list[list[_VBlock]] = [[] for _ in range(heads)]
        self.windows: list[ProcessWindow] | None = None
        self._total_v = 0

    @property
    def n_k_groups(self) -> int:
        return len(self.k_group_slices)

    @property
    def seq_len(self) -> int:
        return len(self._k_codes)

    @property
    def flushed_tokens(self) -> int:
        return len(self._v_blocks[0]) * self.group_size if self._v_blocks[0] else 0

    @property
    def window_fill(self) -> int:
        return self.windows[0].fill_count if self.windows else 0

    @property
    def total_v_tokens(self) -> int:
        return self._total_v

    def conservation_holds(self) -> bool:
        """Flushed tokens plus window fill must equal all value tokens seen."""
        return self.flushed_tokens + self.window_fill == self._total_v

    # -- K path ------------------------------------------------------------

    def append_k(self, k_vector) -> None:
        """Quantize one key vector (heads, head_dim) and append it.

        Per group: one pass accumulates max, sum and sum of squares, the
        variance lookup picks the coefficient, and the group is encoded.
        """
        k_vector = np.asarray(k_vector, dtype=np.float64)
        if k_vector.shape != (self.heads, self.head_dim):
            raise ValueError(f"expected ({self.heads}, {self.head_dim}), got {k_vector.shape}")
        if self.max_seq is not None and self.seq_len >= self.max_seq:
            raise ValueError(f"cache full: max_seq={self.max_seq}")
        codes = np.zeros((self.heads, self.n_k_groups, self.group_size), dtype=np.uint8)
        scales = np.zeros((self.heads, self.n_k_groups))
        coeffs = np.zeros((self.heads, self.n_k_groups), dtype=np.uint8)
        for h in range(self.heads):
            for g, (start, stop) in enumerate(self.k_group_slices):
                group = k_vector[h, start:stop]
                absmax = float(np.max(np.abs(group)))
                if absmax == 0.0:
                    a = self.k_table.entries[0][0]
                else:
                    var = variance_from_sums(float(group.sum()), float((group * group).sum()),
                                             group.size, absmax)
                    a = self.k_table.lookup(var)
                group_codes, meta = quantize_weight_group(group, a)
                codes[h, g, :stop - start] = group_codes
                scales[h, g] = meta.scale
                coeffs[h, g] = meta.coefficient_a
        self._k_codes.append(codes)
        self._k_scales.append(scales)
        self._k_coeffs.append(coeffs)
        self._k_stacked = None

    def k_arrays(self):
        """Stacked key store: codes (S, heads, n_kgroups, G), scales, coeffs."""
        if self._k_stacked is None:
            if not self._k_codes:
                shape = (0, self.heads, self.n_k_groups)
                self._k_stacked = (np.zeros(shape + (self.group_size,), dtype=np.uint8),
                                   np.zeros(shape), np.zeros(shape, dtype=np.uint8))
            else:
                self._k_stacked = (np.stack(self._k_codes), np.stack(self._k_scales),
                                   np.stack(self._k_coeffs))
        return self._k_stacked

    def k_dequantized(self) -> np.ndarray:
        """Reconstructed keys, shape (seq, heads, head_dim)."""
        out = np.zeros((self.seq_len, self.heads, self.head_dim))
        for t in range(self.seq_len):
            for h in range(self.heads):
                for g, (start, stop) in enumerate(self.k_group_slices):
                    meta = GroupMeta(float(self._k_scales[t][h, g]),
                                     int(self._k_coeffs[t][h, g]), stop - start)
                    out[t, h, start:stop] = dequantize_group(
                        self._k_codes[t][h, g, :stop - start], meta)
        return out

    # -- V path ------------------------------------------------------------

    def init_windows(self, channel_scales: np.ndarray) -> None:
        """Create per-head process windows with prefill-derived channel scales."""
        channel_scales = np.asarray(channel_scales, dtype=np.float64)
        if channel_scales.shape != (self.heads, self.head_dim):
            raise ValueError(f"expected ({self.heads}, {self.head_dim}) channel scales")
        self.windows = [ProcessWindow(channel_scales[h], self.group_size)
                        for h in range(self.heads)]

    def push_v(self, v_vector) -> bool:
        """Stage one value vector; flush every head's window when it fills.

        Returns True when this push triggered a flush.
        """
        if self.windows is None:
            raise ValueError("windows not initialized; run prefill first")
        v_vector = np.asarray(v_vector, dtype=np.float64)
        if v_vector.shape != (self.heads, self.head_dim):
            raise ValueError(f"expected ({self.heads}, {self.head_dim}), got {v_vector.shape}")
        if self.max_seq is not None and self._total_v >= self.max_seq:
            raise ValueError(f"cache full: max_seq={self.max_seq}")
        for h in range(self.heads):
            self.windows[h].push(v_vector[h])
        self._total_v += 1
        if self.windows[0].is_full:
            for h in range(self.heads):
                codes, metas = self.windows[h].flush(self.v_table)
                self._v_blocks[h].append(_VBlock(
                    codes,
                    np.array([m.scale for m in metas]),
                    np.array([m.coefficient_a for m in metas], dtype=np.uint8),
                    self.group_size))
            return True
        return False

    def prefill(self, k_matrix, v_matrix) -> None:
        """Quantize a whole prompt at once.

        Keys go through the per-step path.  Value columns are split into
        full sequence blocks encoded directly (variance computed from the
        complete group); a trailing partial block enters the process window,
        whose channel scales are the per-channel absolute maxima of the
        prefill values.
        """
        k_matrix = np.asarray(k_matrix, dtype=np.float64)
        v_matrix = np.asarray(v_matrix, dtype=np.float64)
        if k_matrix.shape != v_matrix.shape or k_matrix.ndim != 3:
            raise ValueError("prefill expects matching (seq, heads, head_dim) tensors")
        if self.seq_len or self._total_v:
            raise ValueError("prefill must run on an empty cache")
        if self.max_seq is not None and k_matrix.shape[0] > self.max_seq:
            raise ValueError(f"prefill of {k_matrix.shape[0]} exceeds max_seq={self.max_seq}")
        for t in range(k_matrix.shape[0]):
            self.append_k(k_matrix[t])

        scales = np.max(np.abs(v_matrix), axis=0) / 127.0  # (heads, head_dim)
        self.init_windows(scales)
        seq = v_matrix.shape[0]
        full_blocks = seq // self.group_size
        for b in range(full_blocks):
            rows = v_matrix[b * self.group_size:(b + 1) * self.group_size]
            for h in range(self.heads):
                codes = np.zeros((self.head_dim, self.group_size), dtype=np.uint8)
                block_scales = np.zeros(self.head_dim)
                block_coeffs = np.zeros(self.head_dim, dtype=np.uint8)
                for c in range(self.head_dim):
                    a = select_by_variance(rows[:, h, c], self.v_table)
                    codes[c], meta = quantize_weight_group(rows[:, h, c], a)
                    block_scales[c] = meta.scale
                    block_coeffs[c] = meta.coefficient_a
                self._v_blocks[h].append(_VBlock(codes, block_scales, block_coeffs,
                                                 self.group_size))
        self._total_v = full_blocks * self.group_size
        for t in range(full_blocks * self.group_size, seq):
            for h in range(self.heads):
                self.windows[h].push(v_matrix[t, h])
            self._total_v += 1

    def v_blocks(self, head: int) -> list[_VBlock]:
        return self._v_blocks[head]

    def v_dequantized(self) -> np.ndarray:
        """Reconstructed values (flushed blocks plus staged rows)."""
        out = np.zeros((self._total_v, self.heads, self.head_dim))
        for h in range(self.heads):
            for b, block in enumerate(self._v_blocks[h]):
                start = b * self.group_size
                for c in range(self.head_dim):
                    meta = GroupMeta(float(block.scales[c]), int(block.coeffs[c]), block.length)
                    out[start:start + block.length, h, c] = dequantize_group(
                        block.codes[c, :block.length], meta)
            if self.windows is not None:
                window = self.windows[h]
                out[self.flushed_tokens:self._total_v, h, :] = window.staged_dequantized()
        return out
