"""Coefficient selection policies.

Weights are encoded offline: for each group the candidate coefficient is
chosen by the output mean-squared error against calibration activations.
The KV cache needs a decision per group in real time, so a calibration pass
maps normalized group variance to a coefficient instead: groups are labeled
with their best coefficient, and the variance boundary between two adjacent
candidates is the mean normalized variance observed at the integer midpoint
coefficient between them (probing a=35 and a=45 yields the boundaries of
the a=40 range, for example).  At inference a single streaming variance
lookup replaces the per-candidate search.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .codec import INT4_COEFF, dequantize_group, quantize_weight_group

DEFAULT_COEFFICIENTS = (0, 5, 10, 17, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120)


@dataclass(frozen=True)
class CandidateSet:
    """Coefficients a group may be encoded with.

    ``include_int`` adds the plain-INT4 grid as one more option for the
    offline weight search (the KV-cache variance table always works on the
    adaptive coefficients alone).
    """

    coefficients: tuple[int, ...] = DEFAULT_COEFFICIENTS
    include_int: bool = True

    def __post_init__(self):
        coeffs = tuple(int(a) for a in self.coefficients)
        if not coeffs:
            raise ValueError("candidate set is empty")
        if list(coeffs) != sorted(set(coeffs)):
            raise ValueError("coefficients must be strictly ascending")
        if coeffs[0] < 0 or coeffs[-1] > 127:
            raise ValueError("coefficients must lie in [0, 127]")
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def options(self) -> tuple[int, ...]:
        """All searchable options; INT4_COEFF sorts last when included."""
        if self.include_int:
            return self.coefficients + (INT4_COEFF,)
        return self.coefficients


def reconstruction(values, a: int) -> np.ndarray:
    """Quantize and dequantize one group with coefficient ``a``."""
    codes, meta = quantize_weight_group(values, a)
    return dequantize_group(codes, meta)


def select_weight_coefficient(w_group, x_calib, candidates: CandidateSet) -> int:
    """Pick the candidate minimizing the output MSE for one weight group.

    ``x_calib`` has shape (samples, len(w_group)); the error of candidate a
    is ``||x_calib @ (reconstruction(w, a) - w)||**2``.  Ties break toward
    the earlier option, i.e. the smaller coefficient.
    """
    w_group = np.asarray(w_group, dtype=np.float64)
    x_calib = np.asarray(x_calib, dtype=np.float64)
    if x_calib.ndim != 2 or x_calib.shape[1] != w_group.size:
        raise ValueError(f"calibration shape {x_calib.shape} does not match group size {w_group.size}")
    options = candidates.options
    best_a = options[0]
    best_err = np.inf
    for a in options:
        delta = reconstruction(w_group, a) - w_group
        err = float(np.sum((x_calib @ delta) ** 2))
        if err < best_err:
            best_a = a
            best_err = err
    return best_a


def weight_space_error(values, a: int) -> float:
    """Plain reconstruction MSE of one group, used to label calibration data."""
    values = np.asarray(values, dtype=np.float64)
    delta = reconstruction(values, a) - values
    return float(np.mean(delta ** 2))


def normalized_variance(values) -> float:
    """Variance of a group after scaling its absolute maximum to 1.

    Computed as ``(E[x^2] - E[x]^2) / max|x|^2``; an all-zero group yields 0.
    The result always lies in [0, 1].
    """
    values = np.asarray(values, dtype=np.float64)
    absmax = float(np.max(np.abs(values))) if values.size else 0.0
    if absmax == 0.0:
        return 0.0
    mean = float(np.mean(values))
    mean_sq = float(np.mean(values ** 2))
    var = (mean_sq - mean * mean) / (absmax * absmax)
    return float(min(max(var, 0.0), 1.0))


def variance_from_sums(total: float, total_sq: float, count: int, absmax: float) -> float:
    """Streaming form of :func:`normalized_variance` from running sums."""
    if absmax == 0.0 or count == 0:
        return 0.0
    var = (total_sq / count - (total / count) ** 2) / (absmax * absmax)
    return float(min(max(var, 0.0), 1.0))


@dataclass(frozen=True)
class VarianceTable:
    """Maps normalized group variance to a coefficient.

    ``entries`` is an ascending-coefficient list of (a, lo, hi) ranges that
    tile [0, 1]: contiguous, non-overlapping, first lo = 0, last hi = 1.
    """

    entries: tuple[tuple[int, float, float], ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("variance table is empty")
        coeffs = [e[0] for e in self.entries]
        if coeffs != sorted(coeffs) or len(set(coeffs)) != len(coeffs):
            raise ValueError("table entries must be ordered by ascending coefficient")
        prev_hi = 0.0
        for a, lo, hi in self.entries:
            if lo != prev_hi:
                raise ValueError(f"range gap before coefficient {a}: {lo} != {prev_hi}")
            if hi < lo:
                raise ValueError(f"inverted range for coefficient {a}")
            prev_hi = hi
        if self.entries[0][1] != 0.0 or self.entries[-1][2] != 1.0:
            raise ValueError("table ranges must cover [0, 1]")

    def lookup(self, variance: float) -> int:
        """Coefficient whose range contains ``variance`` (total on [0, 1])."""
        v = min(max(float(variance), 0.0), 1.0)
        for a, lo, hi in self.entries:
            if lo <= v < hi:
                return a
        return self.entries[-1][0]

    def range_of(self, a: int) -> tuple[float, float]:
        for coeff, lo, hi in self.entries:
            if coeff == a:
                return lo, hi
        raise KeyError(f"coefficient {a} not in table")

    def to_json(self) -> str:
        return json.dumps([{"a": a, "lo": lo, "hi": hi} for a, lo, hi in self.entries],
                          indent=2)

    @classmethod
    def from_json(cls, text: str) -> "VarianceTable":
        data = json.loads(text)
        return cls(tuple((int(e["a"]), float(e["lo"]), float(e["hi"])) for e in data))


@dataclass(frozen=True)
class CalibrationConfig:
    """Knobs of a calibration run, shareable as JSON."""

    group_size: int = 64
    coefficients: tuple[int, ...] = DEFAULT_COEFFICIENTS
    include_int: bool = False
    min_groups: int = 32
    nf_epsilon: float = 0.055

    def candidate_set(self) -> CandidateSet:
        return CandidateSet(self.coefficients, self.include_int)

    def to_json(self) -> str:
        return json.dumps({
            "group_size": self.group_size,
            "candidates": list(self.coefficients),
            "include_int": self.include_int,
            "min_groups": self.min_groups,
            "nf_epsilon": self.nf_epsilon,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationConfig":
        data = json.loads(text)
        return cls(
            group_size=int(data.get("group_size", 64)),
            coefficients=tuple(int(a) for a in data.get("candidates", DEFAULT_COEFFICIENTS)),
            include_int=bool(data.get("include_int", False)),
            min_groups=int(data.get("min_groups", 32)),
            nf_epsilon=float(data.get("nf_epsilon", 0.055)),
        )


def midpoint_probes(coefficients: tuple[int, ...]) -> tuple[int, ...]:
    """Integer midpoint coefficients between adjacent candidates."""
    return tuple((a + b) // 2 for a, b in zip(coefficients, coefficients[1:]))


def table_from_probe_means(coefficients, probe_means) -> VarianceTable:
    """Build a table from per-probe mean variances.

    ``probe_means[k]`` is the mean normalized variance of groups whose best
    coefficient was the midpoint probe between candidates k and k+1 (None
    for probes with no samples).  Missing boundaries are interpolated from
    their neighbors; boundaries are clipped ascending so candidates whose
    data is degenerate collapse to an empty range and merge into neighbors.
    """
    coefficients = tuple(int(a) for a in coefficients)
    boundaries = list(probe_means)
    if len(boundaries) != len(coefficients) - 1:
        raise ValueError("need one probe mean per adjacent candidate pair")

    known = [(i, b) for i, b in enumerate(boundaries) if b is not None]
    if not known and boundaries:
        # no probe data at all: fall back to an even split
        boundaries = [(i + 1) / len(coefficients) for i in range(len(boundaries))]
    else:
        for i in range(len(boundaries)):
            if boundaries[i] is not None:
                continue
            left = [(j, b) for j, b in known if j < i]
            right = [(j, b) for j, b in known if j > i]
            if left and right:
                (jl, bl), (jr, br) = left[-1], right[0]
                boundaries[i] = bl + (br - bl) * (i - jl) / (jr - jl)
            elif left:
                boundaries[i] = left[-1][1]
            else:
                boundaries[i] = right[0][1]

    edges = [0.0]
    for b in boundaries:
        edges.append(min(max(float(b), edges[-1]), 1.0))
    edges.append(1.0)
    entries = tuple((a, edges[i], edges[i + 1]) for i, a in enumerate(coefficients))
    return VarianceTable(entries)


def build_variance_table(calib_groups, candidates: CandidateSet | tuple[int, ...],
                         min_groups: int = 32) -> VarianceTable:
    """Calibrate a variance table from sample groups.

    Each calibration group is labeled with its error-minimizing coefficient
    drawn from the candidates plus the midpoint probes between them; the
    mean normalized variance per probe becomes the boundary between the
    adjacent candidates.  Requires at least ``min_groups`` groups.
    """
    coefficients = candidates.coefficients if isinstance(candidates, CandidateSet) \
        else tuple(int(a) for a in candidates)
    groups = np.asarray(calib_groups, dtype=np.float64)
    if groups.ndim != 2:
        raise ValueError("calibration groups must be a (n, group_size) array")
    if groups.shape[0] < min_groups:
        raise ValueError(f"need at least {min_groups} calibration groups, got {groups.shape[0]}")
    if len(coefficients) == 1:
        return VarianceTable(((coefficients[0], 0.0, 1.0),))

    probes = midpoint_probes(coefficients)
    search_space = tuple(sorted(set(coefficients) | set(probes)))
    probe_variances: dict[int, list[float]] = {p: [] for p in probes}
    for row in groups:
        errs = [weight_space_error(row, a) for a in search_space]
        label = search_space[int(np.argmin(errs))]
        if label in probe_variances:
            probe_variances[label].append(normalized_variance(row))
    means = [float(np.mean(vs)) if vs else None for vs in (probe_variances[p] for p in probes)]
    return table_from_probe_means(coefficients, means)


def select_by_variance(group, table: VarianceTable) -> int:
    """Real-time coefficient choice: normalized variance lookup.

    Total over all inputs; an all-zero group maps to the smallest
    coefficient.
    """
    values = np.asarray(group, dtype=np.float64)
    if values.size == 0 or float(np.max(np.abs(values))) == 0.0:
        return table.entries[0][0]
    return table.lookup(normalized_variance(values))
