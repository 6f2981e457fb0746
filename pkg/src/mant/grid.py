"""Quantization grids and coefficient fitting.

The 4-bit format encodes a sign bit plus a 3-bit magnitude index i; the
pre-scale magnitude of index i is ``a*i + 2**i`` for a per-group integer
coefficient ``a``.  Sweeping ``a`` morphs the grid smoothly between a pure
power-of-two ladder (a=0) and a nearly uniform ladder (large a), so one
decoder covers a family of numeric types.  This module builds those grids,
generates the reference curves of the classic data types (INT, PoT,
NormalFloat, 4-bit float), and fits the coefficient that best approximates
a given curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_COEFFICIENT = 127
GRID_POINTS = 8

# Epsilon used when sampling Gaussian quantiles for the NormalFloat curve.
# Keeps the top quantile away from p=1 where the probit diverges; this value
# makes the fitted coefficient land on 25, the canonical NormalFloat fit.
DEFAULT_NF_EPSILON = 0.055

CURVE_KINDS = ("int", "pot", "nf", "float")

# Positive magnitudes of a 4-bit float (1 sign, 2 exponent, 1 mantissa bit,
# exponent bias 1, subnormal at e=0): {0, 0.5, 1, 1.5, 2, 3, 4, 6}.
_FLOAT4_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])


@dataclass(frozen=True)
class MantGrid:
    """The 8 positive grid magnitudes for one coefficient.

    ``magnitudes[i] == coefficient_a * i + 2**i`` for i in 0..7.  Note that
    the smallest magnitude is 1 for every coefficient: exact zero is not
    representable before scaling.
    """

    coefficient_a: int
    magnitudes: tuple[int, ...]

    @property
    def max_magnitude(self) -> int:
        return self.magnitudes[-1]


@dataclass(frozen=True)
class ReferenceCurve:
    """Normalized positive magnitudes of a reference data type.

    ``points`` holds 8 non-decreasing values with ``points[7] == 1``.
    ``epsilon`` is only meaningful for the NormalFloat curve.
    """

    kind: str
    points: np.ndarray
    epsilon: float | None = None


def build_grid(a: int) -> MantGrid:
    """Build the quantization grid for coefficient ``a``.

    Raises ValueError unless 0 <= a <= 127 (the coefficient is stored in a
    byte and larger values barely change the normalized shape).
    """
    if not isinstance(a, (int, np.integer)):
        raise ValueError(f"coefficient must be an integer, got {a!r}")
    if not 0 <= a <= MAX_COEFFICIENT:
        raise ValueError(f"coefficient out of range [0, {MAX_COEFFICIENT}]: {a}")
    mags = tuple(int(a) * i + (1 << i) for i in range(GRID_POINTS))
    return MantGrid(coefficient_a=int(a), magnitudes=mags)


# Coefficients of Acklam's rational approximation to the inverse normal CDF.
_PROBIT_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_PROBIT_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
             6.680131188771972e+01, -1.328068155288572e+01)
_PROBIT_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_PROBIT_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
             3.754408661907416e+00)
_PROBIT_P_LOW = 0.02425


def _probit_tail(q: float) -> float:
    c = _PROBIT_C
    d = _PROBIT_D
    num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
    den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
    return num / den


def probit(p: float) -> float:
    """Inverse standard normal CDF.

    Rational approximation (Acklam) refined with one Halley step against the
    erfc-based CDF; absolute error is well below 1e-9 over (0, 1).
    """
    p = float(p)
    if not 0.0 < p < 1.0 or math.isnan(p):
        raise ValueError(f"probit domain is (0, 1), got {p!r}")
    if p > 0.5:
        # reflect into the lower half: 1 - p is exact there, and the CDF
        # residual below keeps full relative precision only for x <= 0
        return -_probit_lower(1.0 - p)
    return _probit_lower(p)


def _probit_lower(p: float) -> float:
    if p < _PROBIT_P_LOW:
        x = _probit_tail(math.sqrt(-2.0 * math.log(p)))
    else:
        a = _PROBIT_A
        b = _PROBIT_B
        q = p - 0.5
        r = q * q
        num = ((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]
        den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        x = num * q / den

    # Halley refinement: e is the CDF residual, u its ratio to the density.
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def reference_curve(kind: str, epsilon: float | None = None) -> ReferenceCurve:
    """Build the normalized 8-point magnitude curve of a reference data type.

    kind "int":   i/7
    kind "pot":   2**i / 128
    kind "nf":    probit(i*(1-eps)*0.5/7 + 0.5), normalized by its i=7 value
    kind "float": 4-bit float magnitudes {0,.5,1,1.5,2,3,4,6} normalized to 1

    ``epsilon`` applies to the NormalFloat curve only and must lie in
    (0, 0.2); it defaults to DEFAULT_NF_EPSILON.
    """
    kind = kind.lower()
    i = np.arange(GRID_POINTS, dtype=np.float64)
    if kind == "int":
        return ReferenceCurve("int", i / 7.0)
    if kind == "pot":
        return ReferenceCurve("pot", 2.0 ** i / 128.0)
    if kind == "float":
        return ReferenceCurve("float", _FLOAT4_MAGNITUDES / _FLOAT4_MAGNITUDES[-1])
    if kind == "nf":
        eps = DEFAULT_NF_EPSILON if epsilon is None else float(epsilon)
        if not 0.0 < eps < 0.2:
            raise ValueError(f"nf epsilon must be in (0, 0.2), got {eps}")
        quantiles = i * (1.0 - eps) * 0.5 / 7.0 + 0.5
        points = np.array([probit(p) for p in quantiles])
        return ReferenceCurve("nf", points / points[-1], epsilon=eps)
    raise ValueError(f"unknown curve kind {kind!r}, expected one of {CURVE_KINDS}")


def normalized_grid_curve(a: int) -> np.ndarray:
    """Grid magnitudes of coefficient ``a`` scaled so the top point is 1."""
    grid = build_grid(a)
    mags = np.array(grid.magnitudes, dtype=np.float64)
    return mags / grid.max_magnitude


def approximation_error(points: np.ndarray, a: int, metric: str = "mae") -> float:
    """Aggregate error between a normalized curve and the grid of ``a``.

    "mae" averages the per-point absolute differences, "mse" the squared
    ones.  Both compare curves normalized to a shared maximum of 1.
    """
    diff = np.abs(normalized_grid_curve(a) - np.asarray(points, dtype=np.float64))
    if metric == "mae":
        return float(diff.mean())
    if metric == "mse":
        return float((diff ** 2).mean())
    raise ValueError(f"unknown metric {metric!r}")


def fit_coefficient(curve: ReferenceCurve, metric: str = "mae") -> int:
    """Exhaustively search a in 0..127 for the best approximation of ``curve``.

    Returns the coefficient minimizing ``approximation_error``; ties break
    toward the smaller coefficient, so the result is deterministic.
    """
    best_a = 0
    best_err = math.inf
    for a in range(MAX_COEFFICIENT + 1):
        err = approximation_error(curve.points, a, metric)
        if err < best_err:
            best_a = a
            best_err = err
    return best_a
