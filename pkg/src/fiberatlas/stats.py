"""Self-contained Student-t machinery and ordinary least squares.

The t distribution is evaluated through the regularized incomplete beta
function, computed with Lentz's continued fraction to a fixed tolerance,
so the statistics layer carries no dependency beyond numpy.  Quantiles
come from bisection on the CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BETA_TOL = 1e-10
_TINY = 1e-300


def _beta_continued_fraction(a: float, b: float, x: float, tol: float) -> float:
    """Lentz evaluation of the incomplete-beta continued fraction."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        step = d * c
        h *= step
        if abs(step - 1.0) < tol:
            return h
    raise ArithmeticError(
        f"incomplete beta continued fraction did not converge for a={a}, b={b}, x={x}"
    )


def regularized_incomplete_beta(a: float, b: float, x: float, tol: float = BETA_TOL) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("incomplete beta requires a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the continued fraction converges fast only below the distribution mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x, tol) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x, tol) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for T ~ Student-t with df degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def student_t_cdf(t: float, df: float) -> float:
    p = student_t_two_sided_p(t, df)
    return 1.0 - 0.5 * p if t >= 0 else 0.5 * p


def student_t_ppf(q: float, df: float) -> float:
    """Quantile by bisection on the CDF; q in (0, 1)."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile order must be in (0, 1), got {q}")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -student_t_ppf(1.0 - q, df)
    lo, hi = 0.0, 1.0
    while student_t_cdf(hi, df) < q:
        hi *= 2.0
        if hi > 1e12:
            raise ArithmeticError("t quantile search failed to bracket")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if student_t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


class CollinearDesignError(ValueError):
    """The regression design matrix is rank deficient."""

    def __init__(self, column_names: list[str]):
        self.column_names = tuple(column_names)
        super().__init__(
            "design matrix is rank deficient; collinear columns: "
            + ", ".join(column_names)
        )


@dataclass(frozen=True)
class OLSFit:
    """Coefficients and per-coefficient inference for y = X b + e."""

    beta: np.ndarray
    se: np.ndarray
    t_stat: np.ndarray
    p_value: np.ndarray
    df_resid: int
    rss: float
    perfect_fit: bool


def _collinear_columns(x: np.ndarray, names: list[str]) -> list[str]:
    """Columns whose residual against the preceding columns vanishes."""
    flagged = []
    basis: list[np.ndarray] = []
    for j in range(x.shape[1]):
        v = x[:, j].astype(np.float64).copy()
        norm0 = np.linalg.norm(v)
        for u in basis:
            v -= (u @ v) * u
        if np.linalg.norm(v) <= 1e-10 * max(norm0, 1.0):
            flagged.append(names[j])
        else:
            basis.append(v / np.linalg.norm(v))
    return flagged


def ols_fit(x: np.ndarray, y: np.ndarray, column_names: list[str]) -> OLSFit:
    """Least squares with classical t inference per coefficient.

    A perfect (zero-residual) fit has no noise scale: coefficients that are
    numerically zero get p = 1, all others p = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = x.shape
    if len(column_names) != k:
        raise ValueError("one name per design column required")
    if n <= k:
        raise ValueError(f"need more observations ({n}) than parameters ({k})")
    if np.linalg.matrix_rank(x) < k:
        raise CollinearDesignError(_collinear_columns(x, column_names))

    beta, _, _, _ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    rss = float(resid @ resid)
    df = n - k
    scale = float(y @ y) + 1.0
    perfect = rss <= scale * 1e-20
    if perfect:
        mag = float(np.max(np.abs(beta)))
        zero = np.abs(beta) <= 1e-12 * max(mag, 1.0)
        se = np.zeros(k)
        t = np.where(zero, 0.0, np.inf)
        p = np.where(zero, 1.0, 0.0)
        return OLSFit(beta, se, t, p.astype(np.float64), df, rss, True)

    sigma2 = rss / df
    xtx_inv = np.linalg.inv(x.T @ x)
    se = np.sqrt(sigma2 * np.diag(xtx_inv))
    t = beta / se
    p = np.array([student_t_two_sided_p(float(tj), df) for tj in t])
    return OLSFit(beta, se, t, p, df, rss, False)
