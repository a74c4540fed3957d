"""Closed-form FVC decline slopes and straight-line reconstruction.

Ground-truth decline rates are the slopes of per-patient least-squares
lines through (week, FVC) points. Three algebraically equivalent routes
are kept side by side: the 2x2 normal-equations solve used in production,
the O(n) two-sum textbook slope, and a deliberately quadratic double-sum
form retained for derivation-fidelity testing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SingularDesignError


@dataclass(frozen=True)
class LineFit:
    """Fitted line: FVC(t) = intercept + slope * t."""

    intercept: float
    slope: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.intercept) and math.isfinite(self.slope)):
            raise ValueError("LineFit requires finite intercept and slope")


@dataclass(frozen=True)
class DesignPair:
    """Paired measurement times (weeks) and FVC values (mL) for one patient."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=np.float64)
        m = np.asarray(self.values, dtype=np.float64)
        if t.ndim != 1 or m.ndim != 1 or t.shape != m.shape:
            raise ValueError(f"times/values must be equal-length vectors, "
                             f"got {t.shape} and {m.shape}")
        if t.size < 2:
            raise ValueError(f"need at least 2 points, got {t.size}")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(m))):
            raise ValueError("times/values must be finite")
        if np.ptp(t) == 0.0:
            raise SingularDesignError("all timestamps equal; slope is undefined")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", m)

    @property
    def n(self) -> int:
        return int(self.times.size)


def _denominator(t: np.ndarray) -> float:
    n = t.size
    denom = n * float(np.sum(t * t)) - float(np.sum(t)) ** 2
    if denom <= 0.0:
        raise SingularDesignError("degenerate design: n*sum(t^2) - (sum t)^2 <= 0")
    return denom


def ols_fit(pair: DesignPair) -> LineFit:
    """Least-squares line via the explicit 2x2 normal-equations inverse."""
    t, m = pair.times, pair.values
    n = pair.n
    st = float(np.sum(t))
    stt = float(np.sum(t * t))
    sm = float(np.sum(m))
    stm = float(np.sum(t * m))
    gamma = _denominator(t)  # determinant of the 2x2 normal matrix
    intercept = (stt * sm - st * stm) / gamma
    slope = (n * stm - st * sm) / gamma
    return LineFit(intercept=intercept, slope=slope)


def slope_two_sum(pair: DesignPair) -> float:
    """Textbook slope (n*sum(t*m) - sum(t)*sum(m)) / (n*sum(t^2) - (sum t)^2)."""
    t, m = pair.times, pair.values
    n = pair.n
    numer = n * float(np.sum(t * m)) - float(np.sum(t)) * float(np.sum(m))
    return numer / _denominator(t)


def slope_closed_form(pair: DesignPair) -> float:
    """Slope via the double-sum numerator, evaluated as written.

    numerator = (n-1) * sum_j t_j*m_j - sum_j sum_{l != j} t_l*m_j.
    Intentionally quadratic; kept for fidelity checks against the
    production routes, not for the training loop.
    """
    t, m = pair.times, pair.values
    n = pair.n
    cross = t[None, :] * m[:, None]  # cross[j, l] = t_l * m_j
    np.fill_diagonal(cross, 0.0)
    numer = (n - 1) * float(np.sum(t * m)) - float(np.sum(cross))
    return numer / _denominator(t)


def rss_and_gradient(pair: DesignPair, beta: LineFit) -> tuple[float, np.ndarray]:
    """Residual sum of squares and its gradient wrt (intercept, slope).

    rss = ||M - T b||^2 with T = [1, t]; grad = -2 T'M + 2 T'T b. The
    gradient vanishes at the ols_fit solution.
    """
    t, m = pair.times, pair.values
    design = np.column_stack([np.ones_like(t), t])
    b = np.array([beta.intercept, beta.slope], dtype=np.float64)
    resid = m - design @ b
    rss = float(resid @ resid)
    grad = -2.0 * design.T @ m + 2.0 * (design.T @ design) @ b
    return rss, grad


def reconstruct_fvc(fit_slope: float, baseline: float, times: np.ndarray) -> np.ndarray:
    """Project FVC along a line: m_hat(t) = baseline + slope * t.

    Times are expected re-zeroed so the first measurement sits at t = 0,
    making the baseline the first measured value.
    """
    t = np.asarray(times, dtype=np.float64)
    return baseline + fit_slope * t
