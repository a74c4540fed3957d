"""Evaluation metrics: RMSE, Laplace log-likelihood, sigma estimation.

The Laplace score for one visit is -ln(sqrt(2)*sigma) - sqrt(2)*|err|/sigma;
batch scores are means over scored visits. Sigma comes from a policy: a
fixed value, or sqrt(2) times the mean absolute training residual (the
Laplace maximum-likelihood scale with the location pinned at zero).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SIGMA_FLOOR = 1.0  # mL; absorbs degenerate all-zero residuals

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class LaplaceParams:
    """Location/scale of a Laplace density f(x) = exp(-|x-mu|/b) / (2b)."""

    mu: float
    b: float

    def __post_init__(self) -> None:
        if not self.b > 0:
            raise ValueError(f"Laplace scale must be positive, got {self.b}")


@dataclass(frozen=True)
class SigmaPolicy:
    """How the uncertainty scale sigma is chosen when scoring.

    mode "fixed" uses the given sigma for every visit; mode
    "train_residual_laplace" derives sigma from training-fold residuals
    via estimate_sigma. clip, when set, is (sigma_min, error_max) applied
    before scoring (competition-style clamping; off by default).
    """

    mode: str = "train_residual_laplace"
    sigma: Optional[float] = None
    clip: Optional[tuple[float, float]] = None

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "train_residual_laplace"):
            raise ValueError(f"unknown sigma policy mode: {self.mode!r}")
        if self.mode == "fixed" and not (self.sigma is not None and self.sigma > 0):
            raise ValueError("fixed sigma policy requires sigma > 0")
        if self.clip is not None:
            smin, emax = self.clip
            if not (smin > 0 and emax > 0):
                raise ValueError("clip values must be positive")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "sigma": self.sigma,
                "clip": list(self.clip) if self.clip else None}


def rmse(pred, truth) -> float:
    """Root mean squared error over paired values."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("rmse of empty input")
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((t - p) ** 2)))


def laplace_ll(pred, truth, sigma: float,
               clip: Optional[tuple[float, float]] = None):
    """Laplace log-likelihood score per visit (vectorized over inputs).

    With clipping enabled, sigma is floored at sigma_min and the absolute
    error is capped at error_max before scoring.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    delta = np.abs(np.asarray(truth, dtype=np.float64)
                   - np.asarray(pred, dtype=np.float64))
    s = float(sigma)
    if clip is not None:
        sigma_min, error_max = clip
        s = max(s, float(sigma_min))
        delta = np.minimum(delta, float(error_max))
    score = -np.log(_SQRT2 * s) - _SQRT2 * delta / s
    return float(score) if score.ndim == 0 else score


def laplace_ll_mean(pred, truth, sigma: float,
                    clip: Optional[tuple[float, float]] = None) -> float:
    """Mean Laplace log-likelihood over a batch of scored visits."""
    scores = np.atleast_1d(laplace_ll(pred, truth, sigma, clip))
    if scores.size == 0:
        raise ValueError("laplace_ll_mean of empty input")
    return float(np.mean(scores))


def estimate_sigma(train_residuals, center: str = "zero") -> float:
    """Sigma from training residuals via the Laplace MLE scale.

    b is the mean absolute deviation of the residuals (about zero by
    default, or about their median); sigma = sqrt(2) * b per the
    variance identity sigma^2 = 2 b^2. Floored at 1 mL.
    """
    r = np.asarray(train_residuals, dtype=np.float64).ravel()
    if r.size == 0:
        raise ValueError("estimate_sigma of empty residuals")
    if center == "zero":
        b = float(np.mean(np.abs(r)))
    elif center == "median":
        b = float(np.mean(np.abs(r - np.median(r))))
    else:
        raise ValueError(f"unknown center: {center!r}")
    return max(_SQRT2 * b, SIGMA_FLOOR)


@dataclass
class DistributionFit:
    """Gaussian and Laplace fits plus a histogram of the same values."""

    gaussian_mean: float
    gaussian_sd: float
    laplace: LaplaceParams
    bin_edges: np.ndarray
    counts: np.ndarray

    def gaussian_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        z = (x - self.gaussian_mean) / self.gaussian_sd
        return np.exp(-0.5 * z * z) / (self.gaussian_sd * math.sqrt(2 * math.pi))

    def laplace_pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.exp(-np.abs(x - self.laplace.mu) / self.laplace.b) / (2 * self.laplace.b)


def fit_distributions(values) -> DistributionFit:
    """Fit Gaussian and Laplace densities to values, with a histogram.

    Gaussian: MLE (mean, population sd). Laplace: MLE (median, mean
    absolute deviation from the median). Histogram bins use the
    Freedman-Diaconis width, clipped to [20, 100] bins.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2 or np.ptp(v) == 0.0:
        raise ValueError("fit_distributions needs at least 2 distinct values")
    mean = float(np.mean(v))
    sd = float(np.std(v))
    mu = float(np.median(v))
    b = float(np.mean(np.abs(v - mu)))
    q75, q25 = np.percentile(v, [75, 25])
    iqr = float(q75 - q25)
    span = float(np.ptp(v))
    if iqr > 0:
        width = 2.0 * iqr / v.size ** (1.0 / 3.0)
        n_bins = int(np.ceil(span / width))
    else:
        n_bins = 20
    n_bins = min(max(n_bins, 20), 100)
    counts, edges = np.histogram(v, bins=n_bins)
    return DistributionFit(gaussian_mean=mean, gaussian_sd=sd,
                           laplace=LaplaceParams(mu=mu, b=b),
                           bin_edges=edges, counts=counts)


@dataclass
class PatientScore:
    """Per-patient evaluation row."""

    patient_id: str
    visits_scored: int
    predicted_slope: float
    true_slope: float
    rmse: float
    lll: float

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "visits_scored": self.visits_scored,
                "predicted_slope": self.predicted_slope, "true_slope": self.true_slope,
                "rmse": self.rmse, "lll": self.lll}


@dataclass
class MetricsReport:
    """Pooled evaluation over a patient set: per-patient rows + aggregates."""

    per_patient: list[PatientScore]
    rmse: float
    lll: float
    sigma: float
    sigma_policy: dict
    n_visits: int
    residuals: list[float] = field(default_factory=list)

    def to_dict(self, run: Optional[dict] = None) -> dict:
        out = {
            "rmse": self.rmse,
            "lll": self.lll,
            "sigma": self.sigma,
            "sigma_policy": self.sigma_policy,
            "n_visits": self.n_visits,
            "per_patient": [p.to_dict() for p in self.per_patient],
            "residuals": self.residuals,
        }
        if run is not None:
            out["run"] = run
        return out

    def to_json(self, run: Optional[dict] = None) -> str:
        return json.dumps(self.to_dict(run), indent=2, sort_keys=True)
