"""Calibration and accuracy measures on predicted (mu, sigma) pairs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .losses import gaussian_nll

REPORT_FIELDS = ("method", "dataset", "split", "fold", "rmse", "nll", "ece", "ws", "ks")


class UndefinedCorrelation(ValueError):
    pass


@dataclass
class NormalizedResiduals:
    r: np.ndarray
    sigma_clamp_count: int = 0

    def __len__(self):
        return len(self.r)


def _as_residuals(r) -> np.ndarray:
    if isinstance(r, NormalizedResiduals):
        r = r.r
    return np.asarray(r, dtype=np.float64).ravel()


def rmse(mu, y) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mu.size == 0:
        raise ValueError("rmse of an empty sample")
    if mu.shape != y.shape:
        raise ValueError(f"shape mismatch {mu.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((mu - y) ** 2)))


def normalize_residuals(mu, sigma, y, sigma_min=1e-8) -> NormalizedResiduals:
    """r_i = (mu_i - y_i) / max(sigma_i, sigma_min)."""
    mu, sigma, y = (np.asarray(v, dtype=np.float64).ravel() for v in (mu, sigma, y))
    if not (mu.shape == sigma.shape == y.shape):
        raise ValueError("mu, sigma and y must have equal length")
    clamped = sigma < sigma_min
    safe = np.where(clamped, sigma_min, sigma)
    return NormalizedResiduals((mu - y) / safe, int(clamped.sum()))


def ece(r, B=10) -> float:
    """Sum over B equal-probability standard-normal bins of |bin frequency - 1/B|."""
    r = _as_residuals(r)
    if r.size == 0:
        raise ValueError("ece of an empty sample")
    if B < 2:
        raise ValueError("need at least 2 bins")
    inner_edges = ndtri(np.arange(1, B) / B)
    # bin j holds q_j <= r < q_{j+1}
    idx = np.searchsorted(inner_edges, r, side="right")
    freq = np.bincount(idx, minlength=B) / r.size
    return float(np.sum(np.abs(freq - 1.0 / B)))


def ideal_quantiles(n: int) -> np.ndarray:
    return ndtri((np.arange(1, n + 1) - 0.5) / n)


def wasserstein_to_std_normal(r) -> float:
    """W1 distance to N(0,1) by matching sorted residuals to midpoint normal quantiles."""
    r = np.sort(_as_residuals(r))
    if r.size == 0:
        raise ValueError("wasserstein distance of an empty sample")
    return float(np.mean(np.abs(r - ideal_quantiles(r.size))))


def ks_to_std_normal(r) -> float:
    r = np.sort(_as_residuals(r))
    n = r.size
    if n == 0:
        raise ValueError("ks distance of an empty sample")
    cdf = ndtr(r)
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - cdf)
    d_minus = np.max(cdf - (i - 1) / n)
    return float(min(1.0, max(d_plus, d_minus, 0.0)))


def nll_report(mu, sigma, y) -> float:
    return gaussian_nll(mu, sigma, y, include_const=False)


def pearson(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape or u.size < 2:
        raise ValueError("pearson needs two equal-length samples of size >= 2")
    du = u - u.mean()
    dv = v - v.mean()
    su = np.sqrt(np.sum(du * du))
    sv = np.sqrt(np.sum(dv * dv))
    if su == 0.0 or sv == 0.0:
        raise UndefinedCorrelation("correlation undefined for a zero-variance sample")
    return float(np.clip(np.sum(du * dv) / (su * sv), -1.0, 1.0))


@dataclass
class MetricReport:
    method: str
    dataset: str
    split: str
    fold: int
    rmse: float
    nll: float
    ece: float
    ws: float
    ks: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def csv_row(self) -> list[str]:
        return [str(getattr(self, k)) if k in ("method", "dataset", "split", "fold")
                else repr(float(getattr(self, k))) for k in REPORT_FIELDS]

    @classmethod
    def from_row(cls, row: dict) -> "MetricReport":
        return cls(row["method"], row["dataset"], row["split"], int(row["fold"]),
                   *(float(row[k]) for k in REPORT_FIELDS[4:]))


def evaluate(mu, sigma, y, *, method="", dataset="", split="", fold=0, bins=10,
             sigma_min=1e-8) -> MetricReport:
    """Compute the full report for one set of test predictions."""
    r = normalize_residuals(mu, sigma, y, sigma_min)
    safe_sigma = np.maximum(np.asarray(sigma, dtype=np.float64), sigma_min)
    return MetricReport(method, dataset, split, int(fold), rmse(mu, y),
                        nll_report(mu, safe_sigma, y), ece(r, bins),
                        wasserstein_to_std_normal(r), ks_to_std_normal(r))
