"""Analytical and diagnostic tools around the second-moment loss.

The landscape functions assume standard-normal residuals (mean 0, std 1) and a
Gaussian sub-network distribution N(mu_drop, sigma_drop).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .estimators import PredictiveEstimate, TrainedModel, subnetwork_samples
from .metrics import MetricReport, UndefinedCorrelation, pearson
from .netcore import forward

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
SQRT_8_OVER_PI = math.sqrt(8.0 / math.pi)
BIFURCATION_SIGMA = 2.0 / math.pi
SIGMA_LIMIT = 1e-12
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def sml_landscape(mu, sigma):
    """Expected second-moment loss for residuals ~ N(0, 1) and sub-networks ~ N(mu, sigma).

    Below ``sigma = 1e-12`` the sigma -> 0 limit ``1 + mu^2 - sqrt(8/pi)|mu|``
    is used.  Erf comes from ``scipy.special.erf`` (Cephes, double precision).
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    mu, sigma = np.broadcast_arrays(mu, sigma)
    tiny = sigma < SIGMA_LIMIT
    s = np.where(tiny, 1.0, sigma)
    regular = (-(4.0 / math.pi) * s * np.exp(-0.5 * mu * mu / (s * s))
               - SQRT_8_OVER_PI * mu * erf(mu / (math.sqrt(2.0) * s))
               + s * s + mu * mu + 1.0)
    limit = 1.0 + mu * mu - SQRT_8_OVER_PI * np.abs(mu)
    out = np.where(tiny, limit, regular)
    return float(out) if out.ndim == 0 else out


def sml_landscape_mc(mu, sigma, n=1_000_000, seed=0, mu_res=0.0, sigma_res=1.0):
    """Monte-Carlo estimate of E[(|y1| - |y2|)^2], y1 ~ N(mu_res, sigma_res), y2 ~ N(mu, sigma).

    Returns ``(estimate, standard_error)``.
    """
    if n < 1000:
        raise ValueError("use at least 1000 Monte-Carlo draws")
    rng = np.random.default_rng(seed)
    y1 = mu_res + sigma_res * rng.standard_normal(n)
    y2 = mu + sigma * rng.standard_normal(n)
    vals = (np.abs(y1) - np.abs(y2)) ** 2
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def golden_section_min(f, lo, hi, tol=1e-6):
    """Minimizer of a unimodal ``f`` on [lo, hi], to bracket width ``tol``."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    # the bracket never evaluates its ends; snap to a boundary that is at least as good
    fx = f(x)
    for edge in (lo, hi):
        if f(edge) <= fx:
            return edge, True
    return x, False


@dataclass
class ArgminCurve:
    sigma: np.ndarray
    mu: np.ndarray
    loss: np.ndarray
    boundary_hit: np.ndarray

    def bifurcation(self, threshold=1e-3) -> float:
        """Smallest grid sigma whose minimizing mu is within ``threshold`` of 0."""
        hits = np.flatnonzero(self.mu <= threshold)
        if hits.size == 0:
            return math.nan
        return float(self.sigma[hits[0]])


def landscape_argmin_mu(sigma_grid, mu_max=3.0, tol=1e-6) -> ArgminCurve:
    sigma_grid = np.asarray(sigma_grid, dtype=np.float64)
    if np.any(sigma_grid < 0):
        raise ValueError("sigma grid must be non-negative")
    mus, losses, hits = [], [], []
    for s in sigma_grid:
        x, hit = golden_section_min(lambda m: sml_landscape(m, s), 0.0, mu_max, tol)
        mus.append(x)
        losses.append(sml_landscape(x, s))
        hits.append(hit)
    return ArgminCurve(sigma_grid, np.array(mus), np.array(losses), np.array(hits))


def landscape_grid(mu_values, sigma_values, mc_n=0, seed=0):
    """Rows ``(mu, sigma, loss[, mc_estimate, mc_se])`` over the full grid."""
    rows = []
    ss = np.random.SeedSequence(seed)
    point_seeds = ss.spawn(len(mu_values) * len(sigma_values))
    k = 0
    for s in sigma_values:
        for m in mu_values:
            row = [float(m), float(s), sml_landscape(m, s)]
            if mc_n:
                row.extend(sml_landscape_mc(m, s, mc_n, point_seeds[k]))
            rows.append(row)
            k += 1
    return rows


@dataclass
class SigmaDecomposition:
    fraction_dropout_std: np.ndarray
    fraction_spread: np.ndarray
    excluded: int

    @property
    def mean_dropout_std(self) -> float:
        return float(np.mean(self.fraction_dropout_std))

    @property
    def mean_spread(self) -> float:
        return float(np.mean(self.fraction_spread))


def decompose_sigma(estimates) -> SigmaDecomposition:
    """Split sigma_total into its dropout-std and spread fractions, per point."""
    if isinstance(estimates, PredictiveEstimate):
        estimates = [estimates]
    drop = np.concatenate([np.atleast_1d(e.sigma_drop) for e in estimates]).astype(np.float64)
    spread = np.concatenate([np.atleast_1d(e.spread) for e in estimates]).astype(np.float64)
    total = drop + spread
    keep = total > 0
    if not np.any(keep):
        raise ValueError("every sigma_total is zero; nothing to decompose")
    return SigmaDecomposition(drop[keep] / total[keep], spread[keep] / total[keep],
                              int((~keep).sum()))


@dataclass
class ComponentExport:
    """Residuals ``a`` (N,) and sub-network offsets ``b`` (N, T), original units."""

    a: np.ndarray
    b: np.ndarray

    def records(self):
        for i in range(self.a.shape[0]):
            for t in range(self.b.shape[1]):
                yield i, float(self.a[i]), t, float(self.b[i, t])

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["point_id", "a", "b_sample_idx", "b"])
            for i, a, t, b in self.records():
                w.writerow([i, repr(a), t, repr(b)])

    def batch_loss_estimate(self, beta: float):
        """Sample mean of a^2 + beta (|b| - |a|)^2 and its standard error."""
        a = self.a[:, None]
        vals = a * a + beta * (np.abs(self.b) - np.abs(a)) ** 2
        per_point = vals.mean(axis=1)
        # sampling noise comes from b only; a is fixed per point
        se = math.sqrt(np.sum(vals.var(axis=1, ddof=1) / vals.shape[1])) / vals.shape[0]
        return float(per_point.mean()), se


def loss_component_export(model: TrainedModel, X, y, T=200, rng=None) -> ComponentExport:
    if not model.kind.uses_dropout:
        raise TypeError(f"{model.kind.tag} has no dropout sub-networks")
    rng = np.random.default_rng(rng)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    full = predict_full(model, X)
    samples = subnetwork_samples(model, X, T, rng)
    return ComponentExport(full - y, (samples - full[None, :]).T)


def predict_full(model: TrainedModel, X) -> np.ndarray:
    """Unmasked network output in original units."""
    Xs = model.standardizer.transform_x(np.atleast_2d(X))
    return model.standardizer.inverse_y(forward(model.members[0], Xs)[0][:, 0])


METRIC_NAMES = ("ece", "ws", "ks")


def metric_correlations(reports: list[MetricReport]):
    """Pearson matrix among ECE, WS and KS plus the ``(n, 3)`` array of triples."""
    if len(reports) < 3:
        raise ValueError("need at least 3 reports to correlate metrics")
    triples = np.array([[getattr(r, k) for k in METRIC_NAMES] for r in reports], dtype=np.float64)
    for j, name in enumerate(METRIC_NAMES):
        if np.all(triples[:, j] == triples[0, j]):
            raise UndefinedCorrelation(f"metric {name!r} has zero variance across reports")
    corr = np.eye(3)
    for i in range(3):
        for j in range(i + 1, 3):
            corr[i, j] = corr[j, i] = pearson(triples[:, i], triples[:, j])
    return corr, triples
