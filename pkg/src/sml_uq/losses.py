"""Training objectives: MSE, the second-moment loss and Gaussian NLL."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("mse_loss needs at least one prediction")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    M = pred.shape[0]
    resid = pred - target
    return float(np.mean(resid ** 2)), 2.0 * resid / M


def sml_terms(full_pred, sub_pred, target):
    """Per-example terms of the combined objective.

    Returns ``(l_regr, l_sml, grad_full, grad_sub)``.  ``grad_full`` only
    carries the regression term: the full-network output inside the
    second-moment term is treated as a constant.  Works elementwise on arrays.
    """
    a = np.asarray(full_pred, dtype=np.float64) - target
    b = np.asarray(sub_pred, dtype=np.float64) - full_pred
    gap = np.abs(b) - np.abs(a)
    l_regr = a * a
    l_sml = gap * gap
    grad_full = 2.0 * a
    grad_sub = 2.0 * gap * np.sign(b)
    if np.ndim(l_regr) == 0:
        return float(l_regr), float(l_sml), float(grad_full), float(grad_sub)
    return l_regr, l_sml, grad_full, grad_sub


@dataclass
class SmlBatchTerms:
    a: np.ndarray
    b: np.ndarray
    beta: float = 0.5

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.shape != self.b.shape or self.a.shape[0] < 1:
            raise ValueError("a and b must have equal, non-zero length")
        if self.beta <= 0:
            raise ValueError("beta must be positive")

    @property
    def M(self) -> int:
        return self.a.shape[0]


def sml_batch_loss(terms: SmlBatchTerms) -> float:
    """(1/M) sum_i [a_i^2 + beta (|b_i| - |a_i|)^2], summing over output coordinates."""
    a, b = terms.a, terms.b
    per = a * a + terms.beta * (np.abs(b) - np.abs(a)) ** 2
    return float(np.sum(per) / terms.M)


def gaussian_nll(mu, sigma, y, include_const=False) -> float:
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mu, sigma, y = np.broadcast_arrays(mu, sigma, y)
    if y.size == 0:
        raise ValueError("gaussian_nll needs at least one point")
    if np.any(sigma <= 0):
        raise ValueError("all sigma must be strictly positive")
    per = np.log(sigma) + (mu - y) ** 2 / (2.0 * sigma ** 2)
    nll = float(np.mean(per))
    return nll + LOG_SQRT_2PI if include_const else nll


def gaussian_nll_grads(mu, sigma, y):
    """Per-example gradients of the (unaveraged) NLL w.r.t. ``mu`` and ``sigma``."""
    r = mu - y
    inv_var = 1.0 / (sigma * sigma)
    return r * inv_var, 1.0 / sigma - r * r * inv_var / sigma
