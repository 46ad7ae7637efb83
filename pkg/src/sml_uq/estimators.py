"""The six uncertainty estimators behind one train / predict interface.

MC and MC_LL train masked sub-networks with MSE, SML trains the full
network with MSE plus the second-moment term on one masked pass per
example, PU fits a (mu, sigma) head by Gaussian NLL, and DE / PU_DE are
five-member ensembles of plain / PU networks.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, Standardizer, fit_standardizer
from .losses import gaussian_nll_grads, sml_terms
from .netcore import (HEAD_MEAN_SIGMA, HEAD_POINT, SCOPE_ALL, SCOPE_LAST, AdamState, Mlp,
                      TrainingDiverged, adam_step, backward, forward, mlp_init, sample_mask)

KIND_TAGS = ("MC", "MC_LL", "SML", "PU", "DE", "PU_DE")
DROPOUT_TAGS = ("MC", "MC_LL", "SML")
MODEL_FORMAT_VERSION = 1


class UnsupportedOperation(TypeError):
    pass


@dataclass(frozen=True)
class EstimatorKind:
    tag: str
    ensemble_size: int = 1
    keep_prob: float = 1.0
    sample_count: int = 200

    def __post_init__(self):
        if self.tag not in KIND_TAGS:
            raise ValueError(f"unknown estimator kind {self.tag!r}; expected one of {KIND_TAGS}")
        if self.uses_dropout and self.sample_count < 2:
            raise ValueError("sampling estimators need T >= 2")
        if self.tag in ("DE", "PU_DE") and self.ensemble_size < 2:
            raise ValueError("ensemble estimators need at least 2 members")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")

    @classmethod
    def from_tag(cls, tag: str, keep_prob=0.9, sample_count=200, ensemble_size=5) -> "EstimatorKind":
        tag = tag.upper().replace("-", "_")
        if tag == "OURS":
            tag = "SML"
        if tag == "DE_PU":
            tag = "PU_DE"
        dropout = tag in DROPOUT_TAGS
        return cls(tag,
                   ensemble_size=ensemble_size if tag in ("DE", "PU_DE") else 1,
                   keep_prob=keep_prob if dropout else 1.0,
                   sample_count=sample_count)

    @property
    def uses_dropout(self) -> bool:
        return self.tag in DROPOUT_TAGS

    @property
    def parametric(self) -> bool:
        return self.tag in ("PU", "PU_DE")

    @property
    def scope(self) -> str:
        return SCOPE_LAST if self.tag == "MC_LL" else SCOPE_ALL


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta: float = 0.5
    hidden: tuple[int, ...] = (50, 50)


@dataclass
class TrainedModel:
    kind: EstimatorKind
    members: list[Mlp]
    config: TrainConfig
    seed: int
    standardizer: Standardizer
    loss_history: list[list[float]] = field(default_factory=list)


@dataclass
class PredictiveEstimate:
    """Per-input predictive mean and spread, in original target units."""

    mu: np.ndarray
    sigma_total: np.ndarray
    sigma_drop: np.ndarray
    spread: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return self.sigma_total


def member_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def _train_member(kind: EstimatorKind, Xs, ys, config: TrainConfig, seed: int):
    head = HEAD_MEAN_SIGMA if kind.parametric else HEAD_POINT
    width_out = 2 if kind.parametric else 1
    mlp = mlp_init([Xs.shape[1], *config.hidden, width_out], head, seed=seed)
    rng = np.random.default_rng([seed, 1])
    params = mlp.params()
    opt = AdamState.for_params(params, learning_rate=config.learning_rate)
    n = Xs.shape[0]
    history = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb, yb = Xs[idx], ys[idx]
            loss, grads = _batch_grads(kind, mlp, xb, yb, config, rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss in epoch {epoch}", epoch=epoch)
            try:
                adam_step(opt, params, grads.as_list())
            except TrainingDiverged as exc:
                exc.epoch = epoch
                raise
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / n)
    return mlp, history


def _batch_grads(kind: EstimatorKind, mlp: Mlp, xb, yb, config: TrainConfig, rng):
    M = xb.shape[0]
    yb = yb[:, None]
    if kind.parametric:
        out, cache = forward(mlp, xb)
        mu, sigma = out[:, :1], out[:, 1:]
        g_mu, g_sigma = gaussian_nll_grads(mu, sigma, yb)
        loss = float(np.mean(np.log(sigma) + (mu - yb) ** 2 / (2.0 * sigma ** 2)))
        return loss, backward(mlp, cache, np.concatenate([g_mu, g_sigma], axis=1) / M)

    if kind.tag == "SML":
        full, cache_full = forward(mlp, xb)
        mask = sample_mask(mlp, kind.keep_prob, kind.scope, rng, batch=M)
        sub, cache_sub = forward(mlp, xb, mask)
        l_regr, l_sml, g_full, g_sub = sml_terms(full, sub, yb)
        loss = float(np.mean(l_regr + config.beta * l_sml))
        grads = backward(mlp, cache_full, g_full / M)
        return loss, grads + backward(mlp, cache_sub, config.beta * g_sub / M)

    mask = None
    if kind.uses_dropout:
        mask = sample_mask(mlp, kind.keep_prob, kind.scope, rng, batch=M)
    out, cache = forward(mlp, xb, mask)
    resid = out - yb
    return float(np.mean(resid ** 2)), backward(mlp, cache, 2.0 * resid / M)


def train_estimator(kind: EstimatorKind, train_data: Dataset, config: TrainConfig | None = None,
                    seed: int = 0, seeds: list[int] | None = None) -> TrainedModel:
    """Fit the estimator on ``train_data`` (raw units; standardization is fitted here).

    ``seeds`` overrides the per-member seeds derived from ``seed``.
    """
    config = config or TrainConfig()
    standardizer = fit_standardizer(train_data)
    Xs = standardizer.transform_x(train_data.X)
    ys = standardizer.transform_y(train_data.y)
    seeds = list(seeds) if seeds is not None else member_seeds(seed, kind.ensemble_size)
    if len(seeds) != kind.ensemble_size:
        raise ValueError(f"{kind.tag} needs {kind.ensemble_size} member seeds, got {len(seeds)}")
    members, history = [], []
    for s in seeds:
        mlp, hist = _train_member(kind, Xs, ys, config, s)
        members.append(mlp)
        history.append(hist)
    return TrainedModel(kind, members, config, seed, standardizer, history)


def _check_input(model: TrainedModel, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    d = model.members[0].layer_sizes[0]
    if X.ndim != 2 or X.shape[1] != d:
        raise ValueError(f"input of shape {x.shape} does not match the trained dimension {d}")
    return model.standardizer.transform_x(X), single


def _raw_subnetwork_samples(model: TrainedModel, Xs, T: int, rng) -> np.ndarray:
    mlp = model.members[0]
    kind = model.kind
    out = np.empty((T, Xs.shape[0]))
    for t in range(T):
        mask = sample_mask(mlp, kind.keep_prob, kind.scope, rng, batch=Xs.shape[0])
        out[t] = forward(mlp, Xs, mask)[0][:, 0]
    return out


def subnetwork_samples(model: TrainedModel, x, T: int | None = None, rng=None) -> np.ndarray:
    """T masked forward passes at ``x`` in original units; shape ``(T,)`` or ``(T, n)``."""
    if not model.kind.uses_dropout:
        raise UnsupportedOperation(f"{model.kind.tag} has no dropout sub-networks")
    T = model.kind.sample_count if T is None else T
    rng = np.random.default_rng(rng)
    Xs, single = _check_input(model, x)
    samples = model.standardizer.inverse_y(_raw_subnetwork_samples(model, Xs, T, rng))
    return samples[:, 0] if single else samples


def predict(model: TrainedModel, x, T: int | None = None, rng=None) -> PredictiveEstimate:
    kind = model.kind
    T = kind.sample_count if T is None else T
    if kind.uses_dropout and T < 2:
        raise ValueError("sampling estimators need T >= 2")
    rng = np.random.default_rng(rng)
    Xs, single = _check_input(model, x)
    zeros = np.zeros(Xs.shape[0])

    if kind.uses_dropout:
        samples = _raw_subnetwork_samples(model, Xs, T, rng)
        sample_mean, sigma_drop = _moments(samples)
        if kind.tag == "SML":
            mu = forward(model.members[0], Xs)[0][:, 0]
            spread = np.abs(mu - sample_mean)
            sigma_total = sigma_drop + spread
        else:
            mu, spread, sigma_total = sample_mean, zeros, sigma_drop
    elif kind.tag == "PU":
        out = forward(model.members[0], Xs)[0]
        mu, sigma_drop = out[:, 0], out[:, 1]
        spread, sigma_total = zeros, sigma_drop
    elif kind.tag == "DE":
        outs = np.stack([forward(m, Xs)[0][:, 0] for m in model.members])
        mu, sigma_drop = _moments(outs)
        spread, sigma_total = zeros, sigma_drop
    else:
        outs = np.stack([forward(m, Xs)[0] for m in model.members])
        mus, sigmas = outs[:, :, 0], outs[:, :, 1]
        mu, sigma_drop = mixture_moments(mus, sigmas)
        spread, sigma_total = zeros, sigma_drop

    st = model.standardizer
    est = PredictiveEstimate(st.inverse_y(mu), st.inverse_sigma(sigma_total),
                             st.inverse_sigma(sigma_drop), st.inverse_sigma(spread))
    if single:
        est = PredictiveEstimate(*(np.float64(v[0]) for v in
                                   (est.mu, est.sigma_total, est.sigma_drop, est.spread)))
    return est


def _moments(samples):
    """Mean and population std along axis 0, exact on constant columns."""
    mean = samples.mean(axis=0)
    std = samples.std(axis=0)
    constant = np.all(samples == samples[0], axis=0)
    return np.where(constant, samples[0], mean), np.where(constant, 0.0, std)


def mixture_moments(mus, sigmas):
    """Mean and std of an equal-weight Gaussian mixture (members along axis 0)."""
    mus = np.asarray(mus, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    mu = mus.mean(axis=0)
    second = np.mean(sigmas ** 2 + mus ** 2, axis=0)
    if mus.shape[0] > 0 and np.all(mus == mus[0]) and np.all(sigmas == sigmas[0]):
        return mu, sigmas[0].copy()
    return mu, np.sqrt(np.maximum(second - mu ** 2, 0.0))


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": asdict(model.kind),
        "config": {**asdict(model.config), "hidden": list(model.config.hidden)},
        "seed": model.seed,
        "normalization": model.standardizer.to_dict(),
        "members": [{"layer_sizes": m.layer_sizes, "head_kind": m.head_kind,
                     "weights": [W.tolist() for W in m.weights],
                     "biases": [b.tolist() for b in m.biases]} for m in model.members],
    }


def model_from_dict(raw: dict) -> TrainedModel:
    if raw.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {raw.get('format_version')!r}")
    cfg = raw["config"]
    config = TrainConfig(**{**cfg, "hidden": tuple(cfg["hidden"])})
    members = [Mlp(list(m["layer_sizes"]), [np.array(W, dtype=np.float64) for W in m["weights"]],
                   [np.array(b, dtype=np.float64) for b in m["biases"]], m["head_kind"])
               for m in raw["members"]]
    return TrainedModel(EstimatorKind(**raw["kind"]), members, config, int(raw["seed"]),
                        Standardizer.from_dict(raw["normalization"]))


def save_model(model: TrainedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> TrainedModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
