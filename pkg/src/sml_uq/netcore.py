"""Dense ReLU network with inverted dropout, exact backprop and Adam.

Everything runs on float64 numpy arrays.  Inputs may be a single vector of
shape ``(d,)`` or a batch ``(n, d)``; masks carry a leading batch axis when
one mask per example is wanted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HEAD_POINT = "point"
HEAD_MEAN_SIGMA = "mean_and_sigma"
SCOPE_ALL = "all_hidden"
SCOPE_LAST = "last_hidden"

SIGMA_FLOOR = 1e-6


class ConfigurationError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, step=None, epoch=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch


@dataclass
class Mlp:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_kind: str = HEAD_POINT

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def output_dim(self) -> int:
        """Dimension m of the regression target (half the raw width for a sigma head)."""
        raw = self.layer_sizes[-1]
        return raw // 2 if self.head_kind == HEAD_MEAN_SIGMA else raw

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_sizes), [W.copy() for W in self.weights],
                   [b.copy() for b in self.biases], self.head_kind)


@dataclass
class DropoutMask:
    """Keep flags per hidden layer; ``None`` marks an unmasked layer."""

    keep_flags: list[np.ndarray | None]
    keep_prob: float
    scope: str

    @property
    def scale(self) -> float:
        return 1.0 / self.keep_prob


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def as_list(self) -> list[np.ndarray]:
        out = []
        for gW, gb in zip(self.weights, self.biases):
            out.extend((gW, gb))
        return out

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])


@dataclass
class ForwardCache:
    inputs: np.ndarray
    preacts: list[np.ndarray]
    activations: list[np.ndarray]
    mask: DropoutMask | None
    raw_output: np.ndarray
    batched: bool


def mlp_init(layer_sizes, head_kind=HEAD_POINT, seed=0) -> Mlp:
    """Fan-in scaled uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0."""
    sizes = [int(s) for s in (layer_sizes or [])]
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ConfigurationError(f"layer_sizes must hold >= 2 positive ints, got {layer_sizes!r}")
    if head_kind not in (HEAD_POINT, HEAD_MEAN_SIGMA):
        raise ConfigurationError(f"unknown head_kind {head_kind!r}")
    if head_kind == HEAD_MEAN_SIGMA and sizes[-1] % 2:
        raise ConfigurationError("mean_and_sigma head needs an even output width")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases, head_kind)


def _scoped_layers(mlp: Mlp, scope: str) -> list[int]:
    if scope == SCOPE_ALL:
        return list(range(mlp.n_hidden))
    if scope == SCOPE_LAST:
        return [mlp.n_hidden - 1] if mlp.n_hidden else []
    raise ValueError(f"unknown dropout scope {scope!r}")


def sample_mask(mlp: Mlp, keep_prob: float, scope: str = SCOPE_ALL, rng=None,
                batch: int | None = None) -> DropoutMask:
    """Draw independent Bernoulli(keep_prob) keep flags for every in-scope hidden unit.

    With ``batch`` set, flags get a leading axis so each example sees its own
    sub-network.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    rng = np.random.default_rng() if rng is None else rng
    masked = set(_scoped_layers(mlp, scope))
    flags: list[np.ndarray | None] = []
    for layer in range(mlp.n_hidden):
        if layer not in masked:
            flags.append(None)
            continue
        width = mlp.layer_sizes[layer + 1]
        shape = (width,) if batch is None else (batch, width)
        if keep_prob == 1.0:
            flags.append(np.ones(shape, dtype=bool))
        else:
            flags.append(rng.random(shape) < keep_prob)
    return DropoutMask(flags, float(keep_prob), scope)


def _softplus(s):
    return np.logaddexp(0.0, s)


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def forward(mlp: Mlp, x, mask: DropoutMask | None = None):
    """Run the network; returns ``(output, cache)``.

    For the mean_and_sigma head the output stacks ``(mu, sigma)`` along the
    last axis, with ``sigma = softplus(s) + SIGMA_FLOOR``.
    """
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    X = x if batched else x[None, :]
    if X.ndim != 2 or X.shape[1] != mlp.layer_sizes[0]:
        raise ValueError(f"input dim {x.shape} does not match layer_sizes[0]={mlp.layer_sizes[0]}")
    if mask is not None and len(mask.keep_flags) != mlp.n_hidden:
        raise ValueError("mask does not match network depth")

    h = X
    preacts, activations = [], []
    for layer, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ W.T + b
        preacts.append(z)
        if layer == len(mlp.weights) - 1:
            break
        h = np.maximum(z, 0.0)
        if mask is not None and mask.keep_flags[layer] is not None:
            flags = mask.keep_flags[layer]
            if flags.shape[-1] != h.shape[1] or (flags.ndim == 2 and flags.shape[0] != h.shape[0]):
                raise ValueError("mask shape does not match activations")
            if mask.keep_prob != 1.0:
                h = h * flags * mask.scale
        activations.append(h)

    raw = preacts[-1]
    if mlp.head_kind == HEAD_MEAN_SIGMA:
        m = mlp.output_dim
        out = np.concatenate([raw[:, :m], _softplus(raw[:, m:]) + SIGMA_FLOOR], axis=1)
    else:
        out = raw
    cache = ForwardCache(X, preacts, activations, mask, raw, batched)
    return (out if batched else out[0]), cache


def backward(mlp: Mlp, cache: ForwardCache, output_grad) -> Gradients:
    """Reverse-mode pass for ``sum(output_grad * output)``.

    For the sigma head ``output_grad`` refers to ``(mu, sigma)``; the softplus
    Jacobian is applied here.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if not cache.batched:
        g = g[None, :]
    if len(cache.preacts) != len(mlp.weights) or g.shape != cache.raw_output.shape:
        raise RuntimeError("forward cache does not match this network / gradient shape")
    if mlp.head_kind == HEAD_MEAN_SIGMA:
        m = mlp.output_dim
        g = np.concatenate([g[:, :m], g[:, m:] * _sigmoid(cache.raw_output[:, m:])], axis=1)

    n_layers = len(mlp.weights)
    gW: list[np.ndarray] = [None] * n_layers
    gb: list[np.ndarray] = [None] * n_layers
    delta = g
    for layer in range(n_layers - 1, -1, -1):
        h_in = cache.inputs if layer == 0 else cache.activations[layer - 1]
        gW[layer] = delta.T @ h_in
        gb[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        dh = delta @ mlp.weights[layer]
        hidden = layer - 1
        mask = cache.mask
        if mask is not None and mask.keep_flags[hidden] is not None and mask.keep_prob != 1.0:
            dh = dh * mask.keep_flags[hidden] * mask.scale
        delta = dh * (cache.preacts[hidden] > 0.0)
    return Gradients(gW, gb)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, **kw) -> "AdamState":
        return cls(learning_rate=learning_rate,
                   first_moment=[np.zeros_like(p) for p in params],
                   second_moment=[np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient at optimizer step {state.step_count + 1}",
                                   step=state.step_count + 1)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("parameter and gradient shapes differ")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
