"""Dataset ingestion, standardization and i.i.d./shift split generation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SPLIT_KINDS = ("iid_train", "iid_test", "pca_interp", "pca_extrap", "label_interp", "label_extrap")
SHIFT_KINDS = SPLIT_KINDS[2:]

SMALL, LARGE, VERY_LARGE = "small", "large", "very_large"


class IngestionError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class DatasetSchema:
    """Column layout of one CSV file.

    ``features`` of None means every column except the target and ``drop``.
    """

    name: str
    target: str | int = -1
    features: list[str] | None = None
    drop: list[str | int] = field(default_factory=list)
    delimiter: str = ","
    size_class: str | None = None
    expected_features: int | None = None

    @classmethod
    def from_json(cls, path) -> "DatasetSchema":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)


# Column names follow the headers of the public UCI / sklearn CSV exports.
BUILTIN_SCHEMAS = {
    "yacht": DatasetSchema("yacht", target=-1, size_class=SMALL, expected_features=6),
    "diabetes": DatasetSchema("diabetes", target=-1, size_class=SMALL),
    "boston": DatasetSchema("boston", target=-1, size_class=SMALL, expected_features=13),
    "energy": DatasetSchema("energy", target="Y2", drop=["Y1"], size_class=SMALL, expected_features=8),
    "concrete": DatasetSchema("concrete", target=-1, size_class=SMALL, expected_features=8),
    "wine-red": DatasetSchema("wine-red", target="quality", delimiter=";", size_class=SMALL,
                              expected_features=11),
    "abalone": DatasetSchema("abalone", target=-1, drop=[0], size_class=LARGE, expected_features=7),
    "power": DatasetSchema("power", target="PE", size_class=LARGE, expected_features=4),
    "naval": DatasetSchema("naval", target=-1, drop=[-2], size_class=LARGE, expected_features=16),
    "california": DatasetSchema("california", target=-1, size_class=LARGE, expected_features=8),
    "superconduct": DatasetSchema("superconduct", target="critical_temp", size_class=LARGE,
                                  expected_features=81),
    "protein": DatasetSchema("protein", target="RMSD", size_class=LARGE, expected_features=9),
    "year": DatasetSchema("year", target=0, size_class=VERY_LARGE, expected_features=90),
}


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    size_class: str = SMALL
    feature_names: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.name, self.X[idx], self.y[idx], self.size_class, list(self.feature_names))


def size_class_for(n: int) -> str:
    if n < 2000:
        return SMALL
    if n < 100_000:
        return LARGE
    return VERY_LARGE


def _resolve_column(key, header: list[str], what: str) -> int:
    if isinstance(key, int):
        idx = key if key >= 0 else len(header) + key
        if not 0 <= idx < len(header):
            raise IngestionError(f"{what} column index {key} out of range for {len(header)} columns")
        return idx
    stripped = [h.strip().strip('"') for h in header]
    if key not in stripped:
        raise IngestionError(f"{what} column {key!r} not found in header {stripped}")
    return stripped.index(key)


def load_dataset(path, name: str, schema: DatasetSchema | None = None) -> Dataset:
    """Read a headed numeric CSV and apply the per-dataset column rules."""
    if schema is None:
        schema = BUILTIN_SCHEMAS.get(name, DatasetSchema(name))
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter=schema.delimiter))
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    header = [h.strip().strip('"') for h in header]

    target_col = _resolve_column(schema.target, header, "target")
    dropped = {_resolve_column(c, header, "drop") for c in schema.drop}
    if schema.features is not None:
        feature_cols = [_resolve_column(c, header, "feature") for c in schema.features]
    else:
        feature_cols = [i for i in range(len(header)) if i != target_col and i not in dropped]

    wanted = feature_cols + [target_col]
    values = np.empty((len(body), len(wanted)))
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {r} has {len(row)} fields, header has {len(header)}")
        for j, col in enumerate(wanted):
            try:
                values[r - 2, j] = float(row[col])
            except ValueError:
                raise IngestionError(f"{path}: row {r}, column {header[col]!r}: "
                                     f"non-numeric value {row[col]!r}") from None
    if not np.all(np.isfinite(values)):
        bad_r, bad_c = np.argwhere(~np.isfinite(values))[0]
        raise IngestionError(f"{path}: row {bad_r + 2}, column {header[wanted[bad_c]]!r} is not finite")
    if values.shape[0] < 10:
        raise IngestionError(f"{path}: need at least 10 rows, got {values.shape[0]}")
    if schema.expected_features is not None and len(feature_cols) != schema.expected_features:
        raise IngestionError(f"{name}: expected {schema.expected_features} features, "
                             f"got {len(feature_cols)}")

    X, y = values[:, :-1], values[:, -1]
    size_class = schema.size_class or size_class_for(len(y))
    return Dataset(name, X, y, size_class, [header[c] for c in feature_cols])


@dataclass
class Standardizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    zero_variance: list[int] = field(default_factory=list)

    def transform_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def inverse_x(self, Xs):
        return np.asarray(Xs) * self.x_std + self.x_mean

    def inverse_y(self, ys):
        return np.asarray(ys) * self.y_std + self.y_mean

    def inverse_sigma(self, sigma):
        return np.asarray(sigma) * self.y_std

    def to_dict(self) -> dict:
        return {"x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
                "y_mean": self.y_mean, "y_std": self.y_std, "zero_variance": self.zero_variance}

    @classmethod
    def from_dict(cls, raw: dict) -> "Standardizer":
        return cls(np.array(raw["x_mean"], dtype=np.float64), np.array(raw["x_std"], dtype=np.float64),
                   float(raw["y_mean"]), float(raw["y_std"]), list(raw.get("zero_variance", [])))


def fit_standardizer(data: Dataset, idx=None) -> Standardizer:
    """Per-column mean / population std on the rows in ``idx``."""
    idx = np.arange(data.n) if idx is None else np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot fit a standardizer on an empty index set")
    X, y = data.X[idx], data.y[idx]
    x_mean, x_std = X.mean(axis=0), X.std(axis=0)
    zero = [int(j) for j in np.flatnonzero(x_std == 0.0)]
    if zero:
        log.warning("%s: zero-variance feature columns %s get std 1", data.name, zero)
        x_std = np.where(x_std == 0.0, 1.0, x_std)
    y_mean, y_std = float(y.mean()), float(y.std())
    if y_std == 0.0:
        log.warning("%s: constant target on fitted rows; target std set to 1", data.name)
        y_std = 1.0
    return Standardizer(x_mean, x_std, y_mean, y_std, zero)


@dataclass
class DatasetSplit:
    train_idx: np.ndarray
    test_idx: np.ndarray
    kind: str
    fold: int
    chunk_count: int = 10

    def to_dict(self) -> dict:
        return {"kind": self.kind, "fold": self.fold, "chunk_count": self.chunk_count,
                "train_idx": self.train_idx.tolist(), "test_idx": self.test_idx.tolist()}

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetSplit":
        return cls(np.array(raw["train_idx"], dtype=np.int64), np.array(raw["test_idx"], dtype=np.int64),
                   raw["kind"], int(raw["fold"]), int(raw.get("chunk_count", 10)))


def save_split_manifest(splits, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([s.to_dict() for s in splits], fh)


def load_split_manifest(path) -> list[DatasetSplit]:
    with open(path, encoding="utf-8") as fh:
        return [DatasetSplit.from_dict(s) for s in json.load(fh)]


def kfold(data, k: int, seed=0) -> list[DatasetSplit]:
    n = data.n if isinstance(data, Dataset) else int(data)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of rows {n}")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    splits = []
    for f, test in enumerate(folds):
        train = np.concatenate([folds[j] for j in range(k) if j != f])
        splits.append(DatasetSplit(np.sort(train), np.sort(test), "iid_test", f, k))
    return splits


def pca_first_component(X, tol=1e-10, max_iter=10_000) -> np.ndarray:
    """Leading eigenvector of the sample covariance, by power iteration.

    The sign is fixed so the entry of largest magnitude is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a 2-D array with at least 2 rows")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / X.shape[0]
    d = C.shape[0]
    scale = np.max(np.abs(C))
    if scale == 0.0:
        v = np.zeros(d)
        v[0] = 1.0
        return v
    # largest-norm row of C plus a small tilt, so the start is not orthogonal to the top eigenvector
    v = C[np.argmax(np.linalg.norm(C, axis=1))].copy()
    v += 1e-3 * np.linspace(1.0, 2.0, d)
    v /= np.linalg.norm(v)
    for it in range(1, max_iter + 1):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise NumericalError(f"power iteration collapsed to zero at iteration {it}")
        w /= norm
        lam = w @ C @ w
        step = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
        v = w
        if step < tol or np.linalg.norm(C @ v - lam * v) < tol * scale:
            break
    else:
        raise NumericalError(f"power iteration did not converge in {max_iter} iterations")
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return v / np.linalg.norm(v)


def directional_split(data, scores, chunk_count=10, held_chunk=9, direction="pca") -> DatasetSplit:
    """Sort by score (ties by row index), cut into contiguous chunks, hold one out."""
    scores = np.asarray(scores, dtype=np.float64)
    if chunk_count < 3:
        raise ValueError("chunk_count must be at least 3")
    if not 0 <= held_chunk < chunk_count:
        raise ValueError(f"held_chunk must lie in [0, {chunk_count})")
    order = np.argsort(scores, kind="stable")
    chunks = np.array_split(order, chunk_count)
    test = chunks[held_chunk]
    train = np.concatenate([c for j, c in enumerate(chunks) if j != held_chunk])
    outer = held_chunk in (0, chunk_count - 1)
    kind = f"{direction}_{'extrap' if outer else 'interp'}"
    return DatasetSplit(np.sort(train), np.sort(test), kind, held_chunk, chunk_count)


def pca_scores(data: Dataset) -> np.ndarray:
    v = pca_first_component(data.X)
    return (data.X - data.X.mean(axis=0)) @ v


def shift_split(data: Dataset, kind: str, held_chunk: int | None = None, chunk_count=10) -> DatasetSplit:
    """PCA- or label-direction split; defaults to chunk 5 (interp) or the top chunk (extrap)."""
    direction, mode = kind.split("_")
    if held_chunk is None:
        held_chunk = chunk_count // 2 if mode == "interp" else chunk_count - 1
    scores = pca_scores(data) if direction == "pca" else data.y
    split = directional_split(data, scores, chunk_count, held_chunk, direction)
    if split.kind != kind:
        raise ValueError(f"chunk {held_chunk} gives a {split.kind} split, not {kind}")
    return split


def toy_sigma(x):
    return 0.1 + 0.4 * np.abs(x) / 3.0


def gen_heteroskedastic_toy(n: int, seed=0) -> Dataset:
    """x ~ U(-3, 3), y = sin(2x) + (0.1 + 0.4|x|/3) * eps with eps ~ N(0, 1)."""
    if n < 100:
        raise ValueError("toy generator needs n >= 100")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-3.0, 3.0, size=n)
    y = np.sin(2.0 * x) + toy_sigma(x) * rng.standard_normal(n)
    return Dataset("toy", x[:, None], y, SMALL, ["x"])


def gen_ideal_scatter(n: int, seed=0):
    """Returns ``(r, sigma)`` with sigma ~ U(0, 2) and r ~ N(0, sigma)."""
    if n < 2:
        raise ValueError("need n >= 2")
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(0.0, 2.0, size=n)
    r = rng.normal(0.0, 1.0, size=n) * sigma
    return r, sigma


def ideal_scatter_population_corr() -> float:
    """Closed-form Pearson(|r|, sigma) for the ideal scatter construction."""
    var_sigma = 1.0 / 3.0
    # E|r| = sqrt(2/pi) E[sigma] with E[sigma] = 1, E[r^2] = E[sigma^2] = 4/3
    var_abs_r = 4.0 / 3.0 - 2.0 / math.pi
    cov = math.sqrt(2.0 / math.pi) * var_sigma
    return cov / math.sqrt(var_sigma * var_abs_r)
