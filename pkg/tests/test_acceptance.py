"""Acceptance suite: one test per criterion, each at its stated tolerance.

The terminal summary (see conftest.py) prints a PASS/FAIL line per criterion.
The two UCI criteria read CSV files from ``$SML_UQ_DATA_DIR`` (default
``<repo>/data``) and fail when the files are absent.
"""

import csv
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from sml_uq import analysis, runner
from sml_uq.cli import main
from sml_uq.data import (Dataset, gen_heteroskedastic_toy, gen_ideal_scatter,
                         ideal_scatter_population_corr, kfold, pca_first_component, shift_split)
from sml_uq.estimators import EstimatorKind, TrainConfig, _batch_grads, predict, train_estimator
from sml_uq.losses import gaussian_nll
from sml_uq.metrics import (ece, ideal_quantiles, ks_to_std_normal, pearson,
                            wasserstein_to_std_normal)
from sml_uq.netcore import forward, mlp_init, sample_mask

DATA_DIR = Path(os.environ.get("SML_UQ_DATA_DIR", Path(__file__).resolve().parent.parent / "data"))
DATA_FILES = {"wine-red": ("winequality-red.csv", "wine-red.csv"),
              "power": ("power.csv", "Folds5x2_pp.csv")}


def criterion(number, title):
    return pytest.mark.criterion(number, title)


@criterion(1, "landscape closed form vs Monte Carlo, 5x5 grid, 3 SE")
def test_landscape_exactness():
    start = time.perf_counter()
    grid = np.linspace(0.0, 2.0, 5)
    rows = analysis.landscape_grid(grid, grid, mc_n=1_000_000, seed=0)
    misses = [(m, s, loss, est, se) for m, s, loss, est, se in rows if abs(est - loss) > 3 * se]
    assert len(rows) == 25
    assert not misses, f"outside 3 SE: {misses}"
    assert time.perf_counter() - start < 60


@criterion(2, "landscape minima sqrt(2/pi), 1 - 2/pi and bifurcation at 2/pi")
def test_landscape_minima():
    curve = analysis.landscape_argmin_mu(np.linspace(0.0, 2.0, 2001))
    assert curve.sigma[0] == 0.0
    assert abs(curve.mu[0] - 0.79788) <= 1e-3
    assert abs(curve.mu[0] - math.sqrt(2 / math.pi)) <= 1e-3
    assert abs(curve.loss[0] - (1 - 2 / math.pi)) <= 1e-6
    assert abs(curve.loss[0] - 0.36338) <= 1e-5
    assert abs(curve.bifurcation() - 2 / math.pi) <= 0.01


def _surrogate(mlp, xb, yb, mask, frozen_full, beta):
    """Combined objective with the full-network output inside the second-moment term held fixed."""
    full = forward(mlp, xb)[0]
    sub = forward(mlp, xb, mask)[0]
    a = full - yb
    gap = np.abs(sub - frozen_full) - np.abs(frozen_full - yb)
    return float(np.mean(a * a + beta * gap * gap))


def _kink_pattern(mlp, xb, mask, frozen_full):
    """ReLU on/off pattern of both passes plus sign of the sub-network offset."""
    pats = []
    for m in (None, mask):
        h = xb
        for layer, (W, b) in enumerate(zip(mlp.weights[:-1], mlp.biases[:-1])):
            z = h @ W.T + b
            pats.append(z > 0)
            h = np.maximum(z, 0)
            if m is not None and m.keep_flags[layer] is not None:
                h = h * m.keep_flags[layer] * m.scale
    pats.append(forward(mlp, xb, mask)[0] > frozen_full)
    return pats


@criterion(3, "SML gradients incl. stop-gradient vs central differences, 100 nets, rel <= 1e-4")
def test_gradient_correctness():
    start = time.perf_counter()
    h = 1e-5
    worst, checked, skipped = 0.0, 0, 0
    for net in range(100):
        rng = np.random.default_rng(net)
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 5))] + [int(rng.integers(1, 9)) for _ in range(depth)] + [1]
        mlp = mlp_init(sizes, seed=net)
        for b in mlp.biases:
            b[:] = rng.normal(scale=0.2, size=b.shape)
        M = int(rng.integers(1, 6))
        xb = rng.normal(size=(M, sizes[0]))
        yb = rng.normal(size=(M, 1))
        beta = float(rng.uniform(0.1, 1.0))
        keep = float(rng.uniform(0.5, 0.95))
        kind = EstimatorKind.from_tag("SML", keep_prob=keep)
        mask_seed = 1000 + net
        mask = sample_mask(mlp, keep, kind.scope, np.random.default_rng(mask_seed), batch=M)
        frozen = forward(mlp, xb)[0]
        _, grads = _batch_grads(kind, mlp, xb, yb[:, 0], TrainConfig(beta=beta),
                                np.random.default_rng(mask_seed))
        base_pattern = _kink_pattern(mlp, xb, mask, frozen)
        for p, g in zip(mlp.params(), grads.as_list()):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up, pat_up = _surrogate(mlp, xb, yb, mask, frozen, beta), _kink_pattern(mlp, xb, mask, frozen)
                p[idx] = old - h
                down, pat_dn = _surrogate(mlp, xb, yb, mask, frozen, beta), _kink_pattern(mlp, xb, mask, frozen)
                p[idx] = old
                crossed = any(not (np.array_equal(a, b) and np.array_equal(a, c))
                              for a, b, c in zip(base_pattern, pat_up, pat_dn))
                if crossed:
                    skipped += 1
                    continue
                fd = (up - down) / (2 * h)
                rel = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), 1e-6)
                worst = max(worst, rel)
                checked += 1
    print(f"gradient check: {checked} entries, {skipped} kink crossings skipped, worst rel {worst:.2e}")
    assert checked > 5000 and skipped < 0.01 * checked
    assert worst <= 1e-4
    assert time.perf_counter() - start < 60


@criterion(4, "sub-network MSE = (mean - y)^2 + population variance, 1000 samples, 1e-10")
def test_mse_decomposition_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(2, 300))
        s = rng.normal(rng.normal(scale=3), rng.uniform(0.01, 3), size=T)
        y = float(rng.normal(scale=3))
        lhs = np.mean((s - y) ** 2)
        rhs = (np.mean(s) - y) ** 2 + np.var(s)
        worst = max(worst, abs(lhs - rhs))
    assert worst <= 1e-10


@criterion(5, "NLL golden values 0.9209 and 1.3699 with the constant")
def test_nll_golden_values():
    n1 = gaussian_nll(0.0, 1.0, np.array([0, 0.1, 0, -0.1, 0]), include_const=True)
    n2 = gaussian_nll(0.0, 1.0, np.array([0.5, -0.4, 0, -1.9, -0.7]), include_const=True)
    assert abs(n1 - 0.9209) <= 1e-3
    assert abs(n2 - 1.3699) <= 1e-3
    assert n2 > n1 and round(n1, 1) == 0.9 and round(n2, 1) == 1.4


@criterion(6, "metric unit suite: ECE 1.8, WS ideal <= 1e-3, WS N(2,1) = 2, KS zeros = 0.5")
def test_metric_unit_suite():
    assert ece(np.full(50, 10.0), 10) == pytest.approx(1.8, abs=1e-15)
    assert wasserstein_to_std_normal(ideal_quantiles(10_000)) <= 1e-3
    r = np.random.default_rng(0).normal(2.0, 1.0, size=100_000)
    assert abs(wasserstein_to_std_normal(r) - 2.0) <= 0.05
    n = 1000
    assert abs(ks_to_std_normal(np.zeros(n)) - 0.5) <= 1 / (2 * n)


@criterion(7, "ideal scatter Pearson(|r|, sigma) = 0.55 +- 0.03 at N = 3000")
def test_ideal_scatter_correlation():
    assert abs(ideal_scatter_population_corr() - 0.5519) <= 1e-4
    r, sigma = gen_ideal_scatter(3000, seed=0)
    assert abs(pearson(np.abs(r), sigma) - 0.55) <= 0.03


@criterion(8, "toy: SML sigma > MC sigma in >= 9/10 seeds, SML ECE < MC ECE in >= 8/10")
def test_synthetic_behavior():
    start = time.perf_counter()
    sigma_wins = ece_wins = 0
    lines = []
    for seed in range(10):
        data = gen_heteroskedastic_toy(2000, seed=seed)
        split = kfold(data, 5, seed=seed)[0]
        train, test_idx = data.subset(split.train_idx), split.test_idx
        out = {}
        for tag in ("SML", "MC"):
            model = train_estimator(EstimatorKind.from_tag(tag), train, TrainConfig(), seed=seed)
            est = predict(model, data.X[test_idx], rng=seed)
            rep = runner.evaluate_standardized(model, est, data.y[test_idx])
            out[tag] = (float(np.mean(est.sigma)), rep.ece)
        sigma_wins += out["SML"][0] > out["MC"][0]
        ece_wins += out["SML"][1] < out["MC"][1]
        lines.append(f"seed {seed}: sigma SML {out['SML'][0]:.3f} MC {out['MC'][0]:.3f}, "
                     f"ECE SML {out['SML'][1]:.3f} MC {out['MC'][1]:.3f}")
    print("\n".join(lines))
    assert sigma_wins >= 9, lines
    assert ece_wins >= 8, lines
    assert time.perf_counter() - start < 600


def _data_file(name):
    for candidate in DATA_FILES[name]:
        path = DATA_DIR / candidate
        if path.exists():
            return path
    pytest.fail(f"{name} data not found: place one of {DATA_FILES[name]} in {DATA_DIR} "
                f"(or set SML_UQ_DATA_DIR); the UCI files cannot be bundled or downloaded here")


_UCI_CACHE = {}


def _uci_run(name, tmp_root):
    if name not in _UCI_CACHE:
        path = _data_file(name)
        cfg = runner.ExperimentConfig(dataset=name, data_path=str(path), methods=["SML", "MC"],
                                      splits=["iid_test"], seed=0, out=str(tmp_root / name))
        start = time.perf_counter()
        code, reports = runner.cmd_run(cfg)
        assert code == 0
        with open(tmp_root / name / "sigma_decomposition.csv", newline="") as fh:
            decomposition = list(csv.DictReader(fh))
        _UCI_CACHE[name] = (reports, decomposition, time.perf_counter() - start)
    return _UCI_CACHE[name]


def _means(reports, method):
    rows = [r for r in reports if r.method == method and r.split == "iid_test"]
    return {k: float(np.mean([getattr(r, k) for r in rows])) for k in ("rmse", "ece", "ws")}


@pytest.fixture(scope="module")
def uci_root(tmp_path_factory):
    return tmp_path_factory.mktemp("uci")


@criterion(9, "UCI desk-scale: wine-red and power SML vs MC")
def test_uci_reproduction(uci_root):
    wine, _, wine_seconds = _uci_run("wine-red", uci_root)
    power, _, power_seconds = _uci_run("power", uci_root)
    w_sml, w_mc = _means(wine, "SML"), _means(wine, "MC")
    p_sml, p_mc = _means(power, "SML"), _means(power, "MC")
    print(f"wine-red SML {w_sml} MC {w_mc}\npower SML {p_sml} MC {p_mc}")
    assert abs(w_sml["ece"] - 0.41) <= 0.15
    assert abs(w_sml["rmse"] - 0.80) <= 0.08
    assert abs(w_mc["ece"] - 0.73) <= 0.15
    assert w_sml["ece"] < w_mc["ece"]
    assert abs(p_sml["ece"] - 0.18) <= 0.15
    assert abs(p_sml["ws"] - 0.21) <= 0.15
    assert abs(p_mc["ece"] - 0.79) <= 0.20
    assert abs(p_mc["ws"] - 1.35) <= 0.5
    assert p_sml["ece"] < p_mc["ece"] and p_sml["ws"] < p_mc["ws"]
    assert wine_seconds + power_seconds < 3600


@criterion(10, "power test folds: mean fraction_dropout_std >= 0.7")
def test_sigma_decomposition_power(uci_root):
    _, decomposition, _ = _uci_run("power", uci_root)
    fractions = [float(r["fraction_dropout_std"]) for r in decomposition if r["split"] == "iid_test"]
    assert len(fractions) == 5
    print(f"power fraction_dropout_std per fold: {fractions}")
    assert float(np.mean(fractions)) >= 0.7


@criterion(11, "split properties: disjoint, chunk sizes, label separation, PCA residual")
def test_split_correctness():
    for seed in range(40):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(20, 500))
        d = int(rng.integers(1, 11))
        X = rng.normal(size=(n, d)) * rng.uniform(0.1, 5, size=d) @ rng.normal(size=(d, d))
        data = Dataset("s", X, np.round(rng.normal(size=n), int(rng.integers(0, 3))))
        for k in (2, 5, 10):
            folds = kfold(data, k, seed)
            assert np.array_equal(np.sort(np.concatenate([f.test_idx for f in folds])), np.arange(n))
            for f in folds:
                assert np.intersect1d(f.train_idx, f.test_idx).size == 0
        for kind in ("pca_interp", "pca_extrap", "label_interp", "label_extrap"):
            for held in ((5,) if kind.endswith("interp") else (0, 9)):
                split = shift_split(data, kind, held)
                assert np.intersect1d(split.train_idx, split.test_idx).size == 0
                assert len(split.train_idx) + len(split.test_idx) == n
                assert n // 10 <= len(split.test_idx) <= -(-n // 10)
        top = shift_split(data, "label_extrap")
        assert data.y[top.train_idx].max() <= data.y[top.test_idx].min()
        v = pca_first_component(X)
        C = np.cov(X.T, bias=True).reshape(d, d)
        lam_dense = np.linalg.eigh(C)[0][-1]
        assert abs(np.linalg.norm(v) - 1) <= 1e-12
        assert np.linalg.norm(C @ v - lam_dense * v) <= 1e-6 * max(1.0, lam_dense)


def _bytes(path):
    return Path(path).read_bytes()


@criterion(12, "determinism: repeated commands give byte-identical outputs")
def test_determinism(tmp_path):
    fast = ["--dataset", "toy", "--toy-n", "300", "--epochs", "4", "--samples", "20", "--folds", "3",
            "--seed", "11"]
    every = ["--method", "MC,MC_LL,SML,PU,DE,PU_DE",
             "--split", "iid_train,iid_test,pca_interp,pca_extrap,label_interp,label_extrap"]
    for rep in ("a", "b"):
        assert main(["run", *fast, *every, "--out", str(tmp_path / rep / "run")]) == 0
        assert main(["sweep-beta", *fast, "--method", "SML", "--split", "iid_test",
                     "--betas", "0.25,0.5", "--out", str(tmp_path / rep / "sweep")]) == 0
        assert main(["landscape", "--mc-n", "2000", "--mu-steps", "3", "--sigma-steps", "3",
                     "--argmin-steps", "51", "--out", str(tmp_path / rep / "land")]) == 0
        assert main(["report", str(tmp_path / rep / "run"), str(tmp_path / rep / "sweep" / "beta_0.5"),
                     "--out", str(tmp_path / rep / "report")]) == 0
        assert main(["export-components", *fast, "--fold", "1", "--out", str(tmp_path / rep / "exp")]) == 0
    outputs = ["run/reports.csv", "run/summary.csv", "sweep/sweep.csv", "sweep/beta_0.25/reports.csv",
               "land/landscape.csv", "land/argmin.csv", "report/reports.csv",
               "report/correlations.csv", "exp/components_SML_iid_test_1.csv"]
    for rel in outputs:
        assert _bytes(tmp_path / "a" / rel) == _bytes(tmp_path / "b" / rel), rel
