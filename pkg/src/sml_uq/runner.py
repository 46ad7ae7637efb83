"""Experiment orchestration behind the command line.

Every run (method x split x fold) gets its own seed derived by hashing its
labels together with the root seed, so adding or removing methods never
shifts another run's random stream.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import analysis
from .data import (BUILTIN_SCHEMAS, LARGE, SMALL, SPLIT_KINDS, VERY_LARGE, Dataset, DatasetSchema,
                   DatasetSplit, gen_heteroskedastic_toy, kfold, load_dataset, save_split_manifest,
                   shift_split)
from .estimators import (KIND_TAGS, EstimatorKind, TrainConfig, load_model, predict, save_model,
                         train_estimator)
from .metrics import REPORT_FIELDS, MetricReport, evaluate
from .netcore import TrainingDiverged

log = logging.getLogger(__name__)

SIZE_DEFAULTS = {
    SMALL: {"epochs": 1000, "batch_size": 100, "folds": 10},
    LARGE: {"epochs": 150, "batch_size": 100, "folds": 5},
    VERY_LARGE: {"epochs": 150, "batch_size": 500, "folds": 5},
}
LEARNING_RATE_OVERRIDES = {"california": 1e-4}
DEFAULT_BETAS = (0.1, 0.25, 0.5, 0.75, 0.9)


class UsageError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "toy"
    data_path: str | None = None
    schema: str | None = None
    methods: list[str] = field(default_factory=lambda: list(KIND_TAGS))
    splits: list[str] = field(default_factory=lambda: ["iid_train", "iid_test"])
    folds: int | None = None
    epochs: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    beta: float = 0.5
    keep_prob: float = 0.9
    samples: int = 200
    bins: int = 10
    seed: int = 0
    out: str = "runs/out"
    jobs: int | None = None
    interp_chunks: list[int] = field(default_factory=lambda: [5])
    extrap_chunks: list[int] = field(default_factory=lambda: [9])
    toy_n: int = 2000
    save_models: bool = True

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def validate(self) -> None:
        if not self.methods:
            raise UsageError("at least one method is required")
        for m in self.methods:
            try:
                EstimatorKind.from_tag(m)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
        if not self.splits:
            raise UsageError("at least one split kind is required")
        bad = [s for s in self.splits if s not in SPLIT_KINDS]
        if bad:
            raise UsageError(f"unknown split kinds {bad}; expected a subset of {SPLIT_KINDS}")
        if self.folds is not None and self.folds < 2:
            raise UsageError("folds must be >= 2")
        if not 0.0 < self.keep_prob <= 1.0:
            raise UsageError("keep_prob must lie in (0, 1]")
        if self.samples < 2:
            raise UsageError("samples (T) must be >= 2")
        if self.bins < 2:
            raise UsageError("bins must be >= 2")
        if self.beta < 0:
            raise UsageError("beta must be non-negative")
        if self.dataset != "toy" and not self.data_path:
            raise UsageError(f"dataset {self.dataset!r} needs a data_path")

    def resolved(self, data: Dataset) -> "ExperimentConfig":
        """Fill unset training fields from the dataset's size class."""
        base = SIZE_DEFAULTS[data.size_class]
        return dataclasses.replace(
            self,
            folds=self.folds if self.folds is not None else base["folds"],
            epochs=self.epochs if self.epochs is not None else base["epochs"],
            batch_size=self.batch_size if self.batch_size is not None else base["batch_size"],
            learning_rate=(self.learning_rate if self.learning_rate is not None
                           else LEARNING_RATE_OVERRIDES.get(self.dataset, 1e-3)))


def derive_seed(root: int, *labels) -> int:
    text = "|".join([str(root), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def load_experiment_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset == "toy" and not cfg.data_path:
        return gen_heteroskedastic_toy(cfg.toy_n, derive_seed(cfg.seed, "toy-data"))
    schema = DatasetSchema.from_json(cfg.schema) if cfg.schema else BUILTIN_SCHEMAS.get(cfg.dataset)
    return load_dataset(cfg.data_path, cfg.dataset, schema)


@dataclass
class Job:
    method: str
    group: str
    fold: int
    split: DatasetSplit
    eval_kinds: list[str]


def plan_jobs(cfg: ExperimentConfig, data: Dataset):
    """One training job per (method, train partition); iid train/test share a model."""
    jobs, manifests = [], []
    iid_kinds = [k for k in ("iid_train", "iid_test") if k in cfg.splits]
    if iid_kinds:
        folds = kfold(data, cfg.folds, seed=derive_seed(cfg.seed, data.name, "kfold"))
        manifests.extend(folds)
        for method in cfg.methods:
            for split in folds:
                jobs.append(Job(method, "iid", split.fold, split, iid_kinds))
    for kind in cfg.splits:
        if kind.startswith("iid"):
            continue
        chunks = cfg.interp_chunks if kind.endswith("interp") else cfg.extrap_chunks
        for chunk in chunks:
            split = shift_split(data, kind, chunk)
            manifests.append(split)
            for method in cfg.methods:
                jobs.append(Job(method, kind, chunk, split, [kind]))
    return jobs, manifests


def evaluate_standardized(model, est, y, **labels) -> MetricReport:
    """Metrics in the training fold's standardized target units.

    ECE, WS and KS do not depend on the unit; RMSE and NLL are made comparable
    across datasets this way.
    """
    st = model.standardizer
    return evaluate(st.transform_y(est.mu), np.asarray(est.sigma) / st.y_std, st.transform_y(y),
                    **labels)


def _run_job(cfg: ExperimentConfig, data: Dataset, job: Job, out_dir: str | None):
    kind = EstimatorKind.from_tag(job.method, keep_prob=cfg.keep_prob, sample_count=cfg.samples)
    train_cfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                            learning_rate=cfg.learning_rate, beta=cfg.beta)
    seed = derive_seed(cfg.seed, data.name, kind.tag, job.group, job.fold)
    train = data.subset(job.split.train_idx)
    try:
        model = train_estimator(kind, train, train_cfg, seed=seed)
    except TrainingDiverged as exc:
        return [], [], {"method": kind.tag, "split": job.group, "fold": job.fold,
                        "error": str(exc), "epoch": exc.epoch}
    if out_dir and cfg.save_models:
        save_model(model, Path(out_dir) / "models" / f"{kind.tag}_{job.group}_{job.fold}.json")

    reports, decomps = [], []
    for eval_kind in job.eval_kinds:
        idx = job.split.train_idx if eval_kind == "iid_train" else job.split.test_idx
        rng = np.random.default_rng(derive_seed(cfg.seed, data.name, kind.tag, eval_kind, job.fold,
                                                "predict"))
        est = predict(model, data.X[idx], rng=rng)
        reports.append(evaluate_standardized(model, est, data.y[idx], method=kind.tag,
                                             dataset=data.name, split=eval_kind, fold=job.fold,
                                             bins=cfg.bins))
        if kind.tag == "SML":
            try:
                dec = analysis.decompose_sigma(est)
                decomps.append([kind.tag, eval_kind, job.fold, dec.mean_dropout_std,
                                dec.mean_spread, dec.excluded])
            except ValueError:
                pass
    return reports, decomps, None


def _sort_key(report: MetricReport):
    return (report.method, SPLIT_KINDS.index(report.split) if report.split in SPLIT_KINDS else 99,
            report.split, report.fold)


def write_reports(reports: list[MetricReport], out: Path) -> None:
    with open(out / "reports.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow(r.csv_row())
    with open(out / "reports.json", "w", encoding="utf-8") as fh:
        json.dump([dataclasses.asdict(r) for r in reports], fh, indent=1)


def read_reports(path) -> list[MetricReport]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [MetricReport.from_row(row) for row in csv.DictReader(fh)]


def summarize(reports: list[MetricReport]) -> list[list]:
    """Mean and median of every metric per (method, split)."""
    groups: dict[tuple[str, str], list[MetricReport]] = {}
    for r in sorted(reports, key=_sort_key):
        groups.setdefault((r.method, r.split), []).append(r)
    rows = []
    for (method, split), group in groups.items():
        row = [method, split, len(group)]
        for metric in REPORT_FIELDS[4:]:
            vals = [getattr(r, metric) for r in group]
            row.extend([repr(float(np.mean(vals))), repr(float(statistics.median(vals)))])
        rows.append(row)
    return rows


def summary_header() -> list[str]:
    head = ["method", "split", "n"]
    for metric in REPORT_FIELDS[4:]:
        head.extend([f"{metric}_mean", f"{metric}_median"])
    return head


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_run(cfg: ExperimentConfig):
    """Train, predict and evaluate every configured run; returns ``(exit_code, reports)``."""
    cfg.validate()
    data = load_experiment_data(cfg)
    cfg = cfg.resolved(data)
    out = Path(cfg.out)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "splits").mkdir(exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(cfg), fh, indent=1, sort_keys=True)

    jobs, manifests = plan_jobs(cfg, data)
    save_split_manifest(manifests, out / "splits" / "splits.json")
    log.info("%s: %d training jobs (%s)", data.name, len(jobs), ", ".join(cfg.methods))

    workers = cfg.jobs or default_jobs()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, [cfg] * len(jobs), [data] * len(jobs), jobs,
                                    [str(out)] * len(jobs)))
    else:
        results = [_run_job(cfg, data, job, str(out)) for job in jobs]

    reports, decomps, failures = [], [], []
    for rep, dec, fail in results:
        reports.extend(rep)
        decomps.extend(dec)
        if fail:
            failures.append(fail)
    reports.sort(key=_sort_key)
    write_reports(reports, out)
    write_csv(out / "summary.csv", summary_header(), summarize(reports))
    write_csv(out / "sigma_decomposition.csv",
              ["method", "split", "fold", "fraction_dropout_std", "fraction_spread", "excluded"],
              [[m, s, f, repr(a), repr(b), e] for m, s, f, a, b, e in decomps])
    with open(out / "failures.json", "w", encoding="utf-8") as fh:
        json.dump(failures, fh, indent=1)
    for fail in failures:
        log.error("run failed: %s", fail)
    return (1 if failures else 0), reports


def cmd_sweep_beta(cfg: ExperimentConfig, betas=DEFAULT_BETAS):
    cfg.validate()
    if "SML" not in [EstimatorKind.from_tag(m).tag for m in cfg.methods]:
        raise UsageError("sweep-beta needs SML among the methods")
    if not betas:
        raise UsageError("no beta values given")
    out = Path(cfg.out)
    status, rows = 0, []
    for beta in betas:
        if beta == 0:
            log.warning("beta = 0 trains no sub-network objective; dropout at inference then "
                        "only adds uncontrolled fluctuations, so its uncertainties are not meaningful")
        sub = dataclasses.replace(cfg, beta=float(beta), out=str(out / f"beta_{beta}"))
        code, reports = cmd_run(sub)
        status = max(status, code)
        rows.extend([repr(float(beta)), *r.csv_row()] for r in reports)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", ["beta", *REPORT_FIELDS], rows)
    return status, rows


def cmd_landscape(out, mu_max=2.0, mu_steps=41, sigma_max=2.0, sigma_steps=41, mc_n=0, seed=0,
                  argmin_sigma_max=2.0, argmin_steps=2001):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    mus = np.linspace(0.0, mu_max, mu_steps)
    sigmas = np.linspace(0.0, sigma_max, sigma_steps)
    rows = analysis.landscape_grid(mus, sigmas, mc_n, seed)
    header = ["mu", "sigma", "loss"] + (["mc_estimate", "mc_se"] if mc_n else [])
    write_csv(out / "landscape.csv", header, [[repr(v) for v in row] for row in rows])

    curve = analysis.landscape_argmin_mu(np.linspace(0.0, argmin_sigma_max, argmin_steps))
    write_csv(out / "argmin.csv", ["sigma", "argmin_mu", "loss", "boundary_hit"],
              [[repr(float(s)), repr(float(m)), repr(float(v)), int(h)]
               for s, m, v, h in zip(curve.sigma, curve.mu, curve.loss, curve.boundary_hit)])
    return curve


def cmd_report(run_dirs, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for d in run_dirs:
        reports.extend(read_reports(Path(d) / "reports.csv"))
    reports.sort(key=lambda r: (r.dataset,) + _sort_key(r))
    write_reports(reports, out)
    write_csv(out / "summary.csv", summary_header(), summarize(reports))
    write_csv(out / "metric_triples.csv", ["method", "dataset", "split", "fold", "ece", "ws", "ks"],
              [[r.method, r.dataset, r.split, r.fold, repr(r.ece), repr(r.ws), repr(r.ks)]
               for r in reports])
    corr = None
    if len(reports) >= 3:
        try:
            corr, _ = analysis.metric_correlations(reports)
        except ValueError as exc:
            log.warning("metric correlations skipped: %s", exc)
    if corr is not None:
        write_csv(out / "correlations.csv", ["metric", *analysis.METRIC_NAMES],
                  [[name, *map(repr, map(float, corr[i]))]
                   for i, name in enumerate(analysis.METRIC_NAMES)])
    return reports, corr


def cmd_export_components(cfg: ExperimentConfig, method="SML", fold=0, split="iid_test",
                          model_path=None):
    """Train (or load) one model and export per-test-point residuals and sub-network offsets."""
    cfg.validate()
    data = load_experiment_data(cfg)
    cfg = cfg.resolved(data)
    if split.startswith("iid"):
        splits = kfold(data, cfg.folds, seed=derive_seed(cfg.seed, data.name, "kfold"))
        chosen, group = splits[fold], "iid"
    else:
        chosen, group = shift_split(data, split, fold), split
    kind = EstimatorKind.from_tag(method, keep_prob=cfg.keep_prob, sample_count=cfg.samples)
    if model_path:
        model = load_model(model_path)
    else:
        model = train_estimator(kind, data.subset(chosen.train_idx),
                                TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                            learning_rate=cfg.learning_rate, beta=cfg.beta),
                                seed=derive_seed(cfg.seed, data.name, kind.tag, group, chosen.fold))
    idx = chosen.test_idx
    export = analysis.loss_component_export(
        model, data.X[idx], data.y[idx], cfg.samples,
        np.random.default_rng(derive_seed(cfg.seed, data.name, kind.tag, "components", chosen.fold)))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    export.write_csv(out / f"components_{kind.tag}_{split}_{chosen.fold}.csv")
    return export


def default_jobs() -> int:
    return os.cpu_count() or 1
