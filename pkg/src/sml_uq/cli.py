"""Command line entry point: ``sml-uq {run,sweep-beta,landscape,report,export-components}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys

from . import runner
from .data import IngestionError
from .runner import ExperimentConfig, UsageError


def _csv_list(cast):
    def parse(text):
        return [cast(v) for v in text.split(",") if v.strip()]
    return parse


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with ExperimentConfig keys; flags override it")
    p.add_argument("--dataset", help="dataset name (built-in schema names or 'toy')")
    p.add_argument("--data-path", dest="data_path", help="CSV file for the dataset")
    p.add_argument("--schema", help="JSON schema manifest for the CSV")
    p.add_argument("--method", action="append", dest="methods",
                   help="estimator (MC, MC_LL, SML, PU, DE, PU_DE); repeatable or comma separated")
    p.add_argument("--split", action="append", dest="splits",
                   help="split kind; repeatable or comma separated")
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--keep-prob", dest="keep_prob", type=float)
    p.add_argument("--samples", type=int, help="sub-network samples T at prediction")
    p.add_argument("--bins", type=int, help="ECE bin count B")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")
    p.add_argument("--interp-chunks", dest="interp_chunks", type=_csv_list(int))
    p.add_argument("--extrap-chunks", dest="extrap_chunks", type=_csv_list(int))
    p.add_argument("--toy-n", dest="toy_n", type=int)
    p.add_argument("--no-save-models", dest="save_models", action="store_const", const=False)


def _flatten(values):
    if values is None:
        return None
    return [v.strip() for item in values for v in item.split(",") if v.strip()]


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_toml(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for f in dataclasses.fields(ExperimentConfig):
        if not hasattr(args, f.name):
            continue
        value = getattr(args, f.name)
        if f.name in ("methods", "splits"):
            value = _flatten(value)
        if value is not None:
            overrides[f.name] = value
    return dataclasses.replace(cfg, **overrides)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = argparse.ArgumentParser(prog="sml-uq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common],
                       help="train, predict and evaluate every configured run")
    _add_experiment_flags(p)

    p = sub.add_parser("sweep-beta", parents=[common], help="repeat `run` for several SML weights")
    _add_experiment_flags(p)
    p.add_argument("--betas", type=_csv_list(float), default=list(runner.DEFAULT_BETAS))

    p = sub.add_parser("landscape", parents=[common],
                       help="closed-form loss landscape, MC check and argmin curve")
    p.add_argument("--out", default="runs/landscape")
    p.add_argument("--mu-max", type=float, default=2.0)
    p.add_argument("--mu-steps", type=int, default=41)
    p.add_argument("--sigma-max", type=float, default=2.0)
    p.add_argument("--sigma-steps", type=int, default=41)
    p.add_argument("--mc-n", type=int, default=0, help="Monte-Carlo draws per grid point (0: off)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--argmin-steps", type=int, default=2001)

    p = sub.add_parser("report", parents=[common],
                       help="merge run directories into summary tables")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="runs/report")

    p = sub.add_parser("export-components", parents=[common],
                       help="export residual / sub-network offset samples")
    _add_experiment_flags(p)
    p.add_argument("--fold", type=int, default=0, help="fold id, or held chunk for shift splits")
    p.add_argument("--model", help="load this model dump instead of training")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = config_from_args(args)
            code, reports = runner.cmd_run(cfg)
            print(f"{len(reports)} report rows written to {cfg.out}")
            return code
        if args.command == "sweep-beta":
            code, rows = runner.cmd_sweep_beta(config_from_args(args), args.betas)
            print(f"{len(rows)} sweep rows for betas {args.betas}")
            return code
        if args.command == "landscape":
            curve = runner.cmd_landscape(args.out, args.mu_max, args.mu_steps, args.sigma_max,
                                         args.sigma_steps, args.mc_n, args.seed,
                                         argmin_steps=args.argmin_steps)
            print(f"argmin mu at sigma=0: {curve.mu[0]:.6f} "
                  f"(sqrt(2/pi) = {math.sqrt(2 / math.pi):.6f})")
            print(f"bifurcation sigma: {curve.bifurcation():.4f} (2/pi = {2 / math.pi:.5f})")
            return 0
        if args.command == "report":
            reports, corr = runner.cmd_report(args.run_dirs, args.out)
            print(f"merged {len(reports)} report rows into {args.out}")
            return 0
        if args.command == "export-components":
            cfg = config_from_args(args)
            methods = cfg.methods if args.methods else ["SML"]
            split = (cfg.splits if args.splits else ["iid_test"])[0]
            for method in methods:
                runner.cmd_export_components(cfg, method, args.fold, split, args.model)
            return 0
    except (UsageError, IngestionError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
