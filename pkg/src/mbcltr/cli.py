"""Command line entry point: ``mbcltr <subcommand> --config PATH [...]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from .clicks import SessionLog, build_bias_profile
from .correction import METHODS, RelevanceEstimates
from .evaluate import mean_ndcg
from .experiment import (
    ConfigError,
    ExperimentConfig,
    correct,
    emit_plot_data,
    load_splits,
    run_experiment,
    run_seed,
    simulate_clicks,
    write_atomic,
)
from .ltr import RankerModel, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("mbcltr")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    try:
        return dataclasses.replace(cfg, **overrides)
    except ConfigError as exc:
        raise ConfigError(f"{args.config or '<defaults>'}: {exc}") from None


def _read(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input file {path!r} not found")
    return p.read_text()


def cmd_simulate(args, cfg):
    train_ds, _ = load_splits(cfg)
    seed = run_seed(cfg.seed, args.run)
    prod, log, _ = simulate_clicks(cfg, train_ds, seed)
    out = Path(cfg.out_dir)
    write_atomic(out / "clicks.tsv", log.to_tsv())
    write_atomic(out / "production_model.json", prod.to_json() + "\n")
    print(f"{len(log)} records, {log.n_clicks} clicks -> {out / 'clicks.tsv'}")


def cmd_correct(args, cfg):
    train_ds, _ = load_splits(cfg)
    seed = run_seed(cfg.seed, args.run)
    log = None
    if args.method != "RelProbs":
        log = SessionLog.from_tsv(_read(args.clicks), qids=train_ds.qids)
    # IPS and IdealAC use the true profile of the simulated model
    profile = build_bias_profile(cfg.eta, log.m if log is not None else cfg.m)
    t0 = time.perf_counter()
    est, extra = correct(cfg, args.method, log, train_ds, profile, seed)
    elapsed = time.perf_counter() - t0
    out = Path(cfg.out_dir)
    write_atomic(out / f"labels_{args.method}.csv", est.to_csv())
    if est.diagnostics:
        write_atomic(out / f"diagnostics_{args.method}.jsonl", est.diagnostics_jsonl())
    if "rbem_state" in extra:
        write_atomic(out / "rbem_history.csv", extra["rbem_state"].history_csv())
    print(f"{args.method}: labelled {len(est.values())} documents in {elapsed:.3f}s")


def cmd_train(args, cfg):
    train_ds, _ = load_splits(cfg)
    est = RelevanceEstimates.from_csv(_read(args.labels), train_ds)
    model = train(train_ds, est, cfg.train_config(run_seed(cfg.seed, args.run)))
    path = Path(cfg.out_dir) / f"model_{est.method}.json"
    write_atomic(path, model.to_json() + "\n")
    print(f"model -> {path}")


def cmd_eval(args, cfg):
    _, test_ds = load_splits(cfg)
    model = RankerModel.from_json(_read(args.model))
    if model.feature_dim != test_ds.feature_dim:
        raise ConfigError(f"model has {model.feature_dim} features, data has {test_ds.feature_dim}")
    print(f"NDCG@{cfg.k} = {mean_ndcg(model, test_ds, cfg.k):.6f}")


def cmd_run(args, cfg):
    result = run_experiment(cfg, jobs=args.jobs)
    sys.stdout.write(result.report.table())
    total_correct = sum(sum(r.timings["correct"].values()) for r in result.runs)
    total_train = sum(sum(r.timings["train"].values()) for r in result.runs)
    print(f"correction {total_correct:.2f}s, training {total_train:.2f}s (see timings.json)")


def cmd_plot_data(args, cfg):
    for path in emit_plot_data(cfg, sweep=not args.no_sweep):
        print(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbcltr", description="Mixture-based click correction experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel runs")
    common.add_argument("--out", help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate one click log")
    p.add_argument("--run", type=int, default=0, help="run index for seed derivation")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correct", parents=[common], help="debias a click log into labels")
    p.add_argument("--clicks", help="session log TSV (not needed for RelProbs)")
    p.add_argument("--method", choices=METHODS, default="MBC")
    p.add_argument("--run", type=int, default=0)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("train", parents=[common], help="train a ranker on a labels CSV")
    p.add_argument("--labels", required=True)
    p.add_argument("--run", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="NDCG of a model on the test split")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", parents=[common], help="full pipeline over all runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plot-data", parents=[common], help="emit CSVs behind the figures")
    p.add_argument("--no-sweep", action="store_true", help="skip the click-budget sweep")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = _load_config(args)
        if args.command == "correct" and args.method != "RelProbs" and not args.clicks:
            raise ConfigError("correct needs --clicks")
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any module failure is a runtime error
        config = getattr(args, "config", None) or "<defaults>"
        print(f"runtime error ({config}): {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
