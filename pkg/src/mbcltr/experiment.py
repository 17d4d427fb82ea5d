"""Config-driven experiment runner: simulate -> correct -> train -> evaluate.

A config is an INI file. Every key must be known; anything else is a
:class:`ConfigError`. Run ``r`` uses the seed
``SeedSequence([base_seed, r]).generate_state(1)[0]``.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .clicks import (
    SessionLog,
    aggregate_ctr,
    build_bias_profile,
    default_dcm_continuation,
    default_ubm_matrix,
    ranked_lists_for,
    simulate_dcm,
    simulate_pbm,
    simulate_ubm,
    train_production_ranker,
)
from .correction import (
    METHODS,
    GroupKey,
    ac_correct,
    group_pbm,
    ips_correct,
    mbc_from_log,
    no_correction,
    rel_probs,
)
from .data import Dataset, load_svmlight, relevance_probs, split_dataset, synth_dataset
from .evaluate import EvalReport, mean_ndcg
from .ltr import TrainConfig, train
from .mixture import KINDS
from .rbem import DEFAULT_ITERS, last_before_anomaly, linear_sigmoid_regressor, rbem_run

logger = logging.getLogger(__name__)

CLICK_MODELS = ("pbm", "dcm", "ubm")
# Methods that need the true per-position bias profile, which only PBM has.
PBM_ONLY = ("IPS", "IdealAC")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def run_seed(base_seed: int, run: int) -> int:
    return int(np.random.SeedSequence([base_seed, run]).generate_state(1)[0])


def _csv_list(text: str, cast=str) -> tuple:
    return tuple(cast(t.strip()) for t in text.split(",") if t.strip())


# section -> field names, in file order
SECTIONS = {
    "dataset": (
        "source", "n_queries", "docs_per_query", "feature_dim", "y_max",
        "dataset_seed", "train_file", "test_file", "test_fraction",
    ),
    "clicks": (
        "click_model", "eta", "m", "transform", "n_sessions", "click_budget",
        "production_queries", "dcm_continuation", "ubm_power",
    ),
    "correction": ("methods", "mixture", "grouping", "min_group_size", "rbem_iters"),
    "ltr": ("objective", "learning_rate", "epochs", "l2"),
    "run": ("n_runs", "seed", "out_dir", "k"),
    "plot": ("budgets", "scatter_positions", "sweep_mixtures"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    source: str = "synth"
    n_queries: int = 200
    docs_per_query: int = 20
    feature_dim: int = 5
    y_max: int = 4
    dataset_seed: int = 7
    train_file: str = ""
    test_file: str = ""
    test_fraction: float = 0.25
    # clicks
    click_model: str = "pbm"
    eta: float = 1.0
    m: int = 20
    transform: str = "binarized"
    n_sessions: int = 50
    click_budget: int = 0  # records; overrides n_sessions when > 0
    production_queries: int = 20
    dcm_continuation: float = 0.65
    ubm_power: float = 0.9
    # correction
    methods: tuple = METHODS
    mixture: str = "gaussian"
    grouping: str = "pbm"
    min_group_size: int = 10
    rbem_iters: int = DEFAULT_ITERS
    # ltr
    objective: str = "pairwise_hinge"
    learning_rate: float = 0.1
    epochs: int = 300
    l2: float = 0.0
    # run
    n_runs: int = 8
    seed: int = 0
    out_dir: str = "results"
    k: int = 10
    # plot data
    budgets: tuple = (10_000, 100_000, 1_000_000)
    scatter_positions: tuple = (1, 9)
    sweep_mixtures: tuple = KINDS

    def __post_init__(self):
        problems = []
        if self.source not in ("synth", "files"):
            problems.append(f"dataset.source must be synth or files, got {self.source!r}")
        if self.source == "files":
            for key in ("train_file", "test_file"):
                path = getattr(self, key)
                if not path or not Path(path).is_file():
                    problems.append(f"dataset.{key}: file {path!r} does not exist")
        if not 0.0 < self.test_fraction < 1.0:
            problems.append("dataset.test_fraction must be in (0, 1)")
        if self.click_model not in CLICK_MODELS:
            problems.append(f"clicks.click_model must be one of {CLICK_MODELS}")
        if self.transform not in ("binarized", "graded"):
            problems.append("clicks.transform must be binarized or graded")
        if self.m < 1 or self.n_sessions < 1 or self.click_budget < 0:
            problems.append("clicks: need m >= 1, n_sessions >= 1, click_budget >= 0")
        if self.production_queries < 1:
            problems.append("clicks.production_queries must be >= 1")
        if not self.methods:
            problems.append("correction.methods must be non-empty")
        unknown = [mt for mt in self.methods if mt not in METHODS]
        if unknown:
            problems.append(f"correction.methods: unknown {unknown}; choose from {METHODS}")
        if self.click_model != "pbm":
            bad = [mt for mt in self.methods if mt in PBM_ONLY]
            if bad:
                problems.append(f"correction.methods {bad} need true PBM bias parameters; not defined for {self.click_model}")
        if self.mixture not in KINDS or any(k not in KINDS for k in self.sweep_mixtures):
            problems.append(f"mixture kinds must be among {KINDS}")
        if self.grouping not in ("pbm", "cascade"):
            problems.append("correction.grouping must be pbm or cascade")
        if self.rbem_iters < 1:
            problems.append("correction.rbem_iters must be >= 1")
        if self.n_runs < 1:
            problems.append("run.n_runs must be >= 1")
        if self.k < 1:
            problems.append("run.k must be >= 1")
        if any(b < 1 for b in self.budgets) or any(p < 1 or p > self.m for p in self.scatter_positions):
            problems.append("plot: budgets must be positive and scatter positions within 1..m")
        try:
            TrainConfig(self.objective, self.learning_rate, self.epochs, 0, self.l2)
        except ValueError as exc:
            problems.append(f"ltr: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))

    # -- INI round trip ------------------------------------------------------

    @classmethod
    def from_ini(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls.__dataclass_fields__
        kwargs = {}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ConfigError(f"{source}: unknown key {section}.{key}")
                kwargs[key] = _parse_value(key, raw, types[key], defaults[key].default, source)
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} not found")
        return cls.from_ini(path.read_text(), source=str(path))

    def to_ini(self) -> str:
        lines = []
        values = asdict(self)
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            for key in keys:
                v = values[key]
                text = ", ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)

    # -- derived -------------------------------------------------------------

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.objective, self.learning_rate, self.epochs, seed, self.l2)

    def sessions_for(self, n_train_queries: int, budget: int | None = None) -> int:
        """Sessions per query; a budget counts impression records (sessions x m x queries)."""
        budget = self.click_budget if budget is None else budget
        if budget <= 0:
            return self.n_sessions
        return max(1, int(round(budget / (n_train_queries * self.m))))


def _parse_value(key, raw, typ, default, source):
    try:
        if isinstance(default, tuple):
            cast = type(default[0]) if default else str
            return _csv_list(raw, cast)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{source}: bad value for {key}: {raw!r}") from None


# -- data preparation ----------------------------------------------------------


def load_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.source == "files":
        return load_svmlight(cfg.train_file, cfg.y_max), load_svmlight(cfg.test_file, cfg.y_max)
    ds = synth_dataset(cfg.n_queries, cfg.docs_per_query, cfg.feature_dim, cfg.y_max, cfg.dataset_seed)
    return split_dataset(ds, cfg.test_fraction, cfg.dataset_seed)


def simulate_clicks(cfg: ExperimentConfig, train_ds: Dataset, seed: int, n_sessions: int | None = None):
    """Production ranker, ranked lists and one click log for a run seed."""
    n_sessions = cfg.sessions_for(len(train_ds)) if n_sessions is None else n_sessions
    prod = train_production_ranker(train_ds, min(cfg.production_queries, len(train_ds)), seed)
    lists = ranked_lists_for(prod, train_ds, cfg.m)
    gamma = relevance_probs(train_ds, cfg.transform)
    m = max(len(r) for r in lists)
    profile = build_bias_profile(cfg.eta, m)
    if cfg.click_model == "pbm":
        log = simulate_pbm(lists, gamma, profile, n_sessions, seed, qids=train_ds.qids)
    elif cfg.click_model == "dcm":
        log = simulate_dcm(lists, gamma, default_dcm_continuation(m, cfg.dcm_continuation), n_sessions, seed, qids=train_ds.qids)
    else:
        log = simulate_ubm(lists, gamma, default_ubm_matrix(m, cfg.ubm_power), n_sessions, seed, qids=train_ds.qids)
    return prod, log, profile


def correct(cfg: ExperimentConfig, method: str, log: SessionLog | None, train_ds: Dataset, profile, seed: int,
            mixture: str | None = None):
    """Relevance labels for one method; returns (estimates, extra artifacts)."""
    extra = {}
    if method == "RelProbs":
        return rel_probs(train_ds, cfg.transform), extra
    if method == "NoCorrection":
        return no_correction(log, train_ds), extra
    if method == "IPS":
        return ips_correct(log, profile.theta, train_ds), extra
    if method == "IdealAC":
        return ac_correct(log, profile.alpha, profile.beta, train_ds, method="IdealAC"), extra
    if method == "MBC":
        est, _ = mbc_from_log(log, mixture or cfg.mixture, cfg.grouping, cfg.min_group_size, seed, train_ds)
        return est, extra
    if method == "AC":
        state, est = rbem_run(log, train_ds, linear_sigmoid_regressor(seed=seed), cfg.rbem_iters)
        extra["rbem_state"] = state
        return est, extra
    raise ValueError(f"unknown method {method!r}")


# -- a single run ------------------------------------------------------------------


@dataclass
class RunResult:
    run: int
    seed: int
    ndcg: dict
    timings: dict
    files: dict = field(default_factory=dict)  # relative path -> text


def _execute_run(cfg: ExperimentConfig, run: int, splits=None) -> RunResult:
    train_ds, test_ds = splits if splits is not None else load_splits(cfg)
    seed = run_seed(cfg.seed, run)
    timings = {"simulate": 0.0, "correct": {}, "train": {}, "evaluate": {}}
    ndcg, files = {}, {}
    prefix = f"runs/run_{run:02d}/"

    log = profile = None
    if any(mt != "RelProbs" for mt in cfg.methods):
        t0 = time.perf_counter()
        _, log, profile = simulate_clicks(cfg, train_ds, seed)
        timings["simulate"] = time.perf_counter() - t0

    for method in cfg.methods:
        t0 = time.perf_counter()
        est, extra = correct(cfg, method, log, train_ds, profile, seed)
        timings["correct"][method] = time.perf_counter() - t0

        t0 = time.perf_counter()
        model = train(train_ds, est, cfg.train_config(seed))
        timings["train"][method] = time.perf_counter() - t0

        t0 = time.perf_counter()
        ndcg[method] = mean_ndcg(model, test_ds, cfg.k)
        timings["evaluate"][method] = time.perf_counter() - t0

        files[f"{prefix}labels_{method}.csv"] = est.to_csv()
        files[f"{prefix}model_{method}.json"] = model.to_json() + "\n"
        if est.diagnostics:
            files[f"{prefix}diagnostics_{method}.jsonl"] = est.diagnostics_jsonl()
        if "rbem_state" in extra:
            files[f"{prefix}rbem_history.csv"] = extra["rbem_state"].history_csv()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", f"ndcg@{cfg.k}"])
    for method in cfg.methods:
        w.writerow([method, f"{ndcg[method]:.10f}"])
    files[f"{prefix}ndcg.csv"] = buf.getvalue()
    return RunResult(run, seed, ndcg, timings, files)


# -- file output ---------------------------------------------------------------------


def write_atomic(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ExperimentResult:
    report: EvalReport
    runs: list
    out_dir: Path | None

    @property
    def timings(self) -> list:
        return [{"run": r.run, "seed": r.seed, **r.timings} for r in self.runs]


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, write: bool = True) -> ExperimentResult:
    """All runs of ``cfg``; writes artifacts under ``cfg.out_dir`` when ``write``.

    CSV/JSONL artifacts depend only on the config, so they are byte-identical
    across repeats and across ``jobs``. Wall-clock timings go to
    ``timings.json``, with correction timed apart from LTR training.
    """
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    splits = load_splits(cfg)
    if jobs == 1 or cfg.n_runs == 1:
        runs = [_execute_run(cfg, r, splits) for r in range(cfg.n_runs)]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, cfg.n_runs)) as pool:
            runs = list(pool.map(_execute_run, [cfg] * cfg.n_runs, range(cfg.n_runs), [splits] * cfg.n_runs))
    runs.sort(key=lambda r: r.run)

    per_run = {mt: [r.ndcg[mt] for r in runs] for mt in cfg.methods}
    report = EvalReport(per_run, [r.seed for r in runs], cfg.k)
    result = ExperimentResult(report, runs, Path(cfg.out_dir) if write else None)
    if write:
        out = Path(cfg.out_dir)
        for r in runs:
            for rel, text in r.files.items():
                write_atomic(out / rel, text)
        write_atomic(out / "config.ini", cfg.to_ini())
        write_atomic(out / "report.csv", report.to_csv())
        write_atomic(out / "pvalues.csv", report.pvalues_csv())
        write_atomic(out / "summary.txt", report.table())
        write_atomic(out / "timings.json", json.dumps(result.timings, indent=2) + "\n")
    return result


# -- plot data ---------------------------------------------------------------------------


def scatter_rows(table, estimates: dict, gamma, positions) -> dict:
    """Per position: (qid, doc_id, ctr, true relevance, one column per method)."""
    out = {}
    methods = list(estimates)
    for k in positions:
        key = GroupKey(k)
        if key not in table.keys:
            continue
        gi = table.keys.index(key)
        sel = np.flatnonzero(table.group == gi)
        order = sel[np.lexsort((table.doc[sel], table.query[sel]))]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["qid", "doc_id", "ctr", "true_relevance"] + [f"est_{mt}" for mt in methods])
        for i in order:
            q, d = int(table.query[i]), int(table.doc[i])
            row = [table.qids[q], d, repr(float(table.c[i] / table.n[i])), repr(float(gamma[q][d]))]
            row += [repr(float(estimates[mt].labels[q][d])) for mt in methods]
            w.writerow(row)
        out[k] = buf.getvalue()
    return out


def convergence_sweep(cfg: ExperimentConfig, budgets, methods, splits=None) -> dict:
    """Mean NDCG@k over runs per click budget; keys are method labels.

    ``MBC`` is swept once per mixture kind in ``cfg.sweep_mixtures`` and
    labelled ``MBC-<kind>``.
    """
    train_ds, test_ds = splits if splits is not None else load_splits(cfg)
    labels = []
    for mt in methods:
        if mt == "MBC":
            labels += [("MBC", kind, f"MBC-{kind}") for kind in cfg.sweep_mixtures]
        elif mt != "RelProbs":
            labels.append((mt, None, mt))
    curves = {lab: [] for _, _, lab in labels}
    for budget in budgets:
        n_sessions = cfg.sessions_for(len(train_ds), budget)
        scores = {lab: [] for _, _, lab in labels}
        for r in range(cfg.n_runs):
            seed = run_seed(cfg.seed, r)
            _, log, profile = simulate_clicks(cfg, train_ds, seed, n_sessions)
            for mt, kind, lab in labels:
                est, _ = correct(cfg, mt, log, train_ds, profile, seed, mixture=kind)
                scores[lab].append(mean_ndcg(train(train_ds, est, cfg.train_config(seed)), test_ds, cfg.k))
        for lab in scores:
            curves[lab].append((int(budget), n_sessions, len(log), float(np.mean(scores[lab])), float(np.std(scores[lab]))))
    return curves


def convergence_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["click_budget", "sessions_per_query", "records", "ndcg_mean", "ndcg_std"])
    for budget, n_sessions, records, mean, std in rows:
        w.writerow([budget, n_sessions, records, f"{mean:.10f}", f"{std:.10f}"])
    return buf.getvalue()


def emit_plot_data(cfg: ExperimentConfig, out_dir=None, sweep: bool = True) -> list:
    """Write the data behind the scatter, convergence and rbEM-iteration plots.

    Uses run 0 of ``cfg`` for the scatter and the rbEM curve. Returns the
    written paths.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir) / "plot_data"
    splits = load_splits(cfg)
    train_ds, test_ds = splits
    seed = run_seed(cfg.seed, 0)
    _, log, profile = simulate_clicks(cfg, train_ds, seed)
    written = []

    table = aggregate_ctr(log, group_pbm(log))
    estimates = {}
    for mt in cfg.methods:
        if mt in ("RelProbs", "AC"):
            continue
        estimates[mt], _ = correct(cfg, mt, log, train_ds, profile, seed)

    def ndcg_of(est):
        return mean_ndcg(train(train_ds, est, cfg.train_config(seed)), test_ds, cfg.k)

    if "AC" in cfg.methods:
        state, estimates["AC"] = rbem_run(
            log, train_ds, linear_sigmoid_regressor(seed=seed), cfg.rbem_iters, ndcg_hook=ndcg_of
        )
        path = out / "rbem_iterations.csv"
        write_atomic(path, state.history_csv())
        written.append(path)
        curve = state.ndcg_curve
        path = out / "rbem_summary.json"
        summary = {"iterations": len(curve), "best_iteration": int(np.argmax(curve)) + 1,
                   "last_before_anomaly": last_before_anomaly(curve) + 1}
        write_atomic(path, json.dumps(summary, indent=2) + "\n")
        written.append(path)

    gamma = relevance_probs(train_ds, cfg.transform)
    for k, text in scatter_rows(table, estimates, gamma, cfg.scatter_positions).items():
        path = out / f"scatter_pos{k:02d}.csv"
        write_atomic(path, text)
        written.append(path)

    if sweep:
        for lab, rows in convergence_sweep(cfg, cfg.budgets, cfg.methods, splits).items():
            path = out / f"convergence_{lab}.csv"
            write_atomic(path, convergence_csv(rows))
            written.append(path)
    return written
