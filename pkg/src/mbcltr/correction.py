"""Click debiasing: mixture-based correction (MBC), affine correction, IPS.

All estimators return :class:`RelevanceEstimates` whose ``labels`` are
per-query arrays indexed by doc id, with NaN for documents never shown.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .clicks import CtrTable, Grouping, SessionLog, aggregate_ctr
from .data import Dataset, relevance_probs
from .mixture import GAUSSIAN, CtrSamples, DegenerateInput, MixtureFit, fit_em, posterior

MIN_GROUP_SIZE = 10
METHODS = ("NoCorrection", "IPS", "AC", "MBC", "IdealAC", "RelProbs")


@dataclass(frozen=True, order=True)
class GroupKey:
    """Examination group: a position, plus the inferred relevance pattern
    above it (``'0'/'1'`` per position 1..k-1) for cascade grouping."""

    position: int
    pattern: str | None = None

    def __post_init__(self):
        if self.pattern is not None and len(self.pattern) != self.position - 1:
            raise ValueError("pattern length must be position - 1")

    def __str__(self):
        return str(self.position) if self.pattern is None else f"{self.position}|{self.pattern}"


@dataclass
class RelevanceEstimates:
    labels: list
    method: str
    qids: tuple
    diagnostics: list = field(default_factory=list)
    entry_posterior: np.ndarray | None = field(default=None, repr=False)

    def covered(self):
        """Yield ``(query_index, doc_id, label)`` for every observed document."""
        for qi, lab in enumerate(self.labels):
            for d in np.flatnonzero(~np.isnan(lab)):
                yield qi, int(d), float(lab[d])

    def values(self) -> np.ndarray:
        return np.array([v for _, _, v in self.covered()])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["qid", "doc_id", "label", "method"])
        for qi, d, v in self.covered():
            w.writerow([self.qids[qi], d, repr(v), self.method])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, dataset: Dataset) -> "RelevanceEstimates":
        if isinstance(text, str):
            text = io.StringIO(text)
        reader = csv.DictReader(text)
        labels = [np.full(q.n_docs, np.nan) for q in dataset.queries]
        method = None
        for row in reader:
            labels[dataset.query_index(row["qid"])][int(row["doc_id"])] = float(row["label"])
            method = row["method"]
        return cls(labels, method or "unknown", tuple(dataset.qids))

    def diagnostics_jsonl(self) -> str:
        return "".join(json.dumps(d, sort_keys=True) + "\n" for d in self.diagnostics)


def _per_doc_mean(log: SessionLog, values: np.ndarray, weights=None) -> list:
    """Average per-record ``values`` by (query, doc) into per-query label arrays."""
    last = np.full(len(log.qids), -1, dtype=np.int64)
    np.maximum.at(last, log.query, log.doc)
    offsets = np.concatenate([[0], np.cumsum(last + 1)])
    code = offsets[log.query] + log.doc
    w = np.ones(len(values)) if weights is None else weights
    tot = np.bincount(code, weights=w * values, minlength=offsets[-1])
    cnt = np.bincount(code, weights=w, minlength=offsets[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(cnt > 0, tot / np.where(cnt > 0, cnt, 1), np.nan)
    return [mean[offsets[i] : offsets[i + 1]] for i in range(len(log.qids))]


def _pad(labels: list, dataset: Dataset | None) -> list:
    if dataset is None:
        return labels
    out = []
    for q, lab in zip(dataset.queries, labels):
        full = np.full(q.n_docs, np.nan)
        full[: len(lab)] = lab[: q.n_docs]
        out.append(full)
    return out


# -- baselines ----------------------------------------------------------------


def no_correction(log: SessionLog, dataset: Dataset | None = None) -> RelevanceEstimates:
    """Raw CTR per (query, doc) pooled over positions."""
    labels = _per_doc_mean(log, log.click.astype(float))
    return RelevanceEstimates(_pad(labels, dataset), "NoCorrection", log.qids)


def _affine_records(log: SessionLog, alpha, beta) -> np.ndarray:
    k = log.position - 1
    a = np.asarray(alpha, dtype=float)[k]
    b = np.asarray(beta, dtype=float)[k]
    num = log.click - b
    return np.divide(num, a, out=np.zeros(len(log)), where=a != 0)


def ac_correct(
    log: SessionLog, alpha, beta, dataset: Dataset | None = None, method: str = "AC"
) -> RelevanceEstimates:
    """Affine correction ``(c - beta_k) / alpha_k`` per impression, averaged per doc."""
    alpha = np.asarray(alpha, dtype=float)
    used = np.unique(log.position) - 1
    if len(log) and (used.max() >= len(alpha) or np.any(alpha[used] <= 0)):
        raise ValueError("alpha must be > 0 at every logged position")
    labels = _per_doc_mean(log, _affine_records(log, alpha, beta))
    diag = [
        {"position": int(k + 1), "alpha": float(alpha[k]), "beta": float(np.asarray(beta)[k])}
        for k in used
    ]
    return RelevanceEstimates(_pad(labels, dataset), method, log.qids, diag)


def ips_correct(log: SessionLog, theta, dataset: Dataset | None = None) -> RelevanceEstimates:
    """Inverse propensity ``c / theta_k``; identical to AC with beta = 0, alpha = theta."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta[log.position[log.click > 0] - 1] <= 0):
        raise ValueError("click at a position with theta = 0")
    labels = _per_doc_mean(log, _affine_records(log, theta, np.zeros_like(theta)))
    return RelevanceEstimates(_pad(labels, dataset), "IPS", log.qids)


def ac_expected_error(gamma, alpha, beta, alpha_est, beta_est):
    """Expected ``|r_hat - r|`` of AC run with estimated ``alpha_est, beta_est``."""
    if np.any(np.asarray(alpha_est) <= 0):
        raise ValueError("alpha_est must be > 0")
    d_alpha = np.asarray(alpha_est) - alpha
    d_beta = np.asarray(beta_est) - beta
    return gamma * (np.abs(d_alpha + d_beta) - np.abs(d_beta)) / alpha_est + np.abs(d_beta) / alpha_est


def rel_probs(dataset: Dataset, transform: str = "binarized") -> RelevanceEstimates:
    """Oracle labels: the true relevance probabilities of every document."""
    return RelevanceEstimates(relevance_probs(dataset, transform), "RelProbs", tuple(dataset.qids))


# -- grouping -----------------------------------------------------------------


def group_pbm(log: SessionLog) -> Grouping:
    """One examination group per position."""
    positions = np.unique(log.position)
    keys = [GroupKey(int(k)) for k in positions]
    return Grouping(keys, np.searchsorted(positions, log.position))


def _entry_counts(log, rows, patterns):
    """Distinct (query, doc) entries per pattern among the selected records."""
    triples = np.unique(np.column_stack([patterns, log.query[rows], log.doc[rows]]), axis=0)
    pats, counts = np.unique(triples[:, 0], return_counts=True)
    return dict(zip(pats.tolist(), counts.tolist()))


def _hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


def _merge_patterns(counts: dict, min_size: int) -> dict:
    """Map each pattern mask to the mask of the group it is pooled into."""
    big = [m for m, c in counts.items() if c >= min_size]
    if not big:
        target = max(counts, key=lambda m: (counts[m], -m))
        return {m: target for m in counts}
    out = {}
    for m, c in counts.items():
        if c >= min_size:
            out[m] = m
        else:
            out[m] = min(big, key=lambda b: (_hamming(m, b), -counts[b], b))
    return out


def _check_layout(log: SessionLog):
    order = np.lexsort((log.position, log.session, log.query))
    if not np.array_equal(order, np.arange(len(log))):
        raise ValueError("log must be ordered by (query, session, position)")
    starts = log.position == 1
    step_ok = log.position[1:] == np.where(starts[1:], 1, log.position[:-1] + 1)
    if len(log) and (not starts[0] or not np.all(step_ok)):
        raise ValueError("every session must list consecutive positions from 1")


def group_cascade(
    log: SessionLog,
    kind: str = GAUSSIAN,
    min_group_size: int = MIN_GROUP_SIZE,
    seed: int = 0,
) -> Grouping:
    """Group impressions by position and the inferred relevance pattern above them.

    Ranks are processed top-down: rank-k impressions are keyed by the bits
    (posterior >= 0.5) that MBC assigned to the impressions above them in the
    same session, then rank k is itself fitted so rank k+1 can be keyed.
    Groups smaller than ``min_group_size`` entries join the same-rank group
    with the nearest pattern in Hamming distance.
    """
    _check_layout(log)
    m = log.m
    if m > 62:
        raise ValueError("cascade grouping supports at most 62 positions")
    mask = np.zeros(len(log), dtype=np.int64)
    bits = np.zeros(len(log), dtype=np.int64)
    group_index = np.zeros(len(log), dtype=np.int64)
    keys: list[GroupKey] = []

    for k in range(1, m + 1):
        at_k = np.flatnonzero(log.position == k)
        if k > 1:
            prev = at_k - 1
            mask[at_k] = mask[prev] | (bits[prev] << (k - 2))
        counts = _entry_counts(log, at_k, mask[at_k])
        merge = _merge_patterns(counts, min_group_size)
        merged = np.array([merge[v] for v in mask[at_k].tolist()], dtype=np.int64)
        local_masks = sorted(set(merge.values()))
        base = len(keys)
        for pm in local_masks:
            pattern = "".join("1" if pm >> j & 1 else "0" for j in range(k - 1))
            keys.append(GroupKey(k, pattern))
        group_index[at_k] = base + np.searchsorted(local_masks, merged)

        if k == m:
            break
        sub = Grouping(keys, group_index)
        table = _subtable(log, sub, at_k)
        post = _fit_groups(table, kind, seed, min_group_size)[0]
        bits[at_k] = (post[_entry_of_records(table, log, at_k, group_index)] >= 0.5).astype(np.int64)
    return Grouping(keys, group_index)


def _subtable(log: SessionLog, grouping: Grouping, rows: np.ndarray) -> CtrTable:
    sub = SessionLog(
        log.session[rows],
        log.query[rows],
        log.position[rows],
        log.doc[rows],
        log.click[rows],
        log.qids,
        log.ranked_lists,
    )
    return aggregate_ctr(sub, Grouping(grouping.keys, grouping.index[rows]))


def _entry_of_records(table: CtrTable, log: SessionLog, rows, group_index) -> np.ndarray:
    n_q = len(log.qids)
    n_d = int(max(log.doc.max(), table.doc.max())) + 1
    entry_code = (table.group * n_q + table.query) * n_d + table.doc
    rec_code = (group_index[rows] * n_q + log.query[rows]) * n_d + log.doc[rows]
    return np.searchsorted(entry_code, rec_code)


# -- MBC ----------------------------------------------------------------------


def _merge_small_groups(table: CtrTable, min_size: int) -> np.ndarray:
    """Cluster id per table group; small groups are pooled with a neighbour.

    Cascade keys pool within their position by nearest pattern; position-only
    keys pool with the nearest position.
    """
    sizes = np.bincount(table.group, minlength=len(table.keys))
    cluster = np.arange(len(table.keys))
    present = [g for g in range(len(table.keys)) if sizes[g] > 0]
    big = [g for g in present if sizes[g] >= min_size]
    if not big:
        if present:
            cluster[:] = max(present, key=lambda g: (sizes[g], -g))
        return cluster

    def distance(a, b):
        ka, kb = table.keys[a], table.keys[b]
        pa, pb = getattr(ka, "pattern", None), getattr(kb, "pattern", None)
        pos_a, pos_b = getattr(ka, "position", a), getattr(kb, "position", b)
        if pa is not None and pb is not None:
            if pos_a != pos_b:
                return (1, abs(pos_a - pos_b), 0)
            return (0, 0, sum(x != y for x, y in zip(pa, pb)))
        return (0, abs(pos_a - pos_b), 0)

    for g in present:
        if sizes[g] < min_size:
            cluster[g] = min(big, key=lambda b: (distance(g, b), -sizes[b], b))
    return cluster


def _fit_groups(table: CtrTable, kind: str, seed: int, min_size: int):
    """Posterior per table entry plus one diagnostics record per fitted cluster."""
    cluster = _merge_small_groups(table, min_size)
    entry_cluster = cluster[table.group]
    post = np.full(len(table), np.nan)
    diags = []
    fits: dict[int, MixtureFit] = {}
    pending = []
    ctr = table.ctr
    for cl in np.unique(entry_cluster):
        sel = np.flatnonzero(entry_cluster == cl)
        members = sorted(set(np.flatnonzero(cluster == cl).tolist()) & set(table.group[sel].tolist()))
        rec = {"group_key": str(table.keys[cl]), "members": [str(table.keys[g]) for g in members], "size": int(len(sel))}
        samples = CtrSamples(ctr[sel], table.n[sel])
        try:
            fit = fit_em(samples, kind=kind, seed=seed)
        except DegenerateInput:
            pending.append((sel, rec))
            continue
        fits[cl] = fit
        post[sel] = posterior(fit, ctr[sel], table.n[sel])
        rec.update(fit.to_record(), low_separation=fit.low_separation)
        diags.append(rec)

    if pending:
        if fits:
            w = np.array([np.sum(entry_cluster == cl) for cl in fits], dtype=float)
            global_pi = float(np.dot(w, [f.pi for f in fits.values()]) / w.sum())
        else:
            global_pi = 0.5
        for sel, rec in pending:
            value = float(ctr[sel[0]])
            label = 0.0 if value == 0.0 else 1.0 if value == 1.0 else global_pi
            post[sel] = label
            rec.update(degenerate=True, ctr=value, label=label)
            diags.append(rec)
    diags.sort(key=lambda r: r["group_key"])
    return post, diags


def mbc_correct(
    table: CtrTable,
    kind: str = GAUSSIAN,
    min_group_size: int = MIN_GROUP_SIZE,
    seed: int = 0,
    dataset: Dataset | None = None,
    log: SessionLog | None = None,
) -> RelevanceEstimates:
    """Mixture-based correction over a CTR table.

    Each examination group gets its own two-component fit and every entry
    its posterior P(R=1 | CTR). A document seen in several groups gets the
    session-weighted mean of its posteriors.
    """
    post, diags = _fit_groups(table, kind, seed, min_group_size)
    n_docs = [0] * len(table.qids)
    if dataset is not None:
        n_docs = [q.n_docs for q in dataset.queries]
    else:
        for qi, d in zip(table.query.tolist(), table.doc.tolist()):
            n_docs[qi] = max(n_docs[qi], d + 1)
    offsets = np.concatenate([[0], np.cumsum(n_docs)]).astype(np.int64)
    code = offsets[table.query] + table.doc
    tot = np.bincount(code, weights=table.n * post, minlength=offsets[-1])
    cnt = np.bincount(code, weights=table.n, minlength=offsets[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(cnt > 0, tot / np.where(cnt > 0, cnt, 1), np.nan)
    labels = [np.clip(mean[offsets[i] : offsets[i + 1]], 0.0, 1.0) for i in range(len(n_docs))]
    return RelevanceEstimates(labels, "MBC", table.qids, diags, post)


def mbc_from_log(
    log: SessionLog,
    kind: str = GAUSSIAN,
    grouping: str = "pbm",
    min_group_size: int = MIN_GROUP_SIZE,
    seed: int = 0,
    dataset: Dataset | None = None,
) -> tuple[RelevanceEstimates, CtrTable]:
    """Group, aggregate and correct in one call; returns the table too."""
    if grouping == "pbm":
        groups = group_pbm(log)
    elif grouping == "cascade":
        groups = group_cascade(log, kind, min_group_size, seed)
    else:
        raise ValueError(f"unknown grouping {grouping!r}")
    table = aggregate_ctr(log, groups)
    return mbc_correct(table, kind, min_group_size, seed, dataset), table
