"""Bias profiles, production ranker, click simulation (PBM/DCM/UBM) and CTR tables.

Randomness: every query draws from its own generator seeded with
``(seed, query_index)``, and sessions of that query consume the stream in
session order. Results are therefore independent of how queries are
distributed over workers.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .data import Dataset, Query
from .ltr import RankerModel, rank

RIDGE_FALLBACK = 1e-6


@dataclass(frozen=True, eq=False)
class BiasProfile:
    """Per-position examination and trust-bias click probabilities.

    Index 0 is position 1. ``alpha = theta * (eps_pos - eps_neg)`` and
    ``beta = theta * eps_neg`` give ``P(C=1) = alpha * P(R=1) + beta``.
    """

    theta: np.ndarray
    eps_pos: np.ndarray
    eps_neg: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float) for a in (self.theta, self.eps_pos, self.eps_neg)]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise ValueError("theta, eps_pos, eps_neg must be equal-length vectors")
        for a in arrs:
            if np.any(a < 0) or np.any(a > 1):
                raise ValueError("bias probabilities must lie in [0, 1]")
        if np.any(arrs[2] >= arrs[1]):
            raise ValueError("need eps_neg < eps_pos at every position")
        for name, a in zip(("theta", "eps_pos", "eps_neg"), arrs):
            object.__setattr__(self, name, a)

    @property
    def m(self) -> int:
        return len(self.theta)

    @property
    def alpha(self) -> np.ndarray:
        return self.theta * (self.eps_pos - self.eps_neg)

    @property
    def beta(self) -> np.ndarray:
        return self.theta * self.eps_neg

    def click_prob(self, gamma, position):
        """``alpha_k * gamma + beta_k`` for 1-based ``position``."""
        k = np.asarray(position) - 1
        return self.alpha[k] * gamma + self.beta[k]

    def truncated(self, m: int) -> "BiasProfile":
        return BiasProfile(self.theta[:m], self.eps_pos[:m], self.eps_neg[:m])


def trust_bias_eps(m: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(1, m + 1)
    eps_pos = 1.0 - (np.minimum(k, 20) + 1) / 100.0
    eps_neg = 0.65 / np.minimum(k, 10)
    return eps_pos, eps_neg


def build_bias_profile(eta: float, m: int) -> BiasProfile:
    """``theta_k = k**-eta`` with the standard trust-bias click conditionals."""
    if eta < 0 or m < 1:
        raise ValueError("need eta >= 0 and m >= 1")
    k = np.arange(1, m + 1, dtype=float)
    eps_pos, eps_neg = trust_bias_eps(m)
    return BiasProfile(k**-eta, eps_pos, eps_neg)


# -- production ranker ------------------------------------------------------


def least_squares_ranker(X: np.ndarray, y: np.ndarray) -> RankerModel:
    A = np.column_stack([X, np.ones(len(X))])
    gram = A.T @ A
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        gram = gram + RIDGE_FALLBACK * np.eye(gram.shape[0])
    sol = np.linalg.solve(gram, A.T @ y)
    return RankerModel(sol[:-1], sol[-1])


def train_production_ranker(dataset: Dataset, n_queries: int = 20, seed: int = 0) -> RankerModel:
    """Pointwise least squares of grade on features over a random query sample."""
    if not 1 <= n_queries <= len(dataset):
        raise ValueError(f"n_queries must be in [1, {len(dataset)}]")
    picked = np.sort(np.random.default_rng(seed).choice(len(dataset), n_queries, replace=False))
    X = np.concatenate([dataset.queries[i].features for i in picked])
    y = np.concatenate([dataset.queries[i].grades for i in picked]).astype(float)
    return least_squares_ranker(X, y)


def rank_topm(model: RankerModel, query: Query, m: int) -> np.ndarray:
    """Doc ids by descending score (ties: ascending doc id), cut at ``m``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return rank(model.score(query.features))[:m]


def ranked_lists_for(model: RankerModel, dataset: Dataset, m: int) -> list[np.ndarray]:
    return [rank_topm(model, q, m) for q in dataset.queries]


# -- session logs -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SessionLog:
    """Column-oriented click log, one row per impression.

    ``query`` indexes ``qids`` (and the dataset the log was simulated on);
    rows are ordered by (query, session, position).
    """

    session: np.ndarray
    query: np.ndarray
    position: np.ndarray
    doc: np.ndarray
    click: np.ndarray
    qids: tuple
    ranked_lists: list

    def __len__(self) -> int:
        return len(self.click)

    def __eq__(self, other):
        if not isinstance(other, SessionLog):
            return NotImplemented
        cols = ("session", "query", "position", "doc", "click")
        return self.qids == other.qids and all(
            np.array_equal(getattr(self, c), getattr(other, c)) for c in cols
        )

    @property
    def m(self) -> int:
        return int(self.position.max()) if len(self) else 0

    @property
    def n_clicks(self) -> int:
        return int(self.click.sum())

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("session_id\tqid\tposition\tdoc_id\tclicked\n")
        qids = np.asarray(self.qids, dtype=object)[self.query]
        for row in zip(self.session.tolist(), qids, self.position.tolist(), self.doc.tolist(), self.click.tolist()):
            buf.write("%d\t%s\t%d\t%d\t%d\n" % row)
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text, qids: Sequence[str] | None = None) -> "SessionLog":
        """Read the TSV form. ``qids`` fixes the query index order (e.g. a dataset's)."""
        if isinstance(text, str):
            text = io.StringIO(text)
        reader = csv.reader(text, delimiter="\t")
        header = next(reader, None)
        if header != ["session_id", "qid", "position", "doc_id", "clicked"]:
            raise ValueError(f"unexpected session log header {header!r}")
        rows = list(reader)
        if qids is None:
            qids = list(dict.fromkeys(r[1] for r in rows))
        qindex = {q: i for i, q in enumerate(qids)}
        try:
            session = np.array([int(r[0]) for r in rows], dtype=np.int64)
            query = np.array([qindex[r[1]] for r in rows], dtype=np.int64)
            position = np.array([int(r[2]) for r in rows], dtype=np.int64)
            doc = np.array([int(r[3]) for r in rows], dtype=np.int64)
            click = np.array([int(r[4]) for r in rows], dtype=np.int8)
        except KeyError as exc:
            raise ValueError(f"qid {exc} not in the given qid list") from None
        lists: list = [np.zeros(0, dtype=np.int64) for _ in qids]
        order = np.lexsort((position, session, query))
        session, query, position, doc, click = (a[order] for a in (session, query, position, doc, click))
        first = {}
        for i, (q, s) in enumerate(zip(query.tolist(), session.tolist())):
            first.setdefault(q, s)
        for q, s in first.items():
            sel = (query == q) & (session == s)
            lists[q] = doc[sel][np.argsort(position[sel])]
        return cls(session, query, position, doc, click, tuple(qids), lists)


def _assemble(blocks, qids, ranked_lists) -> SessionLog:
    """Stack per-query (n_sessions, L) click blocks into a SessionLog."""
    sess, qry, pos, doc, clk = [], [], [], [], []
    for qi, C in blocks:
        n, L = C.shape
        sess.append(np.repeat(np.arange(n), L))
        qry.append(np.full(n * L, qi))
        pos.append(np.tile(np.arange(1, L + 1), n))
        doc.append(np.tile(ranked_lists[qi], n))
        clk.append(C.ravel())
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dtype=dt)
    return SessionLog(
        cat(sess, np.int64),
        cat(qry, np.int64),
        cat(pos, np.int64),
        cat(doc, np.int64),
        cat(clk, np.int8),
        tuple(qids),
        list(ranked_lists),
    )


def _query_rng(seed: int, qi: int) -> np.random.Generator:
    return np.random.default_rng([seed, qi])


def _check_inputs(ranked_lists, gamma, m_needed, m_have, n_sessions):
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    if m_needed > m_have:
        raise ValueError(f"parameters cover {m_have} positions, lists need {m_needed}")
    if len(gamma) < len(ranked_lists):
        raise ValueError("gamma does not cover every query")


def _default_qids(n):
    return tuple(str(i) for i in range(n))


def simulate_pbm(ranked_lists, gamma, profile: BiasProfile, n_sessions: int, seed: int, qids=None) -> SessionLog:
    """Position-based model with trust bias.

    Per session the binary relevance of each shown doc is drawn from
    ``gamma``; an examined doc is clicked with ``eps_pos`` or ``eps_neg``.
    """
    m = max((len(r) for r in ranked_lists), default=0)
    _check_inputs(ranked_lists, gamma, m, profile.m, n_sessions)
    blocks = []
    for qi, docs in enumerate(ranked_lists):
        L = len(docs)
        if L == 0:
            continue
        rng = _query_rng(seed, qi)
        g = np.asarray(gamma[qi])[docs]
        R = rng.random((n_sessions, L)) < g
        E = rng.random((n_sessions, L)) < profile.theta[:L]
        eps = np.where(R, profile.eps_pos[:L], profile.eps_neg[:L])
        C = E & (rng.random((n_sessions, L)) < eps)
        blocks.append((qi, C))
    return _assemble(blocks, qids or _default_qids(len(ranked_lists)), ranked_lists)


def simulate_dcm(
    ranked_lists,
    gamma,
    continuation,
    n_sessions: int,
    seed: int,
    eps_pos=None,
    eps_neg=None,
    qids=None,
) -> SessionLog:
    """Dependent click model: top-down scan, position 1 always examined.

    After a click at k the user goes on with probability ``continuation[k-1]``;
    after a skip they always go on.
    """
    lam = np.asarray(continuation, dtype=float)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("continuation probabilities must lie in [0, 1]")
    m = max((len(r) for r in ranked_lists), default=0)
    _check_inputs(ranked_lists, gamma, m, len(lam), n_sessions)
    if eps_pos is None or eps_neg is None:
        eps_pos, eps_neg = trust_bias_eps(max(m, 1))
    blocks = []
    for qi, docs in enumerate(ranked_lists):
        L = len(docs)
        if L == 0:
            continue
        rng = _query_rng(seed, qi)
        g = np.asarray(gamma[qi])[docs]
        R = rng.random((n_sessions, L)) < g
        U_click = rng.random((n_sessions, L))
        U_cont = rng.random((n_sessions, L))
        C = np.zeros((n_sessions, L), dtype=bool)
        examined = np.ones(n_sessions, dtype=bool)
        for k in range(L):
            eps = np.where(R[:, k], eps_pos[k], eps_neg[k])
            C[:, k] = examined & (U_click[:, k] < eps)
            examined &= ~C[:, k] | (U_cont[:, k] < lam[k])
        blocks.append((qi, C))
    return _assemble(blocks, qids or _default_qids(len(ranked_lists)), ranked_lists)


def default_dcm_continuation(m: int, value: float = 0.65) -> np.ndarray:
    return np.full(m, value)


def default_ubm_matrix(m: int, power: float = 0.9) -> np.ndarray:
    """``M[k-1, j] = (k - j)**-power`` for last-click position ``j < k`` (0 = none)."""
    M = np.full((m, m), np.nan)
    for k in range(1, m + 1):
        j = np.arange(k)
        M[k - 1, :k] = np.clip((k - j) ** -power, 0.0, 1.0)
    return M


def _check_ubm(M, m):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] < m or M.shape[1] < m:
        raise ValueError(f"UBM matrix must be at least {m}x{m}")
    lower = M[np.tril_indices(m)]
    if np.any(~np.isfinite(lower)) or np.any(lower < 0) or np.any(lower > 1):
        raise ValueError("UBM examination probabilities must lie in [0, 1]")
    return M


def simulate_ubm(
    ranked_lists,
    gamma,
    exam_matrix,
    n_sessions: int,
    seed: int,
    eps_pos=None,
    eps_neg=None,
    qids=None,
) -> SessionLog:
    """User browsing model.

    Position k is examined with ``exam_matrix[k-1, j]`` where ``j`` is the
    most recent click position above k (0 if none). Only the lower triangle
    ``j <= k-1`` is ever read.
    """
    m = max((len(r) for r in ranked_lists), default=0)
    _check_inputs(ranked_lists, gamma, m, np.shape(exam_matrix)[0], n_sessions)
    M = _check_ubm(exam_matrix, m)
    if eps_pos is None or eps_neg is None:
        eps_pos, eps_neg = trust_bias_eps(max(m, 1))
    blocks = []
    for qi, docs in enumerate(ranked_lists):
        L = len(docs)
        if L == 0:
            continue
        rng = _query_rng(seed, qi)
        g = np.asarray(gamma[qi])[docs]
        R = rng.random((n_sessions, L)) < g
        U_exam = rng.random((n_sessions, L))
        U_click = rng.random((n_sessions, L))
        C = np.zeros((n_sessions, L), dtype=bool)
        last = np.zeros(n_sessions, dtype=np.int64)
        for k in range(L):
            E = U_exam[:, k] < M[k, last]
            eps = np.where(R[:, k], eps_pos[k], eps_neg[k])
            C[:, k] = E & (U_click[:, k] < eps)
            last = np.where(C[:, k], k + 1, last)
        blocks.append((qi, C))
    return _assemble(blocks, qids or _default_qids(len(ranked_lists)), ranked_lists)


# -- CTR aggregation --------------------------------------------------------


@dataclass(frozen=True)
class Grouping:
    """Assignment of every log record to one of ``keys``."""

    keys: list
    index: np.ndarray


@dataclass(frozen=True, eq=False)
class CtrTable:
    """Per (group, query, doc): sessions ``n``, clicks ``c``, CTR ``c / n``."""

    keys: list
    group: np.ndarray
    query: np.ndarray
    doc: np.ndarray
    n: np.ndarray
    c: np.ndarray
    qids: tuple

    def __len__(self) -> int:
        return len(self.n)

    @property
    def ctr(self) -> np.ndarray:
        return self.c / self.n

    def entry(self, key: Hashable, qi: int, doc: int):
        gi = self.keys.index(key)
        sel = np.flatnonzero((self.group == gi) & (self.query == qi) & (self.doc == doc))
        if not len(sel):
            return None
        i = sel[0]
        return int(self.n[i]), int(self.c[i]), float(self.c[i] / self.n[i])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group_key", "qid", "doc_id", "n", "c", "ctr"])
        for g, q, d, n, c in zip(self.group, self.query, self.doc, self.n, self.c):
            w.writerow([str(self.keys[g]), self.qids[q], d, n, c, repr(c / n)])
        return buf.getvalue()


def aggregate_ctr(log: SessionLog, grouping: Grouping) -> CtrTable:
    """Count sessions and clicks per (group, query, doc). Absent triples have no entry."""
    if len(grouping.index) != len(log):
        raise ValueError("grouping must assign every record")
    n_q = max(len(log.qids), 1)
    n_d = int(log.doc.max()) + 1 if len(log) else 1
    code = (grouping.index.astype(np.int64) * n_q + log.query) * n_d + log.doc
    uniq, inverse = np.unique(code, return_inverse=True)
    n = np.bincount(inverse, minlength=len(uniq)).astype(np.int64)
    c = np.bincount(inverse, weights=log.click, minlength=len(uniq)).astype(np.int64)
    doc = uniq % n_d
    rest = uniq // n_d
    return CtrTable(list(grouping.keys), rest // n_q, rest % n_q, doc, n, c, log.qids)
