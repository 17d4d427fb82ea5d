"""LETOR/SVMLight ranking datasets, a synthetic generator, and grade transforms."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np


class ParseError(ValueError):
    """Malformed SVMLight input. ``lineno`` is 1-based."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class Query:
    """One query with its candidate documents.

    Documents are identified by their index in ``features`` / ``grades``;
    ``doc_id`` ``i`` is row ``i``.
    """

    qid: str
    features: np.ndarray  # (n_docs, feature_dim)
    grades: np.ndarray  # (n_docs,) int

    @property
    def n_docs(self) -> int:
        return len(self.grades)

    def __eq__(self, other):
        if not isinstance(other, Query):
            return NotImplemented
        return (
            self.qid == other.qid
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.grades, other.grades)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    queries: list[Query]
    feature_dim: int
    y_max: int = 4
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, q in enumerate(self.queries):
            if q.qid in index:
                raise ValueError(f"duplicate qid {q.qid!r}")
            if q.n_docs < 1:
                raise ValueError(f"query {q.qid!r} has no documents")
            if q.features.shape != (q.n_docs, self.feature_dim):
                raise ValueError(f"query {q.qid!r}: feature shape {q.features.shape}")
            if q.grades.min() < 0 or q.grades.max() > self.y_max:
                raise ValueError(f"query {q.qid!r}: grade outside [0, {self.y_max}]")
            index[q.qid] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.queries)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.feature_dim == other.feature_dim
            and self.y_max == other.y_max
            and self.queries == other.queries
        )

    def query_index(self, qid: str) -> int:
        return self._index[qid]

    @property
    def qids(self) -> list[str]:
        return [q.qid for q in self.queries]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.queries[i] for i in indices], self.feature_dim, self.y_max)


# -- SVMLight ---------------------------------------------------------------


def parse_svmlight(text: str | TextIO, y_max: int = 4) -> Dataset:
    """Parse ``<grade> qid:<id> <idx>:<val> ... [# comment]`` lines.

    Documents are grouped by qid in order of first appearance. Feature
    indices are 1-based; unseen indices are zero-filled and the feature
    dimension is the largest index seen.
    """
    if isinstance(text, str):
        text = io.StringIO(text)

    order: list[str] = []
    rows: dict[str, list[tuple[dict[int, float], int]]] = {}
    max_index = 0
    for lineno, raw in enumerate(text, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise ParseError(lineno, "expected '<grade> qid:<id> ...'")
        try:
            grade = int(tokens[0])
        except ValueError:
            raise ParseError(lineno, f"non-integer grade {tokens[0]!r}") from None
        if not 0 <= grade <= y_max:
            raise ParseError(lineno, f"grade {grade} outside [0, {y_max}]")
        head, _, qid = tokens[1].partition(":")
        if head != "qid" or not qid:
            raise ParseError(lineno, f"expected qid:<id>, got {tokens[1]!r}")

        feats: dict[int, float] = {}
        for tok in tokens[2:]:
            idx_s, sep, val_s = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise ParseError(lineno, f"bad feature token {tok!r}") from None
            if idx < 1:
                raise ParseError(lineno, f"feature index {idx} < 1")
            if idx in feats:
                raise ParseError(lineno, f"duplicate feature index {idx}")
            feats[idx] = val
            max_index = max(max_index, idx)

        if qid not in rows:
            rows[qid] = []
            order.append(qid)
        rows[qid].append((feats, grade))

    queries = []
    for qid in order:
        docs = rows[qid]
        X = np.zeros((len(docs), max_index))
        for i, (feats, _) in enumerate(docs):
            for idx, val in feats.items():
                X[i, idx - 1] = val
        grades = np.array([g for _, g in docs], dtype=np.int64)
        queries.append(Query(qid, X, grades))
    return Dataset(queries, max_index, y_max)


def load_svmlight(path, y_max: int = 4) -> Dataset:
    with open(path) as fh:
        return parse_svmlight(fh, y_max=y_max)


def serialize_svmlight(dataset: Dataset) -> str:
    """Inverse of :func:`parse_svmlight`; indices ascend.

    Zeros are omitted except in the last column, which is always written so
    the feature dimension survives. Values use ``repr`` and round-trip exactly.
    """
    out = []
    last = dataset.feature_dim - 1
    for q in dataset.queries:
        for x, g in zip(q.features, q.grades):
            toks = [str(int(g)), f"qid:{q.qid}"]
            toks += [f"{j + 1}:{float(v)!r}" for j, v in enumerate(x) if v != 0.0 or j == last]
            out.append(" ".join(toks))
    return "\n".join(out) + ("\n" if out else "")


# -- synthetic data ---------------------------------------------------------

# Std of the noise added to the hidden score before binning.
SYNTH_NOISE = 0.35
# Share of each feature's variance that is common to all documents of a query.
SYNTH_QUERY_SHARE = 0.3
# Weight of the query-level relevance shift (along a direction orthogonal to
# the document-level weight). Together with the noise this keeps a
# least-squares fit of grade on features at training NDCG@10 >= 0.85 on
# (200, 20, 5, 4, 7) while a pointwise fit ranks worse within queries than a
# pairwise one.
SYNTH_QUERY_SHIFT = 1.0


def synth_dataset(
    n_queries: int,
    docs_per_query: int,
    feature_dim: int,
    y_max: int = 4,
    seed: int = 0,
    noise: float = SYNTH_NOISE,
    query_share: float = SYNTH_QUERY_SHARE,
    query_shift: float = SYNTH_QUERY_SHIFT,
) -> Dataset:
    """Desk-scale stand-in for a LETOR dataset.

    Each feature vector is ``sqrt(1 - s) z + sqrt(s) u_q`` with ``z`` drawn per
    document and ``u_q`` per query (both standard normal, ``s = query_share``),
    so features stay standard normal marginally. The hidden score is
    ``w . x + query_shift * (v . u_q)`` plus Gaussian noise, with ``w`` and ``v``
    orthogonal unit vectors; it is binned into ``y_max + 1`` equal-mass grade
    levels over the whole dataset.

    The query-level term makes some queries richer in relevant documents
    than others. It cannot change the order within a query, but it pulls a
    pointwise regression away from ``w``; that is the weakness a click-trained
    ranker can improve on.
    """
    if min(n_queries, docs_per_query, feature_dim) < 1 or y_max < 1:
        raise ValueError("all counts must be positive")
    if not 0.0 <= query_share < 1.0:
        raise ValueError("query_share must be in [0, 1)")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(feature_dim)
    w /= np.linalg.norm(w)
    v = rng.standard_normal(feature_dim)
    v -= (v @ w) * w
    norm_v = np.linalg.norm(v)
    v = v / norm_v if norm_v > 1e-12 else np.zeros(feature_dim)
    U = rng.standard_normal((n_queries, 1, feature_dim))
    Z = rng.standard_normal((n_queries, docs_per_query, feature_dim))
    X = np.sqrt(1.0 - query_share) * Z + np.sqrt(query_share) * U
    score = X @ w + query_shift * (U @ v) + noise * rng.standard_normal((n_queries, docs_per_query))
    flat = score.ravel()
    if flat.size > 1:
        edges = np.quantile(flat, np.arange(1, y_max + 1) / (y_max + 1))
        grades = np.searchsorted(edges, score, side="right")
    else:
        grades = np.full_like(score, y_max // 2, dtype=np.int64)
    width = len(str(n_queries))
    queries = [
        Query(str(i + 1).zfill(width), X[i], grades[i].astype(np.int64))
        for i in range(n_queries)
    ]
    return Dataset(queries, feature_dim, y_max)


def split_dataset(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random query-level train/test split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    n = len(dataset)
    n_test = max(1, int(round(n * test_fraction)))
    if n_test >= n:
        raise ValueError("dataset too small to split")
    perm = np.random.default_rng(seed).permutation(n)
    test = sorted(perm[:n_test])
    train = sorted(perm[n_test:])
    return dataset.subset(train), dataset.subset(test)


# -- grade transforms -------------------------------------------------------


def _check_grade(grade, y_max):
    g = np.asarray(grade)
    if np.any(g < 0) or np.any(g > y_max):
        raise ValueError(f"grade outside [0, {y_max}]")
    return g


def binarize_grades(grade, y_max: int):
    """1 iff ``grade > y_max / 2``. Works on scalars and arrays."""
    g = _check_grade(grade, y_max)
    out = (g > y_max / 2).astype(float)
    return float(out) if out.ndim == 0 else out


def graded_grades(grade, y_max: int):
    """Linear map ``grade / y_max``."""
    if y_max == 0:
        raise ValueError("y_max must be positive")
    g = _check_grade(grade, y_max)
    out = g / float(y_max)
    return float(out) if np.ndim(out) == 0 else out


TRANSFORMS = {"binarized": binarize_grades, "graded": graded_grades}


def relevance_probs(dataset: Dataset, transform: str = "binarized") -> list[np.ndarray]:
    """Per-query arrays of P(R=1), aligned with ``dataset.queries``."""
    fn = TRANSFORMS[transform]
    return [np.asarray(fn(q.grades, dataset.y_max), dtype=float) for q in dataset.queries]


def stack_features(dataset: Dataset, queries: Sequence[int] | None = None) -> np.ndarray:
    idx = range(len(dataset)) if queries is None else queries
    return np.concatenate([dataset.queries[i].features for i in idx], axis=0)
