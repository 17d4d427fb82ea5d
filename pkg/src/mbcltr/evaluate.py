"""NDCG@k and paired significance tests over repeated runs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import stats

from .data import Dataset
from .ltr import RankerModel, rank


def dcg(gains_in_order: np.ndarray, k: int) -> float:
    g = np.asarray(gains_in_order, dtype=float)[:k]
    if g.size == 0:
        return 0.0
    return float(np.sum((2.0**g - 1.0) / np.log2(np.arange(2, g.size + 2))))


def ndcg_at_k(ranking, grades, k: int = 10) -> float:
    """NDCG@k with gain ``2**grade - 1`` and ``log2(i + 1)`` discount.

    ``grades`` maps doc_id -> grade (a dict or an array indexed by doc_id).
    The ideal ordering uses the full grade multiset; 0 when it is zero.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    try:
        ranked = np.array([grades[d] for d in ranking], dtype=float)
    except (KeyError, IndexError) as exc:
        raise KeyError(f"missing grade for ranked doc {exc}") from None
    all_grades = np.asarray(list(grades.values()) if isinstance(grades, dict) else grades, dtype=float)
    ideal = dcg(np.sort(all_grades)[::-1], k)
    if ideal == 0.0:
        return 0.0
    return dcg(ranked, k) / ideal


def mean_ndcg(model: RankerModel, dataset: Dataset, k: int = 10) -> float:
    vals = [ndcg_at_k(rank(model.score(q.features)), q.grades, k) for q in dataset.queries]
    return float(np.mean(vals))


def paired_ttest(a, b) -> float:
    """Two-sided paired t-test p-value.

    Zero variance of the differences gives 0 when the means differ, 1 otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    d = a - b
    if np.all(d == d[0]):
        return 0.0 if d[0] != 0 else 1.0
    return float(stats.ttest_rel(a, b).pvalue)


def significance_mark(p: float) -> str:
    return "*" if p < 0.01 else ("+" if p < 0.1 else "")


@dataclass
class EvalReport:
    per_run: dict[str, list[float]]
    seeds: list[int]
    k: int = 10
    p_values: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.per_run.values()}
        if len(lengths) > 1:
            raise ValueError("methods have different run counts")
        if not self.p_values and lengths and lengths.pop() >= 2:
            for a, b in combinations(self.per_run, 2):
                self.p_values[(a, b)] = paired_ttest(self.per_run[a], self.per_run[b])

    @property
    def means(self) -> dict[str, float]:
        return {m: float(np.mean(v)) for m, v in self.per_run.items()}

    def p_value(self, a: str, b: str) -> float:
        if (a, b) in self.p_values:
            return self.p_values[(a, b)]
        return self.p_values[(b, a)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "run", "seed", f"ndcg@{self.k}"])
        for m, vals in self.per_run.items():
            for r, (s, v) in enumerate(zip(self.seeds, vals)):
                w.writerow([m, r, s, f"{v:.10f}"])
        return buf.getvalue()

    def pvalues_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method_a", "method_b", "p_value"])
        for (a, b), p in self.p_values.items():
            w.writerow([a, b, f"{p:.10g}"])
        return buf.getvalue()

    def table(self, reference: str = "NoCorrection") -> str:
        """Plain-text summary, one row per method.

        ``*`` / ``+`` mark p < 0.01 / p < 0.1 against ``reference``.
        """
        order = ["NoCorrection", "IPS", "AC", "MBC", "IdealAC", "RelProbs"]
        rows = [m for m in order if m in self.per_run] + [
            m for m in self.per_run if m not in order
        ]
        width = max(len(m) for m in rows) + 2
        lines = [f"{'method':<{width}}NDCG@{self.k}   p vs {reference}"]
        for m in rows:
            mark, p_txt = "", ""
            if m != reference and reference in self.per_run and self.p_values:
                p = self.p_value(m, reference)
                mark, p_txt = significance_mark(p), f"{p:.3g}"
            lines.append(f"{m:<{width}}{self.means[m]:.4f}{mark:<3}  {p_txt}")
        return "\n".join(lines) + "\n"

