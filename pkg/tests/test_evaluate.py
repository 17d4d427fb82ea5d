"""NDCG@k, paired t-tests and the evaluation report."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mbcltr.data import Dataset, Query
from mbcltr.evaluate import EvalReport, mean_ndcg, ndcg_at_k, paired_ttest, significance_mark
from mbcltr.ltr import RankerModel


def brute_force_ndcg(ranking, grades, k):
    """Oracle: DCG of the ranking over the best DCG of any ordering."""

    def dcg(order):
        return sum((2 ** grades[d] - 1) / math.log2(i + 2) for i, d in enumerate(order[:k]))

    best = max(dcg(list(p)) for p in itertools.permutations(range(len(grades))))
    return 0.0 if best == 0 else dcg(list(ranking)) / best


class TestNdcg:
    def test_single_doc(self):
        assert ndcg_at_k([0], [3], 10) == 1.0

    def test_all_zero(self):
        assert ndcg_at_k([0, 1, 2], [0, 0, 0], 10) == 0.0

    def test_three_docs_brute_force(self):
        grades = {2: 0, 0: 3, 3: 2}
        # docs 0, 2, 3 with grades 3, 0, 2; ranked [2, 0, 3]
        relabel = {2: 0, 0: 1, 3: 2}
        dense = [0, 3, 2]
        expected = brute_force_ndcg([relabel[d] for d in [2, 0, 3]], dense, 3)
        assert ndcg_at_k([2, 0, 3], grades, 3) == pytest.approx(expected, rel=1e-12)

    def test_missing_grade(self):
        with pytest.raises(KeyError):
            ndcg_at_k([0, 5], {0: 1}, 2)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            ndcg_at_k([0], [1], 0)

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=6), st.integers(1, 7), st.randoms(use_true_random=False))
    @settings(max_examples=200, deadline=None)
    def test_matches_brute_force(self, grades, k, rnd):
        ranking = list(range(len(grades)))
        rnd.shuffle(ranking)
        assert ndcg_at_k(ranking, grades, k) == pytest.approx(brute_force_ndcg(ranking, grades, k), abs=1e-12)
        assert 0.0 <= ndcg_at_k(ranking, grades, k) <= 1.0 + 1e-12

    @given(st.lists(st.integers(0, 4), min_size=2, max_size=8), st.integers(1, 8), st.data())
    @settings(max_examples=200, deadline=None)
    def test_swapping_better_doc_up_never_hurts(self, grades, k, data):
        ranking = list(range(len(grades)))
        i = data.draw(st.integers(0, len(grades) - 2))
        j = data.draw(st.integers(i + 1, len(grades) - 1))
        if grades[ranking[j]] <= grades[ranking[i]]:
            return
        swapped = ranking.copy()
        swapped[i], swapped[j] = swapped[j], swapped[i]
        assert ndcg_at_k(swapped, grades, k) >= ndcg_at_k(ranking, grades, k) - 1e-12

    @given(st.lists(st.integers(0, 4), min_size=1, max_size=8), st.integers(1, 8), st.randoms(use_true_random=False))
    @settings(max_examples=100, deadline=None)
    def test_relabel_invariance(self, grades, k, rnd):
        ranking = list(range(len(grades)))
        ids = rnd.sample(range(100), len(grades))
        relabelled = {ids[d]: g for d, g in enumerate(grades)}
        assert ndcg_at_k([ids[d] for d in ranking], relabelled, k) == pytest.approx(ndcg_at_k(ranking, grades, k))

    def test_equal_grade_tie_invariance(self):
        grades = [2, 1, 1, 0]
        assert ndcg_at_k([0, 1, 2, 3], grades, 3) == ndcg_at_k([0, 2, 1, 3], grades, 3)

    def test_mean_ndcg_perfect_model(self):
        q = Query("1", np.array([[0.0], [2.0], [1.0]]), np.array([0, 2, 1]))
        assert mean_ndcg(RankerModel(np.array([1.0])), Dataset([q], 1), 10) == 1.0


class TestPairedTTest:
    def test_identical(self):
        a = [0.8, 0.81, 0.79]
        assert paired_ttest(a, a) == 1.0

    def test_constant_difference(self):
        a = np.linspace(0.7, 0.8, 8)
        assert paired_ttest(a + 0.1, a) == 0.0

    def test_cdf_oracle(self):
        a = np.array([0.91, 0.93, 0.90, 0.94, 0.92, 0.95, 0.91, 0.93])
        b = np.array([0.90, 0.91, 0.91, 0.92, 0.90, 0.92, 0.90, 0.91])
        d = a - b
        t = d.mean() / (d.std(ddof=1) / math.sqrt(len(d)))
        expected = 2 * stats.t.sf(abs(t), df=len(d) - 1)
        assert paired_ttest(a, b) == pytest.approx(expected, rel=1e-10)

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=10), st.data())
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, a, data):
        b = data.draw(st.lists(st.floats(0, 1), min_size=len(a), max_size=len(a)))
        assert paired_ttest(a, b) == pytest.approx(paired_ttest(b, a), rel=1e-12)

    def test_bad_lengths(self):
        with pytest.raises(ValueError):
            paired_ttest([0.1], [0.2])
        with pytest.raises(ValueError):
            paired_ttest([0.1, 0.2], [0.2])

    @pytest.mark.parametrize("p,mark", [(0.001, "*"), (0.05, "+"), (0.5, "")])
    def test_marks(self, p, mark):
        assert significance_mark(p) == mark


class TestEvalReport:
    def make(self):
        return EvalReport(
            {"NoCorrection": [0.80, 0.82, 0.81], "MBC": [0.90, 0.91, 0.93]}, seeds=[11, 12, 13], k=10
        )

    def test_means_and_pvalues(self):
        r = self.make()
        assert r.means["MBC"] == pytest.approx(0.9133333, abs=1e-6)
        assert r.p_value("MBC", "NoCorrection") == r.p_value("NoCorrection", "MBC")

    def test_csv(self):
        lines = self.make().to_csv().splitlines()
        assert lines[0] == "method,run,seed,ndcg@10"
        assert len(lines) == 7
        assert lines[1].startswith("NoCorrection,0,11,")

    def test_table_rows_follow_method_order(self):
        text = self.make().table()
        rows = [line.split()[0] for line in text.splitlines()[1:]]
        assert rows == ["NoCorrection", "MBC"]

    def test_unequal_runs(self):
        with pytest.raises(ValueError):
            EvalReport({"a": [0.1, 0.2], "b": [0.1]}, seeds=[0, 1])
