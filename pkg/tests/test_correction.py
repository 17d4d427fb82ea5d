"""Grouping, MBC labels, the affine and IPS baselines and the AC error formula."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbcltr.clicks import SessionLog, aggregate_ctr, build_bias_profile, simulate_pbm
from mbcltr.correction import (
    GroupKey,
    RelevanceEstimates,
    ac_correct,
    ac_expected_error,
    group_cascade,
    group_pbm,
    ips_correct,
    mbc_correct,
    mbc_from_log,
    no_correction,
)
from mbcltr.data import synth_dataset


def make_log(session, query, position, doc, click, n_queries=None):
    q = np.asarray(query, dtype=np.int64)
    n_queries = n_queries or int(q.max()) + 1
    return SessionLog(
        np.asarray(session, dtype=np.int64),
        q,
        np.asarray(position, dtype=np.int64),
        np.asarray(doc, dtype=np.int64),
        np.asarray(click, dtype=np.int64),
        tuple(f"q{i}" for i in range(n_queries)),
        [None] * n_queries,
    )


def single_position_log(probs, n, seed):
    """One doc per query, always at position 1, clicked with ``probs[q]``."""
    rng = np.random.default_rng(seed)
    items = len(probs)
    q = np.repeat(np.arange(items), n)
    c = rng.random(items * n) < np.repeat(probs, n)
    return make_log(np.tile(np.arange(n), items), q, np.ones_like(q), np.zeros_like(q), c)


def first_labels(est):
    return np.array([lab[0] for lab in est.labels])


def simulated(seed=0, n_sessions=30):
    profile = build_bias_profile(1.0, 5)
    rng = np.random.default_rng(seed)
    lists = [rng.permutation(8)[:5] for _ in range(60)]
    gamma = [rng.random(8) for _ in range(60)]
    return simulate_pbm(lists, gamma, profile, n_sessions, seed), profile


class TestGroupPbm:
    def test_fixed_position(self):
        log = make_log([0, 1, 2], [0, 0, 0], [3, 3, 3], [4, 4, 4], [0, 1, 0])
        g = group_pbm(log)
        assert g.keys == [GroupKey(3)]
        assert set(g.index.tolist()) == {0}

    def test_same_doc_two_positions_two_keys(self):
        log = make_log([0, 0, 0, 0], [0, 0, 1, 1], [1, 2, 1, 2], [5, 7, 9, 5], [0, 0, 0, 0])
        g = group_pbm(log)
        keys = {g.keys[i] for i, d in zip(g.index, log.doc) if d == 5}
        assert keys == {GroupKey(1), GroupKey(2)}

    def test_at_most_m_groups(self):
        log, _ = simulated()
        assert len(group_pbm(log).keys) <= log.m

    def test_key_pattern_length(self):
        with pytest.raises(ValueError):
            GroupKey(3, "1")


def toy_cascade_log():
    """Four queries, ten sessions, two positions; rank-1 CTRs 0.9, 0.8, 0.1, 0.2."""
    rank1 = {0: 9, 1: 8, 2: 1, 3: 2}
    rows = []
    for q in range(4):
        for s in range(10):
            rows.append((s, q, 1, 0, int(s < rank1[q])))
            rows.append((s, q, 2, 1, int(s < 3)))
    rows.sort(key=lambda r: (r[1], r[0], r[2]))
    return make_log(*zip(*rows))


class TestGroupCascade:
    def test_rank_one_single_group(self):
        log, _ = simulated()
        g = group_cascade(log, min_group_size=1)
        rank1 = {g.keys[i] for i, p in zip(g.index, log.position) if p == 1}
        assert rank1 == {GroupKey(1, "")}

    def test_toy_split_by_enumeration(self):
        # oracle: queries 0 and 1 have relevant-looking rank-1 docs, 2 and 3 do not,
        # so each pattern holds two rank-2 (query, doc) entries out of four
        log = toy_cascade_log()
        g = group_cascade(log, min_group_size=1)
        table = aggregate_ctr(log, g)
        sizes = {str(table.keys[k]): int(np.sum(table.group == k)) for k in np.unique(table.group)}
        assert sizes == {"1|": 4, "2|0": 2, "2|1": 2}
        rank2_entries = len({(q, d) for q, d, p in zip(log.query, log.doc, log.position) if p == 2})
        assert sizes["2|0"] + sizes["2|1"] == rank2_entries

    def test_constant_pattern_one_group(self):
        rows = []
        for q in range(4):
            for s in range(10):
                rows.append((s, q, 1, 0, int(s < 9 - (q % 2))))
                rows.append((s, q, 2, 1, 0))
        rows.sort(key=lambda r: (r[1], r[0], r[2]))
        log = make_log(*zip(*rows))
        # every rank-1 doc is clicked 80 to 90 percent of the time: merged into one pattern
        g = group_cascade(log, min_group_size=10)
        assert len({g.keys[i] for i, p in zip(g.index, log.position) if p == 2}) == 1

    def test_unordered_log_rejected(self):
        log = make_log([0, 0], [0, 0], [2, 1], [0, 1], [0, 0])
        with pytest.raises(ValueError):
            group_cascade(log)


class TestMbc:
    def test_position_one_accuracy(self):
        # oracle: the binary relevance used to simulate
        rng = np.random.default_rng(3)
        rel = rng.random(1000) < 0.3
        log = single_position_log(np.where(rel, 0.98, 0.65), 50, 4)
        est, _ = mbc_from_log(log, kind="gaussian")
        assert np.mean((first_labels(est) >= 0.5) == rel) >= 0.99

    def test_all_zero_group_labels_zero(self):
        rng = np.random.default_rng(0)
        rows = []
        for q in range(20):
            for s in range(10):
                rows.append((s, q, 1, 0, int(rng.random() < (0.9 if q % 2 else 0.1))))
                rows.append((s, q, 2, 1, 0))
        est, _ = mbc_from_log(make_log(*zip(*rows)))
        np.testing.assert_array_equal([lab[1] for lab in est.labels], 0.0)
        degenerate = [d for d in est.diagnostics if d.get("degenerate")]
        assert [d["group_key"] for d in degenerate] == ["2"]

    def test_all_one_group_labels_one(self):
        log = make_log(np.tile(np.arange(5), 12), np.repeat(np.arange(12), 5), np.ones(60), np.zeros(60), np.ones(60))
        est, _ = mbc_from_log(log)
        np.testing.assert_array_equal(first_labels(est), 1.0)

    @pytest.mark.parametrize("kind", ["gaussian", "binomial"])
    @pytest.mark.parametrize("grouping", ["pbm", "cascade"])
    def test_labels_in_unit_interval(self, kind, grouping):
        log, _ = simulated(1)
        est, _ = mbc_from_log(log, kind=kind, grouping=grouping)
        v = est.values()
        assert len(v) and np.all((v >= 0) & (v <= 1))

    def test_covers_observed_documents(self):
        log, _ = simulated(2)
        est, _ = mbc_from_log(log)
        seen = {(int(q), int(d)) for q, d in zip(log.query, log.doc)}
        assert {(qi, d) for qi, d, _ in est.covered()} == seen

    def test_diagnostics_one_per_fitted_group(self):
        log, _ = simulated(2)
        est, table = mbc_from_log(log)
        members = [m for d in est.diagnostics for m in d["members"]]
        assert sorted(members) == sorted({str(table.keys[g]) for g in table.group})

    def test_mbc_correct_on_table(self):
        log, _ = simulated(5)
        table = aggregate_ctr(log, group_pbm(log))
        a = mbc_correct(table, seed=2)
        b, _ = mbc_from_log(log, seed=2)
        np.testing.assert_array_equal(a.values(), b.values())


class TestAffine:
    def test_position_one_click(self):
        log = make_log([0], [0], [1], [0], [1])
        assert first_labels(ac_correct(log, [0.33], [0.65]))[0] == pytest.approx(0.35 / 0.33)
        assert first_labels(ac_correct(log, [0.33], [0.65]))[0] == pytest.approx(1.0606, abs=1e-4)

    def test_position_one_no_click(self):
        log = make_log([0], [0], [1], [0], [0])
        assert first_labels(ac_correct(log, [0.33], [0.65]))[0] == pytest.approx(-1.9697, abs=1e-4)

    def test_identity(self):
        log, _ = simulated()
        m = log.m
        a = ac_correct(log, np.ones(m), np.zeros(m))
        b = no_correction(log)
        np.testing.assert_allclose(a.values(), b.values(), atol=1e-12)

    def test_nonpositive_alpha(self):
        log = make_log([0, 0], [0, 0], [1, 2], [0, 1], [1, 0])
        with pytest.raises(ValueError):
            ac_correct(log, [0.5, 0.0], [0.1, 0.1])

    def test_mean_of_records_across_positions(self):
        # each record is corrected with its own position's parameters
        log = make_log([0, 1], [0, 0], [1, 2], [0, 0], [1, 0], n_queries=1)
        lab = first_labels(ac_correct(log, [0.5, 0.25], [0.1, 0.05]))[0]
        assert lab == pytest.approx(((1 - 0.1) / 0.5 + (0 - 0.05) / 0.25) / 2)

    def test_labels_unclipped(self):
        log, profile = simulated(3)
        v = ac_correct(log, profile.alpha, profile.beta).values()
        assert v.min() < 0 and v.max() > 1
        assert np.all(np.isfinite(v))

    def test_ideal_ac_unbiased(self):
        profile = build_bias_profile(1.0, 3)
        gamma = 0.4
        N = 100_000
        # doc 0 sits at position 3
        log = simulate_pbm([np.array([1, 2, 0])], [np.array([gamma, 0.2, 0.7])], profile, N, 11)
        lab = ac_correct(log, profile.alpha, profile.beta).labels[0][0]
        a, b = profile.alpha[2], profile.beta[2]
        p = a * gamma + b
        var = p * (1 - p) / a**2
        assert abs(lab - gamma) < 4 * np.sqrt(var / N)


class TestIps:
    def test_definition(self):
        log = make_log([0], [0], [1], [0], [1])
        assert first_labels(ips_correct(log, [0.25]))[0] == 4.0
        log0 = make_log([0], [0], [1], [0], [0])
        assert first_labels(ips_correct(log0, [0.25]))[0] == 0.0

    def test_matches_ac_with_zero_beta(self):
        log, profile = simulated(4)
        a = ips_correct(log, profile.theta)
        b = ac_correct(log, profile.theta, np.zeros(profile.m))
        assert np.array_equal(a.values(), b.values())

    def test_zero_theta_with_click(self):
        log = make_log([0], [0], [1], [0], [1])
        with pytest.raises(ValueError):
            ips_correct(log, [0.0])


class TestAcExpectedError:
    def test_exact_parameters(self):
        assert ac_expected_error(0.7, 0.33, 0.65, 0.33, 0.65) == 0.0

    def test_gamma_zero(self):
        assert ac_expected_error(0.0, 0.33, 0.65, 0.4, 0.6) == pytest.approx(0.05 / 0.4)

    def test_monte_carlo(self):
        # oracle: 10**6 simulated (r, c) draws; 100 items with relevance r (a gamma
        # share relevant), 10**4 clicks c ~ Bernoulli(alpha r + beta) each. The error
        # is taken after averaging r_hat over an item's sessions, the regime where
        # the estimate is expected to converge as sessions grow.
        gamma, alpha, beta, a_est, b_est = 0.7, 0.33, 0.65, 0.40, 0.60
        rng = np.random.default_rng(0)
        r = np.arange(100) < 70
        c = rng.random((100, 10_000)) < (alpha * r + beta)[:, None]
        r_hat = ((c - b_est) / a_est).mean(axis=1)
        mc = np.mean(np.abs(r_hat - r))
        assert ac_expected_error(gamma, alpha, beta, a_est, b_est) == pytest.approx(mc, abs=0.003)

    def test_nonpositive_alpha_est(self):
        with pytest.raises(ValueError):
            ac_expected_error(0.5, 0.3, 0.1, 0.0, 0.1)

    @given(
        st.floats(0.01, 0.99),
        st.floats(0.05, 0.9),
        st.floats(0.0, 0.5),
        st.one_of(st.just(0.0), st.floats(1e-6, 0.04), st.floats(-0.04, -1e-6)),
        st.one_of(st.just(0.0), st.floats(1e-6, 0.04), st.floats(-0.04, -1e-6)),
    )
    @settings(max_examples=200, deadline=None)
    def test_zero_exactly_at_truth_and_continuous(self, gamma, alpha, beta, da, db):
        e = ac_expected_error(gamma, alpha, beta, alpha + da, beta + db)
        assert (e == 0.0) == (da == 0.0 and db == 0.0)
        # Lipschitz bound near the truth: small parameter errors give small label errors
        assert e <= (abs(da) + 2 * abs(db)) / (alpha + da) + 1e-12


class TestNoCorrection:
    @pytest.mark.parametrize("clicks,expected", [([1, 1, 1], 1.0), ([0, 0], 0.0), ([1, 0, 1, 1], 0.75)])
    def test_mean_ctr(self, clicks, expected):
        n = len(clicks)
        log = make_log(range(n), [0] * n, [1] * n, [0] * n, clicks)
        assert first_labels(no_correction(log))[0] == expected

    def test_pooled_over_positions(self):
        log = make_log([0, 1], [0, 0], [1, 2], [0, 0], [1, 0])
        assert first_labels(no_correction(log))[0] == 0.5


def pooled_theta_log(n, seed):
    """Relevant and non-relevant items at one position shown to two session sets
    with examination 0.8 or 0.4; click conditionals 0.96 and 0.1625."""
    rng = np.random.default_rng(seed)
    rel = rng.random(400) < 0.5
    theta = np.where(rng.random(400) < 0.5, 0.8, 0.4)
    probs = theta * np.where(rel, 0.96, 0.1625)
    return single_position_log(probs, n, seed + 100), rel, theta


class TestPooledExamination:
    @pytest.mark.parametrize("kind", ["gaussian", "binomial"])
    @pytest.mark.parametrize("seed", range(5))
    def test_mbc_separates_pooled_sessions(self, kind, seed):
        # every relevant click mean (0.768, 0.384) exceeds every non-relevant one (0.13, 0.065)
        log, rel, _ = pooled_theta_log(500, seed)
        est, _ = mbc_from_log(log, kind=kind)
        assert np.mean((first_labels(est) >= 0.5) == rel) >= 0.99

    def test_averaged_theta_ac_offset(self):
        log, rel, theta = pooled_theta_log(500, 0)
        a = 0.6 * (0.96 - 0.1625)
        b = 0.6 * 0.1625
        labels = first_labels(ac_correct(log, [a], [b]))
        for t in (0.8, 0.4):
            for r, eps in ((True, 0.96), (False, 0.1625)):
                sel = (theta == t) & (rel == r)
                expected = (t * eps - b) / a
                offset = expected - float(r)
                # direct arithmetic: e.g. (0.768 - 0.0975) / 0.4785 - 1 = 0.4013
                se = np.sqrt(t * eps * (1 - t * eps) / 500) / a / np.sqrt(sel.sum())
                assert labels[sel].mean() - float(r) == pytest.approx(offset, abs=4 * se)
                assert abs(offset) > 0.05
        assert (0.768 - b) / a - 1 == pytest.approx(0.4013, abs=1e-4)


class TestSerialization:
    def test_csv_round_trip(self):
        ds = synth_dataset(6, 5, 2, 4, 0)
        profile = build_bias_profile(1.0, 5)
        lists = [np.arange(5)] * 6
        gamma = [q.grades / 4.0 for q in ds.queries]
        log = simulate_pbm(lists, gamma, profile, 20, 0, qids=ds.qids)
        est = ac_correct(log, profile.alpha, profile.beta, dataset=ds)
        back = RelevanceEstimates.from_csv(io.StringIO(est.to_csv()), ds)
        assert back.method == "AC"
        for a, b in zip(est.labels, back.labels):
            np.testing.assert_array_equal(a, b)

    def test_csv_header(self):
        log = make_log([0], [0], [1], [0], [1])
        assert no_correction(log).to_csv().splitlines()[0] == "qid,doc_id,label,method"
