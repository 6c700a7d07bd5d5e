import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from halopatch.stats import (
    AuditReport,
    ConcentrationReport,
    audit,
    bootstrap_ci,
    gini,
    median_of_ratios,
    sign_test_floor,
    topq_share,
)


def brute_force_gini(x):
    x = np.asarray(x, dtype=float)
    n = x.size
    total = x.sum()
    if total == 0:
        return 0.0
    acc = 0.0
    for i in range(n):
        for j in range(n):
            acc += abs(x[i] - x[j])
    return acc / (2 * n * total)


class TestAudit:
    def test_published_style_triple(self):
        a, j, total = audit(1.0, 0.0714, 0.0047)
        assert a == pytest.approx(0.9286, abs=1e-4)
        assert j == pytest.approx(0.9342, abs=1e-4)
        assert total == pytest.approx(0.9953, abs=1e-4)
        assert total == pytest.approx(a + (1 - a) * j, abs=1e-12)

    def test_no_local_gain(self):
        a, j, total = audit(2.0, 0.5, 0.5)
        assert j == 0.0
        assert total == pytest.approx(a, abs=1e-15)

    def test_no_global_gain(self):
        a, j, total = audit(1.0, 1.0, 0.25)
        assert a == 0.0
        assert total == pytest.approx(j, abs=1e-15)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            audit(0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            audit(1.0, -0.1, 0.0)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_identity_on_random_aggregates(self, seed):
        rng = np.random.default_rng(seed)
        l_raw = rng.uniform(0.1, 10.0, size=32)
        l_glob = rng.uniform(0.01, 10.0, size=32)
        l_hyb = rng.uniform(0.0, 10.0, size=32)
        a, j, total = audit(l_raw, l_glob, l_hyb)
        assert np.max(np.abs(total - (a + (1 - a) * j))) < 1e-12


class TestMedianOfRatios:
    def test_equal_losses(self):
        assert median_of_ratios([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0

    def test_odd_count(self):
        assert median_of_ratios([0.1, 0.2, 0.3], [1.0, 1.0, 1.0]) == pytest.approx(0.2)

    def test_even_count_mean_of_middle(self):
        assert median_of_ratios([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1]) == pytest.approx(2.5)

    def test_distinct_from_ratio_of_medians(self):
        m = np.array([1.0, 20.0])
        r = np.array([2.0, 10.0])
        mor = median_of_ratios(m, r)
        rom = np.median(m) / np.median(r)
        assert mor == pytest.approx(1.25)
        assert rom == pytest.approx(1.75)
        assert mor != rom

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            median_of_ratios([1.0], [1.0, 2.0])


class TestBootstrap:
    def test_constant_data(self):
        lo, hi = bootstrap_ci([3.0] * 8, n_boot=200, seed=0)
        assert lo == 3.0 and hi == 3.0

    def test_deterministic_given_seed(self):
        data = np.random.default_rng(0).uniform(0.5, 2.0, size=12)
        a = bootstrap_ci(data, n_boot=500, seed=42)
        b = bootstrap_ci(data, n_boot=500, seed=42)
        assert a == b
        c = bootstrap_ci(data, n_boot=500, seed=43)
        assert a != c

    def test_percentile_property_brackets_median(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            data = rng.uniform(0.1, 3.0, size=rng.integers(5, 20))
            lo, hi = bootstrap_ci(data, n_boot=400, seed=int(rng.integers(1 << 30)))
            med = float(np.median(data))
            assert lo <= med <= hi

    def test_default_replicate_count(self):
        import inspect

        sig = inspect.signature(bootstrap_ci)
        assert sig.parameters["n_boot"].default == 10000

    def test_width_shrinks_with_sample_size(self):
        rng = np.random.default_rng(2)
        widths = {}
        for n in (8, 64):
            ws = []
            for seed in range(20):
                data = rng.normal(1.0, 0.3, size=n)
                lo, hi = bootstrap_ci(data, n_boot=400, seed=seed)
                ws.append(hi - lo)
            widths[n] = float(np.median(ws))
        assert widths[64] < widths[8]


class TestSignTestFloor:
    def test_eight_pairs(self):
        assert sign_test_floor(8) == 0.0078125

    def test_single_pair(self):
        assert sign_test_floor(1) == 1.0

    def test_ten_pairs(self):
        assert sign_test_floor(10) == 2.0 / 1024.0


class TestGini:
    def test_uniform_is_zero(self):
        assert gini(np.ones(64)) == pytest.approx(0.0, abs=1e-15)

    def test_point_mass(self):
        x = np.zeros(64)
        x[10] = 5.0
        assert gini(x) == pytest.approx(63.0 / 64.0, rel=1e-12)

    def test_zero_sum_convention(self):
        assert gini(np.zeros(16)) == 0.0

    def test_matches_brute_force_on_200_random_vectors(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            x = rng.uniform(0.0, 1.0, size=rng.integers(2, 40))
            assert gini(x) == pytest.approx(brute_force_gini(x), abs=1e-12)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            gini([-1.0, 2.0])


class TestTopqShare:
    def test_uniform_64_blocks(self):
        assert topq_share(np.ones(64), 0.2) == pytest.approx(13.0 / 64.0, rel=1e-12)

    def test_point_mass(self):
        x = np.zeros(32)
        x[5] = 2.0
        assert topq_share(x, 0.01) == 1.0

    def test_full_fraction(self):
        x = np.random.default_rng(4).uniform(0, 1, 64)
        assert topq_share(x, 1.0) == pytest.approx(1.0, rel=1e-12)

    def test_accepts_unnormalized(self):
        x = np.array([1.0, 1.0, 6.0, 0.0])
        assert topq_share(x, 0.25) == pytest.approx(0.75)


class TestReports:
    def test_concentration_report(self):
        e = np.zeros(64)
        e[0] = 1.0
        rep = ConcentrationReport.from_energies(e)
        assert rep.gini == pytest.approx(63 / 64)
        assert rep.top20_share == 1.0
        assert rep.shares.sum() == pytest.approx(1.0)

    def test_audit_report_identity_and_summary(self):
        rng = np.random.default_rng(5)
        raw = rng.uniform(1.0, 2.0, 8)
        glob = raw * rng.uniform(0.05, 0.2, 8)
        hyb = glob * rng.uniform(0.3, 0.9, 8)
        rep = AuditReport(l_raw=raw, l_glob=glob, l_hyb=hyb)
        assert np.max(np.abs(rep.total - (rep.a + (1 - rep.a) * rep.j_loc))) < 1e-12
        summary = rep.summary(n_boot=200, seed=0)
        assert summary["n_runs"] == 8
        assert summary["sign_test_floor"] == 0.0078125
        assert summary["ci_hyb"][0] <= summary["median_ratio_hyb"] <= summary["ci_hyb"][1]
