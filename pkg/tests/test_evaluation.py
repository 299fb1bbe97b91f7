import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowbridge.errors import ConfigError, DimensionError, DomainError
from flowbridge.evaluation import (
    MetricReport,
    SampleTable,
    bootstrap_metric,
    compare_methods,
    frechet_gaussian,
    jsd_categorical,
    jsd_histogram_1d,
    jsd_joint_histogram,
    load_table,
    mann_whitney_u,
    two_sample_ttest,
    uncertainty_report,
    wasserstein1,
    write_table,
)

LN2 = np.log(2)


def sorted_coupling_w1(a, b):
    # equal sizes: the optimal 1-D plan pairs order statistics
    return np.mean(np.abs(np.sort(a) - np.sort(b)))


def brute_jsd(p, q):
    m = [(x + y) / 2 for x, y in zip(p, q)]
    kl = lambda u, v: sum(ui * np.log(ui / vi) for ui, vi in zip(u, v) if ui > 0)  # noqa: E731
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


class TestWasserstein:
    def test_identical(self):
        x = [3.0, 1.0, 2.0, 2.0]
        assert wasserstein1(x, x[::-1]) == 0.0

    def test_single_points(self):
        assert wasserstein1([0.0], [5.0]) == 5.0

    def test_uniform_shift(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 1, 10_000)
        b = rng.uniform(0, 1, 10_000) + 1
        assert abs(wasserstein1(a, b) - 1.0) < 0.02

    def test_matches_sorted_coupling(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.standard_normal(37), rng.exponential(size=37)
            assert wasserstein1(a, b) == pytest.approx(sorted_coupling_w1(a, b), abs=1e-12)

    def test_empty(self):
        with pytest.raises(DomainError):
            wasserstein1([], [1.0])

    @settings(max_examples=60)
    @given(st.integers(0, 10**6))
    def test_metric_axioms(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (rng.standard_normal(rng.integers(1, 30)) for _ in range(3))
        assert wasserstein1(a, b) == pytest.approx(wasserstein1(b, a), abs=1e-9)
        assert wasserstein1(a, a) == 0.0
        assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-9


class TestJsd:
    def test_equal(self):
        assert jsd_categorical([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == 0.0

    def test_disjoint(self):
        assert jsd_categorical([1, 0], [0, 1]) == pytest.approx(LN2, abs=1e-15)

    def test_half_vs_point_mass(self):
        assert jsd_categorical([0.5, 0.5], [1, 0]) == pytest.approx(brute_jsd([0.5, 0.5], [1, 0]), abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            jsd_categorical([1, 0], [1, 0, 0])

    @settings(max_examples=80)
    @given(st.integers(2, 8), st.integers(0, 10**6))
    def test_symmetric_and_bounded(self, k, seed):
        rng = np.random.default_rng(seed)
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        v = jsd_categorical(p, q)
        assert v == pytest.approx(jsd_categorical(q, p), abs=1e-15)
        assert 0.0 <= v <= LN2
        assert v == pytest.approx(brute_jsd(p, q), abs=1e-12)

    def test_1d_histogram_identical(self):
        x = np.random.default_rng(2).standard_normal(500)
        assert jsd_histogram_1d(x, x) == 0.0


class TestJointHistogram:
    def table(self, a, b):
        return SampleTable({"a": a, "b": b})

    def test_equal(self):
        rng = np.random.default_rng(3)
        t = self.table(rng.standard_normal(200), rng.standard_normal(200))
        assert jsd_joint_histogram(t, t, ["a", "b"]) == 0.0

    def test_disjoint_clusters(self):
        ref = self.table([0.0, 0.05, 0.95, 1.0], [1.0, 0.95, 0.05, 0.0])
        other = self.table([0.0, 0.02, 0.97, 1.0], [0.0, 0.03, 0.98, 1.0])
        assert jsd_joint_histogram(ref, other, ["a", "b"]) == pytest.approx(LN2, abs=1e-15)

    def test_hand_placed_bins(self):
        # edges from the reference span [0, 2] in both columns: 2 bins of width 1 each
        ref = self.table([0.0, 0.5, 1.5, 2.0], [0.0, 1.5, 0.5, 2.0])
        other = self.table([0.2, 0.3, 1.2, -4.0], [0.2, 0.4, 1.9, 9.0])
        # ref cells (a_bin, b_bin): (0,0) (0,1) (1,0) (1,1) -> uniform
        # other cells: (0,0) (0,0) (1,1) (0,1) after clamping the outlier
        p = [0.25, 0.25, 0.25, 0.25]
        q = [0.5, 0.25, 0.0, 0.25]
        assert jsd_joint_histogram(ref, other, ["a", "b"], bins_per_dim=2) == pytest.approx(brute_jsd(p, q), abs=1e-15)

    def test_zero_range(self):
        ref = self.table([1.0, 1.0], [0.0, 1.0])
        with pytest.raises(DomainError):
            jsd_joint_histogram(ref, ref, ["a", "b"])

    def test_missing_column(self):
        t = self.table([0.0, 1.0], [0.0, 1.0])
        with pytest.raises(ConfigError):
            jsd_joint_histogram(t, t, ["a", "c"])


class TestFrechet:
    def test_identical(self):
        x = np.random.default_rng(4).standard_normal((300, 4))
        assert frechet_gaussian(x, x) < 1e-8

    def test_mean_shift(self):
        rng = np.random.default_rng(5)
        assert abs(frechet_gaussian(rng.standard_normal(100_000), 1 + rng.standard_normal(100_000)) - 1) < 0.05

    def test_scale_shift(self):
        rng = np.random.default_rng(6)
        assert abs(frechet_gaussian(rng.standard_normal(100_000), 2 * rng.standard_normal(100_000)) - 1) < 0.05

    def test_matches_1d_formula(self):
        rng = np.random.default_rng(7)
        a, b = rng.standard_normal(50), 3 * rng.standard_normal(60) + 1
        sa, sb = a.std(ddof=1), b.std(ddof=1)
        expected = (a.mean() - b.mean()) ** 2 + (sa - sb) ** 2
        assert frechet_gaussian(a, b) == pytest.approx(expected, rel=1e-10)

    def test_orthogonal_invariance(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((400, 3)) @ rng.standard_normal((3, 3))
        b = rng.standard_normal((300, 3)) + 0.5
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        assert frechet_gaussian(a @ q, b @ q) == pytest.approx(frechet_gaussian(a, b), abs=1e-6)

    def test_errors(self):
        with pytest.raises(DimensionError):
            frechet_gaussian(np.zeros((5, 2)), np.zeros((5, 3)))
        with pytest.raises(DomainError):
            frechet_gaussian(np.zeros((1, 2)), np.zeros((5, 2)))


class TestBootstrap:
    def test_reproducible(self):
        rng = np.random.default_rng(9)
        a, b = rng.standard_normal(800), rng.standard_normal(700) + 0.3
        first = bootstrap_metric(wasserstein1, a, b, rng=np.random.default_rng(42))
        again = bootstrap_metric(wasserstein1, a, b, rng=np.random.default_rng(42))
        assert first == again
        assert first[1] >= 0

    def test_constant_metric(self):
        assert bootstrap_metric(lambda a, b: 3.0, [1.0], np.arange(10.0), rng=0) == (3.0, 0.0)

    def test_resamples_generated_side(self):
        seen = []
        bootstrap_metric(lambda a, b: seen.append((len(a), len(b))) or 0.0, np.arange(7.0), np.arange(3.0),
                         n_boot=4, boot_size=11, rng=0)
        assert seen == [(7, 11)] * 4


class TestSignificance:
    def test_ttest_identical(self):
        x = np.random.default_rng(10).standard_normal(1000)
        assert two_sample_ttest(x, x.copy()) > 0.9

    def test_ttest_separated(self):
        rng = np.random.default_rng(11)
        assert two_sample_ttest(rng.standard_normal(100), 5 + rng.standard_normal(100)) < 1e-10

    def test_ttest_symmetric(self):
        rng = np.random.default_rng(12)
        x, y = rng.standard_normal(30), rng.standard_normal(40) + 0.4
        assert two_sample_ttest(x, y) == two_sample_ttest(y, x)

    def test_mwu_separated(self):
        x = np.arange(50.0)
        assert mann_whitney_u(x, x + 100) < 1e-10

    def test_mwu_identical(self):
        x = np.random.default_rng(13).standard_normal(60)
        assert mann_whitney_u(x, x.copy()) > 0.9

    def test_mwu_monotone_invariance(self):
        rng = np.random.default_rng(14)
        x, y = rng.standard_normal(40), rng.standard_normal(45) + 0.3
        assert mann_whitney_u(np.exp(x), np.exp(y)) == pytest.approx(mann_whitney_u(x, y), abs=1e-15)

    @settings(max_examples=40)
    @given(arrays(np.float64, 12, elements=st.floats(-5, 5)), arrays(np.float64, 9, elements=st.floats(-5, 5)))
    def test_p_values_in_unit_interval(self, x, y):
        assert 0.0 <= mann_whitney_u(x, y) <= 1.0
        assert 0.0 <= two_sample_ttest(x, y) <= 1.0


class TestReports:
    def test_uncertainty_identical_groups(self):
        sigma = np.tile(np.random.default_rng(15).uniform(0.5, 1.5, 100), 2)
        flags = np.repeat([True, False], 100)
        rep = uncertainty_report(sigma, flags, sizes=np.arange(200))
        assert rep.metrics["sigma_shift"]["p_values"]["mann_whitney"] > 0.05
        assert -1 <= rep.metrics["sigma_size_spearman"]["value"] <= 1

    def test_uncertainty_shift(self):
        rng = np.random.default_rng(16)
        sigma = np.concatenate([rng.normal(1, 0.1, 200), rng.normal(1.2, 0.1, 200)])
        flags = np.repeat([True, False], 200)
        rep = uncertainty_report(sigma, flags)
        assert rep.metrics["sigma_shift"]["p_values"]["mann_whitney_greater"] < 0.01
        assert rep.metrics["sigma_ood"]["value"] > rep.metrics["sigma_in_dist"]["value"]

    def test_uncertainty_needs_both_groups(self):
        with pytest.raises(DomainError):
            uncertainty_report([1.0, 2.0], [True, True])

    def test_report_rejects_bad_values(self):
        rep = MetricReport()
        with pytest.raises(DomainError):
            rep.add("x", 1.0, p_values={"a": 1.5})
        with pytest.raises(DomainError):
            rep.add("x", 1.0, boot_std=-1.0)

    def test_compare_methods(self):
        rng = np.random.default_rng(17)
        ref = SampleTable({"u": rng.standard_normal(600), "v": rng.uniform(size=600)},
                          {"k": rng.integers(0, 3, 600)})
        same = ref.subset(np.arange(600))
        other = SampleTable({"u": rng.standard_normal(600) + 1, "v": rng.uniform(size=600)},
                            {"k": rng.integers(0, 2, 600)})
        rep = compare_methods(ref, {"same": same, "other": other}, n_boot=5, boot_size=200)
        for name in ("w1/u", "jsd/u", "jsd/k", "jsd_joint", "frechet"):
            assert rep.metrics[f"same/{name}"]["value"] == pytest.approx(0.0, abs=1e-8)
            assert rep.metrics[f"same/{name}"]["boot_std"] >= 0
            assert rep.metrics[f"other/{name}"]["value"] > 0
            pa = rep.metrics[f"same/{name}"]["p_values"]["other"]
            pb = rep.metrics[f"other/{name}"]["p_values"]["same"]
            assert pa == pb

    def test_table_round_trip(self, tmp_path):
        t = SampleTable({"x": [0.1, 1e-17, 3.0]}, {"lab": ["a", "b", "a"]})
        write_table(t, tmp_path / "t.csv", tmp_path / "t.json")
        back = load_table(tmp_path / "t.csv", tmp_path / "t.json")
        assert np.array_equal(back.continuous["x"], t.continuous["x"])
        assert back.categorical["lab"].tolist() == ["a", "b", "a"]

    def test_table_rejects_ragged_and_nonfinite(self):
        with pytest.raises(DimensionError):
            SampleTable({"x": [1.0, 2.0], "y": [1.0]})
        with pytest.raises(DomainError):
            SampleTable({"x": [1.0, np.nan]})
