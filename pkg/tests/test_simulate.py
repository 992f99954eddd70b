import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gpskygrid import coalescent, simulate
from gpskygrid.simulate import SimSpec


class TestSimSpec:
    def test_validation(self):
        with pytest.raises(ValueError, match="two sampled"):
            SimSpec.isochronous(1)
        with pytest.raises(ValueError, match="youngest"):
            SimSpec(np.array([0.5, 1.0]), np.array([2, 2]), np.array([]), np.array([0.0]))
        with pytest.raises(ValueError, match="one log-Ne"):
            SimSpec(np.array([0.0]), np.array([3]), np.array([1.0]), np.array([0.0]))
        with pytest.raises(ValueError, match="increasing"):
            SimSpec(np.array([0.0]), np.array([3]), np.array([2.0, 1.0]), np.zeros(3))

    def test_sorted(self):
        s = SimSpec(np.array([1.0, 0.0]), np.array([1, 3]), np.array([]), np.array([0.0]))
        np.testing.assert_array_equal(s.sampling_times, [0.0, 1.0])
        np.testing.assert_array_equal(s.sampling_counts, [3, 1])


class TestCumulativeIntensity:
    def test_inverse(self):
        lam = simulate.CumulativeIntensity([1.0, 2.5], [0.0, math.log(4.0), -1.0])
        for t in (0.0, 0.3, 1.0, 1.7, 2.5, 9.0):
            assert lam.inverse(lam(t)) == pytest.approx(t, abs=1e-12)
        assert lam(2.0) == pytest.approx(1.0 + 0.25)


class TestSimulateTree:
    def test_two_tip_exponential_mean(self):
        rng = np.random.default_rng(0)
        t = simulate.tmrca_samples(SimSpec.constant(2), 100_000, rng)
        se = t.std(ddof=1) / math.sqrt(t.size)
        assert abs(t.mean() - 1.0) < 3 * se

    def test_piecewise_survival(self):
        spec = SimSpec.isochronous(2, [1.0], [0.0, math.log(100.0)])
        t = simulate.tmrca_samples(spec, 20000, np.random.default_rng(1))
        p = 1 - math.exp(-1)
        frac = np.mean(t <= 1.0)
        assert abs(frac - p) < 4 * math.sqrt(p * (1 - p) / t.size)

    def test_inter_coalescent_times_exponential(self):
        rng = np.random.default_rng(2)
        n, ne = 6, 2.5
        spec = SimSpec.constant(n, ne)
        scaled = {k: [] for k in range(2, n + 1)}
        for _ in range(10_000):
            tree = simulate.simulate_tree(spec, rng, validate=False)
            h = np.concatenate(([0.0], np.sort(tree.internal_heights())))
            for i, k in enumerate(range(n, 1, -1)):
                scaled[k].append((h[i + 1] - h[i]) * k * (k - 1) / 2 / ne)
        for k, x in scaled.items():
            assert stats.kstest(x, "expon").pvalue > 0.001

    def test_heterochronous_jump(self):
        # one tip at 0 and one at 5: nothing can coalesce before 5
        spec = SimSpec(np.array([0.0, 5.0]), np.array([1, 1]), np.array([]), np.array([0.0]))
        t = simulate.tmrca_samples(spec, 500, np.random.default_rng(3))
        assert np.all(t > 5.0)

    @given(st.integers(0, 10**6))
    @settings(max_examples=40, deadline=None)
    def test_trees_are_valid(self, seed):
        rng = np.random.default_rng(seed)
        spec = SimSpec(
            np.array([0.0, 0.2, 0.9]), np.array([5, 3, 4]), np.array([0.5, 1.0]), rng.normal(size=3)
        )
        tree = simulate.simulate_tree(spec, rng)
        led = coalescent.extract_ledger(tree, coalescent.Grid(np.array([0.5, 1.0])))
        assert led.m.sum() == tree.n_tips - 1
        assert sorted(tree.tip_heights()) == sorted([0.0] * 5 + [0.2] * 3 + [0.9] * 4)

    def test_seeded(self):
        spec = SimSpec.constant(10, seed=42)
        a, b = simulate.simulate_tree(spec), simulate.simulate_tree(spec)
        np.testing.assert_array_equal(a.heights, b.heights)
        np.testing.assert_array_equal(a.parent, b.parent)

    def test_large_tree_mle(self):
        rng = np.random.default_rng(4)
        ne = 3.0
        spec = SimSpec.constant(2000, ne)
        tree = simulate.simulate_tree(spec, rng)
        data = coalescent.CoalescentData.from_trees([tree], coalescent.Grid(np.array([1e9])))
        m, w = data.m[0], data.w[0]
        # w/m is the mean of m iid Exp(1/Ne) draws: sd Ne / sqrt(m)
        assert abs(w / m - ne) < 3 * ne / math.sqrt(m)


class TestScenarios:
    def test_linear_zero_slope_is_constant(self):
        sc = simulate.make_scenario("linear", taxa=30, coefs={"a": 0.5, "b": 0.0})
        np.testing.assert_array_equal(sc.truth, 0.5)

    def test_concave_interior_maximum(self):
        z = np.linspace(-2, 2, 21)
        sc = simulate.make_scenario("concave", covariate=z, taxa=30)
        c = sc.coefs
        zstar = -c["b"] / (2 * c["c"])
        assert z[0] < zstar < z[-1]
        k = int(np.argmax(sc.truth))
        assert 0 < k < z.size - 1
        assert abs(z[k] - zstar) <= z[1] - z[0]

    def test_concave_needs_negative_curvature(self):
        with pytest.raises(ValueError):
            simulate.make_scenario("concave", taxa=10, coefs={"a": 0, "b": 1, "c": 0.5})

    def test_shapes_and_defaults(self):
        sc = simulate.make_scenario("linear", taxa=50, seed=3)
        assert sc.tree.n_tips == 50
        assert sc.covariates.n_intervals == sc.truth.size == sc.grid.n_intervals == 24
        assert np.all(sc.tree.tip_heights() == 0.0)  # isochronous by default
        het = simulate.make_scenario("linear", taxa=50, seed=3, isochronous=False)
        assert np.unique(het.tree.tip_heights()).size > 1

    def test_table_kind(self):
        levels = np.linspace(0, 1, 6)
        sc = simulate.make_scenario("table", covariate=np.arange(6.0), taxa=20, coefs={"levels": levels})
        np.testing.assert_array_equal(sc.truth, levels)

    def test_standardized_synthetic_covariate(self):
        z = simulate.synthetic_covariate(40, seed=1)
        assert z.mean() == pytest.approx(0.0, abs=1e-12)
        assert z.std(ddof=1) == pytest.approx(1.0)

    def test_paper_scale(self):
        sc = simulate.make_scenario("linear", taxa=705, seed=1)
        assert sc.tree.n_tips == 705
