import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from npnorm.normative import (GevdParams, NoveltyDetector, abnormality_probabilities, auc, compute_npm,
                              first_principal_component, fit_gevd, gevd_cdf, gevd_loglik, group_difference_maps,
                              region_association, summary_statistic, summary_statistics)
from npnorm.normative import _moment_start


def pair_count_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def sample_gevd(rng, n, mu, sigma, xi):
    u = rng.uniform(size=n)
    if xi == 0:
        return mu - sigma * np.log(-np.log(u))
    return mu + sigma * ((-np.log(u)) ** (-xi) - 1.0) / xi


class TestNpm:
    def test_hand_value(self):
        assert compute_npm(np.array([1.0]), np.array([0.5]), np.array([0.25]))[0] == pytest.approx(1.0)

    def test_perfect_prediction(self):
        Y = np.random.default_rng(0).random((2, 3, 3, 3))
        assert np.all(compute_npm(Y, Y, np.ones_like(Y)) == 0)

    def test_ratio_invariance(self):
        rng = np.random.default_rng(1)
        Y, m = rng.random((2, 4)), rng.random((2, 4))
        v = 0.1 + rng.random((2, 4))
        c = 3.7
        np.testing.assert_allclose(compute_npm(m + c * (Y - m), m, c * c * v), compute_npm(Y, m, v), rtol=1e-12)

    def test_variance_floor(self):
        with pytest.raises(ValueError, match="floor"):
            compute_npm(np.ones(3), np.zeros(3), np.full(3, 1e-8))


class TestSummaryStatistic:
    def test_forced_example(self):
        v = np.zeros(200)
        v[17], v[150] = 4.0, -6.0
        assert summary_statistic(v, 0.01) == 5.0

    def test_full_block(self):
        v = np.random.default_rng(0).standard_normal(37)
        assert summary_statistic(v, 1.0) == pytest.approx(np.abs(v).mean(), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 500), st.floats(0.001, 1.0), st.integers(0, 2 ** 31 - 1))
    def test_sort_oracle(self, size, fraction, seed):
        v = np.random.default_rng(seed).standard_normal(size)
        k = max(1, int(np.ceil(fraction * size - 1e-9)))
        oracle = np.mean(sorted(np.abs(v), reverse=True)[:k])
        assert summary_statistic(v, fraction) == oracle

    def test_permutation_and_sign_invariance(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal((4, 5, 6))
        base = summary_statistic(v, 0.05)
        assert summary_statistic(rng.permutation(v.ravel()), 0.05) == base
        assert summary_statistic(-v, 0.05) == base

    def test_signed_and_max_modes(self):
        v = np.array([-9.0, 1.0, 2.0, 3.0])
        assert summary_statistic(v, 0.5, mode="signed") == 2.5
        assert summary_statistic(v, 0.5, block="max") == 9.0

    @pytest.mark.parametrize("kwargs", [{"top_fraction": 0.0}, {"top_fraction": 1.5}, {"mode": "x"}, {"block": "x"}])
    def test_bad_arguments(self, kwargs):
        with pytest.raises(ValueError):
            summary_statistic(np.ones(10), **kwargs)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            summary_statistic(np.array([]))

    def test_batch(self):
        npms = np.random.default_rng(3).standard_normal((3, 2, 5, 10))
        np.testing.assert_array_equal(summary_statistics(npms), [summary_statistic(v) for v in npms])


class TestGevdCdf:
    def test_gumbel_at_location(self):
        assert abs(gevd_cdf(1.3, GevdParams(1.3, 2.0, 0.0)) - np.exp(-1.0)) < 1e-12

    def test_hand_value(self):
        assert gevd_cdf(2.0, GevdParams(0.0, 1.0, 0.5)) == pytest.approx(np.exp(-0.25), abs=1e-12)

    def test_support_edges(self):
        assert gevd_cdf(-5.0, GevdParams(0.0, 1.0, 0.5)) == 0.0
        assert gevd_cdf(5.0, GevdParams(0.0, 1.0, -0.5)) == 1.0

    @pytest.mark.parametrize("xi", [-0.4, 0.0, 0.3])
    def test_monotone_in_unit_interval(self, xi):
        grid = np.linspace(-10, 10, 1000)
        cdf = gevd_cdf(grid, GevdParams(0.2, 1.5, xi))
        assert np.all(np.diff(cdf) >= 0) and cdf.min() >= 0 and cdf.max() <= 1

    def test_continuity_at_zero_shape(self):
        grid = np.linspace(-3, 8, 500)
        ref = gevd_cdf(grid, GevdParams(0.0, 1.0, 0.0))
        for xi in (1e-7, -1e-7):
            assert np.max(np.abs(gevd_cdf(grid, GevdParams(0.0, 1.0, xi)) - ref)) < 1e-5

    def test_matches_scipy(self):
        # scipy's genextreme uses c = -xi
        grid = np.linspace(-2, 6, 50)
        for xi in (-0.3, 0.2):
            np.testing.assert_allclose(gevd_cdf(grid, GevdParams(0.5, 1.2, xi)),
                                       stats.genextreme.cdf(grid, -xi, loc=0.5, scale=1.2), atol=1e-12)

    def test_nonpositive_scale(self):
        with pytest.raises(ValueError):
            GevdParams(0.0, 0.0, 0.1)


class TestFitGevd:
    def test_gumbel_recovery(self):
        a = sample_gevd(np.random.default_rng(0), 20_000, 0.0, 1.0, 0.0)
        p = fit_gevd(a)
        assert abs(p.mu) < 0.05 and abs(p.sigma - 1) < 0.05 and abs(p.xi) < 0.05

    def test_frechet_recovery(self):
        a = sample_gevd(np.random.default_rng(1), 20_000, 0.0, 1.0, 0.3)
        p = fit_gevd(a)
        assert abs(p.mu) < 0.05 and abs(p.sigma - 1) < 0.05 and 0.25 <= p.xi <= 0.35

    def test_loglik_not_below_initializer(self):
        for seed in range(5):
            a = sample_gevd(np.random.default_rng(seed), 40, 2.0, 0.5, -0.2)
            p = fit_gevd(a)
            assert gevd_loglik(a, p.mu, p.sigma, p.xi) >= gevd_loglik(a, *_moment_start(a)) - 1e-9

    def test_constant_samples(self):
        with pytest.raises(ValueError, match="not all equal"):
            fit_gevd(np.ones(30))

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="20"):
            fit_gevd(np.arange(19.0))

    def test_sanity_bound(self):
        for seed in range(5):
            assert abs(fit_gevd(np.random.default_rng(seed).standard_normal(25)).xi) < 5


class TestAbnormality:
    def test_left_tail_and_location(self):
        a = sample_gevd(np.random.default_rng(2), 5000, 1.0, 0.5, 0.0)
        sc = abnormality_probabilities(a, np.array([a.min() - 2.0, 1.0]))
        assert sc.probability[0] < 1e-6
        assert sc.probability[1] == pytest.approx(np.exp(-1), abs=0.03)

    def test_order_preserved(self):
        a = sample_gevd(np.random.default_rng(3), 100, 0.0, 1.0, 0.1)
        test = np.random.default_rng(4).normal(1.0, 2.0, 40)
        p = abnormality_probabilities(a, test).probability
        order = np.argsort(test)
        assert np.all(np.diff(p[order]) >= 0) and p.min() >= 0 and p.max() <= 1

    def test_detector_matches_functional(self):
        rng = np.random.default_rng(5)
        ref, new = rng.standard_normal((30, 200)), rng.standard_normal((5, 200))
        det = NoveltyDetector().fit(ref)
        sc = abnormality_probabilities(summary_statistics(ref), summary_statistics(new))
        np.testing.assert_array_equal(det.predict_proba(new), sc.probability)


class TestAuc:
    def test_trivial_cases(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0
        assert auc([0.5, 0.5], [1, 0]) == 0.5

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_pair_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, 50)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 10, 50).astype(float)  # many ties
        assert auc(scores, labels) == pair_count_auc(scores, labels)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(6)
        s, l = rng.standard_normal(40), rng.integers(0, 2, 40)
        l[:2] = [0, 1]
        assert auc(np.exp(3 * s) + 1, l) == auc(s, l)

    def test_single_class(self):
        with pytest.raises(ValueError, match="both classes"):
            auc([0.1, 0.2], [1, 1])


class TestPrincipalComponent:
    def test_axis_aligned(self):
        rng = np.random.default_rng(0)
        X = np.zeros((20, 3))
        X[:, 1] = rng.standard_normal(20)
        v, _ = first_principal_component(X)
        np.testing.assert_allclose(v, [0, 1, 0], atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_eigh_oracle(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((40, 11)) @ np.diag(np.linspace(3, 0.5, 11))
        v, scores = first_principal_component(X)
        Xc = X - X.mean(axis=0)
        w, V = np.linalg.eigh(Xc.T @ Xc / 39)
        assert v.shape == (11,) and np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
        assert scores.var(ddof=1) == pytest.approx(w[-1], rel=1e-8)
        assert abs(abs(v @ V[:, -1]) - 1) < 1e-8
        assert v[np.argmax(np.abs(v))] > 0

    def test_zero_variance(self):
        with pytest.raises(ValueError, match="zero variance"):
            first_principal_component(np.ones((5, 3)))


class TestRegionAssociation:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.X = rng.standard_normal((30, 4)) @ np.diag([3, 1, 1, 0.5])
        _, self.pc1 = first_principal_component(self.X)
        self.masks = [np.arange(0, 10), np.arange(10, 20), np.arange(20, 30)]
        self.npm = rng.standard_normal((30, 30))

    def test_exact_linear_region(self):
        npm = self.npm.copy()
        npm[:, :10] = 2.0 * self.pc1[:, None] + 1.0
        res = region_association(npm, self.masks, self.X)
        assert res[0].r2 == pytest.approx(1.0, abs=1e-12) and res[0].significant

    def test_closed_form_oracle(self):
        res = region_association(self.npm, self.masks, self.X)
        for r, idx in zip(res, self.masks):
            y = self.npm[:, idx].mean(axis=1)
            design = np.column_stack([np.ones(30), self.pc1])
            fitted = design @ np.linalg.lstsq(design, y, rcond=None)[0]
            r2 = 1 - np.sum((y - fitted) ** 2) / np.sum((y - y.mean()) ** 2)
            assert r.r2 == pytest.approx(r2, abs=1e-10)
            f = r2 * 28 / (1 - r2)
            assert r.p_value == pytest.approx(stats.f.sf(f, 1, 28), rel=1e-10)
            assert r.p_bonferroni == pytest.approx(min(1.0, 3 * r.p_value), rel=1e-12)

    def test_nine_region_bonferroni(self):
        masks = {f"r{k}": np.arange(k * 3, k * 3 + 3) for k in range(9)}
        for r in region_association(self.npm, masks, self.X):
            assert r.p_bonferroni == pytest.approx(min(1.0, 9 * r.p_value))

    def test_precomputed_scores(self):
        a = region_association(self.npm, self.masks, self.X)
        b = region_association(self.npm, self.masks, self.X[:, :1] * 0, scores=self.pc1)
        assert [r.r2 for r in a] == [r.r2 for r in b]

    def test_out_of_range_mask(self):
        with pytest.raises(ValueError, match="outside"):
            region_association(self.npm, [np.array([0, 30])], self.X)

    def test_too_few_subjects(self):
        with pytest.raises(ValueError):
            region_association(self.npm[:2], self.masks, self.X[:2])


class TestGroupDifference:
    def test_maps(self):
        rng = np.random.default_rng(8)
        npm = rng.standard_normal((6, 2, 2, 2))
        labels = np.array(["healthy", "healthy", "a", "a", "b", "healthy"])
        maps = group_difference_maps(npm, labels)
        base = npm[[0, 1, 5]].mean(axis=0)
        np.testing.assert_allclose(maps["a"], npm[[2, 3]].mean(axis=0) - base)
        np.testing.assert_allclose(maps["b"], npm[4] - base)

    def test_identical_groups(self):
        npm = np.ones((4, 3))
        maps = group_difference_maps(npm, np.array(["healthy", "healthy", "a", "a"]))
        assert np.all(maps["a"] == 0)

    def test_empty_group_warns(self):
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            maps = group_difference_maps(np.ones((2, 3)), np.array(["healthy", "a"]), groups=["a", "zz"])
        assert "zz" not in maps and any("empty" in str(w.message) for w in rec)

    def test_no_healthy(self):
        with pytest.raises(ValueError):
            group_difference_maps(np.ones((2, 3)), np.array(["a", "a"]))
