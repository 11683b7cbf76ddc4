import numpy as np
import pytest
from numpy.testing import assert_allclose

from ormeta import EffectSample
from ormeta.effects import (
    hksj_interval,
    iv_interval,
    iv_point,
    ssw_interval,
    ssw_point,
)

T1_975 = 12.706204736432095  # t(1) upper 2.5% point
Z_975 = 1.959963984540054


def _sample(theta, sigma2, n_tilde=None):
    return EffectSample.from_summaries(theta, sigma2, n_tilde=n_tilde)


class TestIVPoint:
    def test_hand_value(self):
        est = iv_point(_sample([0, 2], [1, 3]), 1.0)
        assert_allclose(est.value, 2.0 / 3.0, rtol=1e-14)
        assert est.tau2_used == 1.0

    def test_equal_variances_give_mean(self):
        est = iv_point(_sample([0, 1, 5], [2, 2, 2]), 0.7)
        assert_allclose(est.value, 2.0, rtol=1e-14)

    def test_huge_tau2_flattens_weights(self):
        est = iv_point(_sample([0, 2], [1, 3]), 1e12)
        assert_allclose(est.value, 1.0, atol=1e-9)

    def test_convex_combination(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            k = rng.integers(2, 10)
            th = rng.normal(0, 2, k)
            s = _sample(th, rng.lognormal(0, 1, k))
            v = iv_point(s, rng.exponential()).value
            assert th.min() - 1e-12 <= v <= th.max() + 1e-12

    def test_negative_tau2_rejected(self):
        with pytest.raises(ValueError):
            iv_point(_sample([0, 1], [1, 1]), -0.1)


class TestIVInterval:
    def test_hand_value(self):
        ci = iv_interval(_sample([0, 2], [0.6, 0.6]), 0.4, "IV_DL")
        assert_allclose(ci.center, 1.0, rtol=1e-14)
        assert_allclose(ci.half_width, Z_975 / np.sqrt(2.0), rtol=1e-12)
        assert ci.quantile_family == "normal"
        assert ci.method == "IV_DL"

    def test_width_shrinks_with_precision(self):
        wide = iv_interval(_sample([0, 2], [1.0, 1.0]), 0.0, "IV_MP")
        narrow = iv_interval(_sample([0, 2], [0.5, 1.0]), 0.0, "IV_MP")
        assert narrow.half_width < wide.half_width

    def test_bounds_properties(self):
        ci = iv_interval(_sample([0, 2], [1, 1]), 0.0, "IV_J")
        assert_allclose(ci.upper - ci.lower, 2 * ci.half_width, rtol=1e-14)
        assert ci.lower <= ci.center <= ci.upper


class TestSSWPoint:
    def test_weighted_mean(self):
        est = ssw_point(_sample([0, 2], [1, 1], n_tilde=[5, 15]))
        assert_allclose(est.value, 1.5, rtol=1e-14)
        assert est.method == "SSW"

    def test_equal_sizes_give_mean(self):
        est = ssw_point(_sample([0, 1, 5], [1, 2, 3], n_tilde=[7, 7, 7]))
        assert_allclose(est.value, 2.0, rtol=1e-14)

    def test_scale_invariance_of_weights(self):
        a = ssw_point(_sample([0, 2, 1], [1, 1, 1], n_tilde=[2, 6, 4]))
        b = ssw_point(_sample([0, 2, 1], [1, 1, 1], n_tilde=[5, 15, 10]))
        assert_allclose(a.value, b.value, rtol=1e-14)

    def test_matches_iv_when_variance_proportional(self):
        n = np.array([4.0, 9.0, 25.0])
        c = 1.7
        s = _sample([0.2, 1.1, -0.4], c / n, n_tilde=n)
        assert_allclose(ssw_point(s).value, iv_point(s, 0.0).value, rtol=1e-12)

    def test_requires_sizes(self):
        with pytest.raises(ValueError):
            ssw_point(_sample([0, 1], [1, 1]))


class TestSSWInterval:
    def test_hand_value(self):
        ci = ssw_interval(_sample([0, 2], [0.4, 0.4], n_tilde=[5, 5]), 0.0)
        assert_allclose(ci.center, 1.0, rtol=1e-14)
        assert_allclose(ci.half_width, T1_975 * np.sqrt(0.2), rtol=1e-12)
        assert ci.method == "SSW_KD"
        assert ci.quantile_family == "t"

    def test_tau2_widens(self):
        s = _sample([0, 2, 1], [0.4, 0.3, 0.5], n_tilde=[5, 8, 6])
        assert ssw_interval(s, 0.5).half_width > ssw_interval(s, 0.0).half_width

    def test_equal_studies_collapse(self):
        k = 30
        s = _sample(np.zeros(k), np.full(k, 0.7), n_tilde=np.full(k, 3.0))
        ci = ssw_interval(s, 0.2)
        from scipy import stats

        expect = stats.t.ppf(0.975, k - 1) * np.sqrt((0.7 + 0.2) / k)
        assert_allclose(ci.half_width, expect, rtol=1e-12)


class TestHKSJ:
    def test_hand_value(self):
        ci = hksj_interval(_sample([0, 2], [0.7, 0.7]), 0.3, "HKSJ_DL")
        assert_allclose(ci.center, 1.0, rtol=1e-14)
        assert_allclose(ci.half_width, T1_975, rtol=1e-12)
        assert not ci.degenerate

    def test_degenerate_zero_width(self):
        ci = hksj_interval(_sample([1.3, 1.3, 1.3], [1, 2, 3]), 0.0, "HKSJ_KD")
        assert ci.half_width == 0.0
        assert ci.degenerate
        assert_allclose(ci.center, 1.3, rtol=1e-14)

    def test_variance_scale_invariance(self):
        a = hksj_interval(_sample([0, 1, 3], [1, 2, 3]), 1.0, "HKSJ_DL")
        b = hksj_interval(_sample([0, 1, 3], [2, 4, 6]), 2.0, "HKSJ_DL")
        assert_allclose(a.half_width, b.half_width, rtol=1e-12)
        assert_allclose(a.center, b.center, rtol=1e-12)


class TestSharedProperties:
    def test_sign_equivariance(self):
        rng = np.random.default_rng(9)
        for _ in range(15):
            k = rng.integers(2, 9)
            th = rng.normal(0, 1.5, k)
            s2 = rng.lognormal(-0.5, 0.8, k)
            nt = rng.uniform(2, 40, k)
            t2 = rng.exponential(0.5)
            s = _sample(th, s2, n_tilde=nt)
            neg = _sample(-th, s2, n_tilde=nt)
            assert_allclose(iv_point(neg, t2).value, -iv_point(s, t2).value, atol=1e-13)
            assert_allclose(ssw_point(neg).value, -ssw_point(s).value, atol=1e-13)
            a = hksj_interval(s, t2, "HKSJ_DL")
            b = hksj_interval(neg, t2, "HKSJ_DL")
            assert_allclose(b.center, -a.center, atol=1e-13)
            assert_allclose(b.half_width, a.half_width, atol=1e-13)
