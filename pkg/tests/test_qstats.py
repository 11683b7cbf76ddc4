import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from ormeta import EffectSample, NonConvergence
from ormeta.qstats import (
    GammaFit,
    generalized_q,
    q_profile_eval,
    rem_mixture_weights,
    weighted_chisq_mixture_cdf,
)


def _sample(theta, sigma2):
    return EffectSample.from_summaries(np.asarray(theta, float), np.asarray(sigma2, float))


def _random_sample(rng, k=None):
    k = k or int(rng.integers(2, 21))
    theta = rng.normal(0.0, 1.5, size=k)
    sigma2 = rng.lognormal(mean=-1.0, sigma=0.9, size=k)
    return _sample(theta, sigma2)


class TestGeneralizedQ:
    def test_no_dispersion(self):
        s = _sample([1.3, 1.3, 1.3], [0.5, 1.0, 2.0])
        assert generalized_q(s, [0.7, 2.0, 0.1]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        s = _sample([0.0, 1.0, 2.0], [1.0, 1.0, 1.0])
        assert_allclose(generalized_q(s, [1.0, 1.0, 1.0]), 2.0, rtol=1e-14)

    def test_weight_scaling(self):
        rng = np.random.default_rng(5)
        s = _random_sample(rng)
        w = rng.uniform(0.2, 3.0, size=s.k)
        q = generalized_q(s, w)
        assert_allclose(generalized_q(s, 7.5 * w), 7.5 * q, rtol=1e-12)

    def test_validation(self):
        s = _sample([0.0, 1.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            generalized_q(s, [1.0])
        with pytest.raises(ValueError):
            generalized_q(s, [1.0, -1.0])


class TestQProfile:
    def test_tau2_zero_is_cochran_q(self):
        rng = np.random.default_rng(6)
        s = _random_sample(rng)
        assert_allclose(
            q_profile_eval(s, 0.0), generalized_q(s, 1.0 / s.sigma2_hat), rtol=1e-14
        )

    def test_equal_variance_closed_form(self):
        s = _sample([0.0, 2.0, 4.0], [1.0, 1.0, 1.0])
        # sum of squared deviations from the mean is 8; weights 1/(1+3)
        assert_allclose(q_profile_eval(s, 3.0), 2.0, rtol=1e-14)

    def test_non_increasing_on_grid(self):
        rng = np.random.default_rng(7)
        grid = np.linspace(0.0, 50.0, 100)
        for _ in range(50):
            s = _random_sample(rng)
            vals = np.array([q_profile_eval(s, t) for t in grid])
            assert np.all(np.diff(vals) <= 1e-12)

    def test_negative_tau2_rejected(self):
        s = _sample([0.0, 1.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            q_profile_eval(s, -0.5)


class TestRemMixtureWeights:
    def test_projection_spectrum_unit_weights(self):
        sigma2 = 0.7
        s = _sample([0.1, 0.4, -0.2, 0.9, 0.0], [sigma2] * 5)
        lam = rem_mixture_weights(s, np.ones(5), 0.0)
        assert lam.size == 4
        assert_allclose(lam, sigma2, rtol=1e-12)

    def test_two_study_case(self):
        # A = [[.5, -.5], [-.5, .5]], V = (sigma2 + tau2) I = 2I;
        # the single nonzero eigenvalue equals the trace of A V.
        s = _sample([0.0, 2.0], [1.0, 1.0])
        lam = rem_mixture_weights(s, np.array([1.0, 1.0]), 1.0)
        assert lam.size == 1
        assert_allclose(lam[0], 2.0, rtol=1e-12)
        lam0 = rem_mixture_weights(s, np.array([1.0, 1.0]), 0.0)
        assert_allclose(lam0[0], 1.0, rtol=1e-12)

    def test_trace_identity_random(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            s = _random_sample(rng)
            w = rng.uniform(0.1, 4.0, size=s.k)
            tau2 = float(rng.uniform(0.0, 3.0))
            v = s.sigma2_hat + tau2
            lam = rem_mixture_weights(s, w, tau2)
            expected = w.dot(v) - (w * w).dot(v) / w.sum()
            assert_allclose(lam.sum(), expected, rtol=1e-10)


class TestMixtureCdf:
    def test_chi_square_special_cases(self):
        assert_allclose(
            weighted_chisq_mixture_cdf([1.0], 3.841458820694124), 0.95, atol=1e-9
        )
        assert_allclose(
            weighted_chisq_mixture_cdf([1.0, 1.0, 1.0, 1.0], 9.487729036781154),
            0.95,
            atol=1e-9,
        )

    def test_scaled_chi_square(self):
        # equal weights c reduce to a chi-square in q/c
        q = 7.3
        assert_allclose(
            weighted_chisq_mixture_cdf([2.5] * 6, q),
            stats.chi2.cdf(q / 2.5, 6),
            atol=1e-9,
        )

    def test_against_simulation(self):
        rng = np.random.default_rng(123)
        lam = np.array([1.0, 2.0])
        draws = (lam * rng.chisquare(1.0, size=(1_000_000, 2))).sum(axis=1)
        emp = (draws <= 5.0).mean()
        se = np.sqrt(emp * (1 - emp) / 1e6)
        assert abs(weighted_chisq_mixture_cdf(lam, 5.0) - emp) < 3 * se

    def test_monotone_and_zero(self):
        lam = [0.3, 1.0, 2.7]
        assert weighted_chisq_mixture_cdf(lam, 0.0) == 0.0
        qs = np.linspace(0.01, 40.0, 60)
        vals = [weighted_chisq_mixture_cdf(lam, q) for q in qs]
        assert np.all(np.diff(vals) >= -1e-12)
        assert vals[-1] <= 1.0

    def test_non_convergence_raises(self):
        with pytest.raises(NonConvergence):
            weighted_chisq_mixture_cdf([1e-6, 1.0], 2.0, tol=1e-12, max_terms=5)

    def test_validation(self):
        with pytest.raises(ValueError):
            weighted_chisq_mixture_cdf([], 1.0)
        with pytest.raises(ValueError):
            weighted_chisq_mixture_cdf([0.0, 1.0], 1.0)
        with pytest.raises(ValueError):
            weighted_chisq_mixture_cdf([1.0], 1.0, tol=0.0)


class TestGammaFit:
    def test_moment_matching_identities(self):
        g = GammaFit.from_moments(4.0, 8.0)
        assert_allclose(g.shape, 2.0, rtol=1e-15)
        assert_allclose(g.scale, 2.0, rtol=1e-15)

    def test_round_trip_exact(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            mean = float(rng.uniform(0.5, 30.0))
            var = float(rng.uniform(0.5, 50.0))
            g = GammaFit.from_moments(mean, var)
            assert_allclose(g.mean, mean, rtol=1e-12)
            assert_allclose(g.variance, var, rtol=1e-12)

    def test_chi_square_equivalence(self):
        # moments (k-1, 2(k-1)) give exactly a chi-square with k-1 dof
        k = 7
        g = GammaFit.from_moments(k - 1.0, 2.0 * (k - 1.0))
        for p in (0.025, 0.5, 0.975):
            assert_allclose(g.ppf(p), stats.chi2.ppf(p, k - 1), rtol=1e-10)
        assert_allclose(g.cdf(9.0), stats.chi2.cdf(9.0, k - 1), rtol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            GammaFit.from_moments(0.0, 1.0)
        with pytest.raises(ValueError):
            GammaFit.from_moments(1.0, -1.0)
