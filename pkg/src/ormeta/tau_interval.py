"""Interval estimators of the between-study variance tau^2.

Five 95% (by default) intervals: the Q-profile interval (QP), two
exact-distribution intervals that invert the generalized Q statistic
under the random-effects model with fixed weights 1/sigma2_hat (BJ) or
1/sigma_hat (J), the profile-likelihood interval anchored at the REML
estimate (PL), and the corrected-moment interval (KD) that replaces the
chi-square reference by a gamma distribution matched to provider moments.

Upper endpoints are capped at TAU2_MAX with ``open_upper`` set; coverage
accounting elsewhere treats a capped interval as covering any true value
up to the cap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .data import EffectSample
from .errors import NonConvergence
from .qstats import (
    GammaFit,
    QMomentModel,
    generalized_q,
    q_profile_eval,
    rem_mixture_weights,
    weighted_chisq_mixture_cdf,
)
from .tau_point import TAU2_MAX, _solve_profile, reml_estimate, restricted_loglik


@dataclass(frozen=True)
class TauInterval:
    lower: float
    upper: float
    method: str
    level: float = 0.95
    open_upper: bool = False


def qp_interval(
    sample: EffectSample, level: float = 0.95, tau2_max: float = TAU2_MAX
) -> TauInterval:
    """Q-profile interval: invert Q(tau2) at the chi-square(k-1) quantiles."""
    alpha = (1.0 - level) / 2.0
    df = sample.k - 1
    lower, _, _, _ = _solve_profile(sample, stats.chi2.ppf(1.0 - alpha, df), tau2_max)
    upper, converged, _, _ = _solve_profile(sample, stats.chi2.ppf(alpha, df), tau2_max)
    return TauInterval(lower, upper, "QP", level, not converged)


def _survival_endpoint(sample, fixed_w, q_obs, prob, tau2_max):
    """Solve P(Q_w >= q_obs; tau2) = prob; the survival is non-decreasing
    in tau2, so the root is unique when it exists."""

    def surv(t):
        lam = rem_mixture_weights(sample, fixed_w, t)
        return 1.0 - weighted_chisq_mixture_cdf(lam, q_obs)

    if surv(0.0) >= prob:
        return 0.0, False
    if surv(tau2_max) < prob:
        return tau2_max, True
    root = optimize.brentq(lambda t: surv(t) - prob, 0.0, tau2_max, xtol=1e-8)
    return float(root), False


def _q_inversion_interval(sample, fixed_w, method, level, tau2_max):
    alpha = (1.0 - level) / 2.0
    q_obs = generalized_q(sample, fixed_w)
    lower, _ = _survival_endpoint(sample, fixed_w, q_obs, alpha, tau2_max)
    upper, capped = _survival_endpoint(sample, fixed_w, q_obs, 1.0 - alpha, tau2_max)
    return TauInterval(lower, upper, method, level, capped)


def bj_interval(
    sample: EffectSample, level: float = 0.95, tau2_max: float = TAU2_MAX
) -> TauInterval:
    """Exact-distribution interval for Q with inverse-variance weights."""
    return _q_inversion_interval(
        sample, 1.0 / sample.sigma2_hat, "BJ", level, tau2_max
    )


def jackson_interval(
    sample: EffectSample, level: float = 0.95, tau2_max: float = TAU2_MAX
) -> TauInterval:
    """Exact-distribution interval for Q with reciprocal-SE weights."""
    return _q_inversion_interval(
        sample, 1.0 / np.sqrt(sample.sigma2_hat), "J", level, tau2_max
    )


def pl_interval(
    sample: EffectSample, level: float = 0.95, tau2_max: float = TAU2_MAX
) -> TauInterval:
    """Profile-likelihood interval anchored at the REML estimate."""
    crit = stats.chi2.ppf(level, 1)
    t_hat = reml_estimate(sample).value
    ll_hat = restricted_loglik(sample, t_hat)

    def outside(t):
        return 2.0 * (ll_hat - restricted_loglik(sample, t)) - crit

    if outside(0.0) <= 0.0:
        lower = 0.0
    else:
        lower = float(optimize.brentq(outside, 0.0, t_hat, xtol=1e-8))
    if outside(tau2_max) <= 0.0:
        return TauInterval(lower, tau2_max, "PL", level, True)
    upper = float(optimize.brentq(outside, t_hat, tau2_max, xtol=1e-8))
    return TauInterval(lower, upper, "PL", level, False)


def _kd_endpoint(sample, target_fn, tau2_max, max_iter):
    """Root of Q(tau2) = target_fn(tau2); both sides move with tau2."""

    def gap(t):
        return q_profile_eval(sample, t) - target_fn(t)

    if gap(0.0) <= 0.0:
        return 0.0, False
    if gap(tau2_max) > 0.0:
        return tau2_max, True
    try:
        root = optimize.brentq(gap, 0.0, tau2_max, xtol=1e-8, maxiter=max_iter)
    except RuntimeError as exc:
        raise NonConvergence(f"KD interval endpoint search failed: {exc}") from exc
    return float(root), False


def kd_interval(
    sample: EffectSample,
    model: QMomentModel,
    level: float = 0.95,
    tau2_max: float = TAU2_MAX,
    max_iter: int = 200,
    frozen_at: float | None = None,
) -> TauInterval:
    """Corrected-moment interval: invert Q against gamma quantiles.

    At each candidate tau2 the reference distribution is the gamma fit
    to the provider's corrected moments at that same tau2.  Passing
    ``frozen_at`` instead matches the gamma once, at the given tau2
    (sensitivity variant; not used by the simulation sweep).
    """
    alpha = (1.0 - level) / 2.0

    def quantile_at(t, p):
        where = t if frozen_at is None else frozen_at
        mean, var = model.moments(sample, where)
        return GammaFit.from_moments(mean, var).ppf(p)

    lower, _ = _kd_endpoint(
        sample, lambda t: quantile_at(t, 1.0 - alpha), tau2_max, max_iter
    )
    upper, capped = _kd_endpoint(
        sample, lambda t: quantile_at(t, alpha), tau2_max, max_iter
    )
    return TauInterval(lower, upper, "KD", level, capped)
