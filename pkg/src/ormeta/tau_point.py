"""Point estimators of the between-study variance tau^2.

Five estimators share this module: the DerSimonian-Laird moment estimator
(DL), restricted maximum likelihood (REML), Mandel-Paule (MP), the
generalized-Q moment estimator with reciprocal-SE weights (J), and the
corrected-moment estimator (KD) that replaces the nominal chi-square mean
in the Mandel-Paule equation with a mean supplied by a QMomentModel.

All estimators truncate at zero and report the truncation through
``truncated_at_zero``.  Root searches are confined to [0, TAU2_MAX].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import EffectSample
from .qstats import QMomentModel, generalized_q, q_profile_eval

TAU2_MAX = 100.0


@dataclass(frozen=True)
class TauEstimate:
    value: float
    method: str
    converged: bool = True
    iterations: int = 0
    truncated_at_zero: bool = False


def _solve_profile(
    sample: EffectSample, target: float, tau2_max: float, tol: float = 1e-8
) -> tuple[float, bool, int, bool]:
    """Solve Q(tau2) = target for tau2 >= 0.

    Q(tau2) is non-increasing, so the root is unique when it exists.
    Returns (value, converged, iterations, truncated_at_zero); a profile
    that stays above the target all the way to ``tau2_max`` yields
    (tau2_max, False, ...).
    """
    q0 = q_profile_eval(sample, 0.0)
    if q0 <= target:
        return 0.0, True, 0, q0 < target
    if q_profile_eval(sample, tau2_max) > target:
        return tau2_max, False, 0, False
    root, info = optimize.brentq(
        lambda t: q_profile_eval(sample, t) - target,
        0.0,
        tau2_max,
        xtol=tol,
        full_output=True,
    )
    return float(root), True, info.iterations, False


def dl_estimate(sample: EffectSample) -> TauEstimate:
    """DerSimonian-Laird moment estimator (weights 1/sigma2_hat)."""
    w = 1.0 / sample.sigma2_hat
    s1 = w.sum()
    s2 = (w * w).sum()
    q = generalized_q(sample, w)
    raw = (q - (sample.k - 1)) / (s1 - s2 / s1)
    return TauEstimate(max(0.0, float(raw)), "DL", True, 0, raw < 0.0)


def mp_estimate(sample: EffectSample, tau2_max: float = TAU2_MAX) -> TauEstimate:
    """Mandel-Paule estimator: the root of Q(tau2) = k - 1."""
    value, converged, iters, truncated = _solve_profile(sample, sample.k - 1.0, tau2_max)
    return TauEstimate(value, "MP", converged, iters, truncated)


def restricted_loglik(sample: EffectSample, tau2: float) -> float:
    """Restricted log-likelihood of tau2 (additive constant dropped)."""
    v = sample.sigma2_hat + tau2
    w = 1.0 / v
    return -0.5 * (np.log(v).sum() + np.log(w.sum()) + q_profile_eval(sample, tau2))


def _reml_score_info(sample: EffectSample, tau2: float) -> tuple[float, float]:
    """Score and expected information of the restricted likelihood."""
    v = sample.sigma2_hat + tau2
    w = 1.0 / v
    big_w = w.sum()
    w2 = w * w
    theta_bar = (w * sample.theta_hat).sum() / big_w
    resid2 = (sample.theta_hat - theta_bar) ** 2
    score = -0.5 * (big_w - w2.sum() / big_w - (w2 * resid2).sum())
    info = 0.5 * (w2.sum() - 2 * (w2 * w).sum() / big_w + w2.sum() ** 2 / big_w**2)
    return float(score), float(info)


def reml_estimate(
    sample: EffectSample, tol: float = 1e-8, max_iter: int = 200
) -> TauEstimate:
    """REML estimator via Fisher scoring, cold-started at the DL value.

    Falls back to bounded scalar minimization of the negative restricted
    log-likelihood when scoring fails to settle within ``max_iter``.
    """
    t = dl_estimate(sample).value
    for it in range(1, max_iter + 1):
        score, info = _reml_score_info(sample, t)
        if not np.isfinite(info) or info <= 0.0:
            break
        t_new = max(0.0, t + score / info)
        if abs(t_new - t) < tol:
            truncated = t_new == 0.0 and _reml_score_info(sample, 0.0)[0] < 0.0
            return TauEstimate(t_new, "REML", True, it, truncated)
        t = t_new
    res = optimize.minimize_scalar(
        lambda u: -restricted_loglik(sample, u),
        bounds=(0.0, TAU2_MAX),
        method="bounded",
        options={"xatol": tol},
    )
    value = max(0.0, float(res.x))
    truncated = value == 0.0 or (
        value < tol and _reml_score_info(sample, 0.0)[0] < 0.0
    )
    return TauEstimate(value, "REML", bool(res.success), max_iter, truncated)


def jackson_estimate(sample: EffectSample, weights=None) -> TauEstimate:
    """Generalized-Q moment estimator; default weights are 1/sigma_hat.

    Solves E[Q_w](tau2) = Q_w exactly: the expectation is linear in tau2,
    E[Q_w] = c0 + c1*tau2 with c0, c1 depending only on the weights and
    the within-study variances.
    """
    if weights is None:
        w = 1.0 / np.sqrt(sample.sigma2_hat)
    else:
        w = np.asarray(weights, dtype=float)
    big_w = w.sum()
    q_w = generalized_q(sample, w)
    c0 = (w * sample.sigma2_hat).sum() - (w * w * sample.sigma2_hat).sum() / big_w
    c1 = big_w - (w * w).sum() / big_w
    raw = (q_w - c0) / c1
    return TauEstimate(max(0.0, float(raw)), "J", True, 0, raw < 0.0)


def kd_estimate(
    sample: EffectSample,
    model: QMomentModel,
    tol: float = 1e-8,
    max_iter: int = 200,
    tau2_max: float = TAU2_MAX,
    null_moments: bool = False,
) -> TauEstimate:
    """Corrected Mandel-Paule estimator: solve Q(tau2) = E_model[Q](tau2).

    Both sides move with tau2, so the equation is solved by alternation:
    freeze the corrected mean at the current iterate, solve the profile
    for it, repeat until the iterates settle.  ``null_moments=True``
    freezes the mean at tau2 = 0 instead of re-evaluating it along the
    profile (sensitivity variant).
    """
    target, _ = model.moments(sample, 0.0)
    q0 = q_profile_eval(sample, 0.0)
    if q0 <= target:
        return TauEstimate(0.0, "KD", True, 0, q0 < target)
    if null_moments:
        value, converged, iters, truncated = _solve_profile(sample, target, tau2_max)
        return TauEstimate(value, "KD", converged, iters, truncated)
    t = 0.0
    for it in range(1, max_iter + 1):
        target, _ = model.moments(sample, t)
        t_new, converged, _, truncated = _solve_profile(sample, target, tau2_max)
        if not converged:
            return TauEstimate(t_new, "KD", False, it, False)
        if abs(t_new - t) < tol:
            return TauEstimate(t_new, "KD", True, it, truncated)
        t = t_new
    return TauEstimate(t, "KD", False, max_iter, False)
