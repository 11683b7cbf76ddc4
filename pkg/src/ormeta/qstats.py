"""Generalized Cochran Q statistics and their distribution under the REM.

Provides the Q-profile function, moments of Q under pluggable moment models
(nominal chi-square, analytic small-sample correction, or a resampling
fallback), gamma moment-matching, and the weighted chi-square-mixture CDF
used by the mixture-based interval estimators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from ._kdkernel import _kd_moments, _ruben_series
from .data import EffectSample, ZeroCellPolicy
from .errors import BootstrapFailure, NonConvergence

__all__ = [
    "generalized_q",
    "q_profile_eval",
    "rem_mixture_weights",
    "weighted_chisq_mixture_cdf",
    "GammaFit",
    "QMomentModel",
    "NullChiSquare",
    "KDCorrected",
    "BootstrapNull",
    "corrected_q_moments",
]


def generalized_q(sample: EffectSample, weights) -> float:
    """Weighted dispersion statistic sum w_i (theta_i - theta_bar_w)^2.

    ``theta_bar_w`` is the weighted mean of the study effects.  Cochran's Q
    is the special case ``weights = 1/sigma2_hat``.
    """
    w = np.asarray(weights, dtype=float)
    if w.shape != sample.theta_hat.shape:
        raise ValueError("need one weight per retained study")
    if np.any(w <= 0.0):
        raise ValueError("weights must be positive")
    theta = sample.theta_hat
    center = w.dot(theta) / w.sum()
    dev = theta - center
    return float(w.dot(dev * dev))


def q_profile_eval(sample: EffectSample, tau2: float) -> float:
    """Q evaluated with inverse-(sigma2 + tau2) weights and matching center."""
    if tau2 < 0.0:
        raise ValueError(f"tau2 must be nonnegative, got {tau2}")
    return generalized_q(sample, 1.0 / (sample.sigma2_hat + tau2))


def rem_mixture_weights(sample: EffectSample, fixed_weights, tau2: float) -> np.ndarray:
    """Chi-square-mixture weights of Q_w under the normal REM.

    For fixed weights w the statistic Q_w is a quadratic form x'Ax with
    A = diag(w) - w w'/sum(w); with independent normal effects of covariance
    V = diag(sigma2_hat + tau2) its distribution is the mixture of one-degree
    chi-squares weighted by the eigenvalues of A V.  Numerically zero
    eigenvalues of the rank-(k-1) form are dropped.
    """
    w = np.asarray(fixed_weights, dtype=float)
    if w.shape != sample.theta_hat.shape:
        raise ValueError("need one weight per retained study")
    if np.any(w <= 0.0):
        raise ValueError("weights must be positive")
    if tau2 < 0.0:
        raise ValueError(f"tau2 must be nonnegative, got {tau2}")
    v = sample.sigma2_hat + tau2
    A = np.diag(w) - np.outer(w, w) / w.sum()
    sq = np.sqrt(v)
    lam = np.linalg.eigvalsh(A * sq[:, None] * sq[None, :])
    lam = lam[lam > 1e-12 * lam.max()]
    return np.sort(lam)[::-1]


def weighted_chisq_mixture_cdf(
    lambdas, q: float, tol: float = 1e-6, max_terms: int = 100_000
) -> float:
    """P(sum_i lambda_i chi2_1,i <= q) for independent one-degree chi-squares.

    Farebrother-style series expansion around the smallest weight, with a
    rigorous truncation bound.  Raises :class:`NonConvergence` when the
    requested absolute tolerance cannot be certified within ``max_terms``
    series terms.
    """
    lam = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if lam.size == 0:
        raise ValueError("need at least one mixture weight")
    if np.any(lam <= 0.0):
        raise ValueError("mixture weights must be positive")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    if q <= 0.0:
        return 0.0
    beta = lam.min()
    kk = lam.size
    y = q / (2.0 * beta)
    f0 = float(special.gammainc(kk / 2.0, y))
    a0 = math.exp(0.5 * float(np.log(beta / lam).sum()))
    r = 1.0 - beta / lam
    prob, bound, terms, ok = _ruben_series(r, kk / 2.0, y, f0, a0, tol, max_terms)
    if not ok:
        raise NonConvergence(
            f"mixture CDF series used {terms} terms without certifying "
            f"tolerance {tol} (bound {bound:.3g})"
        )
    return min(max(float(prob), 0.0), 1.0)


@dataclass(frozen=True)
class GammaFit:
    """Gamma distribution matched to a mean and variance."""

    shape: float
    scale: float

    @classmethod
    def from_moments(cls, mean: float, variance: float) -> "GammaFit":
        if mean <= 0.0 or variance <= 0.0:
            raise ValueError(f"need positive moments, got mean={mean}, var={variance}")
        return cls(shape=mean * mean / variance, scale=variance / mean)

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def variance(self) -> float:
        return self.shape * self.scale * self.scale

    def ppf(self, p: float) -> float:
        return float(special.gammaincinv(self.shape, p)) * self.scale

    def cdf(self, x: float) -> float:
        if x <= 0.0:
            return 0.0
        return float(special.gammainc(self.shape, x / self.scale))


class QMomentModel:
    """Mean/variance model for the Q statistic at a candidate tau2.

    ``moments(sample, tau2)`` returns (mean, variance) of the weighted
    dispersion statistic with weights 1/(sigma2_hat + tau2), under the
    random-effects model with between-study variance tau2.
    """

    def moments(self, sample: EffectSample, tau2: float) -> tuple[float, float]:
        raise NotImplementedError


class NullChiSquare(QMomentModel):
    """Nominal chi-square moments (k-1, 2(k-1)), regardless of tau2."""

    def moments(self, sample: EffectSample, tau2: float) -> tuple[float, float]:
        k = sample.k
        return float(k - 1), 2.0 * (k - 1)


def _fe_pooled_lor(sample: EffectSample) -> float:
    w = 1.0 / sample.sigma2_hat
    return float(w.dot(sample.theta_hat) / w.sum())


def _require_tables(sample: EffectSample, who: str) -> None:
    if not sample.has_tables:
        raise ValueError(
            f"{who} needs table-level detail (arm sizes and adjusted "
            "proportions); build the sample from 2x2 tables"
        )


class KDCorrected(QMomentModel):
    """Analytic small-sample moments of Q for binomial log-odds-ratios.

    Models each study as a pair of binomial draws at the observed adjusted
    control proportion and the logit-shift implied by the pooled
    fixed-effect log-odds-ratio, with normal between-study effects of
    variance tau2 integrated by Gauss-Hermite quadrature.  The exact
    per-study moments of (weight, deviation) on the binomial support are
    assembled into E[Q] and Var[Q]; double-zero exclusions are mixed in
    explicitly.

    Parameters
    ----------
    gh_nodes : int
        Quadrature nodes for the between-study effect (used when tau2 > 0).
    pattern_tol : float
        Per-study double-zero probabilities below this are treated as zero
        when enumerating exclusion patterns.
    """

    def __init__(self, gh_nodes: int = 20, pattern_tol: float = 1e-9):
        if gh_nodes < 2:
            raise ValueError("need at least 2 quadrature nodes")
        self._gh_x, self._gh_w = np.polynomial.hermite.hermgauss(gh_nodes)

        self.pattern_tol = float(pattern_tol)

    def moments(self, sample: EffectSample, tau2: float) -> tuple[float, float]:
        if tau2 < 0.0:
            raise ValueError(f"tau2 must be nonnegative, got {tau2}")
        _require_tables(sample, "KDCorrected")
        mean, var = _kd_moments(
            sample.n_t.astype(np.int64),
            sample.n_c.astype(np.int64),
            sample.p_c_hat,
            _fe_pooled_lor(sample),
            float(tau2),
            sample.a,
            self._gh_x,
            self._gh_w,
            self.pattern_tol,
        )
        return float(mean), float(var)


class BootstrapNull(QMomentModel):
    """Resampling-based moments of Q, a drop-in check on the analytic model.

    Draws ``b`` synthetic meta-analyses from the same generating model the
    analytic correction assumes (pooled fixed-effect log-odds-ratio, the
    observed adjusted control proportions, normal between-study effects of
    variance tau2), pushes them through the sample's zero-cell policy, and
    returns the sample mean and variance of the resulting Q values.  Every
    call reuses the same seed so repeated evaluations are deterministic and
    smooth in tau2.
    """

    def __init__(self, b: int = 2000, seed: int = 0):
        if b < 100:
            raise BootstrapFailure(f"need at least 100 resamples, got {b}")
        self.b = int(b)
        self.seed = int(seed)

    def moments(self, sample: EffectSample, tau2: float) -> tuple[float, float]:
        if tau2 < 0.0:
            raise ValueError(f"tau2 must be nonnegative, got {tau2}")
        _require_tables(sample, "BootstrapNull")
        rng = np.random.default_rng(self.seed)
        k = sample.k
        a = sample.a
        n_t = sample.n_t
        n_c = sample.n_c
        p_c = sample.p_c_hat
        theta0 = _fe_pooled_lor(sample)
        eta_c = np.log(p_c / (1.0 - p_c))

        delta = (
            rng.normal(0.0, math.sqrt(tau2), size=(self.b, k))
            if tau2 > 0.0
            else np.zeros((self.b, k))
        )
        p_t = special.expit(eta_c + theta0 + delta)
        x_t = rng.binomial(n_t, p_t)
        x_c = rng.binomial(n_c, np.broadcast_to(p_c, (self.b, k)))

        double_zero = ((x_t == 0) & (x_c == 0)) | ((x_t == n_t) & (x_c == n_c))
        if sample.policy is ZeroCellPolicy.ALWAYS_HALF or sample.policy is None:
            adjust = np.ones_like(x_t, dtype=bool)
        else:
            adjust = (
                (x_t == 0) | (x_t == n_t) | (x_c == 0) | (x_c == n_c)
            )
        add = np.where(adjust, a, 0.0)
        den_t = n_t + 2.0 * add
        den_c = n_c + 2.0 * add
        pt_hat = (x_t + add) / den_t
        pc_hat = (x_c + add) / den_c
        with np.errstate(divide="ignore", invalid="ignore"):
            theta = np.log(pt_hat / (1.0 - pt_hat)) - np.log(pc_hat / (1.0 - pc_hat))
            sigma2 = 1.0 / (den_t * pt_hat * (1.0 - pt_hat)) + 1.0 / (
                den_c * pc_hat * (1.0 - pc_hat)
            )
            w = 1.0 / (sigma2 + tau2)
        keep = ~double_zero
        w = np.where(keep, w, 0.0)
        theta = np.where(keep, theta, 0.0)
        k_star = keep.sum(axis=1)
        valid = k_star >= 2
        if not np.any(valid):
            raise BootstrapFailure("every resample lost all but one study")
        w = w[valid]
        theta = theta[valid]
        wsum = w.sum(axis=1)
        center = (w * theta).sum(axis=1) / wsum
        qs = (w * (theta - center[:, None]) ** 2).sum(axis=1)
        return float(qs.mean()), float(qs.var(ddof=1))


def corrected_q_moments(
    sample: EffectSample, tau2: float, model: QMomentModel
) -> tuple[float, float]:
    """Mean and variance of Q at the candidate tau2 under the given model."""
    if tau2 < 0.0:
        raise ValueError(f"tau2 must be nonnegative, got {tau2}")
    mean, var = model.moments(sample, tau2)
    if not (mean > 0.0 and var > 0.0):
        raise ValueError(f"moment model returned non-positive moments ({mean}, {var})")
    return mean, var
