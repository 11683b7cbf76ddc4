"""Point and interval estimators of the overall log-odds-ratio theta.

Inverse-variance weighting with a plug-in tau2 covers the IV_* family;
the sample-size-weighted estimator (SSW) ignores estimated variances for
the point estimate and re-introduces them, together with a corrected
tau2, only in its interval.  HKSJ intervals use the weighted residual
variance around the IV center with t critical values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import EffectSample


@dataclass(frozen=True)
class ThetaEstimate:
    value: float
    method: str
    tau2_used: float


@dataclass(frozen=True)
class ThetaInterval:
    center: float
    half_width: float
    method: str
    quantile_family: str
    degenerate: bool = False

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width


def _iv_weights(sample: EffectSample, tau2: float) -> np.ndarray:
    if tau2 < 0:
        raise ValueError("tau2 must be nonnegative")
    return 1.0 / (sample.sigma2_hat + tau2)


def iv_point(sample: EffectSample, tau2: float, method: str = "IV_DL") -> ThetaEstimate:
    """Inverse-variance weighted mean with weights 1/(sigma2_hat + tau2).

    ``method`` only labels the estimate with the tau2 source (IV_DL,
    IV_REML, IV_MP, IV_J, IV_KD); it does not change the computation.
    """
    w = _iv_weights(sample, tau2)
    value = float((w * sample.theta_hat).sum() / w.sum())
    return ThetaEstimate(value, method, tau2)


def iv_interval(sample: EffectSample, tau2: float, method: str, level: float = 0.95) -> ThetaInterval:
    """Normal-theory interval around the IV point estimate."""
    w = _iv_weights(sample, tau2)
    center = float((w * sample.theta_hat).sum() / w.sum())
    z = stats.norm.ppf(0.5 + level / 2.0)
    return ThetaInterval(center, float(z / np.sqrt(w.sum())), method, "normal")


def _require_n_tilde(sample: EffectSample) -> np.ndarray:
    if sample.n_tilde is None:
        raise ValueError("sample carries no per-study sizes; SSW needs n_tilde")
    return sample.n_tilde


def ssw_point(sample: EffectSample) -> ThetaEstimate:
    """Sample-size weighted mean: weights n_t*n_c/(n_t + n_c) per study."""
    n = _require_n_tilde(sample)
    value = float((n * sample.theta_hat).sum() / n.sum())
    return ThetaEstimate(value, "SSW", 0.0)


def ssw_interval(sample: EffectSample, tau2_kd: float, level: float = 0.95) -> ThetaInterval:
    """t-interval around the SSW point estimate.

    The variance plugs the corrected tau2 (from the KD point estimator on
    the same sample) into sum(n_i^2 (sigma2_i + tau2)) / (sum n_i)^2.
    """
    if tau2_kd < 0:
        raise ValueError("tau2_kd must be nonnegative")
    n = _require_n_tilde(sample)
    center = float((n * sample.theta_hat).sum() / n.sum())
    variance = float((n**2 * (sample.sigma2_hat + tau2_kd)).sum() / n.sum() ** 2)
    t_crit = stats.t.ppf(0.5 + level / 2.0, sample.k - 1)
    return ThetaInterval(center, float(t_crit * np.sqrt(variance)), "SSW_KD", "t")


def hksj_interval(
    sample: EffectSample, tau2: float, tag: str, level: float = 0.95
) -> ThetaInterval:
    """Hartung-Knapp-Sidik-Jonkman interval around the IV center.

    Plain form, without the truncated-variance floor: the weighted mean
    squared deviation around the center replaces 1/sum(w) as the variance,
    with t(k-1) critical values.  All-equal effects give a zero-width
    interval, flagged as degenerate.
    """
    w = _iv_weights(sample, tau2)
    center = float((w * sample.theta_hat).sum() / w.sum())
    variance = float(
        (w * (sample.theta_hat - center) ** 2).sum() / ((sample.k - 1) * w.sum())
    )
    t_crit = stats.t.ppf(0.5 + level / 2.0, sample.k - 1)
    half_width = float(t_crit * np.sqrt(variance))
    # all-equal effects leave only rounding noise in the residuals
    degenerate = np.sqrt(variance) <= 1e-12 * max(1.0, abs(center))
    if degenerate:
        half_width = 0.0
    return ThetaInterval(center, half_width, tag, "t", degenerate=degenerate)
