"""End-to-end acceptance gates for the package.

Ten checks, one test each, covering estimator correctness against
independent oracles, statistical calibration of the interval methods,
the documented behavior of the pooled-effect estimators, validation of
the corrected Q moments against brute-force simulation, determinism and
throughput of the sweep engine, and a numerical property suite.

Each test prints one summary line with the measured quantities; the
pytest verdict for the test is the pass/fail line for its criterion.
"""

import math
import time

import numpy as np
import pytest

from ormeta.cli import main as cli_main
from ormeta.data import EffectSample, ZeroCellPolicy
from ormeta.qstats import GammaFit, KDCorrected, weighted_chisq_mixture_cdf
from ormeta.report import aggregate
from ormeta.simulate import SimConfig, run_sweep
from ormeta.tau_interval import bj_interval
from ormeta.tau_point import (
    dl_estimate,
    jackson_estimate,
    mp_estimate,
    reml_estimate,
    restricted_loglik,
)


def _q_at(theta, sig2, tau2):
    w = 1.0 / (sig2 + tau2)
    center = w.dot(theta) / w.sum()
    dev = theta - center
    return w.dot(dev * dev)


def _dl_closed_form(theta, sig2):
    w = 1.0 / sig2
    center = w.dot(theta) / w.sum()
    dev = theta - center
    q = w.dot(dev * dev)
    s1 = w.sum()
    s2 = (w * w).sum()
    raw = (q - (len(theta) - 1)) / (s1 - s2 / s1)
    return max(0.0, float(raw))


def _j_root(theta, sig2):
    w = 1.0 / np.sqrt(sig2)
    big_w = w.sum()
    center = w.dot(theta) / w.sum()
    dev = theta - center
    q_w = w.dot(dev * dev)
    c0 = (w * sig2).sum() - (w * w * sig2).sum() / big_w
    c1 = big_w - (w * w).sum() / big_w
    return max(0.0, float((q_w - c0) / c1))


def _reml_grid_argmax(theta, sig2):
    """Maximizer of the restricted log-likelihood on a 1e-5 grid.

    Three nested sweeps (1e-2, 1e-4, 1e-5 steps); the final stage is an
    exhaustive 1e-5-resolution scan of the winning window.
    """
    def _ll(grid):
        v = sig2[None, :] + grid[:, None]
        w = 1.0 / v
        ww = w.sum(axis=1)
        center = (w * theta).sum(axis=1) / ww
        q = (w * (theta - center[:, None]) ** 2).sum(axis=1)
        return -0.5 * (np.log(v).sum(axis=1) + np.log(ww) + q)

    lo, hi = 0.0, 20.0
    best = 0.0
    for step in (1e-2, 1e-4, 1e-5):
        grid = np.arange(max(lo, 0.0), hi + step / 2, step)
        best = grid[np.argmax(_ll(grid))]
        lo, hi = best - 2 * step, best + 2 * step
    return float(best)


def _random_sample(rng):
    k = int(rng.integers(3, 16))
    sig2 = rng.uniform(0.05, 0.6, k)
    tau2 = 0.0 if rng.random() < 0.3 else float(rng.uniform(0.0, 1.5))
    theta_hat = rng.normal(0.3, np.sqrt(sig2 + tau2))
    return EffectSample.from_summaries(theta_hat, sig2)


def test_point_estimators_match_independent_oracles():
    rng = np.random.default_rng(20240801)
    t0 = time.perf_counter()
    worst_mp, worst_reml, worst_j = 0.0, 0.0, 0.0
    interior_mp = 0
    for _ in range(500):
        s = _random_sample(rng)
        theta, sig2 = s.theta_hat, s.sigma2_hat

        mp = mp_estimate(s)
        assert mp.converged
        if mp.truncated_at_zero:
            assert _q_at(theta, sig2, 0.0) <= s.k - 1 + 1e-9
        else:
            interior_mp += 1
            worst_mp = max(worst_mp, abs(_q_at(theta, sig2, mp.value) - (s.k - 1)))

        reml = reml_estimate(s)
        worst_reml = max(worst_reml, abs(reml.value - _reml_grid_argmax(theta, sig2)))

        assert dl_estimate(s).value == _dl_closed_form(theta, sig2)

        worst_j = max(worst_j, abs(jackson_estimate(s).value - _j_root(theta, sig2)))
    elapsed = time.perf_counter() - t0

    assert interior_mp >= 200
    assert worst_mp < 1e-6
    assert worst_reml < 1e-4
    assert worst_j < 1e-6
    assert elapsed < 30.0
    print(f"\n[oracles] 500 samples in {elapsed:.1f}s: residuals "
          f"MP {worst_mp:.2e}, REML {worst_reml:.2e}, J {worst_j:.2e}, DL exact")


def test_dl_mp_j_coincide_under_equal_variances():
    rng = np.random.default_rng(20240802)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(3, 13))
        c = float(rng.uniform(0.05, 0.5))
        tau2 = float(rng.uniform(0.0, 1.0))
        s = EffectSample.from_summaries(
            rng.normal(0.0, math.sqrt(c + tau2), k), np.full(k, c)
        )
        vals = [dl_estimate(s).value, mp_estimate(s).value, jackson_estimate(s).value]
        worst = max(worst, max(vals) - min(vals))
    assert worst < 1e-8
    print(f"\n[equal-variance] max spread across DL/MP/J: {worst:.2e}")


def test_bj_coverage_calibrates_on_the_normal_channel():
    # effects drawn straight from the random-effects model with known
    # within-study variances: here the mixture distribution is exact
    rng = np.random.default_rng(20240803)
    k, tau2_true, reps = 10, 0.25, 2000
    hits = 0
    for _ in range(reps):
        sig2 = rng.uniform(0.1, 0.5, k)
        theta_hat = rng.normal(0.4, np.sqrt(sig2 + tau2_true))
        ci = bj_interval(EffectSample.from_summaries(theta_hat, sig2))
        hits += ci.lower <= tau2_true and (ci.open_upper or tau2_true <= ci.upper)
    coverage = hits / reps
    assert 0.935 <= coverage <= 0.965
    print(f"\n[calibration] BJ coverage on the normal channel: {coverage:.4f}")


def test_tau2_intervals_conservative_at_zero_heterogeneity():
    t0 = time.perf_counter()
    cfg = SimConfig(k=10, size_scheme="equal", n=250, q=0.5, theta=0.5,
                    tau2=0.0, p_c=0.1, replications=5000, seed=101)
    tokens = {"QP", "BJ", "J_ci", "PL", "KD_ci"}
    metrics = aggregate(run_sweep([cfg], estimator_set=tokens))
    elapsed = time.perf_counter() - t0
    rows = {m.method: m for m in metrics if m.metric == "coverage_tau2"}
    assert set(rows) == {"QP", "BJ", "J", "PL", "KD"}
    for method, m in sorted(rows.items()):
        assert m.value >= 0.95 - 2.0 * m.mc_se, (
            f"{method} coverage {m.value:.4f} below 0.95 - 2*{m.mc_se:.4f}"
        )
    assert elapsed < 600.0
    summary = ", ".join(f"{name} {rows[name].value:.4f}" for name in sorted(rows))
    print(f"\n[null conservatism] {elapsed:.0f}s, coverage: {summary}")


def test_ssw_point_nearly_unbiased():
    cfg = SimConfig(k=10, size_scheme="equal", n=250, q=0.5, theta=1.0,
                    tau2=0.4, p_c=0.2, replications=10_000, seed=102)
    metrics = aggregate(run_sweep([cfg], estimator_set={"SSW", "IV_DL"}))
    bias = {m.method: m.value for m in metrics if m.metric == "bias_theta"}
    assert abs(bias["SSW"]) <= 0.02
    assert abs(bias["SSW"]) < abs(bias["IV_DL"])
    print(f"\n[ssw bias] SSW {bias['SSW']:+.4f} vs IV_DL {bias['IV_DL']:+.4f}")


def test_ssw_kd_interval_coverage_floor():
    # twelve cells spanning both risks, both effect sizes, three
    # heterogeneity levels and both study counts at n=100
    grid = [
        SimConfig(k=k, size_scheme="equal", n=100, q=0.5, theta=theta,
                  tau2=tau2, p_c=p_c, replications=2000, seed=103)
        for p_c, k in ((0.1, 5), (0.4, 10))
        for theta in (0.0, 2.0)
        for tau2 in (0.0, 0.4, 1.0)
    ]
    metrics = aggregate(run_sweep(grid, estimator_set={"SSW_KD"}))
    rows = [m for m in metrics if m.metric == "coverage_theta"]
    assert len(rows) == 12
    worst = min(rows, key=lambda m: m.value - (0.93 - 2 * m.mc_se))
    for m in rows:
        assert m.value >= 0.93 - 2.0 * m.mc_se, (
            f"cell p_c={m.p_c} theta={m.theta} tau2={m.tau2} k={m.k}: "
            f"coverage {m.value:.4f} below floor"
        )
    print(f"\n[ssw-kd floor] 12 cells, min coverage {worst.value:.4f} "
          f"(cell p_c={worst.p_c}, theta={worst.theta}, tau2={worst.tau2}, "
          f"k={worst.k})")


def test_iv_dl_bias_increases_with_heterogeneity():
    tau2s = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    grid = [
        SimConfig(k=10, size_scheme="equal", n=40, q=0.5, theta=1.5,
                  tau2=t, p_c=0.1, replications=4000, seed=104)
        for t in tau2s
    ]
    metrics = aggregate(run_sweep(grid, estimator_set={"IV_DL"}))
    bias = {m.tau2: m.value for m in metrics if m.metric == "bias_theta"}
    x = np.array(tau2s)
    y = np.array([bias[t] for t in tau2s])
    xc = x - x.mean()
    slope = xc.dot(y) / xc.dot(xc)
    resid = y - y.mean() - slope * xc
    se = math.sqrt(resid.dot(resid) / (len(x) - 2) / xc.dot(xc))
    t_stat = slope / se
    assert slope > 0.0
    assert t_stat > 2.0
    print(f"\n[iv bias trend] slope {slope:+.4f}, t = {t_stat:.1f}, "
          f"bias at ends {y[0]:+.4f} -> {y[-1]:+.4f}")


def test_corrected_q_mean_tracks_empirical_mean():
    # provider evaluated at the true parameters of a homogeneous design
    k, n, p_c, a = 5, 20, 0.1, 0.5
    sample = EffectSample(
        theta_hat=np.zeros(k),
        sigma2_hat=np.ones(k),
        n_t=np.full(k, n, dtype=np.int64),
        n_c=np.full(k, n, dtype=np.int64),
        p_c_hat=np.full(k, p_c),
        policy=ZeroCellPolicy.ALWAYS_HALF,
        a=a,
    )
    kd_mean, _ = KDCorrected().moments(sample, 0.0)

    # brute-force channel: 20,000 homogeneous meta-analyses, always-adjusted
    rng = np.random.default_rng(20240808)
    reps = 20_000
    x_t = rng.binomial(n, p_c, size=(reps, k))
    x_c = rng.binomial(n, p_c, size=(reps, k))
    keep = ~(((x_t == 0) & (x_c == 0)) | ((x_t == n) & (x_c == n)))
    den = n + 2.0 * a
    p_t_hat = (x_t + a) / den
    p_c_hat = (x_c + a) / den
    theta = (np.log(p_t_hat / (1 - p_t_hat)) - np.log(p_c_hat / (1 - p_c_hat)))
    sig2 = 1.0 / (den * p_t_hat * (1 - p_t_hat)) + 1.0 / (den * p_c_hat * (1 - p_c_hat))
    w = np.where(keep, 1.0 / sig2, 0.0)
    theta = np.where(keep, theta, 0.0)
    rows = keep.sum(axis=1) >= 2
    w, theta = w[rows], theta[rows]
    center = (w * theta).sum(axis=1) / w.sum(axis=1)
    qs = (w * (theta - center[:, None]) ** 2).sum(axis=1)
    emp_mean = qs.mean()
    emp_se = qs.std(ddof=1) / math.sqrt(qs.size)

    assert abs(kd_mean - emp_mean) <= 2.0 * emp_se
    assert abs(kd_mean - (k - 1)) > abs(kd_mean - emp_mean)
    print(f"\n[corrected mean] provider {kd_mean:.4f}, empirical "
          f"{emp_mean:.4f} +- {emp_se:.4f}, nominal {k - 1}")


def test_sweep_determinism_and_throughput(tmp_path):
    # byte-identity across reruns and worker counts, via the CLI
    argv = ["simulate", "--k", "5", "--n", "40", "--q", "0.5", "--theta",
            "0.5", "--tau2", "0.1", "--pc", "0.1", "--reps", "50",
            "--seed", "5"]
    outs = [tmp_path / f"raw{i}.csv" for i in range(3)]
    assert cli_main(argv + ["--out", str(outs[0])]) == 0
    assert cli_main(argv + ["--out", str(outs[1])]) == 0
    assert cli_main(argv + ["--out", str(outs[2]), "--workers", "2"]) == 0
    blobs = [p.read_bytes() for p in outs]
    assert blobs[0] == blobs[1] == blobs[2]

    # throughput: 100 cells x 1000 replicates, full estimator roster,
    # within a 4-core x 5-minute budget of CPU seconds on a single core
    grid = [
        SimConfig(k=5, size_scheme="equal", n=40, q=0.5, theta=theta,
                  tau2=tau2, p_c=p_c, replications=1000, seed=0)
        for theta in (0.0, 0.5, 1.0, 1.5, 2.0)
        for tau2 in [round(i / 10, 10) for i in range(10)]
        for p_c in (0.1, 0.2)
    ]
    assert len(grid) == 100
    t0 = time.process_time()
    count = sum(1 for _ in run_sweep(grid, workers=1))
    cpu = time.process_time() - t0
    assert count == 100 * 1000 * 37
    assert cpu <= 1200.0
    print(f"\n[throughput] {count} records in {cpu:.0f} CPU s "
          f"({cpu / 100_000 * 1000:.2f} ms/replicate); byte-identity held")


def test_numerical_properties():
    rng = np.random.default_rng(20240810)

    # finite-difference check of the restricted-likelihood score at optima
    h = 1e-6
    interior = 0
    worst_fd = 0.0
    for _ in range(300):
        s = _random_sample(rng)
        t = reml_estimate(s).value
        if t <= 1e-3:
            continue
        interior += 1
        fd = (restricted_loglik(s, t + h) - restricted_loglik(s, t - h)) / (2 * h)
        worst_fd = max(worst_fd, abs(fd))
    assert interior >= 50
    assert worst_fd < 1e-6

    # Q-profile monotonicity in tau2
    worst_rise = -np.inf
    grid = np.linspace(0.0, 5.0, 21)
    for _ in range(1000):
        s = _random_sample(rng)
        q = np.array([_q_at(s.theta_hat, s.sigma2_hat, t) for t in grid])
        worst_rise = max(worst_rise, float(np.diff(q).max()))
    assert worst_rise <= 1e-12

    # mixture CDF against a million-draw empirical CDF
    lam = np.array([0.4, 1.0, 2.2, 3.5])
    draws = rng.chisquare(1.0, size=(1_000_000, lam.size)).dot(lam)
    probs = np.linspace(0.05, 0.95, 10)
    worst_z = 0.0
    for p, x in zip(probs, np.quantile(draws, probs)):
        se = math.sqrt(p * (1 - p) / draws.size)
        worst_z = max(worst_z, abs(weighted_chisq_mixture_cdf(lam, float(x)) - p) / se)
    assert worst_z <= 3.0

    # gamma moment matching is exact
    worst_gamma = 0.0
    for mean in (0.5, 4.0, 123.4):
        for var in (0.25, 8.0, 77.0):
            g = GammaFit.from_moments(mean, var)
            worst_gamma = max(
                worst_gamma,
                abs(g.mean - mean) / mean,
                abs(g.variance - var) / var,
            )
    assert worst_gamma < 1e-12

    print(f"\n[numerics] REML score FD {worst_fd:.2e} ({interior} interior), "
          f"max Q-profile rise {worst_rise:.2e}, mixture-CDF max |z| "
          f"{worst_z:.2f}, gamma matching {worst_gamma:.2e}")
