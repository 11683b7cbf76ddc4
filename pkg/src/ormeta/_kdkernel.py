"""Low-level kernels for corrected Q moments and chi-square mixtures.

Everything in this module is numba-compiled and operates on plain arrays.
The public interfaces live in :mod:`ormeta.qstats`.

The corrected-moment computation models each retained study as an
independent pair of binomial draws (control arm at its observed adjusted
event proportion, treatment arm at the logit-shifted proportion implied by a
common anchor log-odds-ratio plus an optional normal between-study effect).
Study-level weights and deviations are random through the simulated counts;
the mean and variance of the weighted dispersion statistic

    Q = sum_i w_i (theta_i - theta_bar_w)^2,   w_i = 1/(v_i + tau2)

are obtained from the exact per-study joint moments of (w, d) on the
binomial atom grids, assembled through a third-order expansion of 1/W around
its mean (W = sum w_i).  Double-zero tables are handled the way the
estimators handle them: excluded, with the statistic computed on the
retained studies.  Exclusion patterns of up to two studies are mixed
exactly; higher-order patterns carry negligible probability.
"""

import math

import numpy as np
from numba import njit

# Raw per-study moment layout: E[w^a d^b] for the (a, b) pairs below, where
# w is the study weight at the candidate tau2 and d the deviation of the
# study log-odds-ratio from the anchor.
#  0: (1,0)   1: (2,0)
#  2: (1,1)   3: (2,1)   4: (3,1)
#  5: (1,2)   6: (2,2)   7: (3,2)   8: (4,2)
#  9: (2,3)  10: (3,3)  11: (4,3)
# 12: (2,4)  13: (3,4)  14: (4,4)  15: (5,4)
N_RAW = 16

# Derived per-study columns used by the assembly:
#  0 w1    E[w]                 1 vw    Var(w)
#  2 s1    E[S], S = w d        3 k2    kappa2(S)
#  4 k3    kappa3(S)            5 k4    kappa4(S)
#  6 a1    E[A], A = w d^2      7 va    Var(A)
#  8 sd1   E[S dw]              9 sd2   E[S^2 dw]      (dw = w - E w)
# 10 sdd1  E[S dw^2]           11 sdd2  E[S^2 dw^2]
# 12 as1   E[A S]              13 as2   E[A S^2]
# 14 ad1   E[A dw]             15 asd1  E[A S dw]
# 16 asd2  E[A S^2 dw]         17 s3d1  E[S^3 dw]
# 18 s4d1  E[S^4 dw]
N_DER = 19


@njit(cache=True)
def _derived_from_raw(moms):
    k = moms.shape[0]
    D = np.empty((k, N_DER))
    for i in range(k):
        m = moms[i]
        w1 = m[0]
        s1, s2, s3, s4 = m[2], m[6], m[10], m[14]
        a1, a2 = m[5], m[12]
        D[i, 0] = w1
        D[i, 1] = m[1] - w1 * w1
        D[i, 2] = s1
        D[i, 3] = s2 - s1 * s1
        D[i, 4] = s3 - 3.0 * s2 * s1 + 2.0 * s1 ** 3
        D[i, 5] = s4 - 4.0 * s3 * s1 - 3.0 * s2 * s2 + 12.0 * s2 * s1 * s1 - 6.0 * s1 ** 4
        D[i, 6] = a1
        D[i, 7] = a2 - a1 * a1
        D[i, 8] = m[3] - w1 * s1
        D[i, 9] = m[7] - w1 * s2
        D[i, 10] = m[4] - 2.0 * w1 * m[3] + w1 * w1 * s1
        D[i, 11] = m[8] - 2.0 * w1 * m[7] + w1 * w1 * s2
        D[i, 12] = m[9]
        D[i, 13] = m[13]
        D[i, 14] = m[6] - w1 * a1
        D[i, 15] = m[10] - w1 * m[9]
        D[i, 16] = m[14] - w1 * m[13]
        D[i, 17] = m[11] - w1 * s3
        D[i, 18] = m[15] - w1 * s4
    return D


@njit(cache=True)
def _assemble(D, mask):
    """First two moments of Q over the studies selected by ``mask``.

    Q = A - B^2/W with A = sum w d^2, B = sum w d, W = sum w; 1/W is expanded
    to third order around E[W], using the independence of the studies.
    Returns (E[Q], E[Q^2]).
    """
    k = D.shape[0]
    # subset totals
    W = 0.0
    K1 = 0.0
    K2 = 0.0
    K3 = 0.0
    K4 = 0.0
    EA = 0.0
    SVA = 0.0
    Tsd1 = 0.0
    Tsd1sq = 0.0
    Tsd2 = 0.0
    Tas1 = 0.0
    Sa1sd2 = 0.0
    Sas1sd1 = 0.0
    Sa1sd1 = 0.0
    Sa1s1 = 0.0
    Ssd1s1 = 0.0
    Sa1s1sd1 = 0.0
    for i in range(k):
        if not mask[i]:
            continue
        W += D[i, 0]
        K1 += D[i, 2]
        K2 += D[i, 3]
        K3 += D[i, 4]
        K4 += D[i, 5]
        EA += D[i, 6]
        SVA += D[i, 7]
        sd1 = D[i, 8]
        Tsd1 += sd1
        Tsd1sq += sd1 * sd1
        Tsd2 += D[i, 9]
        Tas1 += D[i, 12]
        Sa1sd2 += D[i, 6] * D[i, 9]
        Sas1sd1 += D[i, 12] * sd1
        Sa1sd1 += D[i, 6] * sd1
        Sa1s1 += D[i, 6] * D[i, 2]
        Ssd1s1 += sd1 * D[i, 2]
        Sa1s1sd1 += D[i, 6] * D[i, 2] * sd1

    EB2 = K2 + K1 * K1
    EB4 = K4 + 4.0 * K3 * K1 + 3.0 * K2 * K2 + 6.0 * K2 * K1 * K1 + K1 ** 4
    EA2 = SVA + EA * EA

    # sums over single excluded-index decompositions
    T1 = 0.0  # E[B^2 dW]
    T2 = 0.0  # E[B^2 dW^2], same-study part
    T3 = 0.0  # E[A B^2]
    T4 = 0.0  # E[B^4 dW]
    T5 = 0.0  # E[A B^2 dW], same-study part
    for m in range(k):
        if not mask[m]:
            continue
        s1 = D[m, 2]
        K1m = K1 - s1
        K2m = K2 - D[m, 3]
        M2m = K2m + K1m * K1m
        M3m = (K3 - D[m, 4]) + 3.0 * K2m * K1m + K1m ** 3
        sd1 = D[m, 8]
        sd2 = D[m, 9]
        T1 += sd2 + 2.0 * sd1 * K1m
        T2 += D[m, 11] + 2.0 * D[m, 10] * K1m + D[m, 1] * M2m
        T3 += D[m, 13] + 2.0 * D[m, 12] * K1m + D[m, 6] * M2m
        T4 += 4.0 * sd1 * M3m + 6.0 * sd2 * M2m + 4.0 * D[m, 17] * K1m + D[m, 18]
        T5 += D[m, 16] + 2.0 * D[m, 15] * K1m + D[m, 14] * M2m

    EB2DW = T1
    EB2DW2 = T2 + 2.0 * (Tsd1 * Tsd1 - Tsd1sq)
    EAB2 = T3
    EB4DW = T4
    # cross-study part of E[A B^2 dW] (A from one study, dW from another)
    P1 = EA * Tsd2 - Sa1sd2
    P2 = Tas1 * Tsd1 - Sas1sd1
    P3 = (
        K1 * (EA * Tsd1 - Sa1sd1)
        - (Sa1s1 * Tsd1 - Sa1s1sd1)
        - (EA * Ssd1s1 - Sa1s1sd1)
    )
    EAB2DW = T5 + P1 + 2.0 * P2 + 2.0 * P3

    iW = 1.0 / W
    EQ = EA - EB2 * iW + EB2DW * iW * iW - EB2DW2 * iW * iW * iW
    EQ2 = (
        EA2
        - 2.0 * EAB2 * iW
        + 2.0 * EAB2DW * iW * iW
        + EB4 * iW * iW
        - 2.0 * EB4DW * iW * iW * iW
    )
    return EQ, EQ2


@njit(cache=True)
def _mixture(D, pi, pattern_tol):
    """Mix the subset moments over double-zero exclusion patterns.

    Patterns excluding zero, one, or two studies are enumerated for the
    studies whose exclusion probability exceeds ``pattern_tol``; the pattern
    probabilities are renormalised over the enumerated set.  Patterns that
    would leave fewer than two studies are skipped, mirroring the
    estimators' behaviour on real data.
    """
    k = D.shape[0]
    mask = np.ones(k, dtype=np.bool_)
    p_all = 1.0
    for i in range(k):
        p_all *= 1.0 - pi[i]
    EQ, EQ2 = _assemble(D, mask)
    acc_w = p_all
    acc_e = p_all * EQ
    acc_e2 = p_all * EQ2

    dz = np.where(pi > pattern_tol)[0]
    if dz.size > 0 and k >= 3:
        for a_idx in range(dz.size):
            m = dz[a_idx]
            w_m = p_all * pi[m] / (1.0 - pi[m])
            mask[m] = False
            EQ, EQ2 = _assemble(D, mask)
            mask[m] = True
            acc_w += w_m
            acc_e += w_m * EQ
            acc_e2 += w_m * EQ2
        if k >= 4:
            for a_idx in range(dz.size):
                for b_idx in range(a_idx + 1, dz.size):
                    m = dz[a_idx]
                    l = dz[b_idx]
                    w_ml = (
                        p_all
                        * pi[m]
                        / (1.0 - pi[m])
                        * pi[l]
                        / (1.0 - pi[l])
                    )
                    mask[m] = False
                    mask[l] = False
                    EQ, EQ2 = _assemble(D, mask)
                    mask[m] = True
                    mask[l] = True
                    acc_w += w_ml
                    acc_e += w_ml * EQ
                    acc_e2 += w_ml * EQ2

    mean = acc_e / acc_w
    e2 = acc_e2 / acc_w
    var = e2 - mean * mean
    if var < 1e-12:
        var = 1e-12
    return mean, var


@njit(cache=True)
def _stable_expit(eta):
    if eta >= 0.0:
        p = 1.0 / (1.0 + math.exp(-eta))
    else:
        e = math.exp(eta)
        p = e / (1.0 + e)
    if p < 1e-300:
        p = 1e-300
    if p > 1.0 - 1e-16:
        p = 1.0 - 1e-16
    return p


@njit(cache=True)
def _atom_bounds(n, p):
    sd = math.sqrt(n * p * (1.0 - p))
    lo = int(max(0.0, math.floor(n * p - 10.0 * sd - 5.0)))
    hi = int(min(float(n), math.ceil(n * p + 10.0 * sd + 5.0)))
    return lo, hi


@njit(cache=True)
def _fill_binom_pmf(out, lo, hi, n, p):
    """Add Binomial(n, p) probabilities for x in [lo, hi] into ``out``."""
    lgn = math.lgamma(n + 1.0)
    logp = math.log(p)
    log1mp = math.log1p(-p)
    for j in range(hi - lo + 1):
        x = lo + j
        lp = (
            lgn
            - math.lgamma(x + 1.0)
            - math.lgamma(n - x + 1.0)
            + x * logp
            + (n - x) * log1mp
        )
        out[j] += math.exp(lp)


@njit(cache=True)
def _study_raw_moments(n_t, n_c, p_c, theta0, tau2, a, gh_x, gh_w):
    """Per-study raw joint moments of (w, d) and double-zero probabilities."""
    k = n_t.size
    moms = np.zeros((k, N_RAW))
    pi = np.zeros(k)
    sq2t = math.sqrt(2.0 * tau2) if tau2 > 0.0 else 0.0
    inv_sqrt_pi = 1.0 / math.sqrt(math.pi)
    n_nodes = gh_x.size if tau2 > 0.0 else 1

    for i in range(k):
        nt = int(n_t[i])
        nc = int(n_c[i])
        pc = p_c[i]
        lc0 = math.log(pc / (1.0 - pc))

        # control-arm atoms
        loc, hic = _atom_bounds(nc, pc)
        Ac = hic - loc + 1
        Pc = np.zeros(Ac)
        _fill_binom_pmf(Pc, loc, hic, nc, pc)
        tot = 0.0
        for j in range(Ac):
            tot += Pc[j]
        for j in range(Ac):
            Pc[j] /= tot
        lcv = np.empty(Ac)
        vcv = np.empty(Ac)
        nadj_c = nc + 2.0 * a
        for j in range(Ac):
            x = loc + j
            xa = x + a
            nxa = nc - x + a
            lcv[j] = math.log(xa / nxa)
            vcv[j] = nadj_c / (xa * nxa)

        # treatment-arm atoms: marginal over the between-study effect
        lot = nt
        hit = 0
        pt_nodes = np.empty(n_nodes)
        for m in range(n_nodes):
            if tau2 > 0.0:
                eta = lc0 + theta0 + sq2t * gh_x[m]
            else:
                eta = lc0 + theta0
            ptm = _stable_expit(eta)
            pt_nodes[m] = ptm
            lo_m, hi_m = _atom_bounds(nt, ptm)
            if lo_m < lot:
                lot = lo_m
            if hi_m > hit:
                hit = hi_m
        At = hit - lot + 1
        Pt = np.zeros(At)
        for m in range(n_nodes):
            um = gh_w[m] * inv_sqrt_pi if tau2 > 0.0 else 1.0
            tmp = np.zeros(At)
            _fill_binom_pmf(tmp, lot, hit, nt, pt_nodes[m])
            for j in range(At):
                Pt[j] += um * tmp[j]
        tot = 0.0
        for j in range(At):
            tot += Pt[j]
        for j in range(At):
            Pt[j] /= tot
        ltv = np.empty(At)
        vtv = np.empty(At)
        nadj_t = nt + 2.0 * a
        for j in range(At):
            x = lot + j
            xa = x + a
            nxa = nt - x + a
            ltv[j] = math.log(xa / nxa)
            vtv[j] = nadj_t / (xa * nxa)

        # double-zero probability under the model
        pdz = 0.0
        if lot == 0 and loc == 0:
            pdz += Pt[0] * Pc[0]
        if hit == nt and hic == nc:
            pdz += Pt[At - 1] * Pc[Ac - 1]
        pi[i] = pdz

        # accumulate the 16 raw moments, skipping double-zero cells
        m0 = 0.0
        m1 = 0.0
        m2 = 0.0
        m3 = 0.0
        m4 = 0.0
        m5 = 0.0
        m6 = 0.0
        m7 = 0.0
        m8 = 0.0
        m9 = 0.0
        m10 = 0.0
        m11 = 0.0
        m12 = 0.0
        m13 = 0.0
        m14 = 0.0
        m15 = 0.0
        for it in range(At):
            xt = lot + it
            pt_prob = Pt[it]
            lt = ltv[it]
            vt = vtv[it]
            for ic in range(Ac):
                xc = loc + ic
                if (xt == 0 and xc == 0) or (xt == nt and xc == nc):
                    continue
                pr = pt_prob * Pc[ic]
                w = 1.0 / (vt + vcv[ic] + tau2)
                d = lt - lcv[ic] - theta0
                w2 = w * w
                w3 = w2 * w
                w4 = w2 * w2
                d2 = d * d
                m0 += pr * w
                m1 += pr * w2
                prd = pr * d
                m2 += prd * w
                m3 += prd * w2
                m4 += prd * w3
                prd2 = pr * d2
                m5 += prd2 * w
                m6 += prd2 * w2
                m7 += prd2 * w3
                m8 += prd2 * w4
                prd3 = prd2 * d
                m9 += prd3 * w2
                m10 += prd3 * w3
                m11 += prd3 * w4
                prd4 = prd2 * d2
                m12 += prd4 * w2
                m13 += prd4 * w3
                m14 += prd4 * w4
                m15 += prd4 * w4 * w
        keep = 1.0 - pdz
        if keep < 1e-12:
            keep = 1e-12
        moms[i, 0] = m0 / keep
        moms[i, 1] = m1 / keep
        moms[i, 2] = m2 / keep
        moms[i, 3] = m3 / keep
        moms[i, 4] = m4 / keep
        moms[i, 5] = m5 / keep
        moms[i, 6] = m6 / keep
        moms[i, 7] = m7 / keep
        moms[i, 8] = m8 / keep
        moms[i, 9] = m9 / keep
        moms[i, 10] = m10 / keep
        moms[i, 11] = m11 / keep
        moms[i, 12] = m12 / keep
        moms[i, 13] = m13 / keep
        moms[i, 14] = m14 / keep
        moms[i, 15] = m15 / keep
    return moms, pi


@njit(cache=True)
def _kd_moments(n_t, n_c, p_c, theta0, tau2, a, gh_x, gh_w, pattern_tol):
    moms, pi = _study_raw_moments(n_t, n_c, p_c, theta0, tau2, a, gh_x, gh_w)
    D = _derived_from_raw(moms)
    return _mixture(D, pi, pattern_tol)


@njit(cache=True)
def _ruben_series(r, half_k, y, F0, a0, tol, max_terms):
    """Farebrother/Ruben series for P(sum lam_i chi2_1 <= q).

    ``r`` holds 1 - beta/lam_i (beta the smallest weight), ``half_k`` is
    K/2, ``y`` = q/(2 beta), ``F0`` the chi-square-K CDF at q/beta and
    ``a0`` the leading mixture coefficient.  With this choice of beta the
    coefficients are nonnegative and sum to one, so the truncation error is
    bounded by the unassigned coefficient mass times the current CDF term.
    Returns (probability, error bound, terms used, converged flag).
    """
    cap = 512 if max_terms > 512 else max_terms
    a = np.empty(cap + 1)
    g = np.empty(cap + 1)
    a[0] = a0
    cum_a = a0
    F = F0
    total = a0 * F0
    s = half_k
    nr = r.size
    rpow = r.copy()
    logy = math.log(y) if y > 0.0 else -np.inf
    j = 0
    while j < max_terms:
        j += 1
        if j > cap:
            new_cap = cap * 2
            if new_cap > max_terms:
                new_cap = max_terms
            a_new = np.empty(new_cap + 1)
            g_new = np.empty(new_cap + 1)
            for t in range(cap + 1):
                a_new[t] = a[t]
                g_new[t] = g[t]
            a = a_new
            g = g_new
            cap = new_cap
        gj = 0.0
        for i in range(nr):
            gj += rpow[i]
            rpow[i] *= r[i]
        g[j] = gj
        acc = 0.0
        for m in range(1, j + 1):
            acc += g[m] * a[j - m]
        a[j] = acc / (2.0 * j)
        # advance the chi-square CDF from K + 2(j-1) to K + 2j dof
        T = math.exp(s * logy - y - math.lgamma(s + 1.0))
        F -= T
        if F < 0.0:
            F = 0.0
        s += 1.0
        cum_a += a[j]
        total += a[j] * F
        rem = 1.0 - cum_a
        if rem < 0.0:
            rem = 0.0
        bound = rem * F
        if bound <= tol:
            return total, bound, j, True
    return total, (1.0 - cum_a) * F, max_terms, False
