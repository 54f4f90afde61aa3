"""Compiled inner loops for the EP family of estimators.

One site visit costs O(n) and a full sweep O(n^2), so the sweep lives here
as a numba kernel; the surrounding linear algebra (posterior refresh,
evidence assembly) stays in numpy/scipy.  The Cholesky row/column deletion
used by the jackknife also lives here.

Stability notes: all probit quantities run through a log-CDF with an
asymptotic branch below z = -33, and phi/Phi ratios are formed in log space,
so site updates are well behaved for |z| up to several hundred.
"""

import math

import numpy as np
from numba import njit

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


@njit(cache=True)
def log_ndtr(z):
    """log Phi(z), accurate over the whole real line."""
    if z >= 0.0:
        return math.log1p(-0.5 * math.erfc(z * _INV_SQRT2))
    if z > -33.0:
        return math.log(0.5 * math.erfc(-z * _INV_SQRT2))
    # asymptotic: Phi(z) = phi(z)/(-z) * (1 - 1/z^2 + 3/z^4 - 15/z^6 + 105/z^8 + ...)
    zi2 = 1.0 / (z * z)
    s = zi2 * (-1.0 + zi2 * (3.0 + zi2 * (-15.0 + zi2 * 105.0)))
    return -0.5 * z * z - math.log(-z) - _LOG_SQRT_2PI + math.log1p(s)


@njit(cache=True)
def log_npdf(z):
    return -0.5 * z * z - _LOG_SQRT_2PI


@njit(cache=True)
def probit_moments(y, mu, var, t, sig2e):
    """(log Z, dlogZ/dmu, d2logZ/dmu2) of the tilted probit integral
    Z = int N(g; mu, var) P(y | g) dg with P(y=1|g) = Phi((g-t)/sqrt(sig2e))."""
    s = math.sqrt(sig2e + var)
    sgn = 1.0 if y == 1 else -1.0
    z = sgn * (mu - t) / s
    lZ = log_ndtr(z)
    q = math.exp(log_npdf(z) - lZ)        # phi(z)/Phi(z)
    d1 = sgn * q / s
    d2 = -q * (z + q) / (s * s)
    return lZ, d1, d2


@njit(cache=True)
def aep_ratio_moments(y, mu, var, t, sig2e, s0, s1, log_s0, log_s1):
    """(log R, d1, d2) of the ascertainment-corrected site objective

        R(mu) = s^y * Phi_y(z) / (s0 * Phi(-z) + s1 * Phi(z)),

    z = (mu-t)/sqrt(sig2e+var).  The denominator is P(s=1 | cavity) by the
    law of total probability over y.  Derivatives are with respect to mu.
    With s0 == s1 == 1 this reduces exactly (bitwise) to probit_moments.
    """
    lZ, d1, d2 = probit_moments(y, mu, var, t, sig2e)
    sdiff = s1 - s0
    if sdiff == 0.0 and s1 == 1.0:
        return lZ, d1, d2
    s = math.sqrt(sig2e + var)
    zp = (mu - t) / s
    log_num = lZ + (log_s1 if y == 1 else log_s0)
    log_den = np.logaddexp(log_s0 + log_ndtr(-zp), log_s1 + log_ndtr(zp))
    arg = log_npdf(zp) - log_den
    if arg > 700.0:
        arg = 700.0
    w = sdiff * math.exp(arg) / s
    log_r = log_num - log_den
    d1r = d1 - w
    d2r = d2 + (zp / s) * w + w * w
    return log_r, d1r, d2r


@njit(cache=True)
def log_partition_gaussian(nu_site, tau_site, mu_cav, var_cav):
    """log int N(g; mu_cav, var_cav) exp(nu_site*g - tau_site*g^2/2) dg."""
    den = 1.0 + tau_site * var_cav
    return -0.5 * math.log(den) + (
        nu_site * nu_site * var_cav + 2.0 * mu_cav * nu_site - tau_site * mu_cav * mu_cav
    ) / (2.0 * den)


@njit(cache=True, fastmath=True)
def sweep(Sigma, mu, tau, nu, y, t, sig2e, s0, s1, log_s0, log_s1):
    """One sequential sweep of site updates, in unit order.

    Mutates Sigma, mu (rank-one posterior updates), tau, nu (site naturals).
    A proposed update failing positivity (non-positive cavity precision or
    non-positive site precision) is damped by 0.8 on the natural parameters,
    the damping halving on each repeat failure; after 5 failed attempts the
    site is skipped for this sweep.  Returns (max |dtau|, max |dnu|,
    number of skipped sites).
    """
    n = y.shape[0]
    max_dt = 0.0
    max_dn = 0.0
    n_skipped = 0
    for i in range(n):
        sii = Sigma[i, i]
        tau_cav = 1.0 / sii - tau[i]
        if tau_cav <= 1e-12:
            n_skipped += 1
            continue
        nu_cav = mu[i] / sii - nu[i]
        mu_cav = nu_cav / tau_cav
        var_cav = 1.0 / tau_cav
        _, d1, d2 = aep_ratio_moments(y[i], mu_cav, var_cav, t[i], sig2e,
                                      s0, s1, log_s0, log_s1)
        den = 1.0 + d2 * var_cav
        accepted = False
        tau_new = tau[i]
        nu_new = nu[i]
        if den > 1e-300:
            tau_star = -d2 / den
            nu_star = (d1 - mu_cav * d2) / den
            if tau_star > 0.0:
                tau_new = tau_star
                nu_new = nu_star
                accepted = True
            else:
                eta = 0.8
                for _ in range(5):
                    tau_c = (1.0 - eta) * tau[i] + eta * tau_star
                    if tau_c > 0.0:
                        tau_new = tau_c
                        nu_new = (1.0 - eta) * nu[i] + eta * nu_star
                        accepted = True
                        break
                    eta *= 0.5
        if not accepted:
            n_skipped += 1
            continue
        dtt = tau_new - tau[i]
        dtn = nu_new - nu[i]
        tau[i] = tau_new
        nu[i] = nu_new
        if abs(dtt) > max_dt:
            max_dt = abs(dtt)
        if abs(dtn) > max_dn:
            max_dn = abs(dtn)
        # rank-one refresh of the posterior: Sigma <- (Sigma^-1 + dtt e_i e_i')^-1
        col = Sigma[:, i].copy()
        ci = dtt / (1.0 + dtt * sii)
        coef_mu = ci * (mu[i] + sii * dtn) - dtn
        for j in range(n):
            mu[j] -= coef_mu * col[j]
        for j in range(n):
            cj = ci * col[j]
            for k in range(n):
                Sigma[j, k] -= cj * col[k]
    return max_dt, max_dn, n_skipped


@njit(cache=True, fastmath=True)
def cholesky_delete(R, i):
    """Remove row/column i from an SPD matrix given only its upper Cholesky
    factor R (R'R = B), restoring triangularity with Givens rotations.

    Returns the (n-1)x(n-1) upper factor of B with row and column i removed,
    in O((n-i)^2) time.
    """
    n = R.shape[0]
    m = n - 1
    M = np.empty((n, m))
    for r in range(n):
        for c in range(m):
            M[r, c] = R[r, c] if c < i else R[r, c + 1]
    for k in range(i, m):
        a = M[k, k]
        b = M[k + 1, k]
        if b != 0.0:
            r = math.hypot(a, b)
            cth = a / r
            sth = b / r
            for c in range(k, m):
                t1 = M[k, c]
                t2 = M[k + 1, c]
                M[k, c] = cth * t1 + sth * t2
                M[k + 1, c] = -sth * t1 + cth * t2
        M[k + 1, k] = 0.0
    out = np.empty((m, m))
    for r in range(m):
        sign = 1.0 if M[r, r] >= 0.0 else -1.0
        for c in range(m):
            out[r, c] = sign * M[r, c] if c >= r else 0.0
    return out


@njit(cache=True, fastmath=True)
def loo_gaussian_objectives(R, G, sw, nu, theta):
    """Leave-one-out profile of the frozen-site Gaussian evidence terms.

    With sites frozen, the EP evidence depends on theta only through
    -sum(log diag chol(B)) + 0.5 * nu' (K^-1 + S)^-1 nu with K = theta*G and
    B = I + S^1/2 K S^1/2; R is the upper Cholesky factor of the full B at
    this theta.  Returns the n-vector of these terms with unit i removed,
    each obtained from R by a Givens row/column deletion in O(n^2).
    """
    n = G.shape[0]
    Knu = theta * (G @ nu)
    c0 = 0.0
    for j in range(n):
        c0 += nu[j] * Knu[j]
    out = np.empty(n)
    b = np.empty(n - 1)
    for i in range(n):
        Ri = cholesky_delete(R, i)
        logdet = 0.0
        for k in range(n - 1):
            logdet += math.log(Ri[k, k])
        qf_full = c0 - 2.0 * nu[i] * Knu[i] + theta * G[i, i] * nu[i] * nu[i]
        idx = 0
        for j in range(n):
            if j == i:
                continue
            b[idx] = sw[j] * (Knu[j] - theta * G[j, i] * nu[i])
            idx += 1
        # forward solve R' x = b (R upper => R' lower triangular)
        ss = 0.0
        for r in range(n - 1):
            acc = b[r]
            for c in range(r):
                acc -= Ri[c, r] * b[c]
            b[r] = acc / Ri[r, r]
            ss += b[r] * b[r]
        out[i] = -logdet + 0.5 * (qf_full - ss)
    return out
