"""Expectation propagation for probit Gaussian-process classification.

Sites are unnormalized Gaussians t_i(g) = r_i N(g; alpha_i, gamma_i), held
internally in natural form (tau_i = 1/gamma_i, nu_i = alpha_i/gamma_i).  One
fit alternates sequential sweeps of site updates with a full posterior
refresh through the Cholesky factor of B = I + S^1/2 K S^1/2, and assembles
the log evidence from the site amplitudes plus the Gaussian integral

    log Z = sum_i a_i - sum_i log L_ii + 0.5 * nu' mu,

where a_i is set so that the site reproduces its matched zeroth moment at
the final cavity.  The same machinery runs the ascertained variant (aep
module) through the scheme hook of ``fit_sites``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from . import _ep_core
from .model import AscertainmentScheme, Dataset, Kernel, ModelParams, probit_conditional

DEFAULT_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 100


@dataclass
class EPState:
    """Converged (or best-effort) EP approximation for one value of theta."""

    site_log_r: np.ndarray
    site_alpha: np.ndarray
    site_gamma: np.ndarray
    site_tau: np.ndarray
    site_nu: np.ndarray
    post_mean: np.ndarray
    post_cov: np.ndarray
    cavity_mu: np.ndarray
    cavity_var: np.ndarray
    log_evidence: float
    converged: bool
    n_sweeps: int
    final_delta: float
    theta: float
    # per-site log amplitudes a_i (t_i(g) = exp(a_i + nu_i g - tau_i g^2/2)),
    # fixed by the zeroth-moment match at the final cavity
    site_amplitude: np.ndarray = field(repr=False, default=None)
    # data-side constants, kept so the evidence can be reassembled
    y: np.ndarray = field(repr=False, default=None)
    t: np.ndarray = field(repr=False, default=None)
    sigma_eps2: float = 0.0
    s0: float = 1.0
    s1: float = 1.0


def gaussian_probit_integral(mu, var, t, sigma_eps2, y):
    """Log tilted-probit integral and its first two mu-derivatives.

    With z = sgn*(mu-t)/sqrt(sigma_eps2+var) and sgn = +1 for y=1, -1 for
    y=0: returns (log Phi(z), d log/d mu, d2 log/d mu2), stable for any z.
    """
    if var <= 0.0 or sigma_eps2 <= 0.0:
        raise ValueError("var and sigma_eps2 must be positive")
    return _ep_core.probit_moments(int(y), float(mu), float(var), float(t), float(sigma_eps2))


def site_from_derivatives(log_z, d1, d2, mu_cav, var_cav):
    """Convert (log Z, d1, d2) at the cavity into site parameters.

    Tilted pseudo-moments follow the derivative/moment correspondence
    mu_hat = d1*var_cav + mu_cav, var_hat = d2*var_cav^2 + var_cav; the site
    then carries the difference of natural parameters, and log r makes the
    site reproduce Z at the cavity.  Returns
    (log_r, alpha, gamma, tau, nu, valid) with valid False when the update
    would yield a non-positive site precision.
    """
    den = 1.0 + d2 * var_cav
    if den <= 1e-300:
        return math.nan, math.nan, math.inf, 0.0, 0.0, False
    tau = -d2 / den
    nu = (d1 - mu_cav * d2) / den
    if tau <= 0.0:
        return math.nan, math.nan, math.inf, tau, nu, False
    amp = log_z - _ep_core.log_partition_gaussian(nu, tau, mu_cav, var_cav)
    gamma = 1.0 / tau
    alpha = nu * gamma
    log_r = amp + 0.5 * math.log(2.0 * math.pi * gamma) + alpha * alpha / (2.0 * gamma)
    return log_r, alpha, gamma, tau, nu, True


def ep_site_update(i, state: EPState, params: ModelParams, scheme=None):
    """Recompute site i from its cavity in ``state`` (pure, no mutation)."""
    mu_cav = float(state.cavity_mu[i])
    var_cav = float(state.cavity_var[i])
    if scheme is None:
        lz, d1, d2 = gaussian_probit_integral(mu_cav, var_cav, state.t[i],
                                              state.sigma_eps2, state.y[i])
    else:
        lz, d1, d2 = _ep_core.aep_ratio_moments(
            int(state.y[i]), mu_cav, var_cav, float(state.t[i]), state.sigma_eps2,
            scheme.s0, scheme.s1, math.log(scheme.s0), math.log(scheme.s1))
    return site_from_derivatives(lz, d1, d2, mu_cav, var_cav)


def _posterior_from_sites(K, tau, nu):
    """Posterior (Sigma, mu) and log-determinant terms from the prior K and
    site naturals, through B = I + S^1/2 K S^1/2."""
    n = K.shape[0]
    sw = np.sqrt(tau)
    B = (sw[:, None] * K) * sw[None, :]
    B[np.diag_indices(n)] += 1.0
    L = la.cholesky(B, lower=True, check_finite=False, overwrite_a=True)
    V = la.solve_triangular(L, sw[:, None] * K, lower=True, check_finite=False,
                            overwrite_b=True)
    Sigma = K - V.T @ V
    mu = Sigma @ nu
    return Sigma, mu, L


def _assemble_evidence(Sigma, mu, L, tau, nu, y, t, sig2e, s0, s1, log_s0, log_s1):
    diag = np.diag(Sigma).copy()
    if np.any(diag <= 0.0):
        return None
    tau_cav = 1.0 / diag - tau
    if np.any(tau_cav <= 0.0):
        return None
    nu_cav = mu / diag - nu
    mu_cav = nu_cav / tau_cav
    var_cav = 1.0 / tau_cav
    n = y.shape[0]
    amps = np.empty(n)
    for i in range(n):
        lz, _, _ = _ep_core.aep_ratio_moments(int(y[i]), mu_cav[i], var_cav[i],
                                              t[i], sig2e, s0, s1, log_s0, log_s1)
        amps[i] = lz - _ep_core.log_partition_gaussian(nu[i], tau[i], mu_cav[i], var_cav[i])
    log_ev = float(np.sum(amps)) - np.sum(np.log(np.diag(L))) + 0.5 * float(nu @ mu)
    return log_ev, mu_cav, var_cav, amps


def _degenerate_state(theta, y, t, sig2e, s0, s1, n):
    """theta ~ 0: the prior collapses to g = 0 and the evidence factorizes."""
    log_s0 = math.log(s0)
    log_s1 = math.log(s1)
    amps = np.empty(n)
    for i in range(n):
        lz, _, _ = _ep_core.aep_ratio_moments(int(y[i]), 0.0, 1e-300, t[i], sig2e,
                                              s0, s1, log_s0, log_s1)
        amps[i] = lz
    zeros = np.zeros(n)
    return EPState(
        site_log_r=np.full(n, np.inf), site_alpha=zeros.copy(),
        site_gamma=np.full(n, np.inf), site_tau=zeros.copy(), site_nu=zeros.copy(),
        post_mean=zeros.copy(), post_cov=np.zeros((n, n)),
        cavity_mu=zeros.copy(), cavity_var=np.full(n, np.inf),
        log_evidence=float(np.sum(amps)), converged=True, n_sweeps=0,
        final_delta=0.0, theta=theta, site_amplitude=amps,
        y=y, t=t, sigma_eps2=sig2e, s0=s0, s1=s1)


def fit_sites(G: Kernel, theta: float, params: ModelParams, dataset: Dataset,
              scheme: AscertainmentScheme | None = None, *,
              tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS,
              init_sites=None) -> EPState:
    """Run EP (scheme None) or ascertained EP (scheme given) to a fixed point.

    Sweeps stop when the largest site natural-parameter change drops below
    ``tol``; a state that runs out of sweeps is returned flagged rather than
    raised.  ``init_sites`` optionally warm-starts (tau, nu) from a previous
    fit at a nearby theta.
    """
    y = np.ascontiguousarray(dataset.y, dtype=np.int8)
    t = np.ascontiguousarray(params.t, dtype=np.float64)
    sig2e = float(params.sigma_eps2)
    n = dataset.n
    if scheme is None:
        s0 = s1 = 1.0
    else:
        s0, s1 = max(scheme.s0, 1e-300), scheme.s1
    if theta < 1e-12:
        return _degenerate_state(theta, y, t, sig2e, s0, s1, n)
    log_s0, log_s1 = math.log(s0), math.log(s1)

    K = theta * G.G
    if init_sites is not None:
        tau = np.ascontiguousarray(init_sites[0], dtype=np.float64).copy()
        nu = np.ascontiguousarray(init_sites[1], dtype=np.float64).copy()
    else:
        tau = np.zeros(n)
        nu = np.zeros(n)

    jitter = 0.0
    for attempt in range(3):
        try:
            Sigma, mu, L = _posterior_from_sites(K, tau, nu)
            break
        except la.LinAlgError:
            jitter = 1e-10 * theta if jitter == 0.0 else jitter * 100.0
            K = theta * G.G + jitter * np.eye(n)
    else:
        raise la.LinAlgError("prior covariance not factorizable even with jitter")

    converged = False
    delta = np.inf
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        dt, dn, _ = _ep_core.sweep(Sigma, mu, tau, nu, y, t, sig2e,
                                   s0, s1, log_s0, log_s1)
        Sigma, mu, L = _posterior_from_sites(K, tau, nu)
        delta = max(dt, dn)
        if delta < tol:
            converged = True
            break

    ev = _assemble_evidence(Sigma, mu, L, tau, nu, y, t, sig2e, s0, s1, log_s0, log_s1)
    if ev is None:
        # cavity precisions collapsed; report the state as unusable
        log_ev, mu_cav, var_cav = -np.inf, np.zeros(n), np.full(n, np.inf)
        amps = np.full(n, np.nan)
        converged = False
    else:
        log_ev, mu_cav, var_cav, amps = ev

    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(tau > 0.0, 1.0 / np.where(tau > 0.0, tau, 1.0), np.inf)
        alpha = np.where(tau > 0.0, nu * gamma, 0.0)
        log_r = np.empty(n)
        for i in range(n):
            if tau[i] > 0.0:
                amp = _assemble_site_amplitude(nu[i], tau[i], mu_cav[i], var_cav[i],
                                               y[i], t[i], sig2e, s0, s1, log_s0, log_s1)
                log_r[i] = amp + 0.5 * math.log(2.0 * math.pi * gamma[i]) \
                    + alpha[i] ** 2 / (2.0 * gamma[i])
            else:
                log_r[i] = np.inf
    return EPState(site_log_r=log_r, site_alpha=alpha, site_gamma=gamma,
                   site_tau=tau, site_nu=nu, post_mean=mu, post_cov=Sigma,
                   cavity_mu=mu_cav, cavity_var=var_cav, log_evidence=log_ev,
                   converged=converged, n_sweeps=sweeps, final_delta=delta,
                   theta=theta, site_amplitude=amps, y=y, t=t, sigma_eps2=sig2e,
                   s0=s0, s1=s1)


def _assemble_site_amplitude(nu_i, tau_i, mu_cav, var_cav, y_i, t_i, sig2e,
                             s0, s1, log_s0, log_s1):
    if not np.isfinite(var_cav):
        return np.nan
    lz, _, _ = _ep_core.aep_ratio_moments(int(y_i), mu_cav, var_cav, t_i, sig2e,
                                          s0, s1, log_s0, log_s1)
    return lz - _ep_core.log_partition_gaussian(nu_i, tau_i, mu_cav, var_cav)


def ep_fit(G: Kernel, theta: float, params: ModelParams, dataset: Dataset, *,
           tol: float = DEFAULT_TOL, max_sweeps: int = DEFAULT_MAX_SWEEPS,
           init_sites=None) -> EPState:
    """Plain (unascertained) EP fit at a fixed variance component."""
    return fit_sites(G, theta, params, dataset, scheme=None,
                     tol=tol, max_sweeps=max_sweeps, init_sites=init_sites)
