"""Ascertained expectation propagation.

The site update replaces the tilted probit integral with the ratio

    R_i(mu) = int q_-i P(y_i, s_i | g_i) dg_i / int q_-i P(s_i | g_i) dg_i

and matches its value and first two derivatives in the cavity mean, which
reduces exactly to standard EP when s0 == s1.  The converged evidence is the
working log-likelihood surface over theta.  Standard errors come from a
delete-one jackknife that freezes the site functions and re-maximizes the
leave-one-out surface, using Givens-rotation Cholesky downdates so each
deletion costs O(n^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from . import _ep_core
from .ep import EPState, fit_sites, site_from_derivatives
from .model import AscertainmentScheme, Dataset, Kernel, ModelParams
from .optimize import grid_argmax_parabolic

S0_FLOOR = 1e-300


@dataclass
class JackknifePlan:
    """Delete-one jackknife summary: leave-one-out estimates and their SE."""

    loo_thetas: np.ndarray
    se: float
    reuse_mode: str

    def __post_init__(self):
        loo = np.asarray(self.loo_thetas, dtype=np.float64)
        object.__setattr__(self, "loo_thetas", loo)
        if self.se < 0.0:
            raise ValueError("jackknife SE cannot be negative")


def jackknife_from_loo(loo_thetas, reuse_mode: str) -> JackknifePlan:
    loo = np.asarray(loo_thetas, dtype=np.float64)
    n = loo.shape[0]
    se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return JackknifePlan(loo_thetas=loo, se=se, reuse_mode=reuse_mode)


def aep_ratio(mu, var, t, sigma_eps2, y, scheme: AscertainmentScheme):
    """(log R, dlogR/dmu, d2logR/dmu2) of the ascertained site objective.

    Numerator s^y Phi_y(z), denominator s0 + (s1-s0) Phi(z) with
    z = (mu-t)/sqrt(sigma_eps2+var); coincides with
    ``gaussian_probit_integral`` when s0 == s1.
    """
    if var <= 0.0 or sigma_eps2 <= 0.0:
        raise ValueError("var and sigma_eps2 must be positive")
    s0 = max(scheme.s0, S0_FLOOR)
    return _ep_core.aep_ratio_moments(int(y), float(mu), float(var), float(t),
                                      float(sigma_eps2), s0, scheme.s1,
                                      math.log(s0), math.log(scheme.s1))


def aep_site_update(i, state: EPState, params: ModelParams, scheme: AscertainmentScheme):
    """Recompute site i of ``state`` with the ascertainment-corrected ratio."""
    mu_cav = float(state.cavity_mu[i])
    var_cav = float(state.cavity_var[i])
    lz, d1, d2 = aep_ratio(mu_cav, var_cav, state.t[i], state.sigma_eps2,
                           state.y[i], scheme)
    return site_from_derivatives(lz, d1, d2, mu_cav, var_cav)


def aep_fit(G: Kernel, theta: float, params: ModelParams, dataset: Dataset,
            scheme: AscertainmentScheme, *, tol: float = 1e-6,
            max_sweeps: int = 100, init_sites=None) -> EPState:
    """Ascertained EP fit at a fixed variance component."""
    return fit_sites(G, theta, params, dataset, scheme=scheme,
                     tol=tol, max_sweeps=max_sweeps, init_sites=init_sites)


def aep_log_likelihood(state: EPState, G: Kernel, theta: float,
                       params: ModelParams) -> float:
    """Log of int P(g | Z; theta) prod_i t_i(g_i) dg for the sites in
    ``state`` -- the working objective surface in (theta, beta).

    With ``theta`` equal to ``state.theta`` this reproduces
    ``state.log_evidence``; other values evaluate the frozen-site surface.
    """
    n = state.site_tau.shape[0]
    if theta < 1e-12:
        return float(state.log_evidence) if state.theta < 1e-12 else -np.inf
    tau, nu = state.site_tau, state.site_nu
    K = theta * G.G
    sw = np.sqrt(tau)
    B = np.eye(n) + (sw[:, None] * K) * sw[None, :]
    L = la.cholesky(B, lower=True, check_finite=False)
    v = la.solve_triangular(L, sw * (K @ nu), lower=True, check_finite=False)
    qf = float(nu @ (K @ nu)) - float(v @ v)
    amp = 0.0
    log_s0, log_s1 = math.log(state.s0), math.log(state.s1)
    for i in range(n):
        lz, _, _ = _ep_core.aep_ratio_moments(
            int(state.y[i]), float(state.cavity_mu[i]), float(state.cavity_var[i]),
            float(state.t[i]), state.sigma_eps2, state.s0, state.s1, log_s0, log_s1)
        amp += lz - _ep_core.log_partition_gaussian(
            state.site_nu[i], state.site_tau[i],
            float(state.cavity_mu[i]), float(state.cavity_var[i]))
    return amp - float(np.sum(np.log(np.diag(L)))) + 0.5 * qf


def cholesky_delete(R: np.ndarray, i: int) -> np.ndarray:
    """Upper Cholesky factor of B with row/column i removed, derived from the
    full factor R (R'R = B) by Givens rotations in O(n^2)."""
    R = np.ascontiguousarray(R, dtype=np.float64)
    n = R.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"row/column {i} out of range for n={n}")
    return _ep_core.cholesky_delete(R, i)


def _loo_profile(G, sw, nu, theta_grid):
    """Frozen-site leave-one-out Gaussian objective, one row per theta."""
    n = G.shape[0]
    prof = np.empty((len(theta_grid), n))
    M0 = (sw[:, None] * G) * sw[None, :]
    for k, th in enumerate(theta_grid):
        B = np.eye(n) + th * M0
        try:
            R = la.cholesky(B, lower=False, check_finite=False)
        except la.LinAlgError:
            prof[k] = np.nan
            continue
        prof[k] = _ep_core.loo_gaussian_objectives(R, G, sw, nu, th)
    return prof


def jackknife_se(dataset: Dataset, G: Kernel, theta_hat: float,
                 params: ModelParams, scheme: AscertainmentScheme, *,
                 mode: str = "frozen", state: EPState | None = None,
                 lo: float = 1e-4, hi: float | None = None,
                 grid_step: float = 0.005, grid_halfwidth: float = 0.06,
                 objective=None) -> JackknifePlan:
    """Delete-one jackknife SE of the AEP variance-component estimate.

    ``frozen`` mode reuses the full-data site functions: with sites fixed,
    the leave-one-out objective depends on theta only through its Gaussian
    part, which is profiled on a local grid around theta_hat; each deletion
    reuses the full Cholesky factor through a Givens downdate.  The grid
    extends automatically while any leave-one-out argmax sits on its edge.
    ``refit`` mode reruns the full EP fit and a 1-d search per unit (for
    validation at small n); it needs ``objective`` = callable
    (reduced_dataset, reduced_G) -> theta_hat.
    """
    n = dataset.n
    if hi is None:
        hi = 1.0 - params.sigma_c2 - 1e-3
    if mode == "refit":
        if objective is None:
            raise ValueError("refit mode needs an objective callable")
        loo = np.empty(n)
        keep_all = np.arange(n)
        for i in range(n):
            keep = np.delete(keep_all, i)
            sub = Dataset(X=dataset.X[keep], Z=dataset.Z[keep], y=dataset.y[keep])
            subG = Kernel(G=G.G[np.ix_(keep, keep)])
            loo[i] = objective(sub, subG)
        return jackknife_from_loo(loo, "refit")
    if mode != "frozen":
        raise ValueError(f"unknown jackknife mode {mode!r}")

    if state is None:
        state = aep_fit(G, theta_hat, params.with_theta(theta_hat), dataset, scheme)
    if not state.converged:
        raise RuntimeError("jackknife needs a converged full-data fit")

    def loo_rows(theta_grid):
        """Leave-one-out objective rows, reusing the full-data site functions:
        at each grid theta the sites are re-converged on the full data (warm
        chained), and each deletion then costs O(n^2) via a Givens downdate
        of that theta's Cholesky factor.  Row = full objective minus unit i's
        amplitude, with the Gaussian part exact for the reduced system."""
        rows = np.full((len(theta_grid), n), np.nan)
        warm = (state.site_tau.copy(), state.site_nu.copy())
        eng_scheme = scheme if state.s0 != state.s1 else None
        for k, th in enumerate(theta_grid):
            st = fit_sites(G, th, params.with_theta(th), dataset, eng_scheme,
                           init_sites=warm)
            if not st.converged or not np.isfinite(st.log_evidence):
                continue
            warm = (st.site_tau.copy(), st.site_nu.copy())
            amp_total = float(np.sum(st.site_amplitude))
            gauss = _loo_profile(G.G, np.sqrt(st.site_tau), st.site_nu, [th])[0]
            rows[k] = amp_total - st.site_amplitude + gauss
        return rows

    lo_g = max(lo, theta_hat - grid_halfwidth)
    hi_g = min(hi, theta_hat + grid_halfwidth)
    grid = np.arange(lo_g, hi_g + grid_step / 2, grid_step)
    prof = loo_rows(grid)
    for _ in range(12):
        argk = np.nanargmax(prof, axis=0)
        grow_lo = np.any(argk == 0) and grid[0] > lo + 1e-12
        grow_hi = np.any(argk == len(grid) - 1) and grid[-1] < hi - 1e-12
        if not (grow_lo or grow_hi):
            break
        if grow_lo:
            ext = np.arange(max(lo, grid[0] - 8 * grid_step), grid[0] - grid_step / 2, grid_step)
            prof = np.vstack([loo_rows(ext), prof])
            grid = np.concatenate([ext, grid])
        if grow_hi:
            ext = np.arange(grid[-1] + grid_step, min(hi, grid[-1] + 8 * grid_step) + grid_step / 2,
                            grid_step)
            prof = np.vstack([prof, loo_rows(ext)])
            grid = np.concatenate([grid, ext])

    loo = np.array([grid_argmax_parabolic(grid, prof[:, i]) for i in range(n)])
    np.clip(loo, lo, hi, out=loo)
    return jackknife_from_loo(loo, "frozen")
