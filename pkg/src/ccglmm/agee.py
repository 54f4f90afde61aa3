"""Fixed-effect estimation by generalized estimating equations with the
ascertained conditional mean.

The working mean maps the population-scale marginal probit
kappa(x) = Phi(x'beta - Phi^{-1}(1-K)) through Bayes' rule over the
sampling indicator, mu = s1 kappa / (s1 kappa + s0 (1 - kappa)), and beta
solves D' V^{-1} (y - mu) = 0 with independence working correlation and
binomial variance function (so with s0 == s1 the equations are exactly the
probit maximum-likelihood score).  The marginal-scale estimate converts to
the liability (GLMM) scale by beta * sqrt(var_g + 1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .model import AscertainmentScheme, Dataset

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class AGEEResult:
    beta: np.ndarray
    intercept: float
    converged: bool
    n_iter: int
    eq_residual: float
    mu: np.ndarray


def ascertained_mean(x, beta, K: float, scheme: AscertainmentScheme,
                     intercept_shift: float = 0.0):
    """E[y | x, s=1]: marginal probit mean passed through the sampling Bayes
    ratio.  ``intercept_shift`` adds a fitted free-intercept adjustment to
    the fixed -Phi^{-1}(1-K) offset."""
    x = np.asarray(x, dtype=np.float64)
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    eta = (x @ beta if beta.size else np.zeros(x.shape[:-1])) + ndtri(K) + intercept_shift
    kappa = ndtr(eta)
    mu = scheme.s1 * kappa / (scheme.s1 * kappa + scheme.s0 * (1.0 - kappa))
    return mu[()] if np.ndim(mu) == 0 else mu


def agee_fit(dataset: Dataset, K: float, scheme: AscertainmentScheme, *,
             intercept: str = "fixed", tol: float = 1e-8,
             max_iter: int = 100) -> AGEEResult:
    """Solve the ascertained estimating equations for the fixed effects.

    ``intercept='fixed'`` pins the offset at -Phi^{-1}(1-K) (the null model
    then reproduces the prevalence K exactly); ``'free'`` additionally fits
    an intercept adjustment.  Non-convergence is flagged, not raised; a rank
    deficient design raises.
    """
    if dataset.d < 1:
        raise ValueError("agee_fit needs at least one fixed-effect covariate")
    X = dataset.X
    if np.linalg.matrix_rank(X) < dataset.d:
        raise ValueError("fixed-effect design matrix is rank deficient")
    if intercept == "free":
        X = np.column_stack([np.ones(dataset.n), X])
    elif intercept != "fixed":
        raise ValueError(f"unknown intercept mode {intercept!r}")
    y = dataset.y.astype(np.float64)
    p = X.shape[1]
    beta = np.zeros(p)
    offset = ndtri(K)
    s0, s1 = scheme.s0, scheme.s1

    converged = False
    it = 0
    resid = np.inf
    for it in range(1, max_iter + 1):
        eta = X @ beta + offset
        kappa = ndtr(eta)
        denom = s1 * kappa + s0 * (1.0 - kappa)
        mu = s1 * kappa / denom
        dkappa = np.exp(-0.5 * eta * eta) / _SQRT_2PI
        dmu = (s1 * s0 / denom ** 2) * dkappa
        v = np.clip(mu * (1.0 - mu), 1e-12, None)
        w = dmu * dmu / v
        score = X.T @ (dmu * (y - mu) / v)
        J = (X * w[:, None]).T @ X
        try:
            step = np.linalg.solve(J, score)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        resid = float(np.max(np.abs(step)))
        if resid < tol:
            converged = True
            break

    eta = X @ beta + offset
    kappa = ndtr(eta)
    denom = s1 * kappa + s0 * (1.0 - kappa)
    mu = s1 * kappa / denom
    dkappa = np.exp(-0.5 * eta * eta) / _SQRT_2PI
    dmu = (s1 * s0 / denom ** 2) * dkappa
    v = np.clip(mu * (1.0 - mu), 1e-12, None)
    eq_residual = float(np.max(np.abs(X.T @ (dmu * (y - mu) / v)))) if dataset.n else 0.0
    if intercept == "free":
        icept, slopes = float(beta[0]), beta[1:]
    else:
        icept, slopes = 0.0, beta
    return AGEEResult(beta=slopes, intercept=icept, converged=converged,
                      n_iter=it, eq_residual=eq_residual, mu=mu)


def rescale_to_glmm(beta_gee, var_g):
    """Marginal-scale to liability-scale fixed effects:
    beta * sqrt(var_g + 1).

    ``var_g`` may be the per-unit latent-variance diagonal; if it varies by
    more than 5% (coefficient of variation) a warning is emitted and the
    mean is used.
    """
    beta_gee = np.atleast_1d(np.asarray(beta_gee, dtype=np.float64))
    vg = np.asarray(var_g, dtype=np.float64)
    if vg.ndim > 0:
        mean = float(vg.mean())
        if np.any(vg < 0.0):
            raise ValueError("var_g entries must be non-negative")
        if mean > 0.0 and float(vg.std()) / mean > 0.05:
            warnings.warn("latent variance diagonal varies by more than 5%; "
                          "rescaling with its mean", RuntimeWarning)
        vg = mean
    else:
        vg = float(vg)
        if vg < 0.0:
            raise ValueError("var_g must be non-negative")
    return beta_gee * np.sqrt(vg + 1.0)
