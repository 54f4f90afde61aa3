"""End-to-end fitting: fixed effects, threshold adjustment, variance
component and standard errors, for every supported estimator.

When covariates are present the pipeline runs two passes, as the liability
rescale of the fixed effects needs a variance-component estimate: a first
theta fit with the raw marginal coefficients, then the rescale
beta * sqrt(theta * mean(diag G) + 1) and a final theta fit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .aep import aep_fit, jackknife_from_loo, jackknife_se
from .agee import agee_fit, rescale_to_glmm
from .apl import apl_loo_thetas, apl_objective
from .ep import ep_fit
from .model import AscertainmentScheme, Dataset, Kernel, ModelParams, grm
from .optimize import maximize_scalar
from .pcgc import pcgc_estimate, pcgc_loo_thetas

METHODS = ("aep", "apl-exact", "apl-taylor", "pcgc", "ep-plain")

THETA_LO = 1e-4
THETA_MARGIN = 1e-3


@dataclass
class FitResult:
    method: str
    theta: float
    beta: np.ndarray
    objective: float
    se: float | None
    loo_thetas: np.ndarray | None
    converged: bool
    boundary: bool
    n_evals: int
    seconds: float
    diagnostics: dict = field(default_factory=dict)


def _theta_bounds(sigma_c2: float) -> tuple[float, float]:
    hi = 1.0 - sigma_c2 - THETA_MARGIN
    if hi <= THETA_LO:
        raise ValueError("fixed effects leave no room for a variance component")
    return THETA_LO, hi


def _ep_objective(dataset, G, beta, scheme, *, ascertained: bool):
    """Warm-started EP/AEP evidence as a function of theta.  Nonconverged
    probes count as -inf; tracks convergence of the probes it accepted."""
    warm: dict = {}
    stats = {"nonconverged": 0, "sweeps": []}

    def objective(theta: float) -> float:
        params = ModelParams.from_fit(theta, beta, dataset.X, scheme.K)
        st = (aep_fit(G, theta, params, dataset, scheme, init_sites=warm.get("sites"))
              if ascertained else
              ep_fit(G, theta, params, dataset, init_sites=warm.get("sites")))
        stats["sweeps"].append(st.n_sweeps)
        if not st.converged:
            stats["nonconverged"] += 1
            return -np.inf
        warm["sites"] = (st.site_tau.copy(), st.site_nu.copy())
        return st.log_evidence

    return objective, stats


def _fit_theta(dataset, G, beta, scheme, method: str, tol: float = 1e-4):
    lo, hi = _theta_bounds(float(beta @ beta) if beta.size else 0.0)
    if method in ("aep", "ep-plain"):
        obj, stats = _ep_objective(dataset, G, beta, scheme,
                                   ascertained=(method == "aep"))
        res = maximize_scalar(obj, lo, hi, tol=tol)
        return res, stats
    if method in ("apl-exact", "apl-taylor"):
        mode = method.split("-")[1]
        params0 = ModelParams.from_fit(lo, beta, dataset.X, scheme.K)

        def obj(theta):
            return apl_objective(dataset, G, theta, params0, scheme, mode=mode)

        res = maximize_scalar(obj, lo, hi, tol=tol)
        return res, {}
    raise ValueError(f"unknown optimizing method {method!r}")


def fit_dataset(dataset: Dataset, K: float, method: str, *,
                se: str = "none", G: Kernel | None = None) -> FitResult:
    """Fit one study with the chosen estimator.

    Steps: sampling scheme from (K, observed prevalence); AGEE fixed effects
    when covariates exist; liability cutoffs; variance-component estimation;
    optional delete-one jackknife SE.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if se not in ("none", "jackknife"):
        raise ValueError(f"unknown se mode {se!r}")
    t_start = time.perf_counter()
    P = float(np.mean(dataset.y))
    if not 0.0 < P < 1.0:
        raise ValueError("study contains only cases or only controls")
    scheme = AscertainmentScheme.from_prevalences(K, P)
    if G is None:
        G = grm(dataset.Z)
    mean_diag = float(np.mean(np.diag(G.G)))

    diagnostics: dict = {"P": P, "mean_diag_G": mean_diag}
    if dataset.d:
        gee = agee_fit(dataset, K, scheme)
        diagnostics["agee_iterations"] = gee.n_iter
        diagnostics["agee_converged"] = gee.converged
        beta_passes = [gee.beta]
    else:
        gee = None
        beta_passes = [np.zeros(0)]

    if method == "pcgc":
        theta = None
        for _ in range(2 if dataset.d else 1):
            params = ModelParams.from_fit(0.0, beta_passes[-1], dataset.X, K)
            theta = pcgc_estimate(dataset, G, params, scheme)
            if not dataset.d:
                break
            beta_passes.append(rescale_to_glmm(gee.beta, max(theta, 0.0) * mean_diag))
        beta = beta_passes[-1]
        lo, hi = _theta_bounds(float(beta @ beta))
        boundary = not lo < theta < hi
        result = FitResult(method=method, theta=float(theta), beta=beta,
                           objective=float("nan"), se=None, loo_thetas=None,
                           converged=True, boundary=boundary, n_evals=1,
                           seconds=0.0, diagnostics=diagnostics)
    else:
        res = stats = None
        n_passes = 2 if dataset.d else 1
        for p in range(n_passes):
            # the first pass only seeds the fixed-effect rescale, where a
            # coarse theta suffices (sqrt(theta+1) varies slowly)
            tol = 1e-2 if p < n_passes - 1 else 1e-4
            res, stats = _fit_theta(dataset, G, beta_passes[-1], scheme, method, tol=tol)
            if not dataset.d:
                break
            beta_passes.append(rescale_to_glmm(gee.beta, res.theta * mean_diag))
        beta = beta_passes[-1]
        if stats:
            diagnostics["ep_probes_nonconverged"] = stats.get("nonconverged", 0)
            diagnostics["ep_sweeps_total"] = int(np.sum(stats.get("sweeps", [])))
        result = FitResult(method=method, theta=res.theta, beta=beta,
                           objective=res.fmax, se=None, loo_thetas=None,
                           converged=bool(np.isfinite(res.fmax)),
                           boundary=res.boundary, n_evals=res.evals,
                           seconds=0.0, diagnostics=diagnostics)

    if se == "jackknife":
        plan = _jackknife(dataset, G, result, scheme, method)
        result.se = plan.se
        result.loo_thetas = plan.loo_thetas
        result.diagnostics["jackknife_mode"] = plan.reuse_mode

    result.diagnostics["n_passes"] = len(beta_passes)
    result.seconds = time.perf_counter() - t_start
    return result


def _jackknife(dataset, G, result: FitResult, scheme, method: str):
    params = ModelParams.from_fit(result.theta, result.beta, dataset.X, scheme.K)
    if method in ("aep", "ep-plain"):
        state = (aep_fit(G, result.theta, params, dataset, scheme)
                 if method == "aep" else
                 ep_fit(G, result.theta, params, dataset))
        return jackknife_se(dataset, G, result.theta, params, scheme, state=state)
    if method in ("apl-exact", "apl-taylor"):
        loo = apl_loo_thetas(dataset, G, result.theta, params, scheme,
                             mode=method.split("-")[1])
        return jackknife_from_loo(loo, "pair-sums")
    if method == "pcgc":
        loo = pcgc_loo_thetas(dataset, G, params, scheme)
        return jackknife_from_loo(loo, "exact")
    raise ValueError(method)
