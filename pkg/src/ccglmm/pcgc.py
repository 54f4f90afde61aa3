"""Moment-based variance-component estimation (phenotype-correlation
genotype-correlation regression).

Standardized in-sample phenotype products z_i z_j are regressed through the
origin on G_ij times a pair coefficient derived from the first-order
expansion of E[z_i z_j | s_i = s_j = 1] in the pair correlation:

    c_ij = phi(h_i) phi(h_j) [1 - (1-u)(pi_i + pi_j) + (1-u)^2 pi_i pi_j]
           / (std_i std_j Q_i Q_j),

with u = s0/s1, per-unit case probabilities K_i = Phi(-h_i) on the
population scale, Q_i = K_i + u (1 - K_i), in-sample probabilities
pi_i = K_i / Q_i, std_i = sqrt(pi_i (1 - pi_i)).  The slope estimates the
variance fraction on the covariate-adjusted (conditional) liability scale
and is mapped back by the factor 1 - sigma_c2.  With no covariates this
reduces to the classic phi(t)^2 P(1-P) / (K^2 (1-K)^2) coefficient.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from .model import AscertainmentScheme, Dataset, Kernel, ModelParams

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _pair_stats(dataset: Dataset, G: Kernel, params: ModelParams,
                scheme: AscertainmentScheme):
    scale = 1.0 - params.sigma_c2
    h = params.t / math.sqrt(scale)
    Ki = ndtr(-h)
    phi_h = np.exp(-0.5 * h * h) / _SQRT_2PI
    u = scheme.s0 / scheme.s1
    Q = Ki + u * (1.0 - Ki)
    pi = Ki / Q
    std = np.sqrt(pi * (1.0 - pi))
    z = (dataset.y - pi) / std
    iu, ju = np.triu_indices(dataset.n, 1)
    coef = (phi_h[iu] * phi_h[ju]
            * (1.0 - (1.0 - u) * (pi[iu] + pi[ju]) + (1.0 - u) ** 2 * pi[iu] * pi[ju])
            / (std[iu] * std[ju] * Q[iu] * Q[ju]))
    x = coef * G.G[iu, ju]
    zz = z[iu] * z[ju]
    return x, zz, iu, ju, scale


def pcgc_estimate(dataset: Dataset, G: Kernel, params: ModelParams,
                  scheme: AscertainmentScheme) -> float:
    """Variance-component estimate from the pairwise moment regression.

    ``params`` supplies the liability-scale cutoffs and fixed-effect
    variance (its theta is not used).  Raises on a degenerate regressor.
    """
    x, zz, _, _, scale = _pair_stats(dataset, G, params, scheme)
    sxx = float(x @ x)
    if sxx <= 0.0 or float(np.ptp(G.G[np.triu_indices(dataset.n, 1)])) == 0.0:
        raise ValueError("degenerate pairwise regressor (constant relatedness)")
    slope = float(x @ zz) / sxx
    return slope * scale


def pcgc_loo_thetas(dataset: Dataset, G: Kernel, params: ModelParams,
                    scheme: AscertainmentScheme) -> np.ndarray:
    """Exact delete-one estimates: dropping unit i removes every pair term
    touching i from both regression sums."""
    x, zz, iu, ju, scale = _pair_stats(dataset, G, params, scheme)
    n = dataset.n
    num_tot, den_tot = float(x @ zz), float(x @ x)
    num_i = np.zeros(n)
    den_i = np.zeros(n)
    np.add.at(num_i, iu, x * zz)
    np.add.at(num_i, ju, x * zz)
    np.add.at(den_i, iu, x * x)
    np.add.at(den_i, ju, x * x)
    return (num_tot - num_i) / (den_tot - den_i) * scale
