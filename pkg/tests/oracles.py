"""Brute-force oracles used only by the test suite.

These deliberately share nothing with the estimators beyond the scalar
normal CDF: likelihoods are integrated on tensor Gauss-Hermite grids after
whitening by a Cholesky factor of the latent covariance, and pair moments
are estimated by direct Monte Carlo simulation of the sampling process.
"""

import math

import numpy as np
from scipy.special import ndtr, roots_hermitenorm


def _tensor_integral(C, fs, n_nodes):
    """int N(g; 0, C) prod_i f_i(g_i) dg on a tensor Gauss-Hermite grid."""
    n = C.shape[0]
    L = np.linalg.cholesky(C + 1e-12 * np.trace(C) / n * np.eye(n))
    x, w = roots_hermitenorm(n_nodes)
    w = w / math.sqrt(2.0 * math.pi)
    if n == 1:
        return float(np.sum(w * fs[0](L[0, 0] * x)))
    if n == 2:
        f1 = fs[0](L[0, 0] * x)
        f2 = fs[1](L[1, 0] * x[:, None] + L[1, 1] * x[None, :])
        return float(np.einsum("a,b,a,ab->", w, w, f1, f2))
    if n == 3:
        g1 = L[0, 0] * x
        f1 = fs[0](g1)
        f2 = fs[1](L[1, 0] * x[:, None] + L[1, 1] * x[None, :])
        inner = np.empty((n_nodes, n_nodes))
        base = L[2, 0] * x[:, None] + L[2, 1] * x[None, :]
        for a in range(n_nodes):
            g3 = base[a][:, None] + L[2, 2] * x[None, :]
            inner[a] = fs[2](g3) @ w
        return float(np.einsum("a,b,a,ab,ab->", w, w, f1, f2, inner))
    raise ValueError("oracle quadrature supports n <= 3 only")


def quadrature_likelihood(y, t, sigma_eps2, C, scheme=None, ascertained=False,
                          n_nodes=200):
    """Exact (to quadrature accuracy) GLMM likelihood P(y | X, Z), or the
    ascertained likelihood P(y | X, Z, s=1) when ``ascertained`` is set.

    ``C`` is the latent covariance theta*G (n <= 3).  The ascertained value
    is the Bayes ratio numerator/denominator times prod_i P(s_i=1 | y_i).
    """
    y = np.atleast_1d(y)
    t = np.atleast_1d(t)
    n = len(y)
    se = math.sqrt(sigma_eps2)

    def lik_factor(i):
        def f(g):
            p1 = ndtr((g - t[i]) / se)
            return p1 if y[i] == 1 else 1.0 - p1
        return f

    num = _tensor_integral(C, [lik_factor(i) for i in range(n)], n_nodes)
    if not ascertained:
        return num
    if scheme is None:
        raise ValueError("ascertained oracle needs a scheme")

    def samp_factor(i):
        def f(g):
            return scheme.s0 + (scheme.s1 - scheme.s0) * ndtr((g - t[i]) / se)
        return f

    den = _tensor_integral(C, [samp_factor(i) for i in range(n)], n_nodes)
    s_const = np.prod(np.where(y == 1, scheme.s1, scheme.s0))
    return num / den * float(s_const)


def mc_pair_moment(rho, K_i, K_j, scheme, draws=200_000, seed=0):
    """Monte Carlo estimate of P(y_i=a, y_j=b | s_i=s_j=1) for all (a,b).

    Latent liabilities are drawn bivariate normal with correlation ``rho``
    and thresholds set from the marginal case probabilities; conditioning on
    sampling is handled by weighting with s^a s^b rather than rejection, so
    every draw contributes.  Returns (probs 2x2, standard errors 2x2).
    """
    if draws < 100_000:
        raise ValueError("use at least 1e5 draws")
    rng = np.random.default_rng(seed)
    from scipy.special import ndtri
    ti, tj = -ndtri(K_i), -ndtri(K_j)
    z1 = rng.standard_normal(draws)
    z2 = rho * z1 + math.sqrt(1.0 - rho * rho) * rng.standard_normal(draws)
    yi = (z1 > ti).astype(np.int64)
    yj = (z2 > tj).astype(np.int64)
    s = np.array([scheme.s0, scheme.s1])
    weights = s[yi] * s[yj]
    denom = weights.mean()
    probs = np.empty((2, 2))
    ses = np.empty((2, 2))
    for a in (0, 1):
        for b in (0, 1):
            contrib = weights * ((yi == a) & (yj == b))
            m = contrib.mean()
            probs[a, b] = m / denom
            # delta-method SE of the ratio of means
            cov = np.cov(contrib, weights)
            var = (cov[0, 0] / denom**2 + m**2 * cov[1, 1] / denom**4
                   - 2 * m * cov[0, 1] / denom**3) / draws
            ses[a, b] = math.sqrt(max(var, 0.0))
    return probs, ses
