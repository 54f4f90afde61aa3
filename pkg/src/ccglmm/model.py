"""Core domain types and probit building blocks.

Everything downstream (EP, pairwise likelihood, PCGC, GEE) is expressed in
terms of the liability threshold model: unit i carries a latent liability
l_i = X_i'beta + g_i + eps_i with total population variance 1, and is a case
iff l_i exceeds the (1-K) population quantile.  The types here hold the data,
the kernel of the latent field g, the case-control sampling weights, and the
per-unit liability cutoffs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri


class DegenerateColumnError(ValueError):
    """A covariate column cannot be standardized (zero variance)."""


def _as_float_matrix(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Dataset:
    """A case-control study: fixed-effect covariates, standardized
    random-effect covariates and binary outcomes (1=case, 0=control)."""

    X: np.ndarray
    Z: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = _as_float_matrix(self.X, "X")
        Z = _as_float_matrix(self.Z, "Z")
        y = np.asarray(self.y)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("y entries must be 0 or 1")
        y = y.astype(np.int8)
        n = Z.shape[0]
        if n < 2:
            raise ValueError("need at least 2 units")
        if Z.shape[1] < 1:
            raise ValueError("Z must have at least one column")
        if X.shape[0] != n or y.shape[0] != n:
            raise ValueError("X, Z and y must agree on the number of units")
        for a in (X, Z, y):
            a.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class Kernel:
    """Normalized relatedness matrix G = Z Z' / m of the latent field.

    The latent covariance of g is theta * G.  G is symmetrized on
    construction; positive semidefiniteness is checked by ``assert_valid``
    (an O(n^3) eigendecomposition, so not run on every construction).
    """

    G: np.ndarray

    def __post_init__(self):
        G = _as_float_matrix(self.G, "G")
        if G.shape[0] != G.shape[1]:
            raise ValueError("G must be square")
        G = (G + G.T) / 2.0
        G.setflags(write=False)
        object.__setattr__(self, "G", G)

    @property
    def n(self) -> int:
        return self.G.shape[0]

    def assert_valid(self, sym_tol: float = 1e-12, eig_floor: float = -1e-8):
        asym = np.max(np.abs(self.G - self.G.T)) if self.n else 0.0
        if asym > sym_tol:
            raise ValueError(f"kernel asymmetry {asym:.3e} exceeds {sym_tol:.0e}")
        w = np.linalg.eigvalsh(self.G)
        if w.min() < eig_floor:
            raise ValueError(f"kernel has eigenvalue {w.min():.3e} below {eig_floor:.0e}")


@dataclass(frozen=True)
class AscertainmentScheme:
    """Case-control sampling weights s1 = P(sampled | case) and
    s0 = P(sampled | control), tied to the population prevalence K and the
    in-sample prevalence P by s0/s1 = K(1-P) / ((1-K)P)."""

    K: float
    P: float
    s1: float
    s0: float

    def __post_init__(self):
        for name, p in (("K", self.K), ("P", self.P)):
            if not 0.0 < p < 1.0:
                raise ValueError(f"{name} must lie in (0,1), got {p}")
        ratio = self.s0 / self.s1 * ((1.0 - self.K) * self.P) / (self.K * (1.0 - self.P))
        if abs(ratio - 1.0) > 1e-12:
            raise ValueError("sampling weights violate the case-control constraint")

    @classmethod
    def from_prevalences(cls, K: float, P: float) -> "AscertainmentScheme":
        s0, s1 = sampling_weights(K, P)
        return cls(K=K, P=P, s1=s1, s0=s0)

    @property
    def is_ascertained(self) -> bool:
        return self.s0 != self.s1


@dataclass(frozen=True)
class ModelParams:
    """Liability-scale parameters: variance component theta, fixed effects
    beta, the empirical variance sigma_c2 of the fixed-effect predictor,
    the residual variance sigma_eps2 = 1 - theta - sigma_c2, and the
    per-unit cutoffs t_i = Phi^{-1}(1-K) - X_i'beta."""

    theta: float
    beta: np.ndarray
    sigma_c2: float
    sigma_eps2: float
    t: np.ndarray = field(repr=False)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        t = np.atleast_1d(np.asarray(self.t, dtype=np.float64))
        if not 0.0 <= self.theta < 1.0:
            raise ValueError(f"theta must lie in [0,1), got {self.theta}")
        if self.theta + self.sigma_c2 >= 1.0:
            raise ValueError("theta + sigma_c2 must stay below the unit liability variance")
        if self.sigma_eps2 <= 0.0:
            raise ValueError("residual liability variance must be positive")
        beta.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_fit(cls, theta: float, beta, X, K: float) -> "ModelParams":
        """Build parameters for a candidate theta given fitted fixed effects.

        sigma_c2 is the population-scale variance of the fixed-effect
        predictor, beta'beta for population-standardized uncorrelated
        covariates.  (The in-sample variance of X beta is inflated under
        case-control sampling by the between-class mean shift and would
        corrupt the residual-variance budget.)
        """
        X = _as_float_matrix(X, "X")
        beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
        if X.shape[1] != beta.shape[0]:
            raise ValueError("beta length must match the number of columns of X")
        sigma_c2 = float(beta @ beta) if X.shape[1] else 0.0
        sigma_eps2 = 1.0 - theta - sigma_c2
        return cls(theta=float(theta), beta=beta, sigma_c2=sigma_c2,
                   sigma_eps2=sigma_eps2, t=thresholds(K, X, beta))

    def with_theta(self, theta: float) -> "ModelParams":
        """Same fixed effects and cutoffs, new variance component."""
        return ModelParams(theta=float(theta), beta=self.beta, sigma_c2=self.sigma_c2,
                           sigma_eps2=1.0 - theta - self.sigma_c2, t=self.t)


def standardize_columns(Zraw, freqs=None) -> np.ndarray:
    """Standardize covariate columns to zero mean and unit variance.

    Without ``freqs``, each column is centered and scaled by its own sample
    moments (ddof=0).  With ``freqs``, column j is frozen to the binomial
    standardization (z - 2 f_j) / sqrt(2 f_j (1 - f_j)), as appropriate for
    0/1/2 allele counts with population frequency f_j.
    """
    Z = _as_float_matrix(Zraw, "Zraw").copy()
    if freqs is None:
        mean = Z.mean(axis=0)
        sd = Z.std(axis=0)
        dead = np.flatnonzero(sd == 0.0)
        if dead.size:
            raise DegenerateColumnError(
                f"column {dead[0]} is constant and no external frequencies were given")
        return (Z - mean) / sd
    f = np.atleast_1d(np.asarray(freqs, dtype=np.float64))
    if f.shape[0] != Z.shape[1]:
        raise ValueError("freqs length must match the number of columns")
    if np.any((f <= 0.0) | (f >= 1.0)):
        raise ValueError("freqs entries must lie in (0,1)")
    return (Z - 2.0 * f) / np.sqrt(2.0 * f * (1.0 - f))


def grm(Z) -> Kernel:
    """Relatedness kernel G = Z Z' / m (symmetrized)."""
    Z = _as_float_matrix(Z, "Z")
    if Z.shape[1] < 1:
        raise ValueError("Z must have at least one column")
    G = Z @ Z.T / Z.shape[1]
    return Kernel(G=G)


def sampling_weights(K: float, P: float) -> tuple[float, float]:
    """Case/control sampling weights (s0, s1) with the convention s1 = 1."""
    for name, p in (("K", K), ("P", P)):
        if not 0.0 < p < 1.0:
            raise ValueError(f"{name} must lie in (0,1), got {p}")
    s1 = 1.0
    s0 = K * (1.0 - P) / ((1.0 - K) * P)
    return s0, s1


def thresholds(K: float, X, beta) -> np.ndarray:
    """Per-unit liability cutoffs t_i = Phi^{-1}(1-K) - X_i'beta."""
    X = _as_float_matrix(X, "X")
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    # -ndtri(K) == ndtri(1-K) but keeps full precision for small K
    cutoff = -ndtri(K)
    xb = X @ beta if X.shape[1] else np.zeros(X.shape[0])
    return cutoff - xb


def probit_conditional(y, g, t, sigma_eps2):
    """P(y_i | g_i) under the liability threshold model.

    Phi((g-t)/sqrt(sigma_eps2)) for a case; the exact complement for a
    control, so that the two always sum to one.
    """
    if np.any(np.asarray(sigma_eps2) <= 0.0):
        raise ValueError("sigma_eps2 must be positive")
    p1 = ndtr((np.asarray(g) - np.asarray(t)) / np.sqrt(sigma_eps2))
    return np.where(np.asarray(y) == 1, p1, 1.0 - p1)[()]
