"""Synthetic case-control studies under the liability threshold model.

A population is generated SNP by SNP (allele frequencies uniform on
[0.05, 0.5], genotypes as sums of two Bernoulli allele draws), liabilities
are formed from standardized genotypes, normal covariates and normal noise
with total variance one, cases are everyone above the empirical (1-K)
liability quantile, and the study oversamples cases to the requested
balance.  Covariate standardization on the estimation side can be
perturbed to emulate noisy external allele-frequency estimates; the
generative side always uses the true frequencies.

Draw order (fixed for reproducibility, all from one seeded PCG64 stream):
allele frequencies; genotype Bernoulli pair, row-blocks in order; X; b;
beta; eps; case selection; control selection; row shuffle; frequency
noise multipliers (only when noise_e > 0).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import AscertainmentScheme, Dataset, ModelParams, standardize_columns, thresholds

_GENO_BLOCK = 8192


@dataclass(frozen=True)
class SimConfig:
    n_pop: int = 200_000
    n_study: int = 500
    m: int = 500
    c: int = 1
    K: float = 0.01
    sigma_g2: float = 0.25
    sigma_c2: float = 0.25
    balance: float = 0.5
    noise_e: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.K < 1.0:
            raise ValueError("K must lie in (0,1)")
        if not 0.0 < self.balance < 1.0:
            raise ValueError("balance must lie in (0,1)")
        if self.sigma_g2 + self.sigma_c2 >= 1.0:
            raise ValueError("sigma_g2 + sigma_c2 must stay below 1")
        if not 0.0 <= self.noise_e <= 1.0:
            raise ValueError("noise_e must lie in [0,1]")
        if self.balance == 0.5 and self.n_study % 2:
            raise ValueError("n_study must be even for a balanced study")
        if self.n_pop * self.K < self.n_study * self.balance:
            warnings.warn("population too small to supply the requested cases "
                          "in expectation", RuntimeWarning)


class ShortfallError(RuntimeError):
    """The generated population holds fewer cases/controls than requested."""


def apply_standardization_noise(freqs, e: float, rng) -> np.ndarray:
    """Multiply each frequency by r ~ U(1/(1+e), 1+e), clipped to
    (0.001, 0.999).  e = 0 leaves the frequencies untouched."""
    freqs = np.asarray(freqs, dtype=np.float64)
    if not 0.0 <= e <= 1.0:
        raise ValueError("e must lie in [0,1]")
    if np.any((freqs <= 0.0) | (freqs >= 1.0)):
        raise ValueError("freqs must lie in (0,1)")
    if e == 0.0:
        return freqs.copy()
    r = rng.uniform(1.0 / (1.0 + e), 1.0 + e, size=freqs.shape)
    return np.clip(freqs * r, 0.001, 0.999)


def _draw_genotypes(rng, n_pop, freqs):
    """Population genotype matrix as int8; each entry is the sum of two
    Bernoulli(f_j) allele draws, generated in fixed row blocks."""
    m = freqs.shape[0]
    Z = np.empty((n_pop, m), dtype=np.int8)
    for start in range(0, n_pop, _GENO_BLOCK):
        stop = min(start + _GENO_BLOCK, n_pop)
        block = stop - start
        g = (rng.random((block, m)) < freqs).view(np.int8)
        g += (rng.random((block, m)) < freqs).view(np.int8)
        Z[start:stop] = g
    return Z


def _standardized_dot(Zraw, freqs, b):
    """(Zraw standardized by freqs) @ b, blocked to keep memory flat."""
    denom = np.sqrt(2.0 * freqs * (1.0 - freqs))
    scaled = b / denom
    out = np.empty(Zraw.shape[0])
    shift = float(2.0 * freqs @ scaled)
    for start in range(0, Zraw.shape[0], _GENO_BLOCK):
        stop = min(start + _GENO_BLOCK, Zraw.shape[0])
        out[start:stop] = Zraw[start:stop] @ scaled - shift
    return out


def simulate_study(cfg: SimConfig):
    """Generate one case-control study.

    Returns (Dataset, true ModelParams, AscertainmentScheme).  The dataset's
    Z is standardized with the estimation-side frequencies (noise-perturbed
    when cfg.noise_e > 0); the latent effects always use the true ones.
    """
    rng = np.random.default_rng(cfg.seed)
    freqs = rng.uniform(0.05, 0.5, size=cfg.m)
    Zraw = _draw_genotypes(rng, cfg.n_pop, freqs)
    X = rng.standard_normal((cfg.n_pop, cfg.c)) if cfg.c else np.zeros((cfg.n_pop, 0))
    b = rng.standard_normal(cfg.m) * np.sqrt(cfg.sigma_g2 / cfg.m)
    beta = (rng.standard_normal(cfg.c) * np.sqrt(cfg.sigma_c2 / cfg.c)
            if cfg.c else np.zeros(0))
    # pin the realized fixed-effect variance to its nominal budget: the noise
    # variance 1 - sigma_c2 - sigma_g2 presumes X beta explains exactly
    # sigma_c2, which a low-dimensional draw misses by an O(1/sqrt(c)) factor
    if cfg.c and cfg.sigma_c2 > 0.0:
        beta *= np.sqrt(cfg.sigma_c2) / np.linalg.norm(beta)
    eps = rng.standard_normal(cfg.n_pop) * np.sqrt(1.0 - cfg.sigma_c2 - cfg.sigma_g2)

    g = _standardized_dot(Zraw, freqs, b)
    liab = g + (X @ beta if cfg.c else 0.0) + eps
    cut = np.quantile(liab, 1.0 - cfg.K)
    case_idx = np.flatnonzero(liab > cut)
    ctrl_idx = np.flatnonzero(liab <= cut)

    n_case = round(cfg.n_study * cfg.balance)
    n_ctrl = cfg.n_study - n_case
    if len(case_idx) < n_case or len(ctrl_idx) < n_ctrl:
        raise ShortfallError(
            f"population supplies {len(case_idx)} cases / {len(ctrl_idx)} controls, "
            f"study needs {n_case} / {n_ctrl}")
    sel_case = rng.choice(case_idx, size=n_case, replace=False)
    sel_ctrl = rng.choice(ctrl_idx, size=n_ctrl, replace=False)
    sel = np.concatenate([sel_case, sel_ctrl])
    rng.shuffle(sel)

    est_freqs = apply_standardization_noise(freqs, cfg.noise_e, rng) \
        if cfg.noise_e > 0.0 else freqs
    Zs = standardize_columns(Zraw[sel].astype(np.float64), freqs=est_freqs)
    Xs = X[sel]
    y = (liab[sel] > cut).astype(np.int8)

    dataset = Dataset(X=Xs, Z=Zs, y=y)
    true_params = ModelParams(theta=cfg.sigma_g2, beta=beta, sigma_c2=cfg.sigma_c2,
                              sigma_eps2=1.0 - cfg.sigma_g2 - cfg.sigma_c2,
                              t=thresholds(cfg.K, Xs, beta))
    scheme = AscertainmentScheme.from_prevalences(cfg.K, n_case / cfg.n_study)
    return dataset, true_params, scheme


def spawn_seeds(master_seed: int, n: int) -> list[int]:
    """Independent replication seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(n)]


def write_study(out_dir, dataset: Dataset, cfg: SimConfig,
                true_params: ModelParams, scheme: AscertainmentScheme):
    """Write X/Z as whitespace-delimited matrices, phenotypes as CSV and a
    JSON metadata sidecar.  Full float precision, so reloads are exact."""
    from . import __version__
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "Z.txt", dataset.Z, fmt="%.17g")
    if dataset.d:
        np.savetxt(out / "X.txt", dataset.X, fmt="%.17g")
    else:
        (out / "X.txt").write_text("# no fixed-effect covariates (d=0)\n")
    with open(out / "pheno.csv", "w") as fh:
        fh.write("unit_id,y\n")
        for i, yi in enumerate(dataset.y):
            fh.write(f"{i},{int(yi)}\n")
    meta = {
        "config": asdict(cfg),
        "seed": cfg.seed,
        "true_params": {
            "theta": true_params.theta,
            "beta": true_params.beta.tolist(),
            "sigma_c2": true_params.sigma_c2,
            "sigma_eps2": true_params.sigma_eps2,
        },
        "scheme": {"K": scheme.K, "P": scheme.P, "s0": scheme.s0, "s1": scheme.s1},
        "version": __version__,
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_study(in_dir):
    """Read back a study written by ``write_study``.

    Returns (Dataset, meta dict)."""
    src = Path(in_dir)
    Z = np.loadtxt(src / "Z.txt", ndmin=2)
    with open(src / "meta.json") as fh:
        meta = json.load(fh)
    n = Z.shape[0]
    x_path = src / "X.txt"
    first = x_path.read_text().lstrip()
    if first.startswith("#"):
        X = np.zeros((n, 0))
    else:
        X = np.loadtxt(x_path, ndmin=2)
    ids, ys = [], []
    with open(src / "pheno.csv") as fh:
        next(fh)
        for line in fh:
            uid, yv = line.strip().split(",")
            ids.append(int(uid))
            ys.append(int(yv))
    y = np.asarray(ys)[np.argsort(ids)]
    return Dataset(X=X, Z=Z, y=y), meta
