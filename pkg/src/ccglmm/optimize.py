"""Bounded 1-d maximization of the variance-component objective.

A coarse probe grid guards against surface wiggle (nonconverged EP probes
may return -inf and are simply treated as worse than any finite value);
the bracket around the best probe is then refined by golden-section with a
final parabolic polish.  Deterministic given the objective.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0  # 0.618...


class MaximizeResult(NamedTuple):
    theta: float
    fmax: float
    evals: int
    boundary: bool


class OptimizationError(RuntimeError):
    pass


def grid_argmax_parabolic(grid, vals):
    """Argmax of a smooth profile sampled on a grid, refined by a parabola
    through the best point and its neighbors (clamped to one grid step)."""
    k = int(np.nanargmax(vals))
    if k == 0 or k == len(grid) - 1:
        return float(grid[k])
    x0, x1, x2 = grid[k - 1], grid[k], grid[k + 1]
    f0, f1, f2 = vals[k - 1], vals[k], vals[k + 1]
    denom = f0 - 2.0 * f1 + f2
    if not math.isfinite(denom) or denom >= 0.0:
        return float(x1)
    shift = 0.5 * (f0 - f2) / denom
    shift = min(max(shift, -1.0), 1.0)
    return float(x1 + shift * (x1 - x0))


def maximize_scalar(f: Callable[[float], float], lo: float, hi: float,
                    tol: float = 1e-4, n_grid: int = 9) -> MaximizeResult:
    """Maximize f on [lo, hi] to within ``tol`` of the argmax (unimodal f).

    Returns (theta, fmax, evals, boundary); ``boundary`` marks a maximum
    pinned at either end of the interval.  Raises OptimizationError if every
    probe is non-finite.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    cache: dict[float, float] = {}

    def fc(x: float) -> float:
        if x not in cache:
            v = f(x)
            cache[x] = -math.inf if (v is None or math.isnan(v)) else float(v)
        return cache[x]

    step = (hi - lo) / (n_grid - 1)
    grid = [lo + k * step for k in range(n_grid)]
    grid[-1] = hi
    vals = [fc(x) for x in grid]
    if all(v == -math.inf for v in vals):
        raise OptimizationError("objective non-finite at every probe point")
    k = max(range(n_grid), key=lambda j: vals[j])
    a = grid[k - 1] if k > 0 else lo
    b = grid[k + 1] if k < n_grid - 1 else hi

    # golden-section refinement on [a, b]
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = fc(x1), fc(x2)
    while b - a > 2.0 * tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = fc(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = fc(x1)

    # parabolic polish through the best cached triple
    best = max(cache, key=cache.get)
    xs = sorted(cache)
    i = xs.index(best)
    if 0 < i < len(xs) - 1:
        x0, x1b, x2b = xs[i - 1], xs[i], xs[i + 1]
        f0, f1b, f2b = cache[x0], cache[x1b], cache[x2b]
        if all(map(math.isfinite, (f0, f1b, f2b))):
            d0, d2 = x1b - x0, x2b - x1b
            num = d0 * d0 * (f1b - f2b) - d2 * d2 * (f1b - f0)
            den = d0 * (f1b - f2b) + d2 * (f1b - f0)
            if den > 0.0:
                cand = min(max(x1b - 0.5 * num / den, x0), x2b)
                fc(cand)

    theta = max(cache, key=cache.get)
    boundary = theta <= lo + tol or theta >= hi - tol
    return MaximizeResult(theta=theta, fmax=cache[theta], evals=len(cache),
                          boundary=boundary)
