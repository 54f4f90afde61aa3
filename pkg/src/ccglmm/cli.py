"""Command-line harness: dataset simulation, single-study fits and
replication experiments emitting plot-ready CSV tables.

Exit codes: 0 success (possibly with flagged, nonconverged results),
2 usage error, 3 data/config error, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from itertools import product
from pathlib import Path

import numpy as np

from . import __version__
from .pipeline import METHODS, fit_dataset
from .simgen import SimConfig, load_study, simulate_study, spawn_seeds, write_study

WORKERS_ENV = "CCGLMM_WORKERS"

EXPERIMENT_PRESETS = {
    # desk-scale reproductions of the published simulation patterns
    "fig4a-desk": {
        "base": {"n_study": 300, "m": 300, "n_pop": 200_000, "K": 0.01},
        "sweep": {"theta_true": [0.1, 0.25, 0.5]},
        "methods": ["aep", "apl-exact", "pcgc", "ep-plain"],
        "reps": 50, "master_seed": 20260810,
    },
    "fig4b-desk": {
        "base": {"n_study": 300, "m": 300, "n_pop": 200_000, "sigma_g2": 0.25},
        "sweep": {"K": [0.01, 0.1, 0.25, 0.5]},
        "methods": ["aep", "apl-exact", "pcgc", "ep-plain"],
        "reps": 50, "master_seed": 20260811,
    },
    "fig5b-desk": {
        "base": {"n_study": 300, "n_pop": 200_000, "K": 0.01, "sigma_g2": 0.25},
        "sweep": {"m": [20, 100, 300]},
        "methods": ["aep", "apl-exact", "pcgc"],
        "reps": 50, "master_seed": 20260812,
    },
    "fig5c-desk": {
        "base": {"n_study": 300, "m": 300, "n_pop": 200_000, "K": 0.01, "sigma_g2": 0.25},
        "sweep": {"noise_e": [0.0, 0.25, 0.5]},
        "methods": ["aep", "apl-exact", "pcgc"],
        "reps": 50, "master_seed": 20260813,
    },
    # full-scale published protocol (population of one million)
    "fig4a-full": {
        "base": {"n_study": 500, "m": 500, "n_pop": 1_000_000, "K": 0.01},
        "sweep": {"theta_true": [0.1, 0.25, 0.5]},
        "methods": ["aep", "apl-exact", "pcgc", "ep-plain"],
        "reps": 100, "master_seed": 20260814,
    },
}

_AXIS_TO_FIELD = {"theta_true": "sigma_g2", "K": "K", "n": "n_study",
                  "m": "m", "noise_e": "noise_e"}


class DataError(Exception):
    pass


def _cfg_from_dict(d: dict) -> SimConfig:
    valid = {f.name for f in fields(SimConfig)}
    unknown = set(d) - valid
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    try:
        return SimConfig(**d)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid config: {exc}") from exc


def cmd_simulate(args) -> int:
    cfg_dict = {}
    if args.config:
        with open(args.config) as fh:
            cfg_dict = json.load(fh)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    cfg = _cfg_from_dict(cfg_dict)
    dataset, true_params, scheme = simulate_study(cfg)
    write_study(args.out, dataset, cfg, true_params, scheme)
    print(f"wrote study to {args.out}: n={dataset.n} (cases {int(dataset.y.sum())}), "
          f"m={dataset.m}, d={dataset.d}")
    return 0


def _fit_row(result, extra=None):
    row = {
        "method": result.method,
        "theta_hat": result.theta,
        "beta_hat": ";".join(f"{b:.10g}" for b in result.beta),
        "objective": result.objective,
        "se": "" if result.se is None else result.se,
        "converged": int(result.converged),
        "boundary": int(result.boundary),
        "n_evals": result.n_evals,
        "seconds": round(result.seconds, 3),
    }
    if extra:
        row.update(extra)
    return row


def cmd_fit(args) -> int:
    try:
        dataset, meta = load_study(args.dataset_dir)
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from exc
    K = args.prevalence if args.prevalence is not None else \
        meta.get("scheme", {}).get("K")
    if K is None:
        raise DataError("no --prevalence given and none recorded in the dataset")
    if not 0.0 < K < 1.0:
        raise DataError("prevalence must lie in (0,1)")
    result = fit_dataset(dataset, K, args.method, se=args.se)
    row = _fit_row(result)
    out = Path(args.out) if args.out else Path(args.dataset_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fit.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    detail = {**row, "loo_thetas": None if result.loo_thetas is None
              else [float(v) for v in result.loo_thetas],
              "diagnostics": _jsonable(result.diagnostics), "version": __version__}
    with open(out / "fit.json", "w") as fh:
        json.dump(detail, fh, indent=2)
    flag = "" if result.converged else " [NONCONVERGED]"
    print(f"{args.method}: theta_hat={result.theta:.4f}"
          + (f" se={result.se:.4f}" if result.se is not None else "")
          + f" ({result.seconds:.1f}s){flag}")
    return 0


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        elif isinstance(v, np.ndarray):
            v = v.tolist()
        out[k] = v
    return out


def _limit_blas_threads():
    """Keep worker processes from oversubscribing the machine: the fits are
    dominated by sequential n=300-scale factorizations where threaded BLAS
    only adds overhead."""
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _run_cell_rep(task):
    """One replication of one grid cell: simulate, fit every method."""
    cell, rep, seed, methods, se_mode = task
    cfg = _cfg_from_dict({**cell, "seed": seed})
    rows = []
    try:
        dataset, true_params, scheme = simulate_study(cfg)
    except Exception as exc:  # recorded per-row, run continues
        return [{"rep": rep, "seed": seed, "method": m, "error": repr(exc)}
                for m in methods]
    from .model import grm
    G = grm(dataset.Z)
    for method in methods:
        base = {"rep": rep, "seed": seed, "K": cfg.K, "P": scheme.P,
                "n": cfg.n_study, "m": cfg.m, "e": cfg.noise_e,
                "theta_true": cfg.sigma_g2, "error": ""}
        try:
            result = fit_dataset(dataset, cfg.K, method, se=se_mode, G=G)
            base.update({"method": method, "theta_hat": result.theta,
                         "se": "" if result.se is None else result.se,
                         "converged": int(result.converged),
                         "seconds": round(result.seconds, 3)})
        except Exception as exc:
            base.update({"method": method, "theta_hat": "", "se": "",
                         "converged": 0, "seconds": "", "error": repr(exc)})
        rows.append(base)
    return rows


def run_experiment(spec: dict, out_dir, n_workers: int | None = None):
    """Execute a replication grid and write results.csv / summary.csv."""
    methods = spec.get("methods", ["aep"])
    for m in methods:
        if m not in METHODS:
            raise DataError(f"unknown method {m!r}")
    reps = int(spec.get("reps", 50))
    master_seed = int(spec.get("master_seed", 0))
    se_mode = spec.get("se", "none")
    base = dict(spec.get("base", {}))
    sweep = spec.get("sweep", {})
    unknown = set(sweep) - set(_AXIS_TO_FIELD)
    if unknown:
        raise DataError(f"unknown sweep axes: {sorted(unknown)}")

    axes = list(sweep.items()) or [("theta_true", [base.get("sigma_g2", 0.25)])]
    names = [a for a, _ in axes]
    cells = []
    for combo in product(*(v for _, v in axes)):
        cell = dict(base)
        for axis, val in zip(names, combo):
            cell[_AXIS_TO_FIELD[axis]] = val
        cells.append(cell)

    seeds = np.array(spawn_seeds(master_seed, len(cells) * reps)).reshape(len(cells), reps)
    tasks = [(cell, rep, int(seeds[c, rep]), methods, se_mode)
             for c, cell in enumerate(cells) for rep in range(reps)]

    if n_workers is None:
        n_workers = int(os.environ.get(WORKERS_ENV, os.cpu_count() or 1))
    rows = []
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers,
                                 initializer=_limit_blas_threads) as pool:
            for chunk in pool.map(_run_cell_rep, tasks):
                rows.extend(chunk)
    else:
        for task in tasks:
            rows.extend(_run_cell_rep(task))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["rep", "seed", "method", "K", "P", "n", "m", "e", "theta_true",
            "theta_hat", "se", "converged", "seconds", "error"]
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)

    summary = summarize_rows(rows)
    sum_cols = ["method", "K", "n", "m", "e", "theta_true", "reps_ok",
                "theta_mean", "theta_sd", "mean_abs_err", "se_mean"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=sum_cols)
        w.writeheader()
        w.writerows(summary)
    with open(out / "experiment.json", "w") as fh:
        json.dump({"spec": spec, "version": __version__, "workers": n_workers},
                  fh, indent=2)
    return rows, summary


def summarize_rows(rows):
    """Per (cell, method) means and spreads of the estimates."""
    groups: dict = {}
    for r in rows:
        if r.get("error"):
            key = (r["method"], r.get("K"), r.get("n"), r.get("m"),
                   r.get("e"), r.get("theta_true"))
            groups.setdefault(key, []).append(None)
            continue
        key = (r["method"], r["K"], r["n"], r["m"], r["e"], r["theta_true"])
        groups.setdefault(key, []).append(r)
    out = []
    for (method, K, n, m, e, tt), members in sorted(groups.items(), key=str):
        ok = [r for r in members if r is not None and r["theta_hat"] != ""]
        th = np.array([float(r["theta_hat"]) for r in ok])
        ses = np.array([float(r["se"]) for r in ok if r["se"] != ""])
        out.append({
            "method": method, "K": K, "n": n, "m": m, "e": e, "theta_true": tt,
            "reps_ok": len(ok),
            "theta_mean": round(float(th.mean()), 6) if len(th) else "",
            "theta_sd": round(float(th.std(ddof=1)), 6) if len(th) > 1 else "",
            "mean_abs_err": round(float(np.mean(np.abs(th - tt))), 6) if len(th) else "",
            "se_mean": round(float(ses.mean()), 6) if len(ses) else "",
        })
    return out


def cmd_experiment(args) -> int:
    if args.preset:
        if args.preset not in EXPERIMENT_PRESETS:
            raise DataError(f"unknown preset {args.preset!r}; "
                            f"available: {sorted(EXPERIMENT_PRESETS)}")
        spec = EXPERIMENT_PRESETS[args.preset]
    else:
        with open(args.spec) as fh:
            spec = json.load(fh)
    _, summary = run_experiment(spec, args.out, args.workers)
    for row in summary:
        print(f"{row['method']:>10} K={row['K']} n={row['n']} m={row['m']} "
              f"e={row['e']} theta={row['theta_true']}: "
              f"mean={row['theta_mean']} sd={row['theta_sd']} ({row['reps_ok']} ok)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccglmm",
                                description="Variance-component estimation for "
                                            "case-control GLMMs")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate a synthetic case-control study")
    ps.add_argument("--config", help="JSON file of simulation settings")
    ps.add_argument("--seed", type=int, help="override the config seed")
    ps.add_argument("--out", required=True, help="output directory")
    ps.set_defaults(func=cmd_simulate)

    pf = sub.add_parser("fit", help="fit one study from its directory")
    pf.add_argument("dataset_dir")
    pf.add_argument("--method", required=True, choices=METHODS)
    pf.add_argument("--prevalence", type=float,
                    help="population prevalence K (defaults to the dataset's)")
    pf.add_argument("--se", choices=("jackknife", "none"), default="none")
    pf.add_argument("--out", help="output directory (default: dataset dir)")
    pf.set_defaults(func=cmd_fit)

    pe = sub.add_parser("experiment", help="run a replication grid")
    group = pe.add_mutually_exclusive_group(required=True)
    group.add_argument("--spec", help="JSON experiment specification")
    group.add_argument("--preset", help="named built-in specification")
    pe.add_argument("--out", required=True)
    pe.add_argument("--workers", type=int,
                    help=f"worker processes (default: ${WORKERS_ENV} or cores)")
    pe.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception:
        traceback.print_exc()
        return 4


if __name__ == "__main__":
    sys.exit(main())
