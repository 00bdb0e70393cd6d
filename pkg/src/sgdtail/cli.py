"""``sgdtail`` command line: theory tables, simulations, sweeps and the acceptance run."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, Settings, load_config
from .data_gen import GaussianStreamSpec
from .rng import child_seed
from .sgd_engine import AllDivergedError, ergodic_averages
from .stable_estim import estimate_alpha
from .tail_theory import Regime, TheoryQuery, critical_stepsize, h2_closed_form, solve_tail_index

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

THEORY_COLUMNS = ["eta", "b", "d", "sigma2", "a", "rho", "rho_se", "alpha", "alpha_status", "h2", "eta_crit", "regime"]
SWEEP_COLUMNS = THEORY_COLUMNS + ["eta_over_b", "alpha_hat", "n_diverged", "n_rows"]


def fmt(v) -> str:
    """Locale-free CSV cell; floats keep 17 significant digits, missing values are empty."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: str, columns: Sequence[str], rows: Sequence[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def write_json(path: str, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def theory_row(spec: GaussianStreamSpec, settings: Settings) -> dict:
    sigma2 = spec.sigma2
    q = TheoryQuery.from_stepsize(spec.eta, spec.b, spec.d, sigma2)
    th = settings.theory
    r = solve_tail_index(q, tol=th.tol, n=th.n, seed=settings.spec.seed, method=th.method)
    eta_crit = critical_stepsize(spec.b, spec.d, sigma2)
    regime = r.regime.value
    if r.regime is not Regime.III and math.isclose(spec.eta, eta_crit, rel_tol=1e-9):
        regime = "II-boundary"
    return {
        "eta": spec.eta, "b": spec.b, "d": spec.d, "sigma2": sigma2, "a": q.a,
        "rho": r.rho.value, "rho_se": r.rho.std_error, "alpha": r.alpha, "alpha_status": r.status.value,
        "h2": h2_closed_form(q), "eta_crit": eta_crit, "regime": regime,
    }


def _sweep_cell(job: tuple[int, GaussianStreamSpec, Settings]) -> dict:
    i, spec, settings = job
    row = theory_row(spec, settings)
    sim_spec = dataclasses.replace(spec, seed=child_seed(settings.spec.seed, "cell", i))
    row["eta_over_b"] = spec.eta / spec.b
    try:
        sm = ergodic_averages(sim_spec, settings.run)
    except AllDivergedError:
        row.update(alpha_hat=None, n_diverged=settings.run.replicas, n_rows=0)
        return row
    row.update(alpha_hat=estimate_alpha(sm, settings.estimator).alpha_hat, n_diverged=sm.n_diverged, n_rows=sm.n_rows)
    return row


def _theory_cell(job: tuple[int, GaussianStreamSpec, Settings]) -> dict:
    _, spec, settings = job
    return theory_row(spec, settings)


def _map_cells(fn, settings: Settings, threads: int) -> list[dict]:
    jobs = [(i, spec, settings) for i, spec in enumerate(settings.cells())]
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs))  # map keeps cell order


def _prepare_out(path: str, settings: Settings, command: str) -> str:
    os.makedirs(path, exist_ok=True)
    write_json(os.path.join(path, "config-echo.json"), {"command": command, **settings.echo()})
    return path


def cmd_theory(settings: Settings, out: str, threads: int) -> int:
    rows = _map_cells(_theory_cell, settings, threads)
    _prepare_out(out, settings, "theory")
    write_csv(os.path.join(out, "results.csv"), THEORY_COLUMNS, rows)
    write_json(os.path.join(out, "estimates.json"), {"cells": rows})
    return EXIT_OK


def cmd_sweep(settings: Settings, out: str, threads: int) -> int:
    rows = _map_cells(_sweep_cell, settings, threads)
    _prepare_out(out, settings, "sweep")
    write_csv(os.path.join(out, "results.csv"), SWEEP_COLUMNS, rows)
    write_json(os.path.join(out, "estimates.json"), {"cells": rows})
    return EXIT_OK


def cmd_simulate(settings: Settings, out: str) -> int:
    _prepare_out(out, settings, "simulate")
    try:
        sm = ergodic_averages(settings.spec, settings.run)
    except AllDivergedError as e:
        write_json(os.path.join(out, "estimates.json"), {"error": str(e), "n_diverged": settings.run.replicas})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    d = settings.spec.d
    rows = [{"replica": int(r), **{f"x{j}": v for j, v in enumerate(row)}} for r, row in zip(sm.replica_ids, sm.rows)]
    write_csv(os.path.join(out, "results.csv"), ["replica"] + [f"x{j}" for j in range(d)], rows)
    try:
        est = estimate_alpha(sm, settings.estimator)
    except ValueError as e:
        write_json(os.path.join(out, "estimates.json"), {"error": str(e), "n_diverged": sm.n_diverged})
        print(f"error: tail-index not estimated: {e}", file=sys.stderr)
        return EXIT_FAIL
    write_json(
        os.path.join(out, "estimates.json"),
        {
            "alpha_hat": est.alpha_hat,
            "exceeds_two": est.exceeds_two,
            "per_k1": [{"k1": k, "alpha_hat": a} for k, a in est.per_k1],
            "n_used": est.n_used,
            "n_dropped": est.n_dropped,
            "n_diverged": sm.n_diverged,
        },
    )
    return EXIT_OK


def cmd_verify(level: str, seed: int, out: Optional[str]) -> int:
    from .verify import run_all

    results = run_all(level, seed, echo=lambda s: print(s, file=sys.stderr))
    ran = [r for r in results if not r.skipped]
    verdict = {
        "level": level,
        "seed": seed,
        "passed": all(r.passed for r in ran),
        "criteria": [r.to_json() for r in results],
    }
    print(json.dumps(verdict, indent=2, default=_json_default))
    n_pass = sum(r.passed for r in ran)
    print(f"{n_pass}/{len(ran)} criteria passed ({len(results) - len(ran)} skipped)", file=sys.stderr)
    if out:
        os.makedirs(out, exist_ok=True)
        write_json(os.path.join(out, "verdict.json"), verdict)
    return EXIT_OK if verdict["passed"] else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgdtail", description="Heavy-tailed stationary laws of constant-stepsize SGD.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("theory", "theoretical tail-index and regime per grid cell"),
        ("simulate", "replica ergodic averages and their estimated tail-index"),
        ("sweep", "theory and simulation over the (eta, b, d, sigma) grid"),
        ("verify", "run the acceptance criteria"),
    ]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", metavar="PATH", help="INI run configuration")
        s.add_argument("--out", metavar="DIR", default=None, help="output directory")
        s.add_argument("--seed", type=_u64, default=None, help="master seed (overrides the config)")
        s.add_argument("--threads", type=int, default=1, metavar="N", help="worker processes for grid cells")
        if name == "verify":
            s.add_argument("--level", choices=("quick", "full"), default="quick")
    return p


def _u64(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {s}")
    return v


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "verify":
        return cmd_verify(args.level, args.seed or 0, args.out)
    try:
        settings = load_config(args.config)
        if args.seed is not None:
            settings = settings.with_seed(args.seed)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out or f"sgdtail-{args.command}"
    if args.command == "theory":
        return cmd_theory(settings, out, args.threads)
    if args.command == "sweep":
        return cmd_sweep(settings, out, args.threads)
    return cmd_simulate(settings, out)


if __name__ == "__main__":
    sys.exit(main())
