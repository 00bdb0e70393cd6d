"""The acceptance checks, shared by ``sgdtail verify`` and the test suite.

Each check returns a :class:`CriterionResult` carrying a pass flag and the
numbers it was decided on.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np
from scipy import stats

from .convergence import coupled_contraction_slope, moment_bound_curve
from .data_gen import GaussianStreamSpec, sample_sas
from .sgd_engine import RunConfig, ergodic_averages, iterate_ensemble, moment_trajectory
from .stable_estim import estimate_alpha
from .tail_theory import (
    Status,
    TheoryQuery,
    critical_stepsize,
    estimate_h,
    estimate_rho,
    h2_closed_form,
    h_quadrature_1d,
    rho_quadrature_1d,
    solve_tail_index,
    stepsize_for_alpha,
)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0
    skipped: bool = False

    def line(self) -> str:
        verdict = "SKIP" if self.skipped else ("PASS" if self.passed else "FAIL")
        return f"[{verdict}] criterion {self.number:2d}: {self.name} ({self.seconds:.1f}s)"

    def to_json(self) -> dict:
        return {
            "criterion": self.number,
            "name": self.name,
            "passed": self.passed,
            "skipped": self.skipped,
            "seconds": round(self.seconds, 3),
            "details": _plain(self.details),
        }


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def _timed(number: int, name: str):
    def wrap(fn: Callable[..., tuple[bool, dict]]):
        def run(**kw) -> CriterionResult:
            t = time.perf_counter()
            passed, details = fn(**kw)
            return CriterionResult(number, name, bool(passed), details, time.perf_counter() - t)

        run.number, run.title = number, name
        return run

    return wrap


def _within(x: float, y: float, se: float, k: float = 4.0) -> bool:
    return abs(x - y) <= k * se


# Stationary SGD configuration with eta = eta_crit / 2 at (b, d, sigma^2) = (5, 10, 1).
HALF_CRIT = GaussianStreamSpec(d=10, b=5, eta=critical_stepsize(5, 10) / 2, seed=0)


@_timed(1, "tail-index equals 2 at the critical stepsize")
def critical_tail_index(seed: int = 0):
    rows = []
    for b, d, s2 in [(5, 10, 1.0), (1, 100, 1.0), (4, 4, 2.0)]:
        t = time.perf_counter()
        r = solve_tail_index(TheoryQuery.from_stepsize(critical_stepsize(b, d, s2), b, d, s2), n=10**6, seed=seed)
        sec = time.perf_counter() - t
        ok = r.status is Status.SOLVED and abs(r.alpha - 2.0) <= 0.05 and sec < 60
        rows.append({"b": b, "d": d, "sigma2": s2, "alpha": r.alpha, "alpha_se": r.alpha_se, "seconds": sec, "ok": ok})
    return all(r["ok"] for r in rows), {"configs": rows}


@_timed(2, "Monte Carlo h(2) matches its closed form")
def h2_grid(seed: int = 0):
    rows = []
    for a, b, d in product((0.05, 0.2, 0.4), (1, 5, 20), (1, 10, 100)):
        q = TheoryQuery(a, b, d)
        est = estimate_h(q, 2.0, 10**6, seed, method="monte-carlo")
        exact = h2_closed_form(q)
        rows.append({"a": a, "b": b, "d": d, "h": est.value, "se": est.std_error, "exact": exact,
                     "ok": _within(est.value, exact, est.std_error)})
    return all(r["ok"] for r in rows), {"grid": rows}


@_timed(3, "scalar case matches one-dimensional quadrature")
def scalar_oracle(seed: int = 0):
    rows = []
    for a in (0.3, 0.6, 1.2):
        q = TheoryQuery(a, 1, 1)
        for s in (0.5, 1.0, 2.0, 3.0):
            est, ref = estimate_h(q, s, 10**6, seed, method="monte-carlo"), h_quadrature_1d(q, s)
            rows.append({"a": a, "s": s, "mc": est.value, "se": est.std_error, "quad": ref.value,
                         "ok": _within(est.value, ref.value, est.std_error)})
        est, ref = estimate_rho(q, 10**6, seed, escalate=False, method="monte-carlo"), rho_quadrature_1d(q)
        rows.append({"a": a, "s": "rho", "mc": est.value, "se": est.std_error, "quad": ref.value,
                     "ok": _within(est.value, ref.value, est.std_error)})
    return all(r["ok"] for r in rows), {"checks": rows}


MONOTONE_GRIDS = {
    # axis: (direction, fixed (eta, b, d, sigma2), values); +1 nondecreasing, -1 nonincreasing.
    # Every cell keeps alpha between 1 and about 12, where the root is resolved at n = 1e6.
    "eta": (-1, (None, 5, 10, 1.0), (0.4, 0.5, 0.56, 0.6, 0.64)),
    "b": (+1, (0.6, None, 10, 1.0), (5, 6, 7, 8, 9)),
    "d": (-1, (0.5, 5, None, 1.0), (4, 6, 8, 10, 12)),
    "sigma2": (-1, (0.3, 5, 10, None), (1.5, 1.7, 1.9, 2.0, 2.1)),
}


def monotone_inversions(alphas, ses, direction: int, k: float = 4.0) -> list[int]:
    """Indices ``i`` where the step ``i -> i+1`` moves against ``direction`` by more than ``k`` joint se."""
    bad = []
    for i in range(len(alphas) - 1):
        step = direction * (alphas[i + 1] - alphas[i])
        if step < -k * math.hypot(ses[i], ses[i + 1]):
            bad.append(i)
    return bad


@_timed(4, "tail-index is monotone in eta, b, d and sigma^2")
def monotonicity(seed: int = 0, n: int = 10**6):
    out, ok = {}, True
    for axis, (direction, fixed, values) in MONOTONE_GRIDS.items():
        alphas, ses, used = [], [], []
        for v in values:
            eta, b, d, s2 = (v if f is None else f for f in fixed)
            r = solve_tail_index(TheoryQuery.from_stepsize(eta, b, d, s2), n=n, seed=seed)
            if r.status is Status.SOLVED and r.alpha >= 1.0:
                alphas.append(r.alpha)
                ses.append(r.alpha_se)
                used.append(v)
        inv = monotone_inversions(alphas, ses, direction)
        ok &= not inv and len(used) >= 3
        out[axis] = {"values": used, "alpha": alphas, "alpha_se": ses, "inversions": inv}
    return ok, out


def _simulated_alpha(spec: GaussianStreamSpec, K: int = 2000, K0: int = 1000, replicas: int = 400):
    sm = ergodic_averages(spec, RunConfig(K=K, K0=K0, replicas=replicas))
    return estimate_alpha(sm), sm.n_diverged


@_timed(5, "simulated tail-index agrees with theory")
def theory_vs_simulation(seed: int = 0, targets=(1.3, 1.6, 1.9)):
    rows = []
    for target in targets:
        eta = stepsize_for_alpha(target, 5, 10, 1.0, n=10**5, seed=seed)
        est, n_div = _simulated_alpha(GaussianStreamSpec(d=10, b=5, eta=eta, seed=seed))
        rows.append({"target": target, "eta": eta, "alpha_hat": est.alpha_hat, "per_k1": est.per_k1,
                     "n_diverged": n_div, "ok": abs(est.alpha_hat - target) <= 0.2})
    return all(r["ok"] for r in rows), {"targets": rows}


# At d = 10 the tail-index falls from 2 to about 1 within 5% above eta_crit(b), and
# stationarity ends soon after.  This grid straddles that band for the smaller
# batches while every cell keeps rho < 0.
SWEEP_ETA = (0.84, 0.86, 0.88, 0.90, 0.92)
SWEEP_B = (8, 9, 10, 11, 12)


@_timed(6, "simulated tail-index falls with eta/b")
def eta_over_b_correlation(seed: int = 0):
    ratio, alpha_hat = [], []
    for i, (eta, b) in enumerate(product(SWEEP_ETA, SWEEP_B)):
        est, _ = _simulated_alpha(GaussianStreamSpec(d=10, b=b, eta=eta, seed=seed + i))
        ratio.append(eta / b)
        alpha_hat.append(est.alpha_hat)
    rho = float(stats.spearmanr(alpha_hat, ratio)[0])
    return rho <= -0.8, {"spearman": rho, "eta_over_b": ratio, "alpha_hat": alpha_hat}


@_timed(7, "coupled chains contract at rate h(2)")
def coupled_contraction(seed: int = 0):
    fit = coupled_contraction_slope(HALF_CRIT, K=200, pairs=1000)
    return fit.relative_error <= 0.10, {"slope": fit.slope, "log_h2": fit.expected, "relative_error": fit.relative_error}


@_timed(8, "second moment stays under its bound curve")
def moment_bound(seed: int = 0, K: int = 2000, replicas: int = 400):
    traj = moment_trajectory(HALF_CRIT, RunConfig(K=K, replicas=replicas), 2.0)
    curve = moment_bound_curve(None, HALF_CRIT, 2.0, epsilon=0.01, K=K, seed=seed, x0_moment=traj.mean[0])
    z = (traj.mean - curve.values) / np.where(traj.std_error > 0, traj.std_error, np.inf)
    worst = int(np.argmax(z))
    ok = bool(np.all(traj.mean <= curve.values + 2.0 * traj.std_error))
    return ok, {"worst_k": worst, "worst_excess_in_se": float(z[worst]), "bound_limit": curve.limit,
                "empirical_final": float(traj.mean[-1]), "n_diverged": traj.n_diverged}


@_timed(9, "estimator recovers alpha on exact stable draws")
def estimator_consistency(seed: int = 0):
    rows, ok = [], True
    for alpha in (0.8, 1.2, 1.6, 2.0):
        x = sample_sas(alpha, 1.0, 10**5, seed)
        base = estimate_alpha(x).alpha_hat
        scaled = [estimate_alpha(c * x).alpha_hat for c in (1e-6, 1.0, 1e6)]
        drift = max(abs(s - base) for s in scaled)
        good = abs(base - alpha) <= 0.1 and drift <= 1e-12 * base
        ok &= good
        rows.append({"alpha": alpha, "alpha_hat": base, "scale_drift": drift, "ok": good})
    return ok, {"laws": rows}


@_timed(10, "no-stationary regime is detected")
def regime_three(seed: int = 0, replicas: int = 100, K: int = 10**4):
    a = 10 * 2 * 5 / (10 + 5 + 1)
    rho = estimate_rho(TheoryQuery(a, 5, 10), seed=seed)
    spec = GaussianStreamSpec(d=10, b=5, eta=a, seed=seed)
    div = np.zeros(replicas, dtype=bool)
    for k, _, div in iterate_ensemble(spec, RunConfig(K=K, replicas=replicas)):
        if div.all():
            break
    n_div = int(div.sum())
    return rho.value > 2 * rho.std_error and n_div >= 95, {
        "rho": rho.value, "rho_se": rho.std_error, "n_diverged": n_div, "steps_run": k}


ALL = (
    critical_tail_index,
    h2_grid,
    scalar_oracle,
    monotonicity,
    theory_vs_simulation,
    eta_over_b_correlation,
    coupled_contraction,
    moment_bound,
    estimator_consistency,
    regime_three,
)

# The quick level leaves out the long simulation and grid criteria.
QUICK = (1, 2, 3, 7, 8, 9, 10)


def run_all(level: str = "full", seed: int = 0, echo: Callable[[str], None] | None = None) -> list[CriterionResult]:
    if level not in ("quick", "full"):
        raise ValueError(f"level must be 'quick' or 'full', got {level!r}")
    results = []
    for check in ALL:
        if level == "quick" and check.number not in QUICK:
            r = CriterionResult(check.number, check.title, True, skipped=True)
        else:
            r = check(seed=seed)
        results.append(r)
        if echo:
            echo(r.line())
    return results
