"""Moment bounds, Wasserstein contraction and stable-limit checks for the SGD chain.

The bound curves follow from applying ``E||M x||^p <= h(p) E||x||^p`` step by
step.  For ``p <= 1`` the map ``t -> t^p`` is subadditive, which gives

    E||x_k||^p <= h^k E||x_0||^p + (1 - h^k) / (1 - h) * E||q_1||^p.

For ``p > 1`` the weighted inequality ``(u + v)^p <= (1+eps) u^p + C v^p``
with ``C = ((1+eps)^{p/(p-1)} - (1+eps)) / ((1+eps)^{1/(p-1)} - 1)^p``
replaces ``h`` by ``(1+eps) h`` and scales the noise term by ``C``.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .data_gen import GaussianStreamSpec, draw_x_true, sample_sas
from .rng import keyed_rng
from .sgd_engine import (
    RunConfig,
    _replica_ids,
    _Source,
    iterate_ensemble,
    moment_trajectory,
    run_coupled_pairs,
)
from .stable_estim import AlphaEstimate, EstimatorConfig, estimate_alpha
from .tail_theory import (
    HEstimate,
    Status,
    TheoryQuery,
    critical_stepsize,
    estimate_h,
    h2_closed_form,
    solve_tail_index,
)

Q_MOMENT_N = 10**6


@dataclass(frozen=True)
class BoundCurve:
    p: float
    epsilon: Optional[float]
    k: np.ndarray
    values: np.ndarray
    limit: float
    h_p: HEstimate
    x0_moment: float
    q_moment: HEstimate
    q_moment_jensen: Optional[float]

    @property
    def contraction(self) -> float:
        """Per-step factor of the transient term: ``h(p)`` or ``(1+eps) h(p)``."""
        return self.h_p.value * (1.0 + (self.epsilon or 0.0))


def weighted_power_constant(p: float, epsilon: float) -> float:
    """``C`` in ``(u + v)^p <= (1+eps) u^p + C v^p`` for ``p > 1``."""
    if not p > 1:
        raise ValueError(f"the weighted inequality needs p > 1, got {p}")
    e = 1.0 + epsilon
    return (e ** (p / (p - 1.0)) - e) / (e ** (1.0 / (p - 1.0)) - 1.0) ** p


def gaussian_norm_moment(d: int, p: float, scale: float = 1.0) -> float:
    """``E||z||^p`` for ``z ~ N(0, scale^2 I_d)``."""
    if scale == 0:
        return 0.0 if p > 0 else 1.0
    return scale**p * 2.0 ** (p / 2.0) * math.exp(special.gammaln((d + p) / 2.0) - special.gammaln(d / 2.0))


def noise_moment(
    spec: GaussianStreamSpec, p: float, n: int = Q_MOMENT_N, seed: Optional[int] = None, block: int = 10**5
) -> tuple[HEstimate, Optional[float]]:
    """``E||q_1||^p`` by Monte Carlo, and the Jensen bound ``eta^p E[|y|^p ||a||^p]`` for ``p >= 1``.

    ``q_1 = (eta/b) sum_i a_i y_i`` with labels generated from the stream's
    fixed ``x_true``.
    """
    seed = spec.seed if seed is None else seed
    x_true = draw_x_true(spec)
    qs, js = [], []
    for i, start in enumerate(range(0, n, block)):
        m = min(block, n - start)
        rng = keyed_rng(seed, "q-moment", i)
        A = spec.sigma * spec.inputs.draw(rng, (m, spec.b, spec.d))
        y = A @ x_true + spec.sigma_y * rng.standard_normal((m, spec.b))
        q = (spec.eta / spec.b) * np.einsum("mbd,mb->md", A, y)
        qs.append(np.linalg.norm(q, axis=1) ** p)
        js.append((np.abs(y[:, 0]) * np.linalg.norm(A[:, 0], axis=1)) ** p)
    v = np.concatenate(qs)
    est = HEstimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(n)), n)
    jensen = spec.eta**p * float(np.concatenate(js).mean()) if p >= 1 else None
    return est, jensen


def _check_below_alpha(q: TheoryQuery, p: float, n: int, seed: int):
    r = solve_tail_index(q, n=n, seed=seed)
    if r.status is Status.NO_STATIONARY:
        raise ValueError(f"no stationary law at a={q.a}, b={q.b}, d={q.d}; moment bounds do not apply")
    if r.status is Status.SOLVED and p >= r.alpha:
        raise ValueError(f"moment order p={p} is not below the tail-index {r.alpha:.4f}; the moment is infinite")


def moment_bound_curve(
    q: Optional[TheoryQuery],
    spec: GaussianStreamSpec,
    p: float,
    epsilon: float = 0.01,
    K: int = 1000,
    x0=None,
    n: int = 10**6,
    n_q: int = Q_MOMENT_N,
    seed: int = 0,
    x0_moment: Optional[float] = None,
) -> BoundCurve:
    """Upper bound on ``E||x_k||^p`` for ``k = 0..K`` and its ``k -> infinity`` limit.

    ``q`` defaults to the query implied by ``spec``.  With ``x0`` omitted the
    chain starts from ``N(0, sigma_x^2 I)`` as in the simulations.  The bound
    holds conditionally on the starting point, so ``x0_moment`` may be the
    sample average of ``||x_0||^p`` over a concrete set of replicas.
    """
    if not p > 0:
        raise ValueError(f"moment order must be positive, got {p}")
    if x0_moment is not None:
        m0 = float(x0_moment)
    elif x0 is None:
        m0 = gaussian_norm_moment(spec.d, p, spec.sigma_x)
    else:
        m0 = float(np.linalg.norm(np.asarray(x0, dtype=float)) ** p)
    k = np.arange(K + 1)
    if spec.eta == 0:
        zero = HEstimate(0.0, 0.0, 0)
        return BoundCurve(p, None, k, np.full(K + 1, m0), m0, HEstimate(1.0, 0.0, 0, "exact"), m0, zero, 0.0)
    if q is None:
        q = TheoryQuery.from_stepsize(spec.eta, spec.b, spec.d, spec.sigma2)
    _check_below_alpha(q, p, n, seed)
    h = estimate_h(q, p, n, seed, method="stratified")
    qm, jensen = noise_moment(spec, p, n_q)
    if p <= 1:
        eps, rate, C = None, h.value, 1.0
    else:
        if not 0 < epsilon < 1.0 / h.value - 1.0:
            raise ValueError(f"epsilon={epsilon} must lie in (0, 1/h(p) - 1) = (0, {1.0 / h.value - 1.0:.6g})")
        eps, rate, C = epsilon, (1.0 + epsilon) * h.value, weighted_power_constant(p, epsilon)
    if not rate < 1:
        raise ValueError(f"h(p) = {h.value:.6g} is not below 1; no contraction at order p={p}")
    geo = rate ** k.astype(float)
    values = geo * m0 + (1.0 - geo) / (1.0 - rate) * C * qm.value
    limit = moment_bound_limit(rate, C, qm.value)
    return BoundCurve(p, eps, k, values, limit, h, m0, qm, jensen)


def moment_bound_limit(rate: float, C: float, q_moment: float) -> float:
    """``C E||q_1||^p / (1 - rate)``, the bound on the stationary moment."""
    return C * q_moment / (1.0 - rate)


# -- Wasserstein contraction -------------------------------------------------------


def w2_contraction_rate(eta: float, b: int, d: int, sigma2: float = 1.0) -> float:
    """Per-step factor ``r = 1 - 2 eta sigma2 (1 - eta/eta_crit)`` on squared W2 distance."""
    eta_crit = critical_stepsize(b, d, sigma2)
    if not 0 < eta < eta_crit:
        raise ValueError(f"contraction needs 0 < eta < eta_crit = {eta_crit:.6g}, got {eta}")
    return 1.0 - 2.0 * eta * sigma2 * (1.0 - eta / eta_crit)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    expected: float
    k: np.ndarray
    mean_sq: np.ndarray

    @property
    def relative_error(self) -> float:
        return abs(self.slope - self.expected) / abs(self.expected)


def coupled_contraction_slope(spec: GaussianStreamSpec, K: int = 200, pairs: int = 1000) -> SlopeFit:
    """Least-squares slope of ``log mean ||x_k - x~_k||^2`` over ``k = 0..K``, against ``log r``."""
    D = run_coupled_pairs(spec, RunConfig(K=K, replicas=pairs))
    m = np.mean(D**2, axis=0)
    k = np.arange(K + 1)
    slope = float(np.polyfit(k, np.log(m), 1)[0])
    expected = math.log(h2_closed_form(TheoryQuery.from_stepsize(spec.eta, spec.b, spec.d, spec.sigma2)))
    return SlopeFit(slope, expected, k, m)


# -- diagnostics -------------------------------------------------------------


ALPHA_MOMENT_WARNING = (
    "the alpha-th moment is infinite at stationarity, so its sample average has "
    "unbounded variance; treat the fitted exponent as qualitative"
)


@dataclass(frozen=True)
class GrowthDiagnostic:
    k: np.ndarray
    mean: np.ndarray
    exponent: float
    order: float
    warning: str = ALPHA_MOMENT_WARNING


def _loglog_exponent(k: np.ndarray, v: np.ndarray) -> float:
    ok = (k >= 1) & np.isfinite(v) & (v > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(k[ok]), np.log(v[ok]), 1)[0])


def alpha_moment_diagnostic(
    spec: GaussianStreamSpec, cfg: RunConfig, alpha: float, x0=None, replicas: Optional[Sequence[int]] = None
) -> GrowthDiagnostic:
    """Empirical ``E||x_k||^alpha`` over ``k`` with a log-log growth exponent.

    Diagnostic only: no value of the exponent is asserted anywhere.
    """
    warnings.warn(ALPHA_MOMENT_WARNING, RuntimeWarning, stacklevel=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        traj = moment_trajectory(spec, cfg, alpha, x0, replicas, n_boot=0)
    return GrowthDiagnostic(traj.k, traj.mean, _loglog_exponent(traj.k, traj.mean), alpha)


# -- stable limit of ergodic sums -------------------------------------------------


@dataclass(frozen=True)
class GCLTReport:
    alpha: float
    window: int
    estimate_w: AlphaEstimate
    estimate_2w: AlphaEstimate
    iqr_ratio: float
    expected_ratio: float
    n_diverged: int = 0

    @property
    def alpha_gap(self) -> float:
        return abs(self.estimate_w.alpha_hat - self.estimate_2w.alpha_hat)

    @property
    def ratio_error(self) -> float:
        return abs(self.iqr_ratio / self.expected_ratio - 1.0)


def _check_gclt_alpha(alpha: float):
    if alpha == 2:
        raise ValueError(
            "alpha = 2 is the boundary case whose sums need the (K log K)^{-1/2} "
            "normalization; it is out of scope for this check"
        )
    if alpha == 1:
        raise ValueError("alpha = 1 needs a logarithmic centering correction; out of scope for this check")
    if not 1 < alpha < 2:
        raise ValueError(f"the scaling check needs alpha in (1, 2), got {alpha}")


def iqr(v: np.ndarray) -> float:
    q1, q3 = np.percentile(np.asarray(v).ravel(), [25, 75])
    return float(q3 - q1)


def _report(S_w, S_2w, alpha, window, est_cfg, n_div=0) -> GCLTReport:
    return GCLTReport(
        alpha,
        window,
        estimate_alpha(S_w, est_cfg),
        estimate_alpha(S_2w, est_cfg),
        iqr(S_2w) / iqr(S_w),
        2.0 ** (1.0 / alpha),
        n_div,
    )


def gclt_from_samples(
    samples: np.ndarray, alpha: float, window: int, est_cfg: EstimatorConfig = EstimatorConfig()
) -> GCLTReport:
    """Scaling check on i.i.d. samples: disjoint sums over ``window`` and ``2 * window``."""
    _check_gclt_alpha(alpha)
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    m = x.shape[0] // (2 * window)
    if m < 100:
        raise ValueError(f"{x.shape[0]} samples give only {m} sums of length {2 * window}; need 100")
    x = x[: 2 * window * m]
    S_2w = x.reshape(m, 2 * window, -1).sum(axis=1)
    S_w = x[: window * m].reshape(m, window, -1).sum(axis=1)
    return _report(S_w, S_2w, alpha, window, est_cfg)


def gclt_scaling_check(
    spec: GaussianStreamSpec,
    cfg: RunConfig,
    alpha: float,
    window: Optional[int] = None,
    replicas: Optional[Sequence[int]] = None,
    est_cfg: EstimatorConfig = EstimatorConfig(),
) -> GCLTReport:
    """Centered sums of post-burn-in iterates over windows ``W`` and ``2W``, one per replica.

    If the sums are attracted to an alpha-stable law, the tail-index
    estimates at both lengths agree and the interquartile range grows by
    ``2^{1/alpha}`` when the window doubles.
    """
    _check_gclt_alpha(alpha)
    W = window or cfg.K - cfg.K0
    run = dataclasses.replace(cfg, K=cfg.K0 + 2 * W)
    ids = _replica_ids(run, replicas)
    src = _Source(spec, run, ids)
    x_bar = src.x_bar()
    S = np.zeros((len(ids), spec.d))
    S_w = None
    for k, X, div in iterate_ensemble(spec, run, None, ids, src):
        if k > run.K0:
            S += X - x_bar
        if k == run.K0 + W:
            S_w = S.copy()
    keep = ~div
    return _report(S_w[keep], S[keep], alpha, W, est_cfg, int(div.sum()))


def stable_gclt_oracle(alpha: float, window: int = 50, n: int = 10**6, seed: int = 0) -> GCLTReport:
    """:func:`gclt_from_samples` on exact symmetric alpha-stable draws."""
    return gclt_from_samples(sample_sas(alpha, 1.0, n, seed), alpha, window)
