"""Tail-index theory for Gaussian-input SGD.

With ``a_i ~ N(0, sigma^2 I_d)`` and ``a = eta * sigma^2``, rotational
symmetry reduces the growth of ``||M_k ... M_1 v||`` to i.i.d. factors

    ||M e_1||^2 = (1 - (a/b) X)^2 + (a/b)^2 X Y,   X ~ chi2(b), Y ~ chi2(d-1),

so that ``h(s) = E ||M e_1||^s`` and ``rho = E log ||M e_1||``.  The
stationary tail-index is the positive root of ``h(alpha) = 1`` when
``rho < 0``.

All Monte Carlo estimates draw ``(X, Y)`` by inverse-CDF transforms of one
keyed uniform pool, so estimates for different ``s``, ``a``, ``b`` and ``d``
share common random numbers and their differences carry little noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import integrate, optimize, special, stats

from .data_gen import InputDistribution
from .rng import keyed_rng

DEFAULT_N = 10**6
S_CAP = 64.0
# Largest relative std error of h at an accepted root.
MAX_REL_SE = 0.25
RHO_MAX_N = 10**8
_BLOCK = 10**6


class Status(str, Enum):
    SOLVED = "Solved"
    NO_STATIONARY = "NoStationary"
    BRACKET_EXHAUSTED = "BracketExhausted"


class Regime(str, Enum):
    I = "I"  # noqa: E741
    II = "II"
    III = "III"


@dataclass(frozen=True)
class TheoryQuery:
    a: float
    b: int
    d: int

    def __post_init__(self):
        if not self.a >= 0:
            raise ValueError(f"effective stepsize a must be nonnegative, got {self.a}")
        if self.b < 1 or self.d < 1:
            raise ValueError(f"b and d must be positive, got b={self.b}, d={self.d}")

    @classmethod
    def from_stepsize(cls, eta: float, b: int, d: int, sigma2: float = 1.0) -> "TheoryQuery":
        return cls(eta * sigma2, int(b), int(d))


@dataclass(frozen=True)
class HEstimate:
    value: float
    std_error: float
    n_samples: int
    method: str = "monte-carlo"


@dataclass
class TailIndexResult:
    alpha: Optional[float]
    bracket: tuple[float, float]
    status: Status
    rho: HEstimate
    regime: Regime
    alpha_se: float = math.nan
    query: Optional[TheoryQuery] = field(default=None, repr=False)

    @property
    def solved(self) -> bool:
        return self.status is Status.SOLVED


# -- closed forms -------------------------------------------------------------


def h2_closed_form(q: TheoryQuery) -> float:
    """``h(2) = 1 - 2a + (a^2/b)(d+b+1)``."""
    return 1.0 - 2.0 * q.a + (q.a * q.a / q.b) * (q.d + q.b + 1)


def critical_stepsize(b: int, d: int, sigma2: float = 1.0) -> float:
    """Stepsize ``2b / (sigma^2 (d+b+1))`` at which the tail-index is exactly 2."""
    if b <= 0 or d <= 0 or sigma2 <= 0:
        raise ValueError("b, d and sigma2 must be positive")
    return 2.0 * b / (sigma2 * (d + b + 1))


# -- Monte Carlo draws ----------------------------------------------------------

METHODS = ("monte-carlo", "stratified")
_GL_NODES = 8
_STRATA_BLOCK = 1 << 16


@lru_cache(maxsize=16)
def _uniform_pool(n: int, seed: int) -> np.ndarray:
    u = keyed_rng(seed, "chi2-pool").random((2, n))
    u.setflags(write=False)
    return u


@lru_cache(maxsize=64)
def chi_square_pool(b: int, d: int, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``(X, Y)`` with ``X ~ chi2(b)``, ``Y ~ chi2(d-1)`` (``Y = 0`` when ``d = 1``)."""
    u = _uniform_pool(n, seed)
    X = 2.0 * special.gammaincinv(b / 2.0, u[0])
    Y = 2.0 * special.gammaincinv((d - 1) / 2.0, u[1]) if d > 1 else np.zeros(n)
    X.setflags(write=False)
    Y.setflags(write=False)
    return X, Y


def _log_norms(a: float, b: int, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    c = a / b
    sq = np.square(1.0 - c * X) + (c * c) * X * Y
    return 0.5 * np.log(np.maximum(sq, np.finfo(float).tiny))


def log_growth_samples(q: TheoryQuery, n: int = DEFAULT_N, seed: int = 0) -> np.ndarray:
    """Draws of ``log ||(I - (eta/b) H) e_1||`` on the common-random-number pool."""
    X, Y = chi_square_pool(q.b, q.d, n, seed)
    return _log_norms(q.a, q.b, X, Y)


@lru_cache(maxsize=8)
def _laguerre(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and log-weights integrating against the chi2(d-1) density."""
    if d == 1:
        return np.zeros(1), np.zeros(1)
    k = (d - 1) / 2.0
    y, w = special.roots_genlaguerre(_GL_NODES, k - 1.0)
    return 2.0 * y, np.log(w) - special.gammaln(k)


def _strata_uniforms(n: int, seed: int, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
    """Two uniforms in each of ``n // 2`` equal strata of (0, 1), for strata ``start:stop``."""
    m = max(n // 2, 1)
    stop = m if stop is None else stop
    out = np.empty((2, stop - start))
    first = start // _STRATA_BLOCK
    for blk in range(first, (stop - 1) // _STRATA_BLOCK + 1):
        lo = blk * _STRATA_BLOCK
        hi = min(lo + _STRATA_BLOCK, m)
        jitter = keyed_rng(seed, "strata", n, blk).random((2, hi - lo))
        u = (np.arange(lo, hi) + jitter) / m
        a, z = max(lo, start), min(hi, stop)
        out[:, a - start : z - start] = u[:, a - lo : z - lo]
    return out


class _StratifiedLogs:
    """Conditional log-norms ``log ||M e_1||`` on stratified ``X`` and Laguerre nodes in ``Y``.

    ``X ~ chi2(b)`` is drawn twice per stratum of its quantile range; the
    expectation over ``Y ~ chi2(d-1)`` is done exactly by Gauss-Laguerre
    quadrature.  Estimates are unbiased, and the within-stratum pairs give an
    honest standard error.
    """

    def __init__(self, q: TheoryQuery, n: int, seed: int, start: int = 0, stop: Optional[int] = None):
        u = _strata_uniforms(n, seed, start, stop)
        self.m = max(n // 2, 1)
        X = 2.0 * special.gammaincinv(q.b / 2.0, u)
        Y, self.log_w = _laguerre(q.d)
        c = q.a / q.b
        sq = np.square(1.0 - c * X)[..., None] + ((c * c) * X)[..., None] * Y
        self.L = 0.5 * np.log(np.maximum(sq, np.finfo(float).tiny))

    def _cond(self, s: float) -> np.ndarray:
        w = s * self.L + self.log_w
        top = w.max(axis=-1, keepdims=True)
        return top[..., 0] + np.log(np.exp(w - top).sum(axis=-1))

    def mgf(self, s: float) -> tuple[float, float, float]:
        """``(log h, h, se)``."""
        inner = self._cond(s)
        M = float(inner.max())
        v = np.exp(inner - M)
        mean = float(v.mean())
        se = math.sqrt(float(np.square(v[0] - v[1]).sum()) / 4.0) / v.shape[1]
        log_h = M + math.log(mean)
        return log_h, _safe_exp(log_h), _safe_exp(M) * se

    def slope(self, s: float) -> float:
        w = s * self.L + self.log_w
        M = float(w.max())
        return _safe_exp(M) * float(np.sum(self.L * np.exp(w - M)) / (2 * self.L.shape[1]))

    def mean_log(self) -> tuple[float, float, float]:
        """``(sum, sum of squared pair differences / 4, strata)`` of ``E[log ||M e_1|| | X]``."""
        v = (self.L * np.exp(self.log_w)).sum(axis=-1)
        return float(v.sum()) / 2.0, float(np.square(v[0] - v[1]).sum()) / 4.0, v.shape[1]


def _safe_exp(x: float) -> float:
    return math.exp(x) if x < 709.0 else math.inf


@lru_cache(maxsize=4)
def _stratified(q: TheoryQuery, n: int, seed: int) -> _StratifiedLogs:
    return _StratifiedLogs(q, n, seed)


def _mgf(G: np.ndarray, s: float) -> tuple[float, float, float]:
    """``(log h, h, se)`` for ``h(s) = mean(exp(s G))``, evaluated stably in the log domain."""
    w = s * G
    m = float(w.max())
    e = np.exp(w - m)
    mean = float(e.mean())
    log_h = m + math.log(mean)
    sd = float(e.std(ddof=1)) if len(G) > 1 else 0.0
    return log_h, _safe_exp(log_h), _safe_exp(m) * sd / math.sqrt(len(G))


def _mgf_slope(G: np.ndarray, s: float) -> float:
    """``h'(s) = mean(G exp(s G))``."""
    w = s * G
    m = float(w.max())
    return _safe_exp(m) * float(np.mean(G * np.exp(w - m)))


class _PlainLogs:
    def __init__(self, G: np.ndarray):
        self.G = G

    def mgf(self, s: float):
        return _mgf(self.G, s)

    def slope(self, s: float) -> float:
        return _mgf_slope(self.G, s)


def _draws(q: TheoryQuery, n: int, seed: int, method: str):
    if method == "monte-carlo":
        return _PlainLogs(log_growth_samples(q, n, seed))
    if method == "stratified":
        return _stratified(q, n, seed)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _check_n(n: int):
    if n < 1000:
        raise ValueError(f"need at least 1000 Monte Carlo samples, got {n}")


def estimate_h(
    q: TheoryQuery, s: float, n: int = DEFAULT_N, seed: int = 0, method: str = "monte-carlo"
) -> HEstimate:
    """Monte Carlo ``h(s) = E ||M e_1||^s``.

    ``method="monte-carlo"`` averages ``n`` plain draws of ``(X, Y)``;
    ``"stratified"`` uses ``n`` stratified draws of ``X`` with ``Y`` integrated out.
    """
    if s < 0:
        raise ValueError(f"s must be nonnegative, got {s}")
    if s == 0:
        return HEstimate(1.0, 0.0, n, method)
    _check_n(n)
    _, h, se = _draws(q, n, seed, method).mgf(s)
    return HEstimate(h, se, n, method)


def _rho_from(G: np.ndarray) -> HEstimate:
    return HEstimate(float(G.mean()), float(G.std(ddof=1)) / math.sqrt(len(G)), len(G))


def _rho_plain(q: TheoryQuery, n: int, seed: int, escalate: bool, max_n: int) -> HEstimate:
    G = log_growth_samples(q, n, seed)
    total = G.sum(dtype=np.longdouble)
    total_sq = np.square(G).sum(dtype=np.longdouble)
    count = n
    est = _rho_from(G)
    block = 0
    while escalate and abs(est.value) < 2 * est.std_error and count * 10 <= max_n:
        target = count * 10
        while count < target:
            m = min(_BLOCK, target - count)
            rng = keyed_rng(seed, "rho-extra", q.b, q.d, block)
            block += 1
            X = rng.chisquare(q.b, m)
            Y = rng.chisquare(q.d - 1, m) if q.d > 1 else np.zeros(m)
            Gb = _log_norms(q.a, q.b, X, Y)
            total += Gb.sum(dtype=np.longdouble)
            total_sq += np.square(Gb).sum(dtype=np.longdouble)
            count += m
        mean = float(total / count)
        var = float((total_sq - count * np.longdouble(mean) ** 2) / (count - 1))
        est = HEstimate(mean, math.sqrt(max(var, 0.0) / count), count)
    return est


def _rho_stratified(q: TheoryQuery, n: int, seed: int, escalate: bool, max_n: int) -> HEstimate:
    while True:
        m = max(n // 2, 1)
        if n == DEFAULT_N or m <= _STRATA_BLOCK:
            parts = [_stratified(q, n, seed).mean_log()]
        else:
            parts = [
                _StratifiedLogs(q, n, seed, lo, min(lo + _STRATA_BLOCK, m)).mean_log()
                for lo in range(0, m, _STRATA_BLOCK)
            ]
        total = math.fsum(p[0] for p in parts)
        ssd = math.fsum(p[1] for p in parts)
        est = HEstimate(total / m, math.sqrt(ssd) / m, n, "stratified")
        if not escalate or abs(est.value) >= 2 * est.std_error or n * 10 > max_n:
            return est
        n *= 10


def estimate_rho(
    q: TheoryQuery,
    n: int = DEFAULT_N,
    seed: int = 0,
    escalate: bool = True,
    max_n: int = RHO_MAX_N,
    method: str = "monte-carlo",
) -> HEstimate:
    """Monte Carlo top Lyapunov exponent ``E log ||M e_1||``.

    While the estimate is within two standard errors of zero the sample is
    grown tenfold, up to ``max_n``.
    """
    _check_n(n)
    if method == "monte-carlo":
        return _rho_plain(q, n, seed, escalate, max_n)
    if method == "stratified":
        return _rho_stratified(q, n, seed, escalate, max_n)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


# -- root finding ---------------------------------------------------------------


def _solve_mgf_root(draws, tol: float, cap: float = S_CAP):
    """Positive root of ``h(s) = 1`` by doubling from ``tol`` then Brent bracketing.

    Returns ``(alpha, (lo, hi), status, alpha_se)``.
    """
    lo, hi = 0.0, None
    s = tol
    while True:
        s_eval = min(s, cap)
        log_h, _, _ = draws.mgf(s_eval)
        # Bracket on the sign alone: at large s a few draws dominate the
        # sample std error, so a significance test would never fire.
        if log_h > 0.0:
            hi = s_eval
            break
        if log_h < 0.0:
            lo = s_eval
        if s_eval >= cap:
            return None, (lo, cap), Status.BRACKET_EXHAUSTED, math.nan
        s *= 2.0
    if lo == 0.0:
        alpha = optimize.brentq(lambda t: draws.mgf(t)[0], tol * 1e-3, hi, xtol=tol / 4) if draws.mgf(tol * 1e-3)[0] < 0 else hi
    else:
        alpha = optimize.brentq(lambda t: draws.mgf(t)[0], lo, hi, xtol=tol / 4)
    _, h, se = draws.mgf(alpha)
    if se > MAX_REL_SE * h:
        # A handful of draws carry the whole moment; the root is not resolved.
        return None, (lo, hi), Status.BRACKET_EXHAUSTED, math.nan
    slope = draws.slope(alpha)
    alpha_se = se / slope if slope > 0 else math.inf
    return alpha, (lo, hi), Status.SOLVED, alpha_se


def _regime(rho: HEstimate, alpha: Optional[float], status: Status) -> Regime:
    if status is Status.NO_STATIONARY:
        return Regime.III
    if status is Status.SOLVED and alpha < 2.0:
        return Regime.II
    return Regime.I


def _no_stationary(rho: HEstimate) -> bool:
    # After escalation |rho| >= 2 se unless the sample cap was hit; the sign decides.
    return rho.value >= 0.0


def solve_tail_index(
    q: TheoryQuery,
    tol: float = 1e-3,
    n: int = DEFAULT_N,
    seed: int = 0,
    method: str = "stratified",
) -> TailIndexResult:
    """Tail-index ``alpha`` with ``h(alpha) = 1``, or why there is none."""
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    _check_n(n)
    rho = estimate_rho(q, n, seed, method=method)
    if _no_stationary(rho):
        return TailIndexResult(None, (0.0, 0.0), Status.NO_STATIONARY, rho, Regime.III, query=q)
    alpha, bracket, status, alpha_se = _solve_mgf_root(_draws(q, n, seed, method), tol)
    return TailIndexResult(alpha, bracket, status, rho, _regime(rho, alpha, status), alpha_se, q)


def classify_regime(
    eta: float, b: int, d: int, sigma2: float = 1.0, n: int = DEFAULT_N, seed: int = 0
) -> Regime:
    """Stepsize regime: I (finite variance), II (heavy tail, alpha < 2), III (rho >= 0)."""
    if eta <= 0 or b <= 0 or d <= 0 or sigma2 <= 0:
        raise ValueError("eta, b, d and sigma2 must be positive")
    return solve_tail_index(TheoryQuery.from_stepsize(eta, b, d, sigma2), n=n, seed=seed).regime


def stepsize_for_alpha(
    target: float,
    b: int,
    d: int,
    sigma2: float = 1.0,
    n: int = DEFAULT_N,
    seed: int = 0,
    rtol: float = 1e-6,
) -> float:
    """Stepsize ``eta`` whose theoretical tail-index equals ``target``.

    Brent's method in ``eta``; relies on ``alpha`` decreasing in the stepsize,
    which holds wherever ``alpha >= 1``.
    """
    if not target > 0:
        raise ValueError("target alpha must be positive")

    def gap(eta: float) -> float:
        r = solve_tail_index(TheoryQuery.from_stepsize(eta, b, d, sigma2), tol=1e-6, n=n, seed=seed)
        if r.status is Status.NO_STATIONARY:
            return -target
        if r.status is Status.BRACKET_EXHAUSTED:
            return S_CAP
        return r.alpha - target

    lo, hi = 0.0, critical_stepsize(b, d, sigma2)
    while gap(hi) > 0:
        lo, hi = hi, 2.0 * hi
    if lo == 0.0:
        lo = hi / 2.0
        while gap(lo) < 0:
            hi, lo = lo, lo / 2.0
    return optimize.brentq(gap, lo, hi, rtol=rtol)


# -- operator-norm bound for general inputs -----------------------------------------


def _operator_log_norms(
    dist: InputDistribution, eta: float, b: int, d: int, n: int, seed: int, sigma: float
) -> np.ndarray:
    out = np.empty(n)
    block = 10**4
    for i, start in enumerate(range(0, n, block)):
        m = min(block, n - start)
        rng = keyed_rng(seed, "h-hat", i)
        A = sigma * dist.draw(rng, (m, b, d))
        G = A @ A.transpose(0, 2, 1) if b <= d else A.transpose(0, 2, 1) @ A
        lam = np.linalg.eigvalsh(G)
        lam_min = lam[:, 0] if b >= d else np.zeros(m)
        c = eta / b
        norm = np.maximum(np.abs(1.0 - c * lam[:, -1]), np.abs(1.0 - c * lam_min))
        out[start : start + m] = np.log(np.maximum(norm, np.finfo(float).tiny))
    return out


def estimate_h_hat(
    dist: InputDistribution,
    eta: float,
    b: int,
    d: int,
    s: float,
    n: int = 10**5,
    seed: int = 0,
    sigma: float = 1.0,
) -> HEstimate:
    """``E ||I - (eta/b) H||^s`` with the spectral norm, for any input law."""
    if d > 64:
        raise ValueError(f"dense spectral norms are limited to d <= 64, got {d}")
    if s == 0:
        return HEstimate(1.0, 0.0, n)
    _check_n(n)
    _, h, se = _mgf(_operator_log_norms(dist, eta, b, d, n, seed, sigma), s)
    return HEstimate(h, se, n)


def estimate_rho_hat(
    dist: InputDistribution, eta: float, b: int, d: int, n: int = 10**5, seed: int = 0, sigma: float = 1.0
) -> HEstimate:
    """``E log ||I - (eta/b) H||``."""
    _check_n(n)
    return _rho_from(_operator_log_norms(dist, eta, b, d, n, seed, sigma))


def solve_tail_index_hat(
    dist: InputDistribution,
    eta: float,
    b: int,
    d: int,
    tol: float = 1e-3,
    n: int = 10**5,
    seed: int = 0,
    sigma: float = 1.0,
) -> TailIndexResult:
    """Root of ``h_hat(s) = 1``: a lower bound on the tail-index for non-Gaussian inputs."""
    G = _operator_log_norms(dist, eta, b, d, n, seed, sigma)
    rho = _rho_from(G)
    if _no_stationary(rho):
        return TailIndexResult(None, (0.0, 0.0), Status.NO_STATIONARY, rho, Regime.III)
    alpha, bracket, status, alpha_se = _solve_mgf_root(_PlainLogs(G), tol)
    return TailIndexResult(alpha, bracket, status, rho, _regime(rho, alpha, status), alpha_se)


# -- scalar quadrature ---------------------------------------------------------------


def _scalar_expectation(g, a: float, b: int) -> tuple[float, float]:
    """``E g(1 - (a/b) X)`` for ``X ~ chi2(b)`` by adaptive quadrature."""
    c = a / b
    if b == 1:
        # X = Z^2, Z standard normal; integrate over z in [0, 12] and double.
        pts = [1.0 / math.sqrt(c)] if c > 0 and 1.0 / math.sqrt(c) < 12 else None
        f = lambda z: 2.0 * g(1.0 - c * z * z) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
        val, err = integrate.quad(f, 0.0, 12.0, points=pts, epsabs=1e-10, epsrel=1e-10, limit=500)
        return val, err
    upper = stats.chi2.isf(1e-16, b)
    pts = [1.0 / c] if c > 0 and 1.0 / c < upper else None
    f = lambda x: g(1.0 - c * x) * stats.chi2.pdf(x, b)
    return integrate.quad(f, 0.0, upper, points=pts, epsabs=1e-10, epsrel=1e-10, limit=500)


def h_quadrature_1d(q: TheoryQuery, s: float) -> HEstimate:
    """``h(s) = E |1 - (a/b) X|^s`` for ``d = 1``, by quadrature."""
    if q.d != 1:
        raise ValueError("the scalar quadrature only covers d = 1")
    if s == 0:
        return HEstimate(1.0, 0.0, 0, "quadrature-1d")
    val, err = _scalar_expectation(lambda m: abs(m) ** s, q.a, q.b)
    return HEstimate(val, err, 0, "quadrature-1d")


def rho_quadrature_1d(q: TheoryQuery) -> HEstimate:
    """``rho = E log |1 - (a/b) X|`` for ``d = 1``, by quadrature."""
    if q.d != 1:
        raise ValueError("the scalar quadrature only covers d = 1")
    val, err = _scalar_expectation(lambda m: math.log(abs(m)) if m != 0 else -745.0, q.a, q.b)
    return HEstimate(val, err, 0, "quadrature-1d")


def alpha_quadrature_1d(q: TheoryQuery, upper: float = S_CAP) -> float:
    """Root of ``h(s) = 1`` for ``d = 1`` using quadrature values of ``h``."""
    if rho_quadrature_1d(q).value >= 0:
        raise ValueError("rho >= 0: no stationary law, no tail-index")
    return optimize.brentq(lambda s: h_quadrature_1d(q, s).value - 1.0, 1e-6, upper, xtol=1e-10)
