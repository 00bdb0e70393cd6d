"""Constant-stepsize SGD on least squares as an affine random recursion.

One step is ``x_k = (I - (eta/b) H_k) x_{k-1} + q_k`` with
``H_k = sum a_i a_i^T`` and ``q_k = (eta/b) sum a_i y_i`` over the batch,
evaluated as ``x - (eta/b) A^T (A x - y)`` so the d x d matrix never exists.

Ensembles are advanced in lock-step over a replica axis.  Replica ``r``
always draws from its own keyed streams, so its path is the same whether
it runs alone or inside an ensemble of any size.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .data_gen import (
    CHUNK,
    GaussianStreamSpec,
    Minibatch,
    draw_x_true,
    gen_finite_dataset,
    stream_chunk,
)
from .rng import keyed_rng

log = logging.getLogger(__name__)

DEFAULT_OVERFLOW = 1e300


class AllDivergedError(RuntimeError):
    """Every replica of an ensemble blew up; the stepsize is past the stable range."""


@dataclass
class ChainState:
    x: np.ndarray
    k: int = 0
    diverged: bool = False


@dataclass(frozen=True)
class RunConfig:
    K: int
    K0: int = 0
    replicas: int = 400
    mode: str = "streaming"
    n: Optional[int] = None
    replacement: bool = False
    overflow_threshold: float = DEFAULT_OVERFLOW

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be positive, got {self.K}")
        if not 0 <= self.K0 < self.K:
            raise ValueError(f"burn-in K0={self.K0} must satisfy 0 <= K0 < K={self.K}")
        if self.replicas < 1:
            raise ValueError(f"replicas must be positive, got {self.replicas}")
        if self.mode not in ("streaming", "finite-sum"):
            raise ValueError(f"mode must be 'streaming' or 'finite-sum', got {self.mode!r}")
        if self.mode == "finite-sum" and (self.n is None or self.n < 1):
            raise ValueError("finite-sum mode needs a dataset size n >= 1")
        if not self.overflow_threshold > 0:
            raise ValueError("overflow_threshold must be positive")


@dataclass
class SampleMatrix:
    """Centered ergodic averages, one row per replica that stayed finite."""

    rows: np.ndarray
    n_diverged: int
    x_bar: np.ndarray
    replica_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]


@dataclass
class ChainSummary:
    norms: np.ndarray  # ||x_k||, k = 0..K
    errors: np.ndarray  # ||x_k - x_bar||
    x_bar: np.ndarray
    diverged_at: Optional[int]


@dataclass
class MomentTrajectory:
    k: np.ndarray
    mean: np.ndarray
    std_error: np.ndarray
    p: float
    n_diverged: int


# -- single steps -------------------------------------------------------------


def _exceeds(x: np.ndarray, threshold: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(x).all(axis=-1)
        return bad | (np.abs(x).max(axis=-1, initial=0.0) > threshold)


def sgd_step(
    state: ChainState,
    batch: Minibatch,
    eta: float,
    b: int,
    overflow_threshold: float = DEFAULT_OVERFLOW,
) -> ChainState:
    """One SGD step ``x <- x - (eta/b) A^T (A x - y)``."""
    if state.diverged:
        raise ValueError("cannot step a diverged chain")
    A, y = batch.inputs, batch.labels
    if A.shape[1] != state.x.shape[0]:
        raise ValueError(f"batch dimension {A.shape[1]} does not match state dimension {state.x.shape[0]}")
    if A.shape[0] != b:
        raise ValueError(f"batch holds {A.shape[0]} samples, expected b={b}")
    with np.errstate(all="ignore"):
        x = state.x - (eta / b) * (A.T @ (A @ state.x - y))
    return ChainState(x, state.k + 1, bool(_exceeds(x, overflow_threshold)))


def _ensemble_step(X: np.ndarray, A: np.ndarray, y: Optional[np.ndarray], eta: float, b: int):
    r = np.einsum("rbd,rd->rb", A, X)
    if y is not None:
        r -= y
    return X - (eta / b) * np.einsum("rbd,rb->rd", A, r)


# -- ensemble machinery -------------------------------------------------------


class _Source:
    """Per-replica minibatch draws, chunk by chunk."""

    def __init__(self, spec: GaussianStreamSpec, cfg: RunConfig, ids: np.ndarray):
        self.spec, self.cfg, self.ids = spec, cfg, ids
        if cfg.mode == "finite-sum":
            if spec.b > cfg.n and not cfg.replacement:
                raise ValueError(f"batch size {spec.b} exceeds dataset size {cfg.n}")
            self.A, self.y, self.x_true = gen_finite_dataset(spec, cfg.n)
        else:
            self.x_true = draw_x_true(spec)

    def x_bar(self) -> np.ndarray:
        """Mean of the stationary law: the population or least-squares minimizer."""
        if self.cfg.mode == "streaming":
            return self.x_true
        G = self.A.T @ self.A
        if np.linalg.matrix_rank(G) < G.shape[0]:
            raise np.linalg.LinAlgError("A^T A is singular; the least-squares mean is undefined")
        return np.linalg.solve(G, self.A.T @ self.y)

    def chunk(self, c: int, labels: bool = True):
        spec = self.spec
        if self.cfg.mode == "streaming":
            parts = [stream_chunk(spec, int(r), c) for r in self.ids]
            A = np.stack([p[0] for p in parts])
            if not labels:
                return A, None
            noise = np.stack([p[1] for p in parts])
            return A, A @ self.x_true + spec.sigma_y * noise
        idx = np.stack([
            minibatch_indices(keyed_rng(spec.seed, "index", int(r), c), self.cfg.n, spec.b, CHUNK, self.cfg.replacement)
            for r in self.ids
        ])
        return self.A[idx], (self.y[idx] if labels else None)


def minibatch_indices(rng: np.random.Generator, n: int, b: int, steps: int, replacement: bool = False) -> np.ndarray:
    """``(steps, b)`` dataset indices; distinct within a step unless ``replacement``."""
    if replacement:
        return rng.integers(0, n, (steps, b))
    if b > n:
        raise ValueError(f"cannot draw {b} distinct indices from {n}")
    if b * b > n:
        return np.argsort(rng.random((steps, n)), axis=1)[:, :b]
    idx = rng.integers(0, n, (steps, b))
    while True:
        s = np.sort(idx, axis=1)
        dup = (np.diff(s, axis=1) == 0).any(axis=1)
        if not dup.any():
            return idx
        idx[dup] = rng.integers(0, n, (int(dup.sum()), b))


def initial_states(spec: GaussianStreamSpec, ids: np.ndarray, x0=None, tag: str = "x0") -> np.ndarray:
    """Replica starting points: ``x0`` broadcast, or ``N(0, sigma_x^2 I)`` draws."""
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape[-1] != spec.d:
            raise ValueError(f"x0 has dimension {x0.shape[-1]}, expected {spec.d}")
        return np.array(np.broadcast_to(x0, (len(ids), spec.d)))
    return np.stack([spec.sigma_x * keyed_rng(spec.seed, tag, int(r)).standard_normal(spec.d) for r in ids])


def _replica_ids(cfg: RunConfig, replicas: Optional[Sequence[int]]) -> np.ndarray:
    if replicas is None:
        return np.arange(cfg.replicas)
    return np.asarray(replicas, dtype=int)


def iterate_ensemble(
    spec: GaussianStreamSpec,
    cfg: RunConfig,
    x0=None,
    replicas: Optional[Sequence[int]] = None,
    source: Optional[_Source] = None,
) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
    """Yield ``(k, X_k, diverged)`` for ``k = 0..K``; ``X_k`` has one row per replica.

    Diverged rows are frozen at their last value and stay flagged.
    """
    ids = _replica_ids(cfg, replicas)
    src = source or _Source(spec, cfg, ids)
    X = initial_states(spec, ids, x0)
    diverged = _exceeds(X, cfg.overflow_threshold)
    yield 0, X, diverged
    n_chunks = math.ceil(cfg.K / CHUNK)
    for c in range(n_chunks):
        A, y = src.chunk(c)
        for j in range(CHUNK):
            k = c * CHUNK + j + 1
            if k > cfg.K:
                return
            with np.errstate(all="ignore"):
                Xn = _ensemble_step(X, A[:, j], y[:, j], spec.eta, spec.b)
            if diverged.any():
                Xn[diverged] = X[diverged]
            diverged = diverged | _exceeds(Xn, cfg.overflow_threshold)
            X = Xn
            yield k, X, diverged


# -- public runs ----------------------------------------------------------------


def run_chain(spec: GaussianStreamSpec, cfg: RunConfig, x0=None, replica: int = 0):
    """Run one chain for ``cfg.K`` steps; returns ``(ChainSummary, ChainState)``."""
    src = _Source(spec, cfg, np.array([replica]))
    x_bar = _try_x_bar(src)
    norms = np.empty(cfg.K + 1)
    errors = np.empty(cfg.K + 1)
    diverged_at = None
    for k, X, div in iterate_ensemble(spec, cfg, x0, [replica], src):
        norms[k] = np.linalg.norm(X[0])
        errors[k] = np.linalg.norm(X[0] - x_bar)
        if div[0] and diverged_at is None:
            diverged_at = k
    state = ChainState(X[0].copy(), cfg.K, bool(div[0]))
    return ChainSummary(norms, errors, x_bar, diverged_at), state


def _try_x_bar(src: _Source) -> np.ndarray:
    try:
        return src.x_bar()
    except np.linalg.LinAlgError:
        return np.full(src.spec.d, np.nan)


def run_coupled_pairs(
    spec: GaussianStreamSpec,
    cfg: RunConfig,
    x0=None,
    x0_tilde=None,
    pairs: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Distances ``||x_k - x~_k||`` of synchronously coupled chains, shape ``(pairs, K+1)``.

    Both chains of a pair see the same ``(M_k, q_k)``; ``q_k`` cancels, so the
    difference is propagated directly as ``D_k = M_k D_{k-1}`` and never touches
    the labels.
    """
    ids = _replica_ids(cfg, pairs)
    src = _Source(spec, cfg, ids)
    D = initial_states(spec, ids, x0) - initial_states(spec, ids, x0_tilde, tag="x0_tilde")
    out = np.empty((len(ids), cfg.K + 1))
    out[:, 0] = np.linalg.norm(D, axis=1)
    for c in range(math.ceil(cfg.K / CHUNK)):
        A, _ = src.chunk(c, labels=False)
        for j in range(CHUNK):
            k = c * CHUNK + j + 1
            if k > cfg.K:
                break
            with np.errstate(all="ignore"):
                D = _ensemble_step(D, A[:, j], None, spec.eta, spec.b)
            out[:, k] = np.linalg.norm(D, axis=1)
    return out


def run_coupled_pair(spec: GaussianStreamSpec, cfg: RunConfig, x0, x0_tilde, pair: int = 0) -> np.ndarray:
    """``||x_k - x~_k||`` for ``k = 0..K`` of a single coupled pair."""
    return run_coupled_pairs(spec, cfg, x0, x0_tilde, [pair])[0]


def ergodic_averages(
    spec: GaussianStreamSpec,
    cfg: RunConfig,
    x0=None,
    replicas: Optional[Sequence[int]] = None,
) -> SampleMatrix:
    """Post-burn-in averages ``(1/(K-K0)) sum_{k=K0+1}^{K} (x_k - x_bar)`` per replica."""
    ids = _replica_ids(cfg, replicas)
    src = _Source(spec, cfg, ids)
    x_bar = src.x_bar()
    acc = np.zeros((len(ids), spec.d))
    for k, X, div in iterate_ensemble(spec, cfg, x0, ids, src):
        if k > cfg.K0:
            acc += X - x_bar
    keep = ~div
    n_div = int(div.sum())
    if not keep.any():
        raise AllDivergedError(
            f"all {len(ids)} replicas diverged (eta={spec.eta}, b={spec.b}, d={spec.d}); "
            "the stepsize is likely in the no-stationary regime (rho >= 0)"
        )
    if n_div:
        log.info("dropped %d diverged replicas of %d", n_div, len(ids))
    rows = acc[keep] / (cfg.K - cfg.K0)
    return SampleMatrix(rows, n_div, x_bar, ids[keep])


def moment_trajectory(
    spec: GaussianStreamSpec,
    cfg: RunConfig,
    p: float,
    x0=None,
    replicas: Optional[Sequence[int]] = None,
    n_boot: int = 200,
) -> MomentTrajectory:
    """Ensemble mean of ``||x_k||^p`` for ``k = 0..K`` with bootstrap standard errors."""
    if p < 0:
        raise ValueError(f"moment order must be nonnegative, got {p}")
    ids = _replica_ids(cfg, replicas)
    if len(ids) < 100:
        warnings.warn(f"moment trajectory from only {len(ids)} replicas; 100 or more recommended", stacklevel=2)
    V = np.empty((cfg.K + 1, len(ids)))
    for k, X, div in iterate_ensemble(spec, cfg, x0, ids):
        with np.errstate(over="ignore"):
            V[k] = np.linalg.norm(X, axis=1) ** p
        V[k, div] = np.inf if p > 0 else 1.0
    mean = V.mean(axis=1)
    rng = keyed_rng(spec.seed, "bootstrap")
    R = len(ids)
    W = rng.multinomial(R, np.full(R, 1.0 / R), size=n_boot)
    with np.errstate(invalid="ignore", over="ignore"):
        boot = (W @ V.T) / R
        se = boot.std(axis=0, ddof=1) if n_boot > 1 else np.zeros(cfg.K + 1)
    return MomentTrajectory(np.arange(cfg.K + 1), mean, se, p, int(div.sum()))
