"""Block-sum tail-index estimator for symmetric stable samples.

For i.i.d. samples ``X_1..X_K`` in the domain of attraction of an
alpha-stable law, split them into ``K2`` blocks of ``K1`` consecutive
samples with block sums ``Y_i``.  Since a sum of ``K1`` such variables
scales like ``K1^{1/alpha}``,

    1/alpha_hat = (mean_i log||Y_i|| - mean_k log||X_k||) / log K1.

The estimate does not depend on the scale of the law.  Several ``K1`` are
tried and the median is reported.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    k1_grid: tuple[int, ...] = (2, 5, 10, 20, 50)
    min_k2: int = 2
    flatten: bool = False
    aggregation: str = "median"

    def __post_init__(self):
        if not self.k1_grid:
            raise ValueError("k1_grid must not be empty")
        if any(int(k) != k or k < 2 for k in self.k1_grid):
            raise ValueError(f"every K1 must be an integer >= 2, got {self.k1_grid}")
        if self.min_k2 < 2:
            raise ValueError(f"min_k2 must be at least 2, got {self.min_k2}")
        if self.aggregation != "median":
            raise ValueError(f"only median aggregation is supported, got {self.aggregation!r}")


@dataclass(frozen=True)
class AlphaEstimate:
    """Median estimate over the usable block sizes.

    ``alpha_hat`` is the raw value; estimates above 2 are kept as they are
    and flagged through ``exceeds_two`` rather than clipped.
    """

    alpha_hat: float
    per_k1: tuple[tuple[int, float], ...]
    n_used: int
    n_dropped: int = 0

    @property
    def exceeds_two(self) -> bool:
        return self.alpha_hat > 2.0

    @property
    def clipped(self) -> float:
        return min(self.alpha_hat, 2.0)


def _as_samples(samples, flatten: bool = False) -> np.ndarray:
    """Coerce scalars, vectors or a ``SampleMatrix`` to a ``(K, d)`` array."""
    rows = getattr(samples, "rows", samples)
    X = np.asarray(rows, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    elif X.ndim != 2:
        raise ValueError(f"samples must be 1-D or 2-D, got shape {X.shape}")
    if flatten:
        X = X.reshape(-1, 1)
    if not np.isfinite(X).all():
        raise ValueError("samples contain non-finite values")
    # Exact power-of-two rescale: the estimate depends only on the mantissas,
    # and block sums of huge samples cannot overflow.
    peak = np.abs(X).max(initial=0.0)
    if peak > 0:
        X = np.ldexp(X, -np.frexp(peak)[1])
    return X


def _drop_zero_norm(X: np.ndarray) -> tuple[np.ndarray, int]:
    keep = np.any(X != 0.0, axis=1)
    n_drop = int(X.shape[0] - keep.sum())
    if n_drop:
        log.warning("dropped %d zero-norm samples before tail-index estimation", n_drop)
    return X[keep], n_drop


def _inverse_alpha(X: np.ndarray, K1: int) -> float:
    K = X.shape[0]
    norms = np.linalg.norm(X, axis=1)
    Y = X.reshape(K // K1, K1, X.shape[1]).sum(axis=1)
    y_norms = np.linalg.norm(Y, axis=1)
    if np.any(y_norms == 0.0):
        raise ValueError(f"a block sum vanished exactly at K1={K1}; the estimate is undefined")
    return (np.log(y_norms).mean() - np.log(norms).mean()) / math.log(K1)


def estimate_alpha_k1(samples, K1: int, min_k2: int = 2, flatten: bool = False) -> float:
    """Estimate at a single block size ``K1``, which must divide the sample count."""
    if int(K1) != K1 or K1 < 2:
        raise ValueError(f"K1 must be an integer >= 2, got {K1}")
    X, _ = _drop_zero_norm(_as_samples(samples, flatten))
    K = X.shape[0]
    if K % K1:
        raise ValueError(f"K1={K1} does not divide the sample count {K}")
    if K // K1 < min_k2:
        raise ValueError(f"K1={K1} leaves {K // K1} blocks of {K} samples; need at least {min_k2}")
    return 1.0 / _inverse_alpha(X, int(K1))


def estimate_alpha(samples, cfg: EstimatorConfig = EstimatorConfig()) -> AlphaEstimate:
    """Median of the per-``K1`` estimates.

    Each ``K1`` uses the longest prefix of the samples whose length it
    divides; ``K1`` values leaving fewer than ``cfg.min_k2`` blocks are
    skipped.
    """
    X, n_drop = _drop_zero_norm(_as_samples(samples, cfg.flatten))
    K = X.shape[0]
    if K < 100:
        raise ValueError(f"need at least 100 nonzero samples, got {K}")
    per = []
    for K1 in cfg.k1_grid:
        K2 = K // K1
        if K2 < cfg.min_k2:
            continue
        per.append((int(K1), 1.0 / _inverse_alpha(X[: K1 * K2], int(K1))))
    if not per:
        raise ValueError(
            f"no block size in {tuple(cfg.k1_grid)} leaves {cfg.min_k2} or more blocks "
            f"of the {K} samples"
        )
    alpha = float(np.median([a for _, a in per]))
    return AlphaEstimate(alpha, tuple(per), K, n_drop)
