"""Synthetic linear-regression data and reference samplers.

The generative model is

    x_true ~ N(0, sigma_x^2 I_d),   a_i ~ sigma * D,   y_i = a_i . x_true + sigma_y * eps_i

where ``D`` is the coordinate law of an :class:`InputDistribution` (standard
Gaussian by default) and ``eps_i ~ N(0, 1)``.  Stream batches are drawn in
fixed-size chunks from counter-keyed generators, so batch ``k`` of stream
``r`` is a pure function of ``(seed, r, k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import keyed_rng

# Steps per keyed generator; batch k lives in chunk (k - 1) // CHUNK.
CHUNK = 64

DEFAULT_MEMORY_CAP = 1 << 27  # float64 elements (1 GiB)


@dataclass(frozen=True)
class InputDistribution:
    """Coordinate law of the regression inputs.

    ``kind`` is one of ``gaussian``, ``uniform``, ``laplace`` or ``mixture``.
    ``scale`` is the standard deviation, half-width or Laplace scale
    respectively; a mixture is a zero-mean Gaussian scale mixture with the
    given ``weights`` and component ``scales``.  With ``standardize`` the draws
    are rescaled to unit variance, so the stream's ``sigma`` alone sets
    ``E[a a^T] = sigma^2 I``.
    """

    kind: str = "gaussian"
    scale: float = 1.0
    weights: tuple[float, ...] = ()
    scales: tuple[float, ...] = ()
    standardize: bool = True

    KINDS = ("gaussian", "uniform", "laplace", "mixture")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown input kind {self.kind!r}; expected one of {self.KINDS}")
        if self.kind == "mixture":
            w = np.asarray(self.weights, dtype=float)
            s = np.asarray(self.scales, dtype=float)
            if w.size == 0 or w.shape != s.shape:
                raise ValueError("mixture needs matching nonempty weights and scales")
            if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-9):
                raise ValueError("mixture weights must be nonnegative and sum to 1")
            if np.any(s <= 0):
                raise ValueError("mixture scales must be positive")
        elif not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def gaussian(cls) -> "InputDistribution":
        return cls("gaussian")

    def raw_variance(self) -> float:
        if self.kind == "gaussian":
            return self.scale**2
        if self.kind == "uniform":
            return self.scale**2 / 3.0
        if self.kind == "laplace":
            return 2.0 * self.scale**2
        return float(np.dot(self.weights, np.square(self.scales)))

    @property
    def variance(self) -> float:
        return 1.0 if self.standardize else self.raw_variance()

    def draw(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "gaussian":
            x = rng.standard_normal(shape) * self.scale
        elif self.kind == "uniform":
            x = rng.uniform(-self.scale, self.scale, shape)
        elif self.kind == "laplace":
            x = rng.laplace(0.0, self.scale, shape)
        else:
            comp = rng.choice(len(self.weights), size=shape, p=self.weights)
            x = rng.standard_normal(shape) * np.asarray(self.scales)[comp]
        if self.standardize:
            x /= math.sqrt(self.raw_variance())
        return x


@dataclass(frozen=True)
class GaussianStreamSpec:
    d: int
    b: int
    eta: float
    sigma: float = 1.0
    sigma_x: float = 1.0
    sigma_y: float = 1.0
    seed: int = 0
    inputs: InputDistribution = field(default_factory=InputDistribution.gaussian)

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        if int(self.b) != self.b or self.b < 1:
            raise ValueError(f"b must be a positive integer, got {self.b}")
        if not self.eta >= 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.sigma_x >= 0:
            raise ValueError(f"sigma_x must be nonnegative, got {self.sigma_x}")
        # y needs a continuous density; the noiseless limit is only approached.
        if not self.sigma_y > 0:
            raise ValueError(f"sigma_y must be positive, got {self.sigma_y}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    @property
    def sigma2(self) -> float:
        """Per-coordinate input variance, i.e. ``E[a a^T] = sigma2 * I``."""
        return self.sigma**2 * self.inputs.variance

    @property
    def a(self) -> float:
        """Effective stepsize ``eta * sigma2``."""
        return self.eta * self.sigma2


@dataclass(frozen=True)
class Minibatch:
    inputs: np.ndarray  # (b, d)
    labels: np.ndarray  # (b,)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} do not form a batch"
            )


def draw_x_true(spec: GaussianStreamSpec) -> np.ndarray:
    rng = keyed_rng(spec.seed, "x_true")
    return spec.sigma_x * rng.standard_normal(spec.d)


def stream_chunk(spec: GaussianStreamSpec, stream: int, chunk: int):
    """Inputs ``(CHUNK, b, d)`` and unit label noise ``(CHUNK, b)`` of one chunk."""
    rng = keyed_rng(spec.seed, "batch", stream, chunk)
    inputs = spec.sigma * spec.inputs.draw(rng, (CHUNK, spec.b, spec.d))
    noise = rng.standard_normal((CHUNK, spec.b))
    return inputs, noise


def labels_for(inputs: np.ndarray, noise: np.ndarray, x_true: np.ndarray, sigma_y: float):
    return inputs @ x_true + sigma_y * noise


def _check_x_true(spec: GaussianStreamSpec, x_true) -> np.ndarray:
    x_true = np.asarray(x_true, dtype=float)
    if x_true.shape != (spec.d,):
        raise ValueError(f"x_true has shape {x_true.shape}, expected ({spec.d},)")
    return x_true


def gen_stream_batch(spec: GaussianStreamSpec, x_true, k: int, stream: int = 0) -> Minibatch:
    """Batch ``k >= 1`` of the one-pass stream ``stream``."""
    if k < 1:
        raise ValueError(f"step index starts at 1, got {k}")
    x_true = _check_x_true(spec, x_true)
    inputs, noise = stream_chunk(spec, stream, (k - 1) // CHUNK)
    j = (k - 1) % CHUNK
    a = inputs[j].copy()
    return Minibatch(a, labels_for(a, noise[j], x_true, spec.sigma_y))


def gen_finite_dataset(
    spec: GaussianStreamSpec, n: int, memory_cap: int = DEFAULT_MEMORY_CAP
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed dataset ``(A, y, x_true)`` with ``A`` of shape ``(n, d)``."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if n * spec.d > memory_cap:
        raise MemoryError(
            f"dataset of {n} x {spec.d} = {n * spec.d} elements exceeds the cap of {memory_cap}"
        )
    x_true = draw_x_true(spec)
    rng = keyed_rng(spec.seed, "dataset")
    A = spec.sigma * spec.inputs.draw(rng, (n, spec.d))
    y = A @ x_true + spec.sigma_y * rng.standard_normal(n)
    return A, y, x_true


def sample_sas(alpha: float, scale: float, n: int, seed: int) -> np.ndarray:
    """Symmetric alpha-stable draws with characteristic function ``exp(-|scale t|^alpha)``.

    Chambers-Mallows-Stuck construction; ``alpha = 2`` gives ``N(0, 2 scale^2)``
    and ``alpha = 1`` the Cauchy law.
    """
    if not 0 < alpha <= 2:
        raise ValueError(f"alpha must lie in (0, 2], got {alpha}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = keyed_rng(seed, "sas")
    v = rng.uniform(-np.pi / 2, np.pi / 2, n)
    w = rng.exponential(1.0, n)
    if alpha == 1:
        return scale * np.tan(v)
    x = (
        np.sin(alpha * v)
        / np.cos(v) ** (1.0 / alpha)
        * (np.cos(v - alpha * v) / w) ** ((1.0 - alpha) / alpha)
    )
    return scale * x
