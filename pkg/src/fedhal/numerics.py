"""Seeded randomness and the Gaussian / Dirichlet samplers.

Every random draw in the simulator goes through :class:`Rng`.  Streams are
keyed by ``(global_seed, client_id, epoch, purpose)`` on top of numpy's
``SeedSequence`` spawn keys and the PCG64 bit generator, so two distinct
key tuples never share a stream and a run replays bit-for-bit.
"""

from __future__ import annotations

import math
import zlib
from typing import Sequence

import numpy as np

from fedhal.errors import DimensionError, DomainError

# Sentinel client id for streams that belong to no client (data generation,
# model initialisation, the coordinator).
GLOBAL_STREAM = 2**32 - 1


def _purpose_key(purpose: str | int) -> int:
    if isinstance(purpose, int):
        return purpose
    return zlib.crc32(purpose.encode("utf-8"))


class Rng:
    """Single-owner PRNG stream (PCG64 seeded through ``SeedSequence``)."""

    def __init__(self, seed: int, stream: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    @classmethod
    def derive(cls, global_seed: int, client_id: int, epoch: int, purpose: str | int) -> "Rng":
        """Independent stream for one (client, epoch, purpose) combination."""
        return cls(global_seed, (client_id, epoch, _purpose_key(purpose)))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def uint64(self) -> int:
        """One raw 64-bit draw; used by tests to compare streams."""
        return int(self._gen.integers(0, 2**64, dtype=np.uint64))


def as_vector(values, name: str = "vector") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def sample_gaussian(mean, variance, rng: Rng) -> np.ndarray:
    """Draw ``mean + sqrt(variance) * eps`` with ``eps ~ N(0, I)``."""
    mean = as_vector(mean, "mean")
    variance = as_vector(variance, "variance")
    if mean.shape != variance.shape:
        raise DimensionError(f"mean has length {mean.size} but variance has length {variance.size}")
    if np.any(variance < 0) or not np.all(np.isfinite(variance)):
        raise DomainError("variance entries must be finite and non-negative")
    eps = rng.standard_normal(mean.size)
    return mean + np.sqrt(variance) * eps


def _log_gamma_variate(shape: float, rng: Rng) -> float:
    # Marsaglia & Tsang (2000) squeeze/rejection; shape < 1 uses the
    # G(a) = G(a + 1) * U**(1/a) boost, kept in log space so tiny shapes
    # do not underflow to zero.
    boost = 0.0
    if shape < 1.0:
        boost = math.log(rng.uniform()) / shape
        shape += 1.0
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = float(rng.standard_normal())
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = float(rng.uniform())
        if u < 1.0 - 0.0331 * x**4:
            return math.log(d * v) + boost
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return math.log(d * v) + boost


def sample_gamma(shape: float, rng: Rng) -> float:
    """One Gamma(shape, 1) variate."""
    if not shape > 0 or not math.isfinite(shape):
        raise DomainError(f"gamma shape must be positive and finite, got {shape}")
    return math.exp(_log_gamma_variate(float(shape), rng))


def sample_dirichlet(alpha, rng: Rng) -> np.ndarray:
    """Dirichlet draw built from independent Gamma(alpha_i, 1) variates."""
    alpha = as_vector(alpha, "alpha")
    if alpha.size == 0:
        raise DimensionError("alpha must be non-empty")
    if np.any(~(alpha > 0)) or not np.all(np.isfinite(alpha)):
        raise DomainError("all Dirichlet concentrations must be positive and finite")
    logs = np.array([_log_gamma_variate(float(a), rng) for a in alpha])
    w = np.exp(logs - logs.max())
    return w / w.sum()


def sample_beta(a: float, b: float, rng: Rng) -> float:
    """Beta(a, b) as the first coordinate of a two-component Dirichlet."""
    return float(sample_dirichlet([a, b], rng)[0])
