"""Feature and domain hallucination, plus the two mixup baselines used in ablations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedhal.errors import DimensionError, DomainError
from fedhal.numerics import Rng, sample_beta
from fedhal.stats import DomainVectors

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class HallucinationPlan:
    """Domain vectors drawn for one local round.

    ``targets`` holds one entry per client id (including the local client);
    ``novel`` is the synthesised domain and ``weights`` the simplex weights
    that produced it.  Two-batch mixup records the positions it mixes in
    ``pair`` (weight ``weights[pair[0]]`` on the first).
    """

    targets: dict[int, DomainVectors]
    novel: DomainVectors | None
    weights: np.ndarray | None
    pair: tuple[int, int] | None = None


def _check_simplex(w: np.ndarray, n: int) -> None:
    if w.shape != (n,):
        raise DimensionError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < -SIMPLEX_TOL) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise DomainError(f"weights are not on the probability simplex (sum={w.sum()!r})")


def feature_hallucinate(bn_features, target: DomainVectors) -> np.ndarray:
    """Scale and shift a normalised batch to the target domain: ``mu + sigma * x``."""
    X = np.asarray(bn_features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != target.mu.shape[0] or target.sigma_sq.shape != target.mu.shape:
        raise DimensionError(f"batch {X.shape} does not match target of dimension {target.mu.shape}")
    return target.mu + target.sigma * X


def feature_hallucinate_backward(grad_out, target: DomainVectors) -> np.ndarray:
    """Gradient w.r.t. the normalised batch; the domain vectors are constants."""
    return np.asarray(grad_out) * target.sigma


def domain_hallucinate(domains: Sequence[DomainVectors], w) -> DomainVectors:
    """Convex combination of per-domain mean and variance vectors."""
    w = np.asarray(w, dtype=np.float64)
    _check_simplex(w, len(domains))
    dims = {dv.mu.shape for dv in domains} | {dv.sigma_sq.shape for dv in domains}
    if len(dims) != 1:
        raise DimensionError(f"domain vectors have mismatched shapes {sorted(dims)}")
    mu = np.zeros_like(domains[0].mu)
    sigma_sq = np.zeros_like(domains[0].sigma_sq)
    for wi, dv in zip(w, domains):
        mu += wi * dv.mu
        sigma_sq += wi * dv.sigma_sq
    return DomainVectors(mu, sigma_sq)


def dirichlet_feature_mixup(transformed: Sequence, w) -> np.ndarray:
    """Elementwise ``sum_k w_k F_k`` over already-hallucinated batches."""
    w = np.asarray(w, dtype=np.float64)
    _check_simplex(w, len(transformed))
    batches = [np.asarray(F, dtype=np.float64) for F in transformed]
    if len({F.shape for F in batches}) != 1:
        raise DimensionError("all batches must share one shape")
    out = np.zeros_like(batches[0])
    for wk, F in zip(w, batches):
        out += wk * F
    return out


def beta_feature_mixup(batch_a, batch_b, rng: Rng | None = None, lam: float | None = None) -> np.ndarray:
    """Two-batch mixup ``lam * A + (1 - lam) * B`` with ``lam ~ Beta(1, 1)``.

    Pass ``lam`` to pin the mixing weight instead of drawing it.
    """
    A = np.asarray(batch_a, dtype=np.float64)
    B = np.asarray(batch_b, dtype=np.float64)
    if A.shape != B.shape:
        raise DimensionError(f"cannot mix batches of shapes {A.shape} and {B.shape}")
    if lam is None:
        if rng is None:
            raise ValueError("either rng or lam is required")
        lam = sample_beta(1.0, 1.0, rng)
    return lam * A + (1.0 - lam) * B
