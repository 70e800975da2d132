"""Identity-level and domain-level feature statistics.

A client summarises its local embeddings as per-identity mean/variance rows
(``IdStats``), then collapses those into four d-vectors (``DomainStats``): the
mean and spread of the identity means, and the mean and spread of the
identity variances.  Only ``DomainStats`` ever leaves a client.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from fedhal.errors import DataError, DimensionError, DomainError, ParseError, UnsupportedVersionError
from fedhal.numerics import Rng, sample_gaussian

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class IdStats:
    means: np.ndarray
    variances: np.ndarray
    id_index: dict[int, int]

    @property
    def num_ids(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class DomainStats:
    mu_hat: np.ndarray
    sigma_hat_sq: np.ndarray
    mu_tilde: np.ndarray
    sigma_tilde_sq: np.ndarray
    client_id: int = 0
    epoch_stamp: int = 0

    def __post_init__(self):
        d = self.mu_hat.shape
        for name in ("sigma_hat_sq", "mu_tilde", "sigma_tilde_sq"):
            if getattr(self, name).shape != d:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {d}")
        for name in ("sigma_hat_sq", "mu_tilde", "sigma_tilde_sq"):
            if np.any(getattr(self, name) < 0):
                raise DomainError(f"{name} must be non-negative")

    @property
    def dim(self) -> int:
        return self.mu_hat.shape[0]

    def stamped(self, client_id: int, epoch_stamp: int) -> "DomainStats":
        return DomainStats(
            self.mu_hat, self.sigma_hat_sq, self.mu_tilde, self.sigma_tilde_sq, client_id, epoch_stamp
        )

    def same_values(self, other: "DomainStats") -> bool:
        return all(
            getattr(self, k).tobytes() == getattr(other, k).tobytes()
            for k in ("mu_hat", "sigma_hat_sq", "mu_tilde", "sigma_tilde_sq")
        ) and (self.client_id, self.epoch_stamp) == (other.client_id, other.epoch_stamp)


@dataclass(frozen=True)
class DomainVectors:
    mu: np.ndarray
    sigma_sq: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma_sq)


def compute_ifs(features, labels) -> IdStats:
    """Per-identity mean and population variance of raw features."""
    F = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if F.ndim != 2 or F.shape[0] == 0:
        raise DataError("cannot compute identity statistics of an empty dataset")
    if y.shape != (F.shape[0],):
        raise DimensionError(f"{F.shape[0]} feature rows but labels of shape {y.shape}")
    ids = np.unique(y)
    means = np.empty((ids.size, F.shape[1]))
    variances = np.empty_like(means)
    for row, ident in enumerate(ids):
        block = F[y == ident]
        means[row] = block.mean(axis=0)
        variances[row] = block.var(axis=0)
    return IdStats(means, variances, {int(k): r for r, k in enumerate(ids)})


def estimate_dfs(ifs: IdStats, client_id: int = 0, epoch_stamp: int = 0) -> DomainStats:
    """Collapse identity statistics into the four shared domain-level vectors."""
    if ifs.num_ids < 2:
        raise DataError(f"domain statistics need at least 2 identities, got {ifs.num_ids}")
    return DomainStats(
        mu_hat=ifs.means.mean(axis=0),
        sigma_hat_sq=ifs.means.var(axis=0),
        mu_tilde=ifs.variances.mean(axis=0),
        sigma_tilde_sq=ifs.variances.var(axis=0),
        client_id=client_id,
        epoch_stamp=epoch_stamp,
    )


def sample_domain_vectors(dfs: DomainStats, rng: Rng, var_floor: float = VAR_FLOOR) -> DomainVectors:
    """Reparameterised draw of a domain mean vector and a (clamped) variance vector."""
    mu = sample_gaussian(dfs.mu_hat, dfs.sigma_hat_sq, rng)
    sigma_sq = sample_gaussian(dfs.mu_tilde, dfs.sigma_tilde_sq, rng)
    return DomainVectors(mu, np.maximum(sigma_sq, var_floor))


# --- wire format --------------------------------------------------------------

DFS_MAGIC_PREFIX = b"DFS"
DFS_VERSION = b"1"
_HEADER = struct.Struct("<4sIII")


def serialize_dfs(dfs: DomainStats) -> bytes:
    """``DFS1`` magic, client id, epoch, d (u32 each), then 4*d float64 LE."""
    body = np.concatenate([dfs.mu_hat, dfs.sigma_hat_sq, dfs.mu_tilde, dfs.sigma_tilde_sq])
    header = _HEADER.pack(DFS_MAGIC_PREFIX + DFS_VERSION, dfs.client_id, dfs.epoch_stamp, dfs.dim)
    return header + body.astype("<f8").tobytes()


def parse_dfs(data: bytes) -> DomainStats:
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise ParseError(f"truncated header: {len(data)} of {_HEADER.size} bytes", len(data))
    magic, client_id, epoch, d = _HEADER.unpack_from(data)
    if magic[:3] != DFS_MAGIC_PREFIX:
        raise ParseError(f"bad magic {magic!r}", 0)
    if magic[3:] != DFS_VERSION:
        raise UnsupportedVersionError(f"unsupported DFS version byte {magic[3:]!r}", 3)
    expected = _HEADER.size + 32 * d
    if len(data) != expected:
        raise ParseError(f"payload length {len(data)} does not match d={d} (expected {expected})",
                         min(len(data), expected))
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64).reshape(4, d)
    try:
        return DomainStats(body[0].copy(), body[1].copy(), body[2].copy(), body[3].copy(), client_id, epoch)
    except DomainError as exc:
        raise ParseError(f"invalid statistics: {exc}", _HEADER.size) from exc
