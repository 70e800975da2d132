"""Synthetic multi-domain open-set identity data and PK batch sampling.

Each identity owns a latent prototype that a shared linear map turns into a
"prototype image".  Every sample adds identity jitter in latent space and an
identity-independent nuisance component (pose, background) through a second
shared map.  A domain then applies its own random affine map, a mild random
rotation followed by per-channel gains and offsets, so the same geometry is
seen through a different lens in every domain.  Identity label spaces never
overlap across domains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from fedhal.errors import ConfigError, DataError, ParseError, UnsupportedVersionError
from fedhal.numerics import GLOBAL_STREAM, Rng


@dataclass
class DomainDataset:
    samples: np.ndarray
    labels: np.ndarray
    domain_id: int
    identity_count: int
    id_offset: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.samples.shape} samples do not match {self.labels.shape} labels")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    @property
    def global_labels(self) -> np.ndarray:
        return self.labels + self.id_offset

    def subset(self, indices) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return DomainDataset(self.samples[idx], self.labels[idx], self.domain_id, self.identity_count, self.id_offset)

    def equals(self, other: "DomainDataset") -> bool:
        return encode_dataset(self) == encode_dataset(other)


@dataclass
class RetrievalSplit:
    query: DomainDataset
    gallery: DomainDataset
    query_indices: np.ndarray
    gallery_indices: np.ndarray


@dataclass
class SyntheticConfig:
    num_domains: int = 3
    ids_per_domain: int = 20
    samples_per_id: int = 12
    latent_dim: int = 8
    input_dim: int = 32
    domain_shift_scale: float = 1.0
    noise_scale: float = 0.3
    seed: int = 0
    target_ids: int | None = 100
    nuisance_dim: int = 8
    nuisance_gain: float = 5.0
    rotation_scale: float = 0.25

    def validate(self, K: int = 2) -> None:
        for name in ("num_domains", "ids_per_domain", "samples_per_id", "latent_dim", "input_dim"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be at least 2, got {getattr(self, name)}")
        if self.target_ids is not None and self.target_ids < 2:
            raise ConfigError(f"target_ids must be at least 2, got {self.target_ids}")
        if self.nuisance_dim < 0:
            raise ConfigError(f"nuisance_dim must be non-negative, got {self.nuisance_dim}")
        for name in ("domain_shift_scale", "noise_scale", "nuisance_gain", "rotation_scale"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.samples_per_id < 2 * K:
            raise ConfigError(f"samples_per_id={self.samples_per_id} is below 2*K={2 * K}")


def _domain_map(rng: Rng, dim: int, shift: float, rotation: float) -> tuple[np.ndarray, np.ndarray]:
    # Blend of identity and a random orthogonal matrix, then per-channel
    # log-normal gains.  Everything collapses to the identity map at shift=0.
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    mix = min(1.0, shift * rotation)
    gains = np.exp(shift * rng.standard_normal(dim))
    A = gains[:, None] * ((1.0 - mix) * np.eye(dim) + mix * q)
    b = shift * rng.standard_normal(dim)
    return A, b


def generate_domains(cfg: SyntheticConfig, K: int = 2) -> tuple[list[DomainDataset], DomainDataset, RetrievalSplit]:
    """``cfg.num_domains`` source domains plus one held-out target domain with its split.

    ``target_ids=None`` gives the target as many identities as a source.
    """
    cfg.validate(K)
    rng = Rng.derive(cfg.seed, GLOBAL_STREAM, 0, "synthetic-world")
    proto_map = rng.standard_normal((cfg.input_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    nuisance_map = rng.standard_normal((cfg.input_dim, cfg.nuisance_dim)) / np.sqrt(max(cfg.nuisance_dim, 1))
    nuisance_std = cfg.noise_scale * cfg.nuisance_gain

    domains = []
    offset = 0
    for j in range(cfg.num_domains + 1):
        n_ids = cfg.ids_per_domain if j < cfg.num_domains or cfg.target_ids is None else cfg.target_ids
        A, b = _domain_map(rng, cfg.input_dim, cfg.domain_shift_scale, cfg.rotation_scale)
        prototypes = rng.standard_normal((n_ids, cfg.latent_dim))
        labels = np.repeat(np.arange(n_ids), cfg.samples_per_id)
        jitter = cfg.noise_scale * rng.standard_normal((labels.size, cfg.latent_dim))
        nuisance = nuisance_std * rng.standard_normal((labels.size, cfg.nuisance_dim))
        # The map is linear, so prototypes and per-sample variation are mapped
        # separately; noise-free samples then equal their prototype bit for bit.
        proto_images = prototypes @ proto_map.T
        variation = jitter @ proto_map.T + nuisance @ nuisance_map.T
        if cfg.domain_shift_scale > 0:
            proto_images = proto_images @ A.T + b
            variation = variation @ A.T
        images = proto_images[labels] + variation
        domains.append(DomainDataset(images, labels, j, n_ids, offset))
        offset += n_ids

    sources, target = domains[:-1], domains[-1]
    return sources, target, retrieval_split(target)


def retrieval_split(ds: DomainDataset) -> RetrievalSplit:
    """First sample of every identity is the query; the rest form the gallery."""
    first = {}
    for idx, lab in enumerate(ds.labels):
        first.setdefault(int(lab), idx)
    q_idx = np.array(sorted(first.values()), dtype=np.int64)
    g_mask = np.ones(len(ds), dtype=bool)
    g_mask[q_idx] = False
    g_idx = np.flatnonzero(g_mask)
    missing = set(ds.labels[q_idx].tolist()) - set(ds.labels[g_idx].tolist())
    if missing:
        raise DataError(f"identities {sorted(missing)} have no gallery samples")
    return RetrievalSplit(ds.subset(q_idx), ds.subset(g_idx), q_idx, g_idx)


def pk_sample_batch(ds: DomainDataset, P: int, K: int, rng: Rng) -> np.ndarray:
    """Indices of ``P`` distinct identities with ``K`` distinct samples each."""
    ids, counts = np.unique(ds.labels, return_counts=True)
    if P < 2 or K < 2:
        raise DataError(f"PK sampling needs P >= 2 and K >= 2, got P={P}, K={K}")
    if P > ids.size:
        raise DataError(f"P={P} exceeds the {ids.size} identities available")
    if counts.min() < K:
        raise DataError(f"an identity has only {counts.min()} samples, fewer than K={K}")
    chosen = ids[np.sort(rng.choice(ids.size, P, replace=False))]
    out = []
    for ident in chosen:
        pool = np.flatnonzero(ds.labels == ident)
        out.append(pool[rng.choice(pool.size, K, replace=False)])
    return np.concatenate(out)


# --- FDAT dump format -----------------------------------------------------------

FDAT_MAGIC = b"FDAT"
FDAT_VERSION = 1
_FDAT_HEADER = struct.Struct("<4sIIIIII")


def encode_dataset(ds: DomainDataset) -> bytes:
    """``FDAT`` + version, rows, cols, identity count, domain id, id offset (u32),
    then row-major float64 LE samples and u32 LE labels."""
    header = _FDAT_HEADER.pack(
        FDAT_MAGIC, FDAT_VERSION, len(ds), ds.input_dim, ds.identity_count, ds.domain_id, ds.id_offset
    )
    return header + ds.samples.astype("<f8").tobytes() + ds.labels.astype("<u4").tobytes()


def decode_dataset(data: bytes) -> DomainDataset:
    data = bytes(data)
    if len(data) < _FDAT_HEADER.size:
        raise ParseError("truncated FDAT header", len(data))
    magic, version, rows, cols, n_ids, domain_id, offset = _FDAT_HEADER.unpack_from(data)
    if magic != FDAT_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if version != FDAT_VERSION:
        raise UnsupportedVersionError(f"unsupported FDAT version {version}", 4)
    expected = _FDAT_HEADER.size + rows * cols * 8 + rows * 4
    if len(data) != expected:
        raise ParseError(f"payload is {len(data)} bytes, expected {expected}", min(len(data), expected))
    pos = _FDAT_HEADER.size
    samples = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
    labels = np.frombuffer(data, dtype="<u4", count=rows, offset=pos + rows * cols * 8)
    return DomainDataset(samples.astype(np.float64), labels.astype(np.int64), domain_id, n_ids, offset)
