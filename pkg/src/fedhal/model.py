"""Embedding network: affine -> ReLU -> affine trunk, affine-free batch norm,
per-client classifier heads, manual backprop, SGD and parameter averaging.

Features returned by :func:`forward` are the raw (pre-BN) embeddings used
for retrieval and for identity statistics.  :func:`batch_norm` is the output
normalisation consumed by feature hallucination; it has no learnable scale or
shift because hallucination supplies those.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from fedhal.errors import (
    DimensionError,
    DomainError,
    ParseError,
    TrainingDivergenceError,
    UnsupportedVersionError,
    UsageError,
)
from fedhal.numerics import Rng

LEARNABLE = ("W1", "b1", "W2", "b2")
BN_STATE = ("bn_running_mean", "bn_running_var")
TRAIN, EVAL = "train", "eval"


@dataclass
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.W2.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in LEARNABLE + BN_STATE}

    def copy(self) -> "ModelParams":
        return replace(self, **{k: v.copy() for k, v in self.tensors().items()})

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every tensor and BN hyper-parameter."""
        if (self.bn_momentum, self.bn_eps) != (other.bn_momentum, other.bn_eps):
            return False
        mine, theirs = self.tensors(), other.tensors()
        return all(
            mine[k].shape == theirs[k].shape and mine[k].tobytes() == theirs[k].tobytes() for k in mine
        )


@dataclass
class ClassifierHead:
    W: np.ndarray
    b: np.ndarray
    owner_client: int

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.W.copy(), self.b.copy(), self.owner_client)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activation: np.ndarray
    hidden: np.ndarray
    features: np.ndarray
    consumed: bool = False


@dataclass
class BatchNormCache:
    mode: str
    normalized: np.ndarray
    inv_std: np.ndarray
    batch_mean: np.ndarray | None = None
    batch_var: np.ndarray | None = None
    consumed: bool = False


@dataclass
class GradientSet:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    head_W: np.ndarray | None = None
    head_b: np.ndarray | None = None

    @classmethod
    def zeros(cls, params: ModelParams, head: ClassifierHead | None = None) -> "GradientSet":
        g = cls(*(np.zeros_like(getattr(params, k)) for k in LEARNABLE))
        if head is not None:
            g.head_W, g.head_b = np.zeros_like(head.W), np.zeros_like(head.b)
        return g

    def items(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                yield f.name, value

    def __add__(self, other: "GradientSet") -> "GradientSet":
        def _sum(a, b):
            if a is None:
                return None if b is None else b.copy()
            return a.copy() if b is None else a + b

        return GradientSet(*(_sum(getattr(self, f.name), getattr(other, f.name)) for f in fields(self)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.items())


def init_params(
    rng: Rng, input_dim: int = 32, hidden_dim: int = 64, feature_dim: int = 16
) -> ModelParams:
    """He-style initialisation for the ReLU layer, LeCun-style for the output layer."""
    W1 = rng.standard_normal((input_dim, hidden_dim)) * np.sqrt(2.0 / input_dim)
    W2 = rng.standard_normal((hidden_dim, feature_dim)) * np.sqrt(1.0 / hidden_dim)
    return ModelParams(
        W1=W1,
        b1=np.zeros(hidden_dim),
        W2=W2,
        b2=np.zeros(feature_dim),
        bn_running_mean=np.zeros(feature_dim),
        bn_running_var=np.ones(feature_dim),
    )


def init_head(rng: Rng, feature_dim: int, num_classes: int, owner_client: int, std: float = 0.01) -> ClassifierHead:
    return ClassifierHead(
        W=rng.standard_normal((feature_dim, num_classes)) * std,
        b=np.zeros(num_classes),
        owner_client=owner_client,
    )


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def forward(params: ModelParams, batch, mode: str = TRAIN) -> tuple[np.ndarray, ForwardCache]:
    """Raw embeddings for a batch of inputs; never touches BN running state."""
    _check_mode(mode)
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise DimensionError(f"expected inputs of shape (n, {params.input_dim}), got {X.shape}")
    if X.shape[0] < 1 or (mode == TRAIN and X.shape[0] < 2):
        raise DimensionError(f"batch of {X.shape[0]} rows is too small for {mode} mode")
    z1 = X @ params.W1 + params.b1
    a1 = np.maximum(z1, 0.0)
    f = a1 @ params.W2 + params.b2
    return f, ForwardCache(inputs=X, pre_activation=z1, hidden=a1, features=f)


def batch_norm(features, params: ModelParams, mode: str = TRAIN, update_running: bool = True):
    """Normalise features per dimension (no affine).

    Train mode uses batch statistics (population variance) and folds them
    into ``params``' running stats in place; eval mode reads the running stats.
    """
    _check_mode(mode)
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != params.feature_dim:
        raise DimensionError(f"expected features of width {params.feature_dim}, got shape {F.shape}")
    if mode == TRAIN:
        if F.shape[0] < 2:
            raise DimensionError("train-mode batch norm needs at least 2 rows")
        mean = F.mean(axis=0)
        var = F.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + params.bn_eps)
        out = (F - mean) * inv_std
        if update_running:
            mom = params.bn_momentum
            params.bn_running_mean = (1.0 - mom) * params.bn_running_mean + mom * mean
            params.bn_running_var = (1.0 - mom) * params.bn_running_var + mom * var
        return out, BatchNormCache(TRAIN, out, inv_std, mean, var)
    inv_std = 1.0 / np.sqrt(params.bn_running_var + params.bn_eps)
    out = (F - params.bn_running_mean) * inv_std
    return out, BatchNormCache(EVAL, out, inv_std)


def batch_norm_backward(cache: BatchNormCache, grad_out: np.ndarray) -> np.ndarray:
    if cache.consumed:
        raise UsageError("batch-norm cache already consumed by a backward pass")
    cache.consumed = True
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.mode == EVAL:
        return g * cache.inv_std
    n = g.shape[0]
    xhat = cache.normalized
    return cache.inv_std / n * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))


def classifier_forward(head: ClassifierHead, features) -> np.ndarray:
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != head.W.shape[0]:
        raise DimensionError(f"classifier expects width {head.W.shape[0]}, got shape {F.shape}")
    return F @ head.W + head.b


def classifier_backward(head: ClassifierHead, features, d_logits) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(dW, db, d_features)`` for one classifier application."""
    F = np.asarray(features, dtype=np.float64)
    g = np.asarray(d_logits, dtype=np.float64)
    return F.T @ g, g.sum(axis=0), g @ head.W.T


def backward(
    params: ModelParams,
    cache: ForwardCache,
    d_features=None,
    *,
    bn_cache: BatchNormCache | None = None,
    d_normalized=None,
    head: ClassifierHead | None = None,
    d_logits=None,
    classifier_inputs=None,
) -> GradientSet:
    """Reverse pass through the trunk, optionally joined by the BN and classifier branches.

    Upstream gradients may arrive directly on the raw features, on the BN
    output (via ``bn_cache``) and on classifier logits; they are summed at the
    raw-feature node before descending into the trunk.  ``classifier_inputs``
    defaults to the raw features held by ``cache``.
    """
    if cache.consumed:
        raise UsageError("forward cache already consumed by a backward pass")
    n, d = cache.features.shape
    dF = np.zeros((n, d)) if d_features is None else np.asarray(d_features, dtype=np.float64).copy()
    if dF.shape != (n, d):
        raise DimensionError(f"upstream gradient shape {dF.shape} does not match features {(n, d)}")
    if d_normalized is not None:
        if bn_cache is None:
            raise UsageError("d_normalized given without a batch-norm cache")
        dF += batch_norm_backward(bn_cache, d_normalized)
    head_W = head_b = None
    if d_logits is not None:
        if head is None:
            raise UsageError("d_logits given without a classifier head")
        inputs = cache.features if classifier_inputs is None else classifier_inputs
        head_W, head_b, d_cls = classifier_backward(head, inputs, d_logits)
        if classifier_inputs is None:
            dF += d_cls
    cache.consumed = True
    dW2 = cache.hidden.T @ dF
    db2 = dF.sum(axis=0)
    dz1 = (dF @ params.W2.T) * (cache.pre_activation > 0)
    dW1 = cache.inputs.T @ dz1
    db1 = dz1.sum(axis=0)
    return GradientSet(dW1, db1, dW2, db2, head_W, head_b)


def sgd_step(
    params: ModelParams, head: ClassifierHead | None, grads: GradientSet, lr: float
) -> tuple[ModelParams, ClassifierHead | None]:
    """Plain SGD ``p <- p - lr * g``; BN running stats are carried over untouched."""
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    if not grads.is_finite():
        raise TrainingDivergenceError("non-finite gradient encountered")
    new = params.copy()
    for name in LEARNABLE:
        setattr(new, name, getattr(params, name) - lr * getattr(grads, name))
    new_head = head
    if head is not None:
        new_head = head.copy()
        if grads.head_W is not None:
            new_head.W = head.W - lr * grads.head_W
            new_head.b = head.b - lr * grads.head_b
    return new, new_head


def average_params(models: Sequence[ModelParams], weights) -> ModelParams:
    """Weighted elementwise average of trunk tensors and BN running stats.

    Accumulation runs in list order so the result is bit-reproducible.
    """
    if len(models) == 0:
        raise DimensionError("cannot average an empty model list")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),):
        raise DimensionError(f"{len(models)} models but weights of shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise DomainError(f"averaging weights must be non-negative and sum to 1, got sum {w.sum()!r}")
    ref = models[0]
    for m in models[1:]:
        for name, t in m.tensors().items():
            if t.shape != getattr(ref, name).shape:
                raise DimensionError(f"tensor {name} has shape {t.shape}, expected {getattr(ref, name).shape}")
    out = ref.copy()
    for name in LEARNABLE + BN_STATE:
        acc = w[0] * getattr(models[0], name)
        for wi, m in zip(w[1:], models[1:]):
            acc = acc + wi * getattr(m, name)
        setattr(out, name, acc)
    return out


# --- checkpoint codec -------------------------------------------------------

CHECKPOINT_MAGIC = b"FDFH"
CHECKPOINT_VERSION = 1


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    # np.require keeps rank-0 tensors rank 0 (ascontiguousarray would promote them).
    arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def encode_checkpoint(params: ModelParams) -> bytes:
    """Serialise to the ``FDFH`` format (little-endian, row-major float64)."""
    records = [_pack_tensor(k, v) for k, v in params.tensors().items()]
    records.append(_pack_tensor("bn_momentum", np.array(params.bn_momentum)))
    records.append(_pack_tensor("bn_eps", np.array(params.bn_eps)))
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(records)) + b"".join(records)


def decode_checkpoint(data: bytes) -> ModelParams:
    buf = memoryview(bytes(data))
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(buf):
            raise ParseError(f"truncated checkpoint: need {n} bytes", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in tensors:
            raise ParseError(f"duplicate tensor {name!r}", start)
        tensors[name] = values
    if pos != len(buf):
        raise ParseError("trailing bytes after last tensor", pos)
    missing = set(LEARNABLE + BN_STATE + ("bn_momentum", "bn_eps")) - set(tensors)
    if missing:
        raise ParseError(f"checkpoint is missing tensors {sorted(missing)}", pos)
    return ModelParams(
        **{k: tensors[k] for k in LEARNABLE + BN_STATE},
        bn_momentum=float(tensors["bn_momentum"]),
        bn_eps=float(tensors["bn_eps"]),
    )
