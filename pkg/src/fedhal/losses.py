"""Batch-hard triplet loss, softmax cross-entropy and the combined local objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fedhal.errors import BatchCompositionError, DimensionError, DomainError, LabelError
from fedhal.model import ClassifierHead, classifier_backward, classifier_forward

DIST_EPS = 1e-12
DEFAULT_MARGIN = 0.5
DEFAULT_LAMBDA = 5.0


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def pairwise_distances(F: np.ndarray) -> np.ndarray:
    diff = F[:, None, :] - F[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1) + DIST_EPS)


def hardest_pairs(F: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index of the hardest positive and negative for every anchor, plus the distance matrix.

    Ties resolve to the lowest batch index.
    """
    y = np.asarray(labels)
    n = F.shape[0]
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    if not pos_mask.any(axis=1).all():
        raise BatchCompositionError("every label in the batch needs at least two instances")
    if same.all():
        raise BatchCompositionError("batch contains a single identity; no negatives available")
    dist = pairwise_distances(F)
    hard_pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    hard_neg = np.where(same, np.inf, dist).argmin(axis=1)
    return hard_pos, hard_neg, dist


def triplet_loss(F, labels, m: float = DEFAULT_MARGIN) -> LossValue:
    """Mean over anchors of ``[d(a, p*) - d(a, n*) + m]_+`` with Euclidean distances."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != len(labels):
        raise DimensionError(f"features {F.shape} do not match {len(labels)} labels")
    n = F.shape[0]
    pos, neg, dist = hardest_pairs(F, labels)
    rows = np.arange(n)
    d_ap, d_an = dist[rows, pos], dist[rows, neg]
    hinge = d_ap - d_an + m
    active = hinge > 0
    value = float(np.where(active, hinge, 0.0).mean())

    grad = np.zeros_like(F)
    a = np.flatnonzero(active)
    u_ap = (F[a] - F[pos[a]]) / d_ap[a, None]
    u_an = (F[a] - F[neg[a]]) / d_an[a, None]
    grad[a] += u_ap - u_an
    np.add.at(grad, pos[a], -u_ap)
    np.add.at(grad, neg[a], u_an)
    return LossValue(value, grad / n)


def cross_entropy(logits, labels) -> LossValue:
    """Mean softmax cross-entropy; gradient is ``(softmax - onehot) / n``."""
    Z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
        raise DimensionError(f"logits {Z.shape} do not match {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= Z.shape[1]):
        raise LabelError(f"labels must lie in [0, {Z.shape[1]})")
    shifted = Z - Z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_prob = shifted - log_norm[:, None]
    n = Z.shape[0]
    rows = np.arange(n)
    value = float(-log_prob[rows, y].mean())
    grad = np.exp(log_prob)
    grad[rows, y] -= 1.0
    return LossValue(value, grad / n)


@dataclass
class LocalLoss:
    """Total local objective with gradients routed to each input."""

    value: float
    grad_local: np.ndarray
    grad_novel: np.ndarray | None
    grad_others: list[np.ndarray]
    head_W: np.ndarray
    head_b: np.ndarray
    components: dict[str, float] = field(default_factory=dict)


def _hallucinated_term(F, labels, head, m, kind):
    if kind == "triplet":
        res = triplet_loss(F, labels, m)
        return res.value, res.grad, None
    logits = classifier_forward(head, F)
    res = cross_entropy(logits, labels)
    dW, db, dF = classifier_backward(head, F, res.grad)
    return res.value, dF, (dW, db)


def local_loss(
    F_i,
    Y_i,
    F_novel,
    F_others: Sequence,
    head: ClassifierHead,
    lam: float = DEFAULT_LAMBDA,
    m: float = DEFAULT_MARGIN,
    num_domains: int | None = None,
    hallucinated_loss: str = "triplet",
) -> LocalLoss:
    """Original-feature loss plus ``lam`` times the hallucinated-feature losses.

    ``L_tri(F_i) + L_ce(FC(F_i), Y_i) + lam * [L(F_novel) + mean_k L(F_k)]``.
    The average over other domains divides by ``num_domains - 1``, which
    defaults to ``len(F_others)``.  ``F_novel=None`` drops the novel term.
    ``hallucinated_loss="cross_entropy"`` swaps the triplet terms on
    hallucinated batches for classifier cross-entropy (an ablation only).
    """
    if lam < 0:
        raise DomainError(f"balancing factor must be non-negative, got {lam}")
    if hallucinated_loss not in ("triplet", "cross_entropy"):
        raise ValueError(f"unknown hallucinated loss {hallucinated_loss!r}")
    F_i = np.asarray(F_i, dtype=np.float64)
    for F in ([F_novel] if F_novel is not None else []) + list(F_others):
        if np.shape(F) != F_i.shape:
            raise DimensionError(f"hallucinated batch {np.shape(F)} does not match local batch {F_i.shape}")

    tri = triplet_loss(F_i, Y_i, m)
    logits = classifier_forward(head, F_i)
    ce = cross_entropy(logits, Y_i)
    head_W, head_b, d_from_ce = classifier_backward(head, F_i, ce.grad)
    grad_local = tri.grad + d_from_ce
    total = tri.value + ce.value
    components = {"tri_local": tri.value, "ce_local": ce.value}

    grad_novel = None
    if F_novel is not None:
        v, g, hg = _hallucinated_term(F_novel, Y_i, head, m, hallucinated_loss)
        total += lam * v
        grad_novel = lam * g
        components["novel"] = v
        if hg is not None:
            head_W, head_b = head_W + lam * hg[0], head_b + lam * hg[1]

    grad_others = []
    if F_others:
        denom = (num_domains - 1) if num_domains is not None else len(F_others)
        if denom < 1:
            raise DomainError("averaging over other domains needs at least two domains")
        scale = lam / denom
        others_total = 0.0
        for F_k in F_others:
            v, g, hg = _hallucinated_term(F_k, Y_i, head, m, hallucinated_loss)
            others_total += v
            grad_others.append(scale * g)
            if hg is not None:
                head_W, head_b = head_W + scale * hg[0], head_b + scale * hg[1]
        total += scale * others_total
        components["others"] = others_total / denom
    return LocalLoss(total, grad_local, grad_novel, grad_others, head_W, head_b, components)
