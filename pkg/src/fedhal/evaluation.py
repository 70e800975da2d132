"""Retrieval evaluation on the held-out domain: mAP and CMC / rank-1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedhal.data import DomainDataset
from fedhal.errors import DimensionError, EvaluationError
from fedhal.model import EVAL, ModelParams, forward


@dataclass
class RankingResult:
    ranked_gallery: np.ndarray
    average_precision: np.ndarray
    mAP: float
    cmc: np.ndarray

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def rank(self, k: int) -> float:
        """Top-``k`` match rate (1-indexed)."""
        return float(self.cmc[k - 1])


def extract_embeddings(model: ModelParams, ds: DomainDataset | np.ndarray) -> np.ndarray:
    """Raw pre-BN embeddings in eval mode; the model is not modified."""
    X = ds.samples if isinstance(ds, DomainDataset) else np.asarray(ds, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimensionError(f"model expects width {model.input_dim}, data has shape {X.shape}")
    features, _ = forward(model, X, mode=EVAL)
    return features


def distance_matrix(query: np.ndarray, gallery: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    if metric == "euclidean":
        # Direct differences rather than the |q|^2 + |g|^2 - 2qg expansion so
        # exact duplicates land at distance 0 and rankings stay reproducible.
        return np.sqrt(((query[:, None, :] - gallery[None, :, :]) ** 2).sum(axis=-1))
    if metric == "cosine":
        qn = query / np.maximum(np.linalg.norm(query, axis=1, keepdims=True), 1e-12)
        gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    raise ValueError(f"unknown metric {metric!r}")


def retrieval_eval(
    query_features, query_labels, gallery_features, gallery_labels, metric: str = "euclidean"
) -> RankingResult:
    """Rank the gallery for every query and score it.

    AP of a query is the mean, over the ranks r holding a relevant item, of
    (relevant items within the top r) / r.  Sorting is stable, so equal
    distances keep gallery order.
    """
    qf = np.asarray(query_features, dtype=np.float64)
    gf = np.asarray(gallery_features, dtype=np.float64)
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    if qf.ndim != 2 or gf.ndim != 2 or qf.shape[1] != gf.shape[1]:
        raise DimensionError(f"query {qf.shape} and gallery {gf.shape} widths differ")
    if qf.shape[0] != ql.shape[0] or gf.shape[0] != gl.shape[0]:
        raise DimensionError("feature rows and labels disagree in count")
    absent = set(ql.tolist()) - set(gl.tolist())
    if absent:
        raise EvaluationError(f"query labels {sorted(absent)[:5]} are absent from the gallery")

    dist = distance_matrix(qf, gf, metric)
    order = np.argsort(dist, axis=1, kind="stable")
    matches = gl[order] == ql[:, None]
    hits = np.cumsum(matches, axis=1)
    ranks = np.arange(1, gf.shape[0] + 1)
    ap = (matches * hits / ranks).sum(axis=1) / matches.sum(axis=1)
    cmc = (hits > 0).mean(axis=0)
    return RankingResult(order, ap, float(ap.mean()), cmc)
