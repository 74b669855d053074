"""Prototypical loss, class centroids, cosine distance and NCC accuracy.

Plain-numpy versions are used wherever only values are needed (accuracy,
support-loss comparisons); ``episode_loss`` builds the same quantity on a
tape so gradients flow through both the query embeddings and the
support-derived centroids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    cosine_distance_matrix,
    matmul_const,
    softmax_nll_from_distances,
)


def cosine_distance(u, v) -> float:
    """1 - cos(u, v); returns 1.0 by convention if either vector has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 1.0
    return float(1.0 - (u @ v) / (nu * nv))


@dataclass
class CentroidSet:
    """Per-class mean embeddings; labels are kept sorted ascending."""

    labels: np.ndarray
    centroids: np.ndarray

    def __post_init__(self) -> None:
        if len(self.labels) != self.centroids.shape[0]:
            raise ValueError("one centroid per label required")


def averaging_matrix(labels: np.ndarray, label_order: np.ndarray) -> np.ndarray:
    """M such that M @ embeddings gives per-class means, rows in label_order."""
    n = len(labels)
    m = np.zeros((len(label_order), n), dtype=np.float64)
    for row, label in enumerate(label_order):
        members = np.flatnonzero(labels == label)
        if members.size == 0:
            raise ValueError(f"label {label} has no members")
        m[row, members] = 1.0 / members.size
    return m


def class_centroids(embeddings: np.ndarray, labels) -> CentroidSet:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ValueError("embeddings must be a non-empty [n, d] array")
    if labels.shape != (embeddings.shape[0],):
        raise ValueError("one label per embedding row required")
    order = np.unique(labels)
    m = averaging_matrix(labels, order)
    return CentroidSet(labels=order, centroids=m @ embeddings)


def _target_rows(query_labels: np.ndarray, label_order: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(label_order, query_labels)
    bad = (idx >= len(label_order)) | (label_order[np.minimum(idx, len(label_order) - 1)] != query_labels)
    if bad.any():
        missing = np.unique(np.asarray(query_labels)[bad])
        raise ValueError(f"query labels without a support centroid: {missing.tolist()}")
    return idx


def _plain_distance_matrix(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(q, axis=1)
    cn = np.linalg.norm(c, axis=1)
    qs = np.where(qn == 0.0, 1.0, qn)
    cs = np.where(cn == 0.0, 1.0, cn)
    cos = (q @ c.T) / (qs[:, None] * cs[None, :])
    zero_mask = (qn == 0.0)[:, None] | (cn == 0.0)[None, :]
    if zero_mask.any():
        cos = np.where(zero_mask, 0.0, cos)
    return 1.0 - cos


def proto_loss(query_emb: np.ndarray, query_labels, cset: CentroidSet) -> float:
    """Mean negative log softmax over -cosine-distance logits at the true class."""
    query_emb = np.asarray(query_emb, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    if len(cset.labels) < 2:
        raise ValueError("at least two classes required")
    targets = _target_rows(query_labels, cset.labels)
    logits = -_plain_distance_matrix(query_emb, cset.centroids)
    shift = logits - logits.max(axis=1, keepdims=True)
    log_probs = shift - np.log(np.exp(shift).sum(axis=1))[:, None]
    return float(-log_probs[np.arange(len(targets)), targets].mean())


def ncc_accuracy(query_emb: np.ndarray, query_labels, cset: CentroidSet) -> float:
    """Fraction of queries whose nearest centroid (cosine) carries the true label.

    Argmin ties resolve to the lowest label index (labels are sorted).
    """
    query_emb = np.asarray(query_emb, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    if len(cset.labels) < 2:
        raise ValueError("at least two classes required")
    _target_rows(query_labels, cset.labels)
    dist = _plain_distance_matrix(query_emb, cset.centroids)
    predicted = cset.labels[dist.argmin(axis=1)]
    return float((predicted == query_labels).mean())


@dataclass
class EpisodeLossPlan:
    """Precomputed label bookkeeping, reusable across gradient steps."""

    averaging: np.ndarray
    targets: np.ndarray


def episode_loss_plan(support_labels, query_labels) -> EpisodeLossPlan:
    support_labels = np.asarray(support_labels)
    query_labels = np.asarray(query_labels)
    order = np.unique(support_labels)
    if len(order) < 2:
        raise ValueError("at least two classes required")
    return EpisodeLossPlan(
        averaging=averaging_matrix(support_labels, order),
        targets=_target_rows(query_labels, order),
    )


def episode_loss_from_plan(
    tape: Tape, support_emb: Tensor, query_emb: Tensor, plan: EpisodeLossPlan
) -> Tensor:
    centroids = matmul_const(plan.averaging, support_emb, tape)
    dist = cosine_distance_matrix(query_emb, centroids, tape)
    return softmax_nll_from_distances(dist, plan.targets, tape)


def episode_loss(
    tape: Tape,
    support_emb: Tensor,
    support_labels,
    query_emb: Tensor,
    query_labels,
) -> Tensor:
    """Differentiable prototypical loss; centroids built from the support embeddings."""
    plan = episode_loss_plan(support_labels, query_labels)
    return episode_loss_from_plan(tape, support_emb, query_emb, plan)
