"""Cluster-semantic space.

Operates on the vocabulary distributions read at the masked position:
refines them with a tri-view self-contrastive loss, clusters each view
with K-means, soft-assigns instances to centroids through a Student's-t
kernel (one degree of freedom), estimates how many relations the
unlabeled pool holds, and surfaces the most probable relational words.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch


class SemanticSpaceError(ValueError):
    pass


def self_contrastive_loss(
    dists: torch.Tensor,
    tau: float,
    exclude_self: bool = False,
) -> torch.Tensor:
    """Tri-view self-contrastive loss over word distributions.

    ``dists`` has shape [3, N, V]: for each anchor view vector the other
    two views of the same instance are positives, and the denominator sums
    dot-product similarities (at temperature ``tau``) over all 3N view
    vectors in the batch, the anchor itself included unless
    ``exclude_self``. Returns the mean over all 3N anchors.
    """
    if tau <= 0:
        raise SemanticSpaceError(f"temperature must be positive, got {tau}")
    if dists.ndim != 3 or dists.shape[0] != 3:
        raise SemanticSpaceError(f"expected [3, N, V] view tensor, got {tuple(dists.shape)}")
    n_views, n, _ = dists.shape
    flat = dists.reshape(n_views * n, -1)
    sim = flat @ flat.T / tau  # [3N, 3N], anchor (m, i) at row m * N + i

    total = n_views * n
    anchor_view = torch.arange(total, device=flat.device) // n
    anchor_inst = torch.arange(total, device=flat.device) % n
    same_inst = anchor_inst.unsqueeze(1) == anchor_inst.unsqueeze(0)
    same_view = anchor_view.unsqueeze(1) == anchor_view.unsqueeze(0)
    pos_mask = same_inst & ~same_view

    neg_inf = torch.finfo(sim.dtype).min
    denom_sim = sim
    if exclude_self:
        denom_sim = sim.masked_fill(torch.eye(total, dtype=torch.bool, device=sim.device), neg_inf)
    log_denom = torch.logsumexp(denom_sim, dim=1)
    log_num = torch.logsumexp(sim.masked_fill(~pos_mask, neg_inf), dim=1)
    return (log_denom - log_num).mean()


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: tuple[float, ...]


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        (points * points).sum(axis=1)[:, None]
        + (centers * centers).sum(axis=1)[None, :]
        - 2.0 * points @ centers.T
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = _squared_distances(points, centers[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _squared_distances(points, centers[j : j + 1]).ravel())
    return centers


def _lloyd(
    points: np.ndarray, centers: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, float, int, list[float]]:
    k = centers.shape[0]
    history: list[float] = []
    labels = np.zeros(points.shape[0], dtype=np.int64)
    for iteration in range(1, max_iter + 1):
        d2 = _squared_distances(points, centers)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(points.shape[0]), labels].sum()))
        new_centers = centers.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centers[c] = points[members].mean(axis=0)
        empty = [c for c in range(k) if not (labels == c).any()]
        if empty:
            # Re-seed empty clusters on the points worst served right now.
            worst = np.argsort(-d2[np.arange(points.shape[0]), labels])
            for c, idx in zip(empty, worst):
                new_centers[c] = points[idx]
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = _squared_distances(points, centers)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(points.shape[0]), labels].sum())
    return centers, labels, inertia, iteration, history


def fit_centroids(
    dists: np.ndarray,
    n_clusters: int,
    seed: int,
    n_init: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> KMeansResult:
    """K-means over word distributions: k-means++ seeding, ``n_init``
    restarts, keep the lowest-inertia run. Converges when the largest
    centroid shift drops below ``tol`` or after ``max_iter`` sweeps."""
    points = np.asarray(dists, dtype=np.float64)
    if points.ndim != 2:
        raise SemanticSpaceError(f"expected [N, V] points, got shape {points.shape}")
    if n_clusters < 1:
        raise SemanticSpaceError(f"n_clusters must be >= 1, got {n_clusters}")
    if points.shape[0] < n_clusters:
        raise SemanticSpaceError(
            f"cannot fit {n_clusters} clusters to {points.shape[0]} points"
        )
    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(n_init):
        init = _kmeans_pp_init(points, n_clusters, rng)
        centers, labels, inertia, n_iter, history = _lloyd(points, init, max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(centers, labels, inertia, n_iter, tuple(history))
    assert best is not None
    return best


def soft_assign(dists: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Student's-t similarity (one degree of freedom) between instances
    and centroids, normalized per instance:
    p_c = (1 + ||v - mu_c||^2)^-1 / sum_c' (1 + ||v - mu_c'||^2)^-1."""
    v = np.asarray(dists, dtype=np.float64)
    mu = np.asarray(centroids, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[None, :]
    if v.shape[1] != mu.shape[1]:
        raise SemanticSpaceError(
            f"dimension mismatch: points have {v.shape[1]}, centroids {mu.shape[1]}"
        )
    q = 1.0 / (1.0 + _squared_distances(v, mu))
    q /= q.sum(axis=1, keepdims=True)
    return q[0] if single else q


def hard_labels(assignments: np.ndarray) -> np.ndarray:
    """Cluster label per row: the argmax, lowest index on ties."""
    p = np.asarray(assignments)
    return np.argmax(p, axis=-1)


def estimate_relation_count(
    dists: np.ndarray,
    k_init: int,
    seed: int,
    n_init: int = 10,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> int:
    """Estimate how many relations the pool holds.

    Over-cluster with ``k_init`` centers, then drop every cluster smaller
    than the expected average size N / k_init; the survivors are the
    estimate.
    """
    points = np.asarray(dists, dtype=np.float64)
    if k_init < 1:
        raise SemanticSpaceError(f"k_init must be >= 1, got {k_init}")
    if k_init > points.shape[0]:
        raise SemanticSpaceError(
            f"k_init={k_init} exceeds the {points.shape[0]} available instances"
        )
    result = fit_centroids(points, k_init, seed, n_init=n_init, max_iter=max_iter, tol=tol)
    sizes = np.bincount(result.labels, minlength=k_init)
    threshold = points.shape[0] / k_init
    return int((sizes >= threshold).sum())


def top_relational_words(dist: np.ndarray, k: int, vocab: Sequence[str]) -> list[str]:
    """The k most probable vocabulary words, descending; ties go to the
    lower vocabulary index."""
    p = np.asarray(dist)
    if p.ndim != 1 or len(vocab) != p.shape[0]:
        raise SemanticSpaceError("distribution and vocabulary sizes disagree")
    if k < 1 or k > p.shape[0]:
        raise SemanticSpaceError(f"k must be in [1, {p.shape[0]}], got {k}")
    order = np.lexsort((np.arange(p.shape[0]), -p))
    return [vocab[i] for i in order[:k]]


def cluster_word_report(
    dists: np.ndarray,
    labels: np.ndarray,
    vocab: Sequence[str],
    per_instance_top: int = 3,
    report_k: int = 3,
) -> dict[int, list[tuple[str, int]]]:
    """Per-cluster word frequencies: how often each word lands in an
    instance's top-``per_instance_top``, reported as the ``report_k`` most
    frequent words per cluster."""
    dists = np.asarray(dists)
    labels = np.asarray(labels)
    index = {w: i for i, w in enumerate(vocab)}
    report: dict[int, list[tuple[str, int]]] = {}
    for cluster in sorted(set(labels.tolist())):
        counts: dict[str, int] = {}
        for row in dists[labels == cluster]:
            for word in top_relational_words(row, per_instance_top, vocab):
                counts[word] = counts.get(word, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], index[kv[0]]))
        report[int(cluster)] = ranked[:report_k]
    return report


def write_word_report(
    report: Mapping[int, Sequence[tuple[str, int]]], path: str | Path
) -> None:
    """UTF-8 TSV rows: cluster_id, word, frequency."""
    lines = ["cluster_id\tword\tfrequency"]
    for cluster in sorted(report):
        for word, freq in report[cluster]:
            lines.append(f"{cluster}\t{word}\t{freq}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
