"""Self-supervised corpus annotation via k-means over property vectors.

The cluster count is chosen among candidates by the mean silhouette
coefficient; graphs are then labeled by their cluster, and unseen graphs by
the nearest centroid. Everything is seeded and single-threaded so refits
are bitwise reproducible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .graphs import Graph, GraphCorpus
from .properties import (
    NormalizationStats,
    PropertyVector,
    apply_normalization,
    compute_properties,
    corpus_property_matrix,
    normalize_properties,
)

log = logging.getLogger(__name__)

__all__ = [
    "ClusterModel",
    "kmeans",
    "mean_silhouette",
    "fit_clusters",
    "assign_label",
    "annotate_corpus",
]

DEFAULT_CANDIDATE_KS = tuple(range(2, 11))


@dataclass(frozen=True)
class ClusterModel:
    k: int
    centroids: np.ndarray
    normalization: NormalizationStats
    silhouette: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "centroids": self.centroids.tolist(),
            "normalization": self.normalization.to_dict(),
            "silhouette": self.silhouette,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        return cls(
            k=int(d["k"]),
            centroids=np.asarray(d["centroids"], dtype=np.float64),
            normalization=NormalizationStats.from_dict(d["normalization"]),
            silhouette=float(d["silhouette"]),
            seed=int(d["seed"]),
        )


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ties break toward the lower cluster index via argmin
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _kmeans_once(x: np.ndarray, k: int, rng: np.random.Generator,
                 max_iter: int = 300):
    n = x.shape[0]
    # k-means++ seeding
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1))

    labels = _assign(x, centroids)
    for _ in range(max_iter):
        new_centroids = centroids.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:
                # revive an empty cluster with the worst-fit point
                d2 = ((x - new_centroids[labels]) ** 2).sum(axis=1)
                new_centroids[j] = x[int(np.argmax(d2))]
        new_labels = _assign(x, new_centroids)
        centroids = new_centroids
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return centroids, labels, inertia


def kmeans(x: np.ndarray, k: int, seed: int, restarts: int = 10):
    """Best of `restarts` seeded k-means++ runs by inertia (first wins ties)."""
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centroids, labels, inertia = _kmeans_once(x, k, rng)
        if best is None or inertia < best[2]:
            best = (centroids, labels, inertia)
    return best


def mean_silhouette(x: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient; singleton clusters score 0."""
    n = x.shape[0]
    dist = np.sqrt(np.maximum(
        ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2), 0.0))
    uniq = np.unique(labels)
    scores = np.zeros(n)
    for i in range(n):
        own = labels[i]
        same = labels == own
        n_same = same.sum()
        if n_same <= 1:
            scores[i] = 0.0
            continue
        a = dist[i, same].sum() / (n_same - 1)
        b = np.inf
        for c in uniq:
            if c == own:
                continue
            mask = labels == c
            b = min(b, dist[i, mask].mean())
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def fit_clusters(vs: np.ndarray, candidate_ks=DEFAULT_CANDIDATE_KS,
                 seed: int = 0,
                 normalization: NormalizationStats | None = None) -> ClusterModel:
    """Select the cluster count by mean silhouette (ties -> smaller K).

    `vs` is a normalized property matrix; pass the matching
    NormalizationStats so the model can label unseen graphs later.
    """
    vs = np.asarray(vs, dtype=np.float64)
    candidate_ks = sorted(set(int(k) for k in candidate_ks))
    if not candidate_ks:
        raise DataError("candidate_ks must not be empty")
    if min(candidate_ks) < 2:
        raise DataError("candidate cluster counts must be >= 2")
    if max(candidate_ks) >= vs.shape[0]:
        raise DataError(
            f"candidate K={max(candidate_ks)} needs more than {vs.shape[0]} rows"
        )

    best = None
    for k in candidate_ks:
        centroids, labels, _ = kmeans(vs, k, seed=seed)
        sil = mean_silhouette(vs, labels)
        pairwise = np.sqrt(
            ((centroids[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2))
        separation = float(pairwise[np.triu_indices(k, 1)].min())
        log.info("k=%d silhouette=%.4f min-centroid-separation=%.4f",
                 k, sil, separation)
        if best is None or sil > best[0]:
            best = (sil, k, centroids)
    sil, k, centroids = best
    if normalization is None:
        normalization = NormalizationStats(
            center=np.zeros(vs.shape[1]), scale=np.ones(vs.shape[1]))
    return ClusterModel(k=k, centroids=centroids, normalization=normalization,
                        silhouette=sil, seed=seed)


def assign_label(model: ClusterModel, v) -> int:
    """Nearest-centroid label for a PropertyVector (or raw graph)."""
    if isinstance(v, Graph):
        v = compute_properties(v)
    if isinstance(v, PropertyVector):
        z = apply_normalization(model.normalization, v)
    else:
        z = np.asarray(v, dtype=np.float64)
    d2 = ((model.centroids - z[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def annotate_corpus(corpus: GraphCorpus, candidate_ks=DEFAULT_CANDIDATE_KS,
                    seed: int = 0) -> tuple[GraphCorpus, ClusterModel]:
    """Fit the annotator on a corpus and attach cluster labels."""
    raw = corpus_property_matrix(corpus)
    z, stats = normalize_properties(raw)
    model = fit_clusters(z, candidate_ks=candidate_ks, seed=seed,
                         normalization=stats)
    labels = _assign(z, model.centroids)
    annotated = GraphCorpus(
        graphs=list(corpus.graphs),
        manifest=[dict(r) for r in corpus.manifest],
        cluster_labels=labels.astype(np.int64),
    )
    return annotated, model
