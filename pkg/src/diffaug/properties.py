"""Structural graph properties used for filtering and self-labeling.

Six properties per graph: node count, density, network entropy, average
degree, degree variance, and scale-free exponent. Entropy is the Shannon
entropy of the degree-proportional distribution p_i = deg(i) / 2m (natural
log); the exponent is the continuous power-law MLE at d_min = 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .graphs import Graph, GraphCorpus, degree_vector

__all__ = [
    "PropertyVector",
    "NormalizationStats",
    "PROPERTY_NAMES",
    "SCALE_FREE_UNDEFINED",
    "compute_properties",
    "corpus_property_matrix",
    "normalize_properties",
    "apply_normalization",
    "filter_outliers",
    "property_table",
]

PROPERTY_NAMES = (
    "num_nodes",
    "density",
    "network_entropy",
    "avg_degree",
    "degree_variance",
    "scale_free_exponent",
)

# Exponent sentinel for graphs with no edges; defined estimates are > 1.
SCALE_FREE_UNDEFINED = 0.0

# log1p-compress the heavy-tailed scale properties before robust z-scoring
_LOG1P_COLUMNS = (0, 1)


@dataclass(frozen=True)
class PropertyVector:
    num_nodes: int
    density: float
    network_entropy: float
    avg_degree: float
    degree_variance: float
    scale_free_exponent: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                float(self.num_nodes),
                self.density,
                self.network_entropy,
                self.avg_degree,
                self.degree_variance,
                self.scale_free_exponent,
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class NormalizationStats:
    """Per-property robust center (median) and scale (IQR, fallback 1)."""

    center: np.ndarray
    scale: np.ndarray

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            center=np.asarray(d["center"], dtype=np.float64),
            scale=np.asarray(d["scale"], dtype=np.float64),
        )


def compute_properties(g: Graph) -> PropertyVector:
    deg = degree_vector(g).astype(np.float64)
    n, m = g.n, g.m
    density = 2.0 * m / (n * (n - 1)) if n >= 2 else 0.0
    avg_degree = 2.0 * m / n
    degree_variance = float(np.var(deg))

    if m == 0:
        entropy = 0.0
        exponent = SCALE_FREE_UNDEFINED
    else:
        p = deg[deg > 0] / (2.0 * m)
        entropy = float(-np.sum(p * np.log(p)))
        d_pos = deg[deg >= 1.0]
        # continuous MLE with the d_min - 1/2 correction, d_min = 1
        exponent = 1.0 + d_pos.size / float(np.sum(np.log(d_pos / 0.5)))
    return PropertyVector(
        num_nodes=n,
        density=density,
        network_entropy=entropy,
        avg_degree=avg_degree,
        degree_variance=degree_variance,
        scale_free_exponent=exponent,
    )


def corpus_property_matrix(corpus: GraphCorpus) -> np.ndarray:
    return np.stack([compute_properties(g).as_array() for g in corpus.graphs])


def _transform(raw: np.ndarray) -> np.ndarray:
    out = raw.astype(np.float64, copy=True)
    for c in _LOG1P_COLUMNS:
        out[:, c] = np.log1p(out[:, c])
    return out


def normalize_properties(vectors) -> tuple[np.ndarray, NormalizationStats]:
    """Robust z-scores per property: (value - median) / IQR.

    Node count and density are log1p-transformed first. Constant columns
    fall back to scale 1 so the output stays finite.
    """
    if isinstance(vectors, np.ndarray):
        raw = vectors
    else:
        raw = np.stack([v.as_array() for v in vectors])
    if raw.shape[0] < 2:
        raise DataError("need at least 2 property vectors to normalize")
    x = _transform(raw)
    center = np.median(x, axis=0)
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    iqr = q75 - q25
    scale = np.where(iqr > 0, iqr, 1.0)
    return (x - center) / scale, NormalizationStats(center=center, scale=scale)


def apply_normalization(stats: NormalizationStats, v: PropertyVector) -> np.ndarray:
    x = _transform(v.as_array()[None, :])[0]
    return (x - stats.center) / stats.scale


def filter_outliers(corpus: GraphCorpus, z_max: float = 3.0,
                    density_max: float = 0.9):
    """Drop graphs whose robust z-scores or raw density are extreme.

    Keeps graphs with ||z||_inf <= z_max and density <= density_max.
    Returns (filtered corpus, rejection records).
    """
    if len(corpus) == 0:
        raise DataError("cannot filter an empty corpus")
    if not z_max > 0:
        raise DataError(f"z_max must be > 0, got {z_max}")
    if not 0 < density_max <= 1:
        raise DataError(f"density_max must be in (0, 1], got {density_max}")

    raw = corpus_property_matrix(corpus)
    if len(corpus) >= 2:
        z, _ = normalize_properties(raw)
        z_inf = np.max(np.abs(z), axis=1)
    else:
        z_inf = np.zeros(len(corpus))

    kept, rejected = [], []
    for i in range(len(corpus)):
        density = raw[i, 1]
        if density > density_max:
            rejected.append({"index": i, "reason": "density", "value": float(density)})
        elif z_inf[i] > z_max:
            rejected.append({"index": i, "reason": "z_score", "value": float(z_inf[i])})
        else:
            kept.append(i)
    return corpus.subset(kept), rejected


def property_table(corpus: GraphCorpus) -> str:
    """Tab-separated table, one row per graph, header naming the properties."""
    lines = ["id\t" + "\t".join(PROPERTY_NAMES)]
    for i, g in enumerate(corpus.graphs):
        v = compute_properties(g).as_array()
        lines.append(str(i) + "\t" + "\t".join(repr(float(x)) for x in v))
    return "\n".join(lines) + "\n"
