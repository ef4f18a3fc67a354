"""Deterministic toy graphs bundled for smoke runs and tests."""
from __future__ import annotations

import numpy as np

from .graphs import Graph, GraphCorpus

__all__ = [
    "path_graph",
    "cycle_graph",
    "star_graph",
    "complete_graph",
    "grid_graph",
    "random_tree",
    "er_graph",
    "near_clique",
    "make_toy_corpus",
    "make_motif_corpus",
    "make_toy_graph_dataset",
    "make_toy_node_graph",
    "make_toy_link_graph",
]


def path_graph(n: int) -> Graph:
    return Graph(n=n, edges=frozenset((i, i + 1) for i in range(n - 1)))


def cycle_graph(n: int) -> Graph:
    edges = {(i, (i + 1) % n) for i in range(n)}
    return Graph(n=n, edges=frozenset(tuple(sorted(e)) for e in edges))


def star_graph(n: int, center: int = 0) -> Graph:
    edges = {tuple(sorted((center, i))) for i in range(n) if i != center}
    return Graph(n=n, edges=frozenset(edges))


def complete_graph(n: int) -> Graph:
    return Graph(n=n, edges=frozenset(
        (i, j) for i in range(n) for j in range(i + 1, n)))


def grid_graph(rows: int, cols: int) -> Graph:
    edges = set()
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.add((v, v + 1))
            if r + 1 < rows:
                edges.add((v, v + cols))
    return Graph(n=rows * cols, edges=frozenset(edges))


def random_tree(n: int, rng: np.random.Generator) -> Graph:
    """Uniform random recursive tree (each node attaches to an earlier one)."""
    edges = {(int(rng.integers(0, i)), i) for i in range(1, n)}
    return Graph(n=n, edges=frozenset(edges))


def er_graph(n: int, p: float, rng: np.random.Generator) -> Graph:
    iu = np.triu_indices(n, k=1)
    mask = rng.random(len(iu[0])) < p
    edges = {(int(a), int(b)) for a, b in zip(iu[0][mask], iu[1][mask])}
    return Graph(n=n, edges=frozenset(edges))


def near_clique(n: int, drop: int, rng: np.random.Generator) -> Graph:
    """Complete graph with `drop` random edges removed."""
    g = complete_graph(n)
    edges = sorted(g.edges)
    keep = rng.choice(len(edges), size=len(edges) - drop, replace=False)
    return Graph(n=n, edges=frozenset(edges[i] for i in sorted(keep)))


def make_toy_corpus(num: int = 20, seed: int = 0,
                    include_clique: bool = True) -> GraphCorpus:
    """Mixed-motif corpus: paths, cycles, stars, trees, grids, sparse ER,
    near-cliques, and (optionally) one full clique for filter demos."""
    rng = np.random.default_rng(seed)
    makers = [
        lambda: path_graph(int(rng.integers(8, 16))),
        lambda: cycle_graph(int(rng.integers(8, 16))),
        lambda: star_graph(int(rng.integers(8, 16))),
        lambda: random_tree(int(rng.integers(10, 20)), rng),
        lambda: grid_graph(3, int(rng.integers(3, 6))),
        lambda: er_graph(int(rng.integers(10, 18)), 0.2, rng),
        lambda: near_clique(int(rng.integers(8, 12)), 4, rng),
    ]
    graphs = []
    manifest = []
    domains = ["path", "cycle", "star", "tree", "grid", "er", "near_clique"]
    budget = num - 1 if include_clique else num
    for i in range(budget):
        j = i % len(makers)
        g = makers[j]()
        graphs.append(g)
        manifest.append({"id": i, "source": f"toy/{domains[j]}/{i}",
                         "domain": domains[j], "n": g.n, "m": g.m})
    if include_clique:
        g = complete_graph(10)
        graphs.append(g)
        manifest.append({"id": budget, "source": "toy/clique/0",
                         "domain": "clique", "n": g.n, "m": g.m})
    return GraphCorpus(graphs=graphs, manifest=manifest)


def make_motif_corpus(copies: int, seed: int = 0) -> GraphCorpus:
    """`copies` graphs cycling through three distinct 12-node motifs."""
    motifs = [grid_graph(3, 4), cycle_graph(12), star_graph(12)]
    names = ["grid3x4", "cycle12", "star12"]
    graphs, manifest = [], []
    for i in range(copies):
        j = i % 3
        g = motifs[j]
        graphs.append(g)
        manifest.append({"id": i, "source": f"motif/{names[j]}/{i}",
                         "domain": names[j], "n": g.n, "m": g.m})
    return GraphCorpus(graphs=graphs, manifest=manifest)


def make_toy_graph_dataset(per_class: int = 12, seed: int = 0,
                           feat_dim: int = 4) -> list:
    """Two-class graph classification set: sparse trees vs dense near-cliques."""
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(per_class):
        n = int(rng.integers(8, 14))
        g = random_tree(n, rng)
        graphs.append(Graph(n=g.n, edges=g.edges,
                            node_features=rng.standard_normal((g.n, feat_dim)),
                            graph_label=0))
    for _ in range(per_class):
        n = int(rng.integers(8, 14))
        g = near_clique(n, 3, rng)
        graphs.append(Graph(n=g.n, edges=g.edges,
                            node_features=rng.standard_normal((g.n, feat_dim)),
                            graph_label=1))
    order = rng.permutation(len(graphs))
    return [graphs[i] for i in order]


def make_toy_node_graph(n: int = 40, seed: int = 0, feat_dim: int = 4,
                        p_in: float = 0.25, p_out: float = 0.03) -> Graph:
    """Two-block SBM with block-aligned labels and gaussian features."""
    rng = np.random.default_rng(seed)
    labels = np.array([0] * (n // 2) + [1] * (n - n // 2), dtype=np.int64)
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            p = p_in if labels[i] == labels[j] else p_out
            if rng.random() < p:
                edges.add((i, j))
    feats = rng.standard_normal((n, feat_dim)) + labels[:, None] * 0.5
    return Graph(n=n, edges=frozenset(edges), node_features=feats,
                 node_labels=labels)


def make_toy_link_graph(n: int = 40, seed: int = 0, p: float = 0.12) -> Graph:
    rng = np.random.default_rng(seed)
    g = er_graph(n, p, rng)
    # keep it connected enough for GCN message passing
    extra = {(i, i + 1) for i in range(0, n - 1, 2)}
    return Graph(n=n, edges=frozenset(set(g.edges) | extra))
