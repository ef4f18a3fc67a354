"""Sparse undirected graphs, corpora, ego subgraphs, and partitions.

Graphs are immutable after construction and store edges canonically as
upper-triangle pairs (i < j). All loaders symmetrize directed input and
drop self-loops / duplicate edges.
"""
from __future__ import annotations

import collections
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

__all__ = [
    "Graph",
    "GraphCorpus",
    "EgoSubgraph",
    "Partition",
    "load_edge_list",
    "load_tu_corpus",
    "degree_vector",
    "extract_ego_subgraph",
    "partition_graph",
    "assemble_partitions",
    "permute_graph",
    "save_manifest",
    "load_manifest",
]


def _canonical_edges(edges, n: int) -> frozenset:
    canon = set()
    for u, v in edges:
        u, v = int(u), int(v)
        if u == v:
            raise DataError(f"self-loop ({u},{v}) not allowed")
        if not (0 <= u < n and 0 <= v < n):
            raise DataError(f"edge ({u},{v}) out of range for n={n}")
        canon.add((u, v) if u < v else (v, u))
    return frozenset(canon)


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected simple graph.

    Edges are stored as a frozenset of (i, j) pairs with i < j.
    Optional per-node features / labels and a graph-level label ride along
    so augmentation can reattach them to generated structures.
    """

    n: int
    edges: frozenset
    node_features: np.ndarray | None = None
    node_labels: np.ndarray | None = None
    graph_label: object = None

    def __post_init__(self):
        if self.n < 1:
            raise DataError(f"node count must be >= 1, got {self.n}")
        object.__setattr__(self, "edges", _canonical_edges(self.edges, self.n))
        if self.node_features is not None:
            feats = np.asarray(self.node_features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != self.n:
                raise DataError(
                    f"node_features must be (n, f), got {feats.shape} for n={self.n}"
                )
            object.__setattr__(self, "node_features", feats)
        if self.node_labels is not None:
            labels = np.asarray(self.node_labels, dtype=np.int64)
            if labels.shape != (self.n,):
                raise DataError(
                    f"node_labels must have length n={self.n}, got {labels.shape}"
                )
            object.__setattr__(self, "node_labels", labels)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def edge_array(self) -> np.ndarray:
        """Edges as a sorted (m, 2) int64 array; cached."""
        cached = self.__dict__.get("_edge_array")
        if cached is None:
            if self.edges:
                cached = np.array(sorted(self.edges), dtype=np.int64)
            else:
                cached = np.zeros((0, 2), dtype=np.int64)
            object.__setattr__(self, "_edge_array", cached)
        return cached

    def neighbor_sets(self) -> list[set]:
        cached = self.__dict__.get("_neighbor_sets")
        if cached is None:
            cached = [set() for _ in range(self.n)]
            for u, v in self.edges:
                cached[u].add(v)
                cached[v].add(u)
            object.__setattr__(self, "_neighbor_sets", cached)
        return cached

    def with_edges(self, edges) -> "Graph":
        """Same node set and metadata, different structure."""
        return Graph(
            n=self.n,
            edges=frozenset(edges),
            node_features=self.node_features,
            node_labels=self.node_labels,
            graph_label=self.graph_label,
        )

    def __repr__(self):
        return f"Graph(n={self.n}, m={self.m})"


@dataclass
class GraphCorpus:
    """Ordered collection of graphs with a per-graph manifest.

    Manifest records are dicts with keys {id, source, domain, n, m};
    cluster_labels is filled by the annotator.
    """

    graphs: list
    manifest: list = field(default_factory=list)
    cluster_labels: np.ndarray | None = None

    def __post_init__(self):
        if not self.manifest:
            self.manifest = [
                {"id": i, "source": "memory", "domain": "unknown", "n": g.n, "m": g.m}
                for i, g in enumerate(self.graphs)
            ]
        if len(self.manifest) != len(self.graphs):
            raise DataError(
                f"manifest length {len(self.manifest)} != graph count {len(self.graphs)}"
            )
        if self.cluster_labels is not None:
            labels = np.asarray(self.cluster_labels, dtype=np.int64)
            if labels.shape != (len(self.graphs),):
                raise DataError("cluster_labels length must equal graph count")
            if labels.size and labels.min() < 0:
                raise DataError("cluster labels must be non-negative")
            self.cluster_labels = labels

    def __len__(self):
        return len(self.graphs)

    def subset(self, indices) -> "GraphCorpus":
        indices = list(indices)
        return GraphCorpus(
            graphs=[self.graphs[i] for i in indices],
            manifest=[dict(self.manifest[i]) for i in indices],
            cluster_labels=(
                self.cluster_labels[indices] if self.cluster_labels is not None else None
            ),
        )


@dataclass(frozen=True)
class EgoSubgraph:
    """Induced subgraph of all nodes within hop_radius of a center node.

    The center is local index 0; origin records (source graph id, source
    node id) so augmented copies can be traced back.
    """

    graph: Graph
    center: int
    hop_radius: int
    origin: tuple


@dataclass(frozen=True)
class Partition:
    """Blocks of a graph plus the edges crossing between blocks.

    Each block is (Graph, local->global index map). Every source edge lives
    in exactly one block or in cut_edges.
    """

    blocks: tuple
    cut_edges: tuple


def load_edge_list(path, n_hint: int | None = None) -> Graph:
    """Read a whitespace-separated edge list ('#' starts a comment line).

    Node count is max index + 1, or n_hint if larger. Duplicate and
    reversed-duplicate edges collapse; self-loops are dropped (logged).
    """
    edges = set()
    max_idx = -1
    dropped = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two indices, got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer entry in {line!r}") from None
            if u < 0 or v < 0:
                raise DataError(f"{path}:{lineno}: negative node index in {line!r}")
            if u == v:
                dropped += 1
                continue
            edges.add((u, v) if u < v else (v, u))
            max_idx = max(max_idx, u, v)
    if not edges:
        raise DataError(f"{path}: no edges found")
    if dropped:
        log.warning("%s: dropped %d self-loop(s)", path, dropped)
    n = max_idx + 1
    if n_hint is not None:
        n = max(n, int(n_hint))
    return Graph(n=n, edges=frozenset(edges))


def _read_int_lines(path, what: str) -> list[int]:
    vals = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                vals.append(int(float(line)))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad {what} value {line!r}") from None
    return vals


def load_tu_corpus(directory) -> GraphCorpus:
    """Load a TUDataset-style flat directory (DS_A.txt etc., 1-indexed).

    Required: <name>_A.txt and <name>_graph_indicator.txt. Optional:
    graph labels, node labels, node attributes. Indices are converted to
    0-indexed local node ids per graph.
    """
    directory = str(directory)
    files = os.listdir(directory)
    a_files = [f for f in files if f.endswith("_A.txt")]
    if not a_files:
        raise DataError(f"{directory}: missing *_A.txt edge file")
    name = a_files[0][: -len("_A.txt")]
    path = lambda suffix: os.path.join(directory, f"{name}_{suffix}.txt")

    if not os.path.exists(path("graph_indicator")):
        raise DataError(f"{directory}: missing {name}_graph_indicator.txt")
    indicator = _read_int_lines(path("graph_indicator"), "graph indicator")
    num_nodes = len(indicator)
    num_graphs = max(indicator)
    if min(indicator) < 1:
        raise DataError(f"{path('graph_indicator')}: graph ids must be >= 1")

    # global node id (1-indexed) -> (graph index, local id)
    local_id = np.zeros(num_nodes + 1, dtype=np.int64)
    graph_of = np.zeros(num_nodes + 1, dtype=np.int64)
    counts = collections.Counter()
    for node, gid in enumerate(indicator, start=1):
        graph_of[node] = gid - 1
        local_id[node] = counts[gid]
        counts[gid] += 1
    sizes = [counts[g + 1] for g in range(num_graphs)]

    edge_sets = [set() for _ in range(num_graphs)]
    with open(path("A")) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise DataError(f"{path('A')}:{lineno}: expected two indices")
            u, v = int(parts[0]), int(parts[1])
            if not (1 <= u <= num_nodes and 1 <= v <= num_nodes):
                raise DataError(f"{path('A')}:{lineno}: node id out of range")
            if graph_of[u] != graph_of[v]:
                raise DataError(
                    f"{path('A')}:{lineno}: edge ({u},{v}) crosses graphs "
                    f"{graph_of[u] + 1} and {graph_of[v] + 1}"
                )
            if u == v:
                continue
            a, b = int(local_id[u]), int(local_id[v])
            edge_sets[graph_of[u]].add((a, b) if a < b else (b, a))

    graph_labels = None
    if os.path.exists(path("graph_labels")):
        graph_labels = _read_int_lines(path("graph_labels"), "graph label")
        if len(graph_labels) != num_graphs:
            raise DataError(
                f"{path('graph_labels')}: {len(graph_labels)} labels for {num_graphs} graphs"
            )

    node_labels = None
    if os.path.exists(path("node_labels")):
        node_labels = _read_int_lines(path("node_labels"), "node label")
        if len(node_labels) != num_nodes:
            raise DataError(
                f"{path('node_labels')}: {len(node_labels)} labels for {num_nodes} nodes"
            )

    node_attrs = None
    if os.path.exists(path("node_attributes")):
        node_attrs = []
        with open(path("node_attributes")) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    node_attrs.append([float(x) for x in line.replace(",", " ").split()])
                except ValueError:
                    raise DataError(f"{path('node_attributes')}:{lineno}: bad attribute row") from None
        if len(node_attrs) != num_nodes:
            raise DataError(
                f"{path('node_attributes')}: {len(node_attrs)} rows for {num_nodes} nodes"
            )

    graphs = []
    manifest = []
    for g in range(num_graphs):
        n = sizes[g]
        if n == 0:
            raise DataError(f"{directory}: graph {g + 1} has no nodes")
        nodes = [node for node in range(1, num_nodes + 1) if graph_of[node] == g]
        feats = None
        if node_attrs is not None:
            feats = np.array([node_attrs[node - 1] for node in nodes], dtype=np.float64)
        nlab = None
        if node_labels is not None:
            nlab = np.array([node_labels[node - 1] for node in nodes], dtype=np.int64)
        glab = graph_labels[g] if graph_labels is not None else None
        graphs.append(
            Graph(n=n, edges=frozenset(edge_sets[g]), node_features=feats,
                  node_labels=nlab, graph_label=glab)
        )
        manifest.append(
            {"id": g, "source": f"{name}[{g}]", "domain": "tu", "n": n, "m": len(edge_sets[g])}
        )
    return GraphCorpus(graphs=graphs, manifest=manifest)


def degree_vector(g: Graph) -> np.ndarray:
    deg = np.zeros(g.n, dtype=np.int64)
    if g.m:
        e = g.edge_array
        np.add.at(deg, e[:, 0], 1)
        np.add.at(deg, e[:, 1], 1)
    return deg


def bfs_distances(g: Graph, source: int) -> np.ndarray:
    """Hop distance from source to every node; unreachable -> -1."""
    dist = np.full(g.n, -1, dtype=np.int64)
    dist[source] = 0
    nbrs = g.neighbor_sets()
    queue = collections.deque([source])
    while queue:
        u = queue.popleft()
        for v in sorted(nbrs[u]):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def extract_ego_subgraph(g: Graph, center: int, hop_radius: int, graph_id: int = 0) -> EgoSubgraph:
    """Induced subgraph on nodes within hop_radius of center.

    Node order: center first, then by (BFS distance, index). The subgraph's
    graph_label is the center node's label when node labels are present.
    """
    if not (0 <= center < g.n):
        raise DataError(f"center {center} out of range for n={g.n}")
    if hop_radius < 1:
        raise DataError(f"hop_radius must be >= 1, got {hop_radius}")
    dist = bfs_distances(g, center)
    kept = [v for v in range(g.n) if 0 <= dist[v] <= hop_radius]
    kept.sort(key=lambda v: (dist[v], v))
    index = {v: i for i, v in enumerate(kept)}
    sub_edges = {
        (index[u], index[v]) for u, v in g.edges if u in index and v in index
    }
    feats = g.node_features[kept] if g.node_features is not None else None
    nlab = g.node_labels[kept] if g.node_labels is not None else None
    glab = int(g.node_labels[center]) if g.node_labels is not None else None
    sub = Graph(n=len(kept), edges=frozenset(sub_edges), node_features=feats,
                node_labels=nlab, graph_label=glab)
    return EgoSubgraph(graph=sub, center=0, hop_radius=hop_radius,
                       origin=(graph_id, center))


def partition_graph(g: Graph, max_block_nodes: int) -> Partition:
    """BFS-grown blocks of at most max_block_nodes nodes each.

    Blocks grow from the lowest-index unvisited node; a block that
    exhausts a component keeps filling from the next unvisited node, so
    blocks are packed. The partitioner backend is deliberately simple and
    deterministic; external partitioners can be slotted in by constructing
    a Partition directly.
    """
    if max_block_nodes < 1:
        raise DataError(f"max_block_nodes must be >= 1, got {max_block_nodes}")
    nbrs = g.neighbor_sets()
    block_of = np.full(g.n, -1, dtype=np.int64)
    blocks_nodes: list[list[int]] = []
    unvisited = 0
    queue = collections.deque()
    while True:
        while unvisited < g.n and block_of[unvisited] >= 0:
            unvisited += 1
        if unvisited >= g.n:
            break
        current: list[int] = []
        bid = len(blocks_nodes)
        queue.clear()
        queue.append(unvisited)
        block_of[unvisited] = bid
        current.append(unvisited)
        while len(current) < max_block_nodes:
            if not queue:
                # component exhausted: pack from the next unvisited node
                nxt = unvisited
                while nxt < g.n and block_of[nxt] >= 0:
                    nxt += 1
                if nxt >= g.n:
                    break
                queue.append(nxt)
                block_of[nxt] = bid
                current.append(nxt)
                continue
            u = queue.popleft()
            for v in sorted(nbrs[u]):
                if block_of[v] < 0 and len(current) < max_block_nodes:
                    block_of[v] = bid
                    current.append(v)
                    queue.append(v)
        blocks_nodes.append(current)

    blocks = []
    cut_edges = []
    index_maps = []
    local_index: list[dict] = []
    for nodes in blocks_nodes:
        nodes_sorted = sorted(nodes)
        index_maps.append(np.array(nodes_sorted, dtype=np.int64))
        local_index.append({v: i for i, v in enumerate(nodes_sorted)})
    block_edge_sets = [set() for _ in blocks_nodes]
    for u, v in g.edges:
        bu, bv = block_of[u], block_of[v]
        if bu == bv:
            block_edge_sets[bu].add((local_index[bu][u], local_index[bu][v]))
        else:
            cut_edges.append((u, v))
    for bid, nodes in enumerate(index_maps):
        feats = g.node_features[nodes] if g.node_features is not None else None
        nlab = g.node_labels[nodes] if g.node_labels is not None else None
        bg = Graph(n=len(nodes), edges=frozenset(block_edge_sets[bid]),
                   node_features=feats, node_labels=nlab)
        blocks.append((bg, nodes))
    return Partition(blocks=tuple(blocks), cut_edges=tuple(sorted(cut_edges)))


def assemble_partitions(p: Partition, augmented_blocks: list) -> Graph:
    """Union of per-block edges (mapped to global ids) and the cut edges."""
    if len(augmented_blocks) != len(p.blocks):
        raise DataError(
            f"got {len(augmented_blocks)} blocks for a partition of {len(p.blocks)}"
        )
    n = 0
    edges = set()
    for (orig, mapping), aug in zip(p.blocks, augmented_blocks):
        if aug.n != orig.n:
            raise DataError(
                f"augmented block has {aug.n} nodes, expected {orig.n}"
            )
        n = max(n, int(mapping.max()) + 1 if len(mapping) else 0)
        for u, v in aug.edges:
            a, b = int(mapping[u]), int(mapping[v])
            edges.add((a, b) if a < b else (b, a))
    for u, v in p.cut_edges:
        edges.add((u, v) if u < v else (v, u))
    return Graph(n=n, edges=frozenset(edges))


def permute_graph(g: Graph, perm) -> Graph:
    """Relabel nodes by perm (perm[i] is the new id of node i)."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (g.n,) or sorted(perm.tolist()) != list(range(g.n)):
        raise DataError("perm must be a bijection on [0, n)")
    edges = set()
    for u, v in g.edges:
        a, b = int(perm[u]), int(perm[v])
        edges.add((a, b) if a < b else (b, a))
    inv = np.empty(g.n, dtype=np.int64)
    inv[perm] = np.arange(g.n)
    feats = g.node_features[inv] if g.node_features is not None else None
    nlab = g.node_labels[inv] if g.node_labels is not None else None
    return Graph(n=g.n, edges=frozenset(edges), node_features=feats,
                 node_labels=nlab, graph_label=g.graph_label)


def save_manifest(corpus: GraphCorpus, path) -> None:
    """Manifest as JSON lines, one record per graph."""
    with open(path, "w") as fh:
        for i, rec in enumerate(corpus.manifest):
            row = dict(rec)
            if corpus.cluster_labels is not None:
                row["cluster"] = int(corpus.cluster_labels[i])
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                raise DataError(f"{path}:{lineno}: bad manifest record") from None
    return records
