"""Minimal downstream GNN trainers and evaluation metrics.

Graph tasks use a GIN with sum pooling (optionally a virtual node for
molecule-style regression); link prediction uses a GCN encoder with an MLP
scorer over Hadamard pair products; node classification runs a GCN over
ego subgraphs and reads out the center node. These are deliberately small,
seeded, CPU-friendly trainers: the augmented data, not the backbone, is
the object under test.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import DataError
from .graphs import Graph, EgoSubgraph, degree_vector

__all__ = [
    "DownstreamSpec",
    "EvalReport",
    "LinkSplit",
    "make_link_split",
    "evaluate",
    "homophily_group_sd",
    "train_downstream",
    "train_graph_classification",
    "train_link_prediction",
    "train_node_classification",
]


@dataclass
class DownstreamSpec:
    model: str = "gin"
    layers: int = 5
    hidden: int = 64
    lr: float = 1e-3
    epochs: int = 200
    patience: int = 50
    batch_size: int = 32
    dropout: float = 0.5
    virtual_node: bool = False
    folds: int = 10
    runs: int = 10
    negative_pool: int = 1000
    hits_k: int = 10

    def __post_init__(self):
        if self.model not in ("gin", "gcn"):
            raise DataError(f"unknown downstream model {self.model!r}")


@dataclass
class EvalReport:
    metric: str
    mean: float
    std: float
    values: list = field(default_factory=list)
    config_fingerprint: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def single_run(self) -> bool:
        return len(self.values) < 2


# ---------------------------------------------------------------- metrics


def evaluate(predictions, labels, metric: str, k: int | None = None) -> float:
    """Standard metric definitions; ranking metrics take (pos, negs) scores."""
    if metric == "accuracy":
        pred = np.asarray(predictions)
        lab = np.asarray(labels)
        if pred.size == 0:
            raise DataError("empty predictions")
        return float((pred == lab).mean())
    if metric == "mae":
        pred = np.asarray(predictions, dtype=np.float64)
        lab = np.asarray(labels, dtype=np.float64)
        if pred.size == 0:
            raise DataError("empty predictions")
        return float(np.abs(pred - lab).mean())
    if metric in ("mrr", "hits"):
        pos, neg = predictions
        pos = np.asarray(pos, dtype=np.float64)
        neg = np.asarray(neg, dtype=np.float64)
        if pos.size == 0:
            raise DataError("empty predictions")
        if neg.ndim == 1:
            neg = np.broadcast_to(neg, (pos.size, neg.size))
        ranks = 1 + (neg > pos[:, None]).sum(axis=1)
        if metric == "mrr":
            return float((1.0 / ranks).mean())
        if k is None:
            raise DataError("hits metric needs k")
        return float((ranks <= k).mean())
    raise DataError(f"unknown metric {metric!r}")


def homophily_group_sd(g: Graph, predictions) -> float:
    """Std of per-bin accuracy across five equal-width homophily bins.

    A node's homophily ratio is the fraction of its neighbors sharing its
    label; isolated nodes are skipped (error if every node is isolated).
    """
    if g.node_labels is None:
        raise DataError("homophily metric needs node labels")
    pred = np.asarray(predictions)
    if pred.shape != (g.n,):
        raise DataError(f"need one prediction per node, got {pred.shape}")
    deg = degree_vector(g)
    if not np.any(deg > 0):
        raise DataError("all nodes isolated: homophily undefined")
    nbrs = g.neighbor_sets()
    labels = g.node_labels
    bin_correct = np.zeros(5)
    bin_total = np.zeros(5)
    for v in range(g.n):
        if deg[v] == 0:
            continue
        same = sum(1 for u in nbrs[v] if labels[u] == labels[v])
        ratio = same / deg[v]
        b = min(int(ratio * 5), 4)
        bin_total[b] += 1
        bin_correct[b] += float(pred[v] == labels[v])
    used = bin_total > 0
    acc = bin_correct[used] / bin_total[used]
    return float(np.std(acc))


# ------------------------------------------------------------- batching


def _node_features(g: Graph) -> np.ndarray:
    if g.node_features is not None:
        return g.node_features
    deg = degree_vector(g).astype(np.float64)
    scale = max(float(deg.max()), 1.0)
    return np.stack([np.ones(g.n), deg / scale], axis=1)


def _directed_edge_index(g: Graph) -> np.ndarray:
    if g.m == 0:
        return np.zeros((2, 0), dtype=np.int64)
    e = g.edge_array
    return np.concatenate([e.T, e[:, ::-1].T], axis=1)


@dataclass
class _Batch:
    x: torch.Tensor
    edge_index: torch.Tensor
    batch: torch.Tensor
    num_graphs: int
    centers: torch.Tensor | None = None


def _make_batch(graphs: list) -> _Batch:
    xs, eis, bids, centers = [], [], [], []
    offset = 0
    for i, g in enumerate(graphs):
        xs.append(_node_features(g))
        ei = _directed_edge_index(g) + offset
        eis.append(ei)
        bids.append(np.full(g.n, i, dtype=np.int64))
        centers.append(offset)
        offset += g.n
    x = torch.from_numpy(np.concatenate(xs, axis=0)).to(torch.float32)
    edge_index = torch.from_numpy(np.concatenate(eis, axis=1))
    batch = torch.from_numpy(np.concatenate(bids))
    return _Batch(x=x, edge_index=edge_index, batch=batch,
                  num_graphs=len(graphs),
                  centers=torch.from_numpy(np.array(centers, dtype=np.int64)))


def _scatter_sum(src: torch.Tensor, index: torch.Tensor, n: int) -> torch.Tensor:
    out = torch.zeros((n, src.shape[1]), dtype=src.dtype)
    out.index_add_(0, index, src)
    return out


# ----------------------------------------------------------------- models


class GINLayer(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(),
                                 nn.Linear(dim, dim))

    def forward(self, x, edge_index):
        agg = _scatter_sum(x[edge_index[0]], edge_index[1], x.shape[0])
        return self.mlp(x + agg)


class GIN(nn.Module):
    """Sum-pooling GIN classifier/regressor, optional virtual node."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int,
                 dropout: float, virtual_node: bool):
        super().__init__()
        self.embed = nn.Linear(in_dim, hidden)
        self.layers = nn.ModuleList(GINLayer(hidden) for _ in range(layers))
        self.virtual_node = virtual_node
        if virtual_node:
            self.vn_update = nn.ModuleList(
                nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU())
                for _ in range(layers))
        self.head = nn.Sequential(
            nn.Linear(hidden, hidden), nn.ReLU(), nn.Dropout(dropout),
            nn.Linear(hidden, out_dim))

    def forward(self, batch: _Batch) -> torch.Tensor:
        x = self.embed(batch.x)
        vn = torch.zeros((batch.num_graphs, x.shape[1]), dtype=x.dtype)
        for i, layer in enumerate(self.layers):
            if self.virtual_node:
                x = x + vn[batch.batch]
            x = torch.relu(layer(x, batch.edge_index))
            if self.virtual_node:
                vn = vn + self.vn_update[i](_scatter_sum(x, batch.batch,
                                                         batch.num_graphs))
        pooled = _scatter_sum(x, batch.batch, batch.num_graphs)
        return self.head(pooled)


class GCNLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lin = nn.Linear(in_dim, out_dim)

    def forward(self, x, edge_index, norm):
        x = self.lin(x)
        msg = x[edge_index[0]] * norm[:, None]
        return _scatter_sum(msg, edge_index[1], x.shape[0])


def _gcn_norm(edge_index: torch.Tensor, n: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Self-loop augmented symmetric normalization coefficients."""
    loops = torch.arange(n, dtype=torch.int64).repeat(2, 1)
    ei = torch.cat([edge_index, loops], dim=1)
    deg = torch.zeros(n, dtype=torch.float32)
    deg.index_add_(0, ei[1], torch.ones(ei.shape[1]))
    inv_sqrt = deg.clamp(min=1).rsqrt()
    norm = inv_sqrt[ei[0]] * inv_sqrt[ei[1]]
    return ei, norm


class GCN(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int,
                 dropout: float):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(GCNLayer(dims[i], dims[i + 1])
                                    for i in range(layers))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, edge_index, n):
        ei, norm = _gcn_norm(edge_index, n)
        for i, layer in enumerate(self.layers):
            x = layer(x, ei, norm)
            if i < len(self.layers) - 1:
                x = self.dropout(torch.relu(x))
        return x


class LinkScorer(nn.Module):
    """GCN encoder + 3-layer MLP over Hadamard products of embeddings."""

    def __init__(self, in_dim: int, hidden: int, enc_layers: int, dropout: float):
        super().__init__()
        self.encoder = GCN(in_dim, hidden, hidden, enc_layers, dropout)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1))

    def embeddings(self, x, edge_index, n):
        return self.encoder(x, edge_index, n)

    def score(self, z, pairs: torch.Tensor) -> torch.Tensor:
        return self.mlp(z[pairs[:, 0]] * z[pairs[:, 1]]).squeeze(1)


# -------------------------------------------------------------- splits


@dataclass(frozen=True)
class LinkSplit:
    """Disjoint train/val/test edge arrays of one graph."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        seen = set()
        for name in ("train", "val", "test"):
            arr = getattr(self, name)
            for u, v in arr:
                key = (int(u), int(v))
                if key in seen:
                    raise DataError(f"edge {key} appears in two splits")
                seen.add(key)


def make_link_split(g: Graph, val_frac: float = 0.05, test_frac: float = 0.1,
                    seed: int = 0) -> LinkSplit:
    edges = g.edge_array
    order = np.random.default_rng(seed).permutation(len(edges))
    n_val = int(len(edges) * val_frac)
    n_test = int(len(edges) * test_frac)
    val = edges[order[:n_val]]
    test = edges[order[n_val:n_val + n_test]]
    train = edges[order[n_val + n_test:]]
    if len(train) == 0:
        raise DataError("link split left no training edges")
    return LinkSplit(train=train, val=val, test=test)


# -------------------------------------------------------------- trainers


def _is_regression(labels) -> bool:
    arr = np.asarray(labels)
    return not np.issubdtype(arr.dtype, np.integer)


def _better(metric: str):
    return (lambda a, b: a < b) if metric == "mae" else (lambda a, b: a > b)


def _fit_graph_model(model, train_graphs, train_y, val_graphs, val_y,
                     spec: DownstreamSpec, regression: bool,
                     rng: np.random.Generator):
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
    loss_fn = nn.MSELoss() if regression else nn.CrossEntropyLoss()
    metric = "mae" if regression else "accuracy"
    better = _better(metric)
    # a couple of validation graphs cannot steer model selection
    use_early_stop = len(val_graphs) >= 3
    best_val, best_state, stale = None, None, 0
    for _ in range(spec.epochs):
        model.train()
        order = rng.permutation(len(train_graphs))
        for start in range(0, len(order), spec.batch_size):
            idx = order[start:start + spec.batch_size]
            batch = _make_batch([train_graphs[i] for i in idx])
            y = train_y[idx]
            out = model(batch)
            if regression:
                loss = loss_fn(out.squeeze(1), torch.from_numpy(y).float())
            else:
                loss = loss_fn(out, torch.from_numpy(y).long())
            opt.zero_grad()
            loss.backward()
            opt.step()
        if not use_early_stop:
            continue
        val_metric = _score_graph_model(model, val_graphs, val_y, regression)
        if best_val is None or better(val_metric, best_val):
            best_val, stale = val_metric, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= spec.patience:
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return model


def _score_graph_model(model, graphs, y, regression: bool) -> float:
    model.eval()
    with torch.no_grad():
        out = model(_make_batch(graphs))
    if regression:
        return evaluate(out.squeeze(1).numpy(), y, "mae")
    return evaluate(out.argmax(dim=1).numpy(), y, "accuracy")


def _fold_indices(num: int, folds: int, rng: np.random.Generator) -> list:
    order = rng.permutation(num)
    return [order[f::folds] for f in range(folds)]


def train_graph_classification(originals: list, spec: DownstreamSpec,
                               seed: int = 0, synthetics: list | None = None,
                               extra_eval: dict | None = None) -> EvalReport:
    """Seeded k-fold cross-validation over the original graphs.

    `synthetics` is a list of (graph, source_index) pairs; a synthetic copy
    joins a fold's training set only when its source graph trains there, so
    generated copies of held-out graphs can never leak labels.
    """
    labels = [g.graph_label for g in originals]
    if any(l is None for l in labels):
        raise DataError("graph task needs graph labels")
    regression = _is_regression(labels)
    y = np.asarray(labels, dtype=np.float64 if regression else np.int64)
    out_dim = 1 if regression else int(y.max()) + 1
    in_dim = _node_features(originals[0]).shape[1]
    synthetics = synthetics or []

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    folds = _fold_indices(len(originals), spec.folds, rng)
    values = []
    for f, test_idx in enumerate(folds):
        test_set = set(test_idx.tolist())
        pool = [i for i in range(len(originals)) if i not in test_set]
        n_val = max(1, len(pool) // 10)
        val_idx = pool[:n_val]
        train_idx = pool[n_val:]
        train_set = set(train_idx)
        train_graphs = [originals[i] for i in train_idx]
        train_y = list(y[train_idx])
        for g, src in synthetics:
            if src in train_set:
                train_graphs.append(g)
                train_y.append(y[src])
        if not train_graphs:
            raise DataError("fold left no training graphs")
        model = GIN(in_dim, spec.hidden, out_dim, spec.layers, spec.dropout,
                    spec.virtual_node)
        model = _fit_graph_model(
            model, train_graphs, np.asarray(train_y), [originals[i] for i in val_idx],
            y[val_idx], spec, regression, rng)
        values.append(_score_graph_model(model, [originals[i] for i in test_idx],
                                         y[test_idx], regression))
    metric = "mae" if regression else "accuracy"
    return EvalReport(metric=metric, mean=float(np.mean(values)),
                      std=float(np.std(values)), values=values,
                      extras=extra_eval or {})


def _sample_negative_pairs(n: int, forbidden: set, k: int,
                           rng: np.random.Generator) -> np.ndarray:
    out = []
    seen = set()
    while len(out) < k:
        u = int(rng.integers(0, n))
        v = int(rng.integers(0, n))
        if u == v:
            continue
        pair = (u, v) if u < v else (v, u)
        if pair in forbidden or pair in seen:
            continue
        seen.add(pair)
        out.append(pair)
    return np.array(out, dtype=np.int64)


def train_link_prediction(message_graph: Graph, split: LinkSplit,
                          spec: DownstreamSpec, seed: int = 0,
                          runs: int | None = None) -> EvalReport:
    """GCN link predictor trained on the (possibly augmented) structure.

    Message passing uses `message_graph`; supervision positives are the
    training edges only. Test positives are ranked against a shared seeded
    pool of non-edges for MRR / Hits@K.
    """
    runs = spec.runs if runs is None else runs
    n = message_graph.n
    x_np = _node_features(message_graph)
    ei = torch.from_numpy(_directed_edge_index(message_graph))
    stacked = np.concatenate([split.train, split.val, split.test])
    all_edges = {(int(u), int(v)) for u, v in stacked}

    pool_rng = np.random.default_rng(seed + 7777)
    neg_pool = _sample_negative_pairs(n, all_edges, spec.negative_pool, pool_rng)

    values = []
    hits_values = []
    for run in range(runs):
        run_seed = seed + run
        torch.manual_seed(run_seed)
        rng = np.random.default_rng(run_seed)
        model = LinkScorer(x_np.shape[1], spec.hidden, max(spec.layers, 2),
                           spec.dropout)
        opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
        x = torch.from_numpy(x_np).to(torch.float32)
        train_pairs = torch.from_numpy(split.train)
        best_val, best_state, stale = None, None, 0
        for _ in range(spec.epochs):
            model.train()
            neg = _sample_negative_pairs(n, all_edges, len(split.train), rng)
            pairs = torch.cat([train_pairs, torch.from_numpy(neg)], dim=0)
            target = torch.cat([torch.ones(len(split.train)),
                                torch.zeros(len(neg))])
            z = model.embeddings(x, ei, n)
            logits = model.score(z, pairs)
            loss = nn.functional.binary_cross_entropy_with_logits(logits, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if len(split.val):
                val = _rank_metric(model, x, ei, n, split.val, neg_pool, "mrr",
                                   spec.hits_k)
                if best_val is None or val > best_val:
                    best_val, stale = val, 0
                    best_state = copy.deepcopy(model.state_dict())
                else:
                    stale += 1
                    if stale >= spec.patience:
                        break
        if best_state is not None:
            model.load_state_dict(best_state)
        values.append(_rank_metric(model, x, ei, n, split.test, neg_pool,
                                   "mrr", spec.hits_k))
        hits_values.append(_rank_metric(model, x, ei, n, split.test, neg_pool,
                                        "hits", spec.hits_k))
    return EvalReport(metric="mrr", mean=float(np.mean(values)),
                      std=float(np.std(values)), values=values,
                      extras={f"hits@{spec.hits_k}_mean": float(np.mean(hits_values)),
                              f"hits@{spec.hits_k}_std": float(np.std(hits_values))})


def _rank_metric(model, x, ei, n, pos_edges, neg_pool, metric, k) -> float:
    model.eval()
    with torch.no_grad():
        z = model.embeddings(x, ei, n)
        pos = model.score(z, torch.from_numpy(np.asarray(pos_edges))).numpy()
        neg = model.score(z, torch.from_numpy(neg_pool)).numpy()
    return evaluate((pos, neg), None, metric, k=k)


def _center_logits(model, graphs: list) -> torch.Tensor:
    batch = _make_batch(graphs)
    z = model(batch.x, batch.edge_index, batch.x.shape[0])
    return z[batch.centers]


def train_node_classification(train_items: list, val_items: list,
                              test_items: list, num_classes: int,
                              spec: DownstreamSpec, seed: int = 0,
                              runs: int | None = None) -> EvalReport:
    """Center-node classifier over ego subgraphs (2-layer GCN by default).

    Items are Graphs whose graph_label is the center node's class and whose
    node 0 is the center.
    """
    runs = spec.runs if runs is None else runs

    def unwrap(items):
        graphs = [it.graph if isinstance(it, EgoSubgraph) else it for it in items]
        ys = np.array([int(g.graph_label) for g in graphs], dtype=np.int64)
        return graphs, ys

    train_graphs, train_y = unwrap(train_items)
    val_graphs, val_y = unwrap(val_items)
    test_graphs, test_y = unwrap(test_items)
    in_dim = _node_features(train_graphs[0]).shape[1]

    values = []
    predictions = None
    for run in range(runs):
        run_seed = seed + run
        torch.manual_seed(run_seed)
        rng = np.random.default_rng(run_seed)
        model = GCN(in_dim, spec.hidden, num_classes, max(spec.layers, 2),
                    spec.dropout)
        opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
        best_val, best_state, stale = None, None, 0
        ty = torch.from_numpy(train_y)
        for _ in range(spec.epochs):
            model.train()
            order = rng.permutation(len(train_graphs))
            for start in range(0, len(order), spec.batch_size):
                idx = order[start:start + spec.batch_size]
                logits = _center_logits(model, [train_graphs[i] for i in idx])
                loss = nn.functional.cross_entropy(logits, ty[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
            if len(val_graphs):
                model.eval()
                with torch.no_grad():
                    pred = _center_logits(model, val_graphs).argmax(1).numpy()
                val_acc = evaluate(pred, val_y, "accuracy")
                if best_val is None or val_acc > best_val:
                    best_val, stale = val_acc, 0
                    best_state = copy.deepcopy(model.state_dict())
                else:
                    stale += 1
                    if stale >= spec.patience:
                        break
        if best_state is not None:
            model.load_state_dict(best_state)
        model.eval()
        with torch.no_grad():
            pred = _center_logits(model, test_graphs).argmax(1).numpy()
        values.append(evaluate(pred, test_y, "accuracy"))
        predictions = pred
    return EvalReport(metric="accuracy", mean=float(np.mean(values)),
                      std=float(np.std(values)), values=values,
                      extras={"last_predictions": predictions.tolist()
                              if predictions is not None else []})


def train_downstream(task: str, data, model_spec: DownstreamSpec,
                     seed: int = 0) -> EvalReport:
    """Dispatch to the task-specific trainer.

    data: graph -> (originals, synthetics); link -> (message_graph, split);
    node -> (train_items, val_items, test_items, num_classes).
    """
    if task == "graph":
        originals, synthetics = data
        return train_graph_classification(originals, model_spec, seed=seed,
                                          synthetics=synthetics)
    if task == "link":
        message_graph, split = data
        if model_spec.model != "gcn":
            raise DataError("link task expects a gcn downstream model")
        return train_link_prediction(message_graph, split, model_spec, seed=seed)
    if task == "node":
        train_items, val_items, test_items, num_classes = data
        if model_spec.model != "gcn":
            raise DataError("node task expects a gcn downstream model")
        return train_node_classification(train_items, val_items, test_items,
                                         num_classes, model_spec, seed=seed)
    raise DataError(f"unknown task {task!r}")
