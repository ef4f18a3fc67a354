"""Guidance heads and Langevin refinement of hidden states.

A small MLP head is trained on top of the frozen denoiser to score hidden
states against a downstream objective (node labels/degrees, common
neighbors, link reconstruction, graph labels/properties). During sampling
the hidden states are refined by gradient steps on

    lam * KL(edge_dist(h') || edge_dist(h)) - head_score(h')

with optional Gaussian noise scaled by sqrt(2 * gamma * tau).
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import diffusion
from .denoiser import (
    Checkpoint,
    Denoiser,
    DTYPE,
    HiddenStates,
    pair_features,
    parameter_hash,
    _reset_linear,
)
from .errors import CheckpointError, DataError, NumericalError
from .graphs import Graph, GraphCorpus, degree_vector
from .properties import compute_properties
from .schedule import NoiseSchedule

__all__ = [
    "HeadSpec",
    "GuidanceHead",
    "GuidanceConfig",
    "LEVELS",
    "OBJECTIVES",
    "compute_objective_targets",
    "smooth_labels",
    "smoothed_distribution",
    "smooth_label_matrix",
    "train_head",
    "langevin_refine",
    "guided_sample",
    "save_head",
    "load_head",
]

LEVELS = ("node", "edge", "graph")
OBJECTIVES = {
    "node_label": ("node", "cross_entropy"),
    "node_degree": ("node", "mean_squared_error"),
    "common_neighbors": ("edge", "mean_squared_error"),
    "link_reconstruction": ("edge", "mean_squared_error"),
    "graph_label": ("graph", "cross_entropy"),
    "graph_properties": ("graph", "mean_squared_error"),
}

HEAD_FORMAT = "diffaug-head-1"

# hyperparameter grids reported for the three task families
GRAPH_GAMMA_GRID = (0.1, 0.5, 1.0)
GRAPH_REPEATS_GRID = (1, 5, 10, 32, 64)
LINK_GAMMA_GRID = (0.1, 1.0, 10.0)
LINK_LAMBDA_GRID = (0.01, 1.0, 100.0)
LINK_THRESHOLD_GRID = (0.9, 0.99, 0.999)
LINK_UPDATES_GRID = (5, 10, 20)
NODE_REPEATS_GRID = (1, 5, 10)
DEFAULT_LAMBDA = 0.01
DEFAULT_NUM_UPDATES = 5


@dataclass(frozen=True)
class HeadSpec:
    objective: str
    r: int
    loss_kind: str = ""
    level: str = ""

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise DataError(f"unknown objective {self.objective!r}")
        level, loss = OBJECTIVES[self.objective]
        object.__setattr__(self, "level", level)
        if not self.loss_kind:
            object.__setattr__(self, "loss_kind", loss)
        if self.loss_kind not in ("cross_entropy", "mean_squared_error"):
            raise DataError(f"unknown loss kind {self.loss_kind!r}")
        if self.loss_kind == "cross_entropy" and self.objective not in (
                "node_label", "graph_label"):
            raise DataError("cross-entropy heads need a label objective")
        if self.r < 1:
            raise DataError("head output dimension must be >= 1")

    def to_dict(self) -> dict:
        return {"objective": self.objective, "r": self.r,
                "loss_kind": self.loss_kind}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        return cls(objective=d["objective"], r=int(d["r"]),
                   loss_kind=d.get("loss_kind", ""))


@dataclass
class GuidanceConfig:
    gamma: float = 1.0
    lam: float = DEFAULT_LAMBDA
    tau: float = 0.0
    num_updates: int = DEFAULT_NUM_UPDATES
    threshold_q: float | None = None
    ablation: str = "full"
    cross_source: str | None = None

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0 or self.tau < 0:
            raise DataError("gamma, lambda, tau must be non-negative")
        if self.num_updates < 0:
            raise DataError("num_updates must be >= 0")
        if self.threshold_q is not None and not 0.0 < self.threshold_q < 1.0:
            raise DataError(f"threshold_q must be in (0, 1), got {self.threshold_q}")
        if self.ablation not in ("full", "no_guidance", "cross_guide"):
            raise DataError(f"unknown ablation {self.ablation!r}")

    @property
    def active(self) -> bool:
        return (self.ablation != "no_guidance" and self.gamma > 0
                and self.num_updates > 0)


class GuidanceHead(nn.Module):
    """Two-hidden-layer MLP over pooled / per-node / per-pair hidden states."""

    def __init__(self, spec: HeadSpec, d: int, seed: int = 0,
                 ckpt_hash: str = ""):
        super().__init__()
        self.spec = spec
        self.d = d
        self.ckpt_hash = ckpt_hash
        in_dim = 2 * d if spec.level == "edge" else d
        self.net = nn.Sequential(
            nn.Linear(in_dim, d, dtype=DTYPE), nn.ReLU(),
            nn.Linear(d, d, dtype=DTYPE), nn.ReLU(),
            nn.Linear(d, spec.r, dtype=DTYPE),
        )
        gen = torch.Generator().manual_seed(int(seed))
        for module in self.net:
            if isinstance(module, nn.Linear):
                _reset_linear(module, gen)

    def pooled(self, h: torch.Tensor, pairs: np.ndarray | None = None) -> torch.Tensor:
        if self.spec.level == "node":
            return h
        if self.spec.level == "edge":
            if pairs is None or len(pairs) == 0:
                raise DataError("edge-level head needs candidate pairs")
            return pair_features(h, pairs)
        return h.mean(dim=0, keepdim=True)

    def forward(self, h: torch.Tensor, pairs: np.ndarray | None = None) -> torch.Tensor:
        return self.net(self.pooled(h, pairs))

    def loss(self, h: torch.Tensor, target, pairs: np.ndarray | None = None) -> torch.Tensor:
        out = self.forward(h, pairs)
        if self.spec.loss_kind == "cross_entropy":
            logp = torch.log_softmax(out, dim=1)
            target_t = _as_class_distribution(target, out.shape, self.spec.r)
            return -(target_t * logp).sum(dim=1).mean()
        target_t = _as_regression_target(target, out.shape)
        return ((out - target_t) ** 2).mean()

    def goodness(self, h: torch.Tensor, target, pairs: np.ndarray | None = None) -> torch.Tensor:
        """Target compatibility score g(h): the negative head loss."""
        return -self.loss(h, target, pairs)


def _as_class_distribution(target, shape, num_classes: int) -> torch.Tensor:
    rows = shape[0]
    if isinstance(target, (int, np.integer)) or (
            isinstance(target, np.ndarray) and target.ndim == 0):
        dist = np.zeros((rows, num_classes))
        dist[:, int(target)] = 1.0
        return torch.from_numpy(dist)
    arr = np.asarray(target, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == rows and num_classes > 1 and \
            np.issubdtype(np.asarray(target).dtype, np.integer):
        dist = np.zeros((rows, num_classes))
        dist[np.arange(rows), arr.astype(int)] = 1.0
        return torch.from_numpy(dist)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (rows, arr.shape[0]))
    if arr.shape != (rows, num_classes):
        raise DataError(f"class target shape {arr.shape} != {(rows, num_classes)}")
    return torch.from_numpy(np.ascontiguousarray(arr))


def _as_regression_target(target, shape) -> torch.Tensor:
    arr = np.asarray(target, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(shape, float(arr))
    if arr.ndim == 1:
        if arr.shape[0] == shape[0] and shape[1] == 1:
            arr = arr[:, None]
        else:
            arr = np.broadcast_to(arr, shape)
    if arr.shape != tuple(shape):
        raise DataError(f"regression target shape {arr.shape} != {tuple(shape)}")
    return torch.from_numpy(np.ascontiguousarray(arr))


def compute_objective_targets(g: Graph, objective: str,
                              pairs: np.ndarray | None = None) -> np.ndarray:
    """Ground-truth guidance targets computed from the clean graph."""
    if objective == "node_label":
        if g.node_labels is None:
            raise DataError("node_label objective needs node labels")
        return g.node_labels.copy()
    if objective == "node_degree":
        return degree_vector(g).astype(np.float64)
    if objective == "common_neighbors":
        if pairs is None:
            raise DataError("common_neighbors objective needs candidate pairs")
        nbrs = g.neighbor_sets()
        return np.array(
            [len(nbrs[int(i)] & nbrs[int(j)]) for i, j in pairs], dtype=np.float64)
    if objective == "link_reconstruction":
        if pairs is None:
            raise DataError("link_reconstruction objective needs candidate pairs")
        return diffusion.pair_membership(pairs, g.edges).astype(np.float64)
    if objective == "graph_label":
        if g.graph_label is None:
            raise DataError("graph_label objective needs a graph label")
        return np.asarray(g.graph_label)
    if objective == "graph_properties":
        return compute_properties(g).as_array()
    raise DataError(f"unknown objective {objective!r}")


def smoothed_distribution(y: np.ndarray, abar: float) -> np.ndarray:
    """abar * y + (1 - abar) / C, rows summing to one."""
    y = np.asarray(y, dtype=np.float64)
    C = y.shape[-1]
    return abar * y + (1.0 - abar) / C


def smooth_labels(y: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Timestep-aware label smoothing of a one-hot vector."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.shape[0] < 2:
        raise DataError("y must be a one-hot vector with C >= 2")
    if not (np.isin(y, (0.0, 1.0)).all() and y.sum() == 1.0):
        raise DataError("y must be one-hot")
    return smoothed_distribution(y, sched.abar(t))


def smooth_label_matrix(labels: np.ndarray, num_classes: int, t: int,
                        sched: NoiseSchedule) -> np.ndarray:
    onehot = np.zeros((len(labels), num_classes))
    onehot[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return smoothed_distribution(onehot, sched.abar(t))


def _head_target(g: Graph, spec: HeadSpec, t: int, sched: NoiseSchedule,
                 pairs: np.ndarray | None):
    """Training target for one noisy sample; class targets are smoothed."""
    raw = compute_objective_targets(g, spec.objective, pairs)
    if spec.objective == "node_label":
        return smooth_label_matrix(raw, spec.r, t, sched)
    if spec.objective == "graph_label" and spec.loss_kind == "cross_entropy":
        y = np.zeros(spec.r)
        y[int(raw)] = 1.0
        return smoothed_distribution(y, sched.abar(t))[None, :]
    return raw


def train_head(ckpt: Checkpoint, dataset, head_spec: HeadSpec, epochs: int,
               lr: float = 1e-2, seed: int = 0,
               batch_size: int = 32) -> GuidanceHead:
    """Fit a guidance head on noisy hidden states from the frozen denoiser.

    Gradient steps are taken per batch of graphs: the smoothed targets at
    high timesteps are noisy, so per-sample steps drown the class signal.
    Only the head's parameters move; the denoiser hash is checked before
    and after. epochs=0 returns the freshly initialized head.
    """
    graphs = dataset.graphs if isinstance(dataset, GraphCorpus) else list(dataset)
    if not graphs:
        raise DataError("cannot train a head on an empty dataset")
    den = ckpt.denoiser
    den.eval()
    hash_before = parameter_hash(den)
    head = GuidanceHead(head_spec, d=ckpt.config.d, seed=seed,
                        ckpt_hash=hash_before)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    sched = ckpt.schedule
    labels = [ckpt.label_for(g) for g in graphs]

    for _ in range(int(epochs)):
        order = rng.permutation(len(graphs))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            batch_loss = 0.0
            used = 0
            for gi in batch:
                g = graphs[gi]
                t = int(rng.integers(1, sched.T + 1))
                state = diffusion.forward_marginal_sample(g, t, sched, rng,
                                                          label=labels[gi])
                with torch.no_grad():
                    h = den.encode(state).h
                pairs = None
                if head_spec.level == "edge":
                    pairs = diffusion.candidate_pairs(g.n, g.edges, rng)
                    if len(pairs) == 0:
                        continue
                target = _head_target(g, head_spec, t, sched, pairs)
                loss = head.loss(h, target, pairs)
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite head loss on graph {gi}")
                batch_loss = batch_loss + loss
                used += 1
            if not used:
                continue
            opt.zero_grad()
            (batch_loss / used).backward()
            opt.step()

    if parameter_hash(den) != hash_before:
        raise NumericalError("denoiser parameters changed during head training")
    head.eval()
    return head


def langevin_refine(h: HiddenStates, head: GuidanceHead, target,
                    cfg: GuidanceConfig, pairs: np.ndarray,
                    rng: np.random.Generator,
                    denoiser: Denoiser) -> HiddenStates:
    """Gradient refinement of hidden states toward the guidance target.

    The KL trust region anchors the refined edge distribution to the one
    induced by the incoming h. gamma = 0 or num_updates = 0 is the exact
    identity (no noise either).
    """
    if not cfg.active:
        return h
    with torch.no_grad():
        anchor = denoiser.predict_edges(h.h, pairs) if len(pairs) else None
    hp = h.h.detach().clone().requires_grad_(True)
    noise_scale = math.sqrt(2.0 * cfg.gamma * cfg.tau)
    for step in range(cfg.num_updates):
        if anchor is not None and cfg.lam > 0:
            p_cur = denoiser.predict_edges(hp, pairs)
            kl = diffusion._bernoulli_kl(p_cur, anchor).sum()
        else:
            kl = torch.zeros((), dtype=DTYPE)
        energy = cfg.lam * kl - head.goodness(hp, target, pairs)
        (grad,) = torch.autograd.grad(energy, hp)
        if not torch.isfinite(grad).all():
            raise NumericalError(f"non-finite guidance gradient at update {step}")
        with torch.no_grad():
            new_h = hp - cfg.gamma * grad
            if noise_scale > 0:
                eps = torch.from_numpy(rng.standard_normal(new_h.shape))
                new_h = new_h + noise_scale * eps
        hp = new_h.detach().requires_grad_(True)
    return HiddenStates(h=hp.detach(), t=h.t, label=h.label)


def guided_sample(ckpt: Checkpoint, head: GuidanceHead | None, target,
                  cfg: GuidanceConfig, n: int, label: int,
                  rng: np.random.Generator,
                  trace: list | None = None, tag=None) -> Graph:
    """Run the reverse chain with Langevin refinement between encode and decode."""
    callback = None
    if cfg.active:
        if head is None:
            raise DataError("guidance requested but no head given")
        if cfg.ablation != "cross_guide" and head.ckpt_hash and \
                head.ckpt_hash != parameter_hash(ckpt.denoiser):
            raise CheckpointError(
                "guidance head was trained on a different checkpoint"
            )

        def callback(h, pairs):
            return langevin_refine(h, head, target, cfg, pairs, rng,
                                   ckpt.denoiser)

    return diffusion.sample(n, label, ckpt.denoiser, ckpt.schedule, rng,
                            guidance=callback, threshold_q=cfg.threshold_q,
                            trace=trace, tag=tag)


def save_head(head: GuidanceHead, path) -> None:
    manifest = {
        "format": HEAD_FORMAT,
        "spec": head.spec.to_dict(),
        "d": head.d,
        "ckpt_hash": head.ckpt_hash,
    }
    params = {k: v.detach().numpy() for k, v in head.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, **params)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr("params.npz", buf.getvalue())


def load_head(path) -> GuidanceHead:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != HEAD_FORMAT:
                raise CheckpointError(
                    f"head format mismatch: expected {HEAD_FORMAT!r}, "
                    f"found {manifest.get('format')!r}"
                )
            with zf.open("params.npz") as fh:
                arrays = np.load(io.BytesIO(fh.read()))
                state = {k: torch.from_numpy(arrays[k]) for k in arrays.files}
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError,
            EOFError, ValueError) as exc:
        raise CheckpointError(f"unreadable head file {path}: {exc}") from exc
    head = GuidanceHead(HeadSpec.from_dict(manifest["spec"]),
                        d=int(manifest["d"]), ckpt_hash=manifest["ckpt_hash"])
    head.load_state_dict(state)
    head.eval()
    return head
