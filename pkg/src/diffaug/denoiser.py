"""Self-conditioned denoising network and its pre-training loop.

Per node the encoder input is f_d(degree) + f_t(t) + f_k(label); a stack
of graph-transformer layers with attention masked to the 1-hop
neighborhood of the noisy graph (plus self) produces hidden states, and a
symmetric pair decoder turns (h_i, h_j) into clean-edge probabilities.
Everything runs in float64 on CPU so determinism and the tight test
tolerances hold.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import diffusion
from .clustering import ClusterModel
from .errors import CheckpointError, DataError, NumericalError
from .graphs import Graph, GraphCorpus, degree_vector
from .schedule import NoiseSchedule

__all__ = [
    "DenoiserConfig",
    "HiddenStates",
    "Denoiser",
    "Checkpoint",
    "pretrain",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_manifest",
    "write_loss_history",
    "pair_features",
    "parameter_hash",
    "corpus_fingerprint",
]

DTYPE = torch.float64
CHECKPOINT_FORMAT = "diffaug-checkpoint-1"

_LOGIT_CLAMP = 34.0


@dataclass(frozen=True)
class DenoiserConfig:
    d: int = 128
    layers: int = 4
    heads: int = 4
    dropout: float = 0.1
    max_degree_clip: int = 512

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise DataError(f"hidden width {self.d} not divisible by {self.heads} heads")
        if self.layers < 1:
            raise DataError("need at least one encoder layer")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {"d": self.d, "layers": self.layers, "heads": self.heads,
                "dropout": self.dropout, "max_degree_clip": self.max_degree_clip}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(d=int(d["d"]), layers=int(d["layers"]), heads=int(d["heads"]),
                   dropout=float(d["dropout"]),
                   max_degree_clip=int(d["max_degree_clip"]))


@dataclass
class HiddenStates:
    """Per-node representations produced by the encoder at one timestep."""

    h: torch.Tensor
    t: int
    label: int


def _reset_linear(lin: nn.Linear, gen: torch.Generator) -> None:
    # mirrors the default Linear init, but on an explicit generator
    bound = 1.0 / math.sqrt(lin.in_features)
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        if lin.bias is not None:
            lin.bias.uniform_(-bound, bound, generator=gen)


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    if p <= 0.0 or gen is None:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=DTYPE) >= p).to(DTYPE)
    return x * keep / (1.0 - p)


class MaskedAttention(nn.Module):
    """Multi-head attention restricted to the 1-hop neighborhood + self."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.dh = d // heads
        self.q = nn.Linear(d, d, dtype=DTYPE)
        self.k = nn.Linear(d, d, dtype=DTYPE)
        self.v = nn.Linear(d, d, dtype=DTYPE)
        self.out = nn.Linear(d, d, dtype=DTYPE)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        q = self.q(x).view(n, self.heads, self.dh).transpose(0, 1)
        k = self.k(x).view(n, self.heads, self.dh).transpose(0, 1)
        v = self.v(x).view(n, self.heads, self.dh).transpose(0, 1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dh)
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(0, 1).reshape(n, -1)
        return self.out(mixed)


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.attn = MaskedAttention(d, heads)
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.ff1 = nn.Linear(d, 2 * d, dtype=DTYPE)
        self.ff2 = nn.Linear(2 * d, d, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)
        self.p = dropout

    def forward(self, x, allowed, gen=None):
        x = self.norm1(x + _dropout(self.attn(x, allowed), self.p, gen))
        ff = self.ff2(torch.relu(self.ff1(x)))
        return self.norm2(x + _dropout(ff, self.p, gen))


def pair_features(h: torch.Tensor, pairs: np.ndarray) -> torch.Tensor:
    """Order-invariant pair encoding [h_i + h_j, |h_i - h_j|]."""
    idx = torch.from_numpy(np.ascontiguousarray(pairs))
    hi, hj = h[idx[:, 0]], h[idx[:, 1]]
    return torch.cat([hi + hj, torch.abs(hi - hj)], dim=1)


class Denoiser(nn.Module):
    """Encoder + pair decoder for the predict-clean parameterization."""

    def __init__(self, cfg: DenoiserConfig, num_labels: int, T: int,
                 seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.num_labels = max(int(num_labels), 1)
        self.T = int(T)
        d = cfg.d
        self.f_d = nn.Linear(1, d, dtype=DTYPE)
        self.f_t = nn.Linear(1, d, dtype=DTYPE)
        self.f_k = nn.Embedding(self.num_labels, d, dtype=DTYPE)
        self.layers = nn.ModuleList(
            [EncoderLayer(d, cfg.heads, cfg.dropout) for _ in range(cfg.layers)]
        )
        self.pair_mlp1 = nn.Linear(2 * d, d, dtype=DTYPE)
        self.pair_mlp2 = nn.Linear(d, 1, dtype=DTYPE)
        self.dropout_generator: torch.Generator | None = None
        self._init_params(seed)

    def _init_params(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for module in self.modules():
            if isinstance(module, nn.Linear):
                _reset_linear(module, gen)
        with torch.no_grad():
            self.f_k.weight.normal_(0.0, 1.0, generator=gen)

    def _allowed_mask(self, g: Graph) -> torch.Tensor:
        allowed = torch.eye(g.n, dtype=torch.bool)
        if g.m:
            e = torch.from_numpy(g.edge_array)
            allowed[e[:, 0], e[:, 1]] = True
            allowed[e[:, 1], e[:, 0]] = True
        return allowed

    def encode(self, state: diffusion.DiffusionState) -> HiddenStates:
        """Hidden states for the noisy graph; degrees come from a_t itself."""
        g = state.graph
        clip = float(self.cfg.max_degree_clip)
        # log-compress so small-degree differences stay visible to f_d
        deg = np.minimum(degree_vector(g).astype(np.float64), clip)
        deg = np.log1p(deg) / math.log1p(clip)
        deg_t = torch.from_numpy(deg).unsqueeze(1)
        t_frac = torch.full((g.n, 1), state.t / self.T, dtype=DTYPE)
        if not 0 <= state.label < self.num_labels:
            raise DataError(
                f"label {state.label} outside the {self.num_labels}-cluster vocabulary"
            )
        label = torch.full((g.n,), state.label, dtype=torch.long)
        x = self.f_d(deg_t) + self.f_t(t_frac) + self.f_k(label)
        gen = self.dropout_generator if self.training else None
        allowed = self._allowed_mask(g)
        for layer in self.layers:
            x = layer(x, allowed, gen)
        if not torch.isfinite(x).all():
            raise NumericalError("non-finite hidden states; check denoiser parameters")
        return HiddenStates(h=x, t=state.t, label=state.label)

    def predict_edges(self, h, pairs: np.ndarray) -> torch.Tensor:
        """Clean-edge probabilities for (i, j) pairs, strictly inside (0, 1)."""
        hm = h.h if isinstance(h, HiddenStates) else h
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) == 0:
            return torch.zeros(0, dtype=DTYPE)
        if pairs.min() < 0 or pairs.max() >= hm.shape[0]:
            raise DataError("pair index out of range")
        if np.any(pairs[:, 0] >= pairs[:, 1]):
            raise DataError("pairs must satisfy i < j")
        feats = pair_features(hm, pairs)
        logits = self.pair_mlp2(torch.relu(self.pair_mlp1(feats))).squeeze(1)
        return torch.sigmoid(logits.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP))


@dataclass
class Checkpoint:
    """Frozen training artifact: denoiser + schedule + annotator + metadata."""

    denoiser: Denoiser
    config: DenoiserConfig
    schedule: NoiseSchedule
    cluster_model: ClusterModel | None
    metadata: dict = field(default_factory=dict)

    def label_for(self, g: Graph) -> int:
        if self.cluster_model is None:
            return 0
        from .clustering import assign_label
        return min(assign_label(self.cluster_model, g),
                   self.denoiser.num_labels - 1)


def parameter_hash(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().numpy().tobytes())
    return digest.hexdigest()


def corpus_fingerprint(corpus: GraphCorpus) -> str:
    digest = hashlib.sha256()
    for rec in corpus.manifest:
        digest.update(json.dumps(rec, sort_keys=True).encode())
    return digest.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Single-file container: JSON manifest + npz parameter blob."""
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": ckpt.config.to_dict(),
        "num_labels": ckpt.denoiser.num_labels,
        "T": ckpt.schedule.T,
        "pi": ckpt.schedule.pi,
        "cluster_model": ckpt.cluster_model.to_dict() if ckpt.cluster_model else None,
        "metadata": ckpt.metadata,
        "param_hash": parameter_hash(ckpt.denoiser),
    }
    params = {k: v.detach().numpy() for k, v in ckpt.denoiser.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, alpha=ckpt.schedule.alpha, alpha_bar=ckpt.schedule.alpha_bar,
             **{f"param/{k}": v for k, v in params.items()})
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr("arrays.npz", buf.getvalue())


def read_checkpoint_manifest(path) -> dict:
    """Manifest only, without touching the parameter blob."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint format mismatch: expected {CHECKPOINT_FORMAT!r}, "
            f"found {manifest.get('format')!r}"
        )
    return manifest


def load_checkpoint(path) -> Checkpoint:
    manifest = read_checkpoint_manifest(path)
    try:
        with zipfile.ZipFile(path) as zf:
            with zf.open("arrays.npz") as fh:
                arrays = np.load(io.BytesIO(fh.read()))
                data = {k: arrays[k] for k in arrays.files}
    except (zipfile.BadZipFile, KeyError, OSError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    cfg = DenoiserConfig.from_dict(manifest["config"])
    sched = NoiseSchedule(T=int(manifest["T"]), alpha=data["alpha"],
                          alpha_bar=data["alpha_bar"], pi=float(manifest["pi"]))
    den = Denoiser(cfg, num_labels=int(manifest["num_labels"]), T=sched.T)
    state = {k[len("param/"):]: torch.from_numpy(v)
             for k, v in data.items() if k.startswith("param/")}
    den.load_state_dict(state)
    den.eval()
    cluster = (ClusterModel.from_dict(manifest["cluster_model"])
               if manifest.get("cluster_model") else None)
    ckpt = Checkpoint(denoiser=den, config=cfg, schedule=sched,
                      cluster_model=cluster, metadata=manifest.get("metadata", {}))
    if parameter_hash(den) != manifest["param_hash"]:
        raise CheckpointError(f"parameter hash mismatch in {path}")
    return ckpt


def pretrain(corpus: GraphCorpus, cfg: DenoiserConfig, sched: NoiseSchedule,
             epochs: int, lr: float = 1e-3, batch_size: int = 32,
             self_cond: bool = True, seed: int = 0, loss_kind: str = "vlb",
             aux_weight: float = 0.1, cluster_model: ClusterModel | None = None,
             epoch_callback=None, log_every: int = 0) -> Checkpoint:
    """Optimize the variational bound over the corpus with Adam.

    Per step: sample a batch of graphs, draw t uniformly per graph, corrupt,
    score candidate pairs, and take a gradient step on the mean per-pair
    bound. loss_kind="hybrid" adds aux_weight times a clean-edge
    cross-entropy. With self_cond off, every graph shares label 0.
    """
    if loss_kind not in ("vlb", "hybrid"):
        raise DataError(f"unknown loss kind {loss_kind!r}")
    if len(corpus) == 0:
        raise DataError("cannot pretrain on an empty corpus")
    if self_cond:
        if corpus.cluster_labels is None:
            raise DataError("self-conditioning needs an annotated corpus")
        labels = corpus.cluster_labels.astype(np.int64)
        num_labels = int(labels.max()) + 1
    else:
        labels = np.zeros(len(corpus), dtype=np.int64)
        num_labels = 1

    rng = np.random.default_rng(seed)
    den = Denoiser(cfg, num_labels=num_labels, T=sched.T, seed=seed + 1)
    den.dropout_generator = torch.Generator().manual_seed(seed + 2)
    opt = torch.optim.Adam(den.parameters(), lr=lr)

    history = []
    step = 0
    for epoch in range(int(epochs)):
        order = rng.permutation(len(corpus))
        sums = {"vlb": 0.0, "kl": 0.0, "kl_n": 0, "recon": 0.0, "recon_n": 0}
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            den.train()
            opt.zero_grad()
            batch_loss = 0.0
            for gi in batch:
                g = corpus.graphs[gi]
                t = int(rng.integers(1, sched.T + 1))
                terms = diffusion.vlb_loss(g, den, sched, t, rng,
                                           label=int(labels[gi]))
                per_pair = terms.loss / max(terms.num_pairs, 1)
                if loss_kind == "hybrid":
                    a0 = torch.from_numpy(terms.a0_bits.astype(np.float64))
                    bce = -(torch.xlogy(a0, terms.p_hat)
                            + torch.xlogy(1.0 - a0, 1.0 - terms.p_hat)).mean()
                    per_pair = per_pair + aux_weight * bce
                if not torch.isfinite(per_pair):
                    raise NumericalError(
                        f"non-finite loss at step {step} (graph {gi}, t={t})"
                    )
                batch_loss = batch_loss + per_pair
                sums["vlb"] += float(per_pair.detach())
                if terms.t >= 2:
                    sums["kl"] += terms.kl_sum / max(terms.num_pairs, 1)
                    sums["kl_n"] += 1
                else:
                    sums["recon"] += terms.recon_nll / max(terms.num_pairs, 1)
                    sums["recon_n"] += 1
            (batch_loss / len(batch)).backward()
            opt.step()
            step += 1
        row = {
            "epoch": epoch,
            "mean_vlb": sums["vlb"] / len(order),
            "mean_kl": sums["kl"] / sums["kl_n"] if sums["kl_n"] else float("nan"),
            "mean_recon_nll": (sums["recon"] / sums["recon_n"]
                               if sums["recon_n"] else float("nan")),
        }
        history.append(row)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}/{epochs} vlb={row['mean_vlb']:.5f}")
        if epoch_callback is not None:
            den.eval()
            epoch_callback(epoch, _make_checkpoint(
                den, cfg, sched, cluster_model, corpus, epochs, seed,
                self_cond, loss_kind, history))

    den.eval()
    return _make_checkpoint(den, cfg, sched, cluster_model, corpus, epochs,
                            seed, self_cond, loss_kind, history)


def _make_checkpoint(den, cfg, sched, cluster_model, corpus, epochs, seed,
                     self_cond, loss_kind, history) -> Checkpoint:
    return Checkpoint(
        denoiser=den, config=cfg, schedule=sched, cluster_model=cluster_model,
        metadata={
            "epochs": int(epochs),
            "seed": int(seed),
            "self_cond": bool(self_cond),
            "loss_kind": loss_kind,
            "corpus_hash": corpus_fingerprint(corpus),
            "loss_history": history,
        },
    )


def write_loss_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "mean_vlb", "mean_kl", "mean_recon_nll"])
        writer.writeheader()
        for row in history:
            writer.writerow(row)
