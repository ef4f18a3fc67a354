"""Binary diffusion over the upper triangle of adjacency matrices.

Forward corruption, exact two-state posteriors, the predict-clean reverse
step, the variational-bound training loss, and the full sampling loop.
All per-pair probabilities follow the Bernoulli chain

    q(a_t | a_{t-1}) = Bernoulli(alpha_t * a_{t-1} + (1 - alpha_t) * pi)

whose t-step marginal is abar_t * a_0 + (1 - abar_t) * pi.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import GuidanceError, ImpossibleLatentError
from .graphs import Graph
from .schedule import NoiseSchedule

__all__ = [
    "DiffusionState",
    "VlbTerms",
    "forward_bit_prob",
    "forward_step_bits",
    "forward_marginal_sample",
    "posterior_prob",
    "reverse_step_distribution",
    "reverse_probabilities",
    "vlb_loss",
    "vlb_terms",
    "candidate_pairs",
    "sample",
    "clamp_diagnostics",
]

# candidate pairs: exact upper triangle up to this node count, else subsampled
EXACT_PAIR_LIMIT = 64
NEG_PAIR_RATIO = 4

_PRIOR_EPS = 1e-12


class _ClampDiagnostics:
    """Counts reverse-step probabilities nudged back into [0, 1]."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_diagnostics = _ClampDiagnostics()


@dataclass(frozen=True)
class DiffusionState:
    """Latent structure a_t at timestep t with its conditioning label."""

    graph: Graph
    t: int
    label: int = 0

    def __post_init__(self):
        if self.t < 0:
            raise ValueError(f"timestep must be >= 0, got {self.t}")


def forward_bit_prob(a0, t: int, sched: NoiseSchedule):
    """P(A^t = 1 | A^0 = a0), closed form."""
    abar = sched.abar(t)
    return abar * np.asarray(a0, dtype=np.float64) + (1.0 - abar) * sched.pi


def forward_step_bits(bits: np.ndarray, t: int, sched: NoiseSchedule,
                      rng: np.random.Generator) -> np.ndarray:
    """One forward step t-1 -> t applied elementwise to a bit array."""
    p1 = sched.a(t) * bits.astype(np.float64) + (1.0 - sched.a(t)) * sched.pi
    return (rng.random(bits.shape) < p1).astype(np.int8)


def _all_pairs(n: int) -> np.ndarray:
    iu = np.triu_indices(n, k=1)
    return np.stack(iu, axis=1).astype(np.int64)


def _edge_keys(pairs: np.ndarray, n: int) -> np.ndarray:
    return pairs[:, 0] * n + pairs[:, 1]


def pair_membership(pairs: np.ndarray, edge_set: frozenset) -> np.ndarray:
    """Boolean mask: which candidate pairs are edges of the given set."""
    return np.fromiter(
        ((int(u), int(v)) in edge_set for u, v in pairs),
        dtype=bool, count=len(pairs),
    )


_pair_membership = pair_membership


def sample_non_edges(n: int, edge_set: frozenset, k: int,
                     rng: np.random.Generator) -> list:
    """k distinct upper-triangle non-edges, uniform without replacement."""
    total = n * (n - 1) // 2
    avail = total - len(edge_set)
    if k > avail:
        raise ValueError(f"requested {k} non-edges but only {avail} exist")
    if k == 0:
        return []
    if total <= 200_000:
        pairs = _all_pairs(n)
        mask = ~_pair_membership(pairs, edge_set)
        candidates = pairs[mask]
        idx = rng.choice(len(candidates), size=k, replace=False)
        return [tuple(map(int, candidates[i])) for i in np.sort(idx)]
    picked: set = set()
    while len(picked) < k:
        batch = max(2 * (k - len(picked)), 64)
        us = rng.integers(0, n, size=batch)
        vs = rng.integers(0, n, size=batch)
        for u, v in zip(us, vs):
            if u == v:
                continue
            pair = (int(u), int(v)) if u < v else (int(v), int(u))
            if pair in edge_set or pair in picked:
                continue
            picked.add(pair)
            if len(picked) == k:
                break
    return sorted(picked)


def candidate_pairs(n: int, edge_set: frozenset, rng: np.random.Generator,
                    rho: int = NEG_PAIR_RATIO, min_non_edges: int = 0) -> np.ndarray:
    """Pairs scored by the denoiser: full upper triangle for small graphs,
    otherwise the current edges plus a uniform non-edge sample."""
    if n <= EXACT_PAIR_LIMIT:
        return _all_pairs(n)
    m = len(edge_set)
    total = n * (n - 1) // 2
    want = max(rho * max(m, 1), min_non_edges)
    want = min(want, total - m)
    non = sample_non_edges(n, edge_set, want, rng)
    pairs = sorted(edge_set) + non
    arr = np.array(sorted(pairs), dtype=np.int64)
    return arr if len(arr) else np.zeros((0, 2), dtype=np.int64)


def forward_marginal_sample(g0: Graph, t: int, sched: NoiseSchedule,
                            rng: np.random.Generator, label: int = 0) -> DiffusionState:
    """Sample a_t ~ q(A^t | A^0 = g0) sparsely.

    Each true edge survives with probability abar_t + (1-abar_t)*pi; when
    pi > 0 the number of switched-on non-edges is binomial and they are
    placed uniformly.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} outside [1, {sched.T}]")
    abar = sched.abar(t)
    pi = sched.pi
    edges = g0.edge_array
    p_keep = abar + (1.0 - abar) * pi
    kept_mask = rng.random(len(edges)) < p_keep
    kept = {tuple(map(int, e)) for e in edges[kept_mask]}
    if pi > 0.0:
        p_new = (1.0 - abar) * pi
        n_non = g0.n * (g0.n - 1) // 2 - g0.m
        k = int(rng.binomial(n_non, p_new)) if n_non > 0 else 0
        kept.update(sample_non_edges(g0.n, g0.edges, k, rng))
    return DiffusionState(graph=Graph(n=g0.n, edges=frozenset(kept)),
                          t=t, label=label)


def posterior_prob(a0: int, at: int, t: int, sched: NoiseSchedule) -> float:
    """Exact P(A^{t-1} = 1 | A^t = at, A^0 = a0) by Bayes on the 2-state chain."""
    if not 2 <= t <= sched.T:
        raise ValueError(f"posterior needs t in [2, {sched.T}], got {t}")
    if a0 not in (0, 1) or at not in (0, 1):
        raise ValueError("a0 and at must be bits")
    alpha = sched.a(t)
    abar_t = sched.abar(t)
    abar_prev = sched.abar(t - 1)
    pi = sched.pi

    marg1 = abar_t * a0 + (1.0 - abar_t) * pi       # P(A^t=1 | a0)
    prob_at = marg1 if at == 1 else 1.0 - marg1
    if prob_at == 0.0:
        raise ImpossibleLatentError(
            f"q(A^t={at} | A^0={a0}) = 0 under pi={pi}: impossible latent"
        )
    prior1 = abar_prev * a0 + (1.0 - abar_prev) * pi  # P(A^{t-1}=1 | a0)
    step_from1 = alpha + (1.0 - alpha) * pi           # P(A^t=1 | A^{t-1}=1)
    step = step_from1 if at == 1 else 1.0 - step_from1
    return step * prior1 / prob_at


def _mixture_coeffs(t: int, sched: NoiseSchedule):
    """Reverse-mixture tables indexed by at: P(A^{t-1}=1 | a0, at).

    Returns (given_a0_1, given_a0_0, forced) arrays of length 2. The cell
    (a0=0, at=1) is undefined under pi=0; it is zero-filled and flagged in
    `forced` because A^t=1 then structurally implies A^{t-1}=1.
    """
    given1 = np.zeros(2)
    given0 = np.zeros(2)
    forced = np.zeros(2, dtype=bool)
    for at in (0, 1):
        given1[at] = posterior_prob(1, at, t, sched)
        try:
            given0[at] = posterior_prob(0, at, t, sched)
        except ImpossibleLatentError:
            given0[at] = 0.0
            forced[at] = True
    return given1, given0, forced


def reverse_probabilities(at_bits: np.ndarray, p_hat, t: int,
                          sched: NoiseSchedule):
    """Per-pair P(A^{t-1} = 1 | A^t) under the predict-clean mixture.

    For t = 1 this is the clean-edge estimate p_hat itself. Accepts numpy
    arrays or torch tensors for p_hat; the forced branch (pi = 0, at = 1)
    returns 1 regardless of p_hat.
    """
    if t == 1:
        return p_hat
    given1, given0, forced = _mixture_coeffs(t, sched)
    at_bits = np.asarray(at_bits, dtype=np.int64)
    if isinstance(p_hat, torch.Tensor):
        c1 = torch.from_numpy(given1[at_bits])
        c0 = torch.from_numpy(given0[at_bits])
        forced_t = torch.from_numpy(forced[at_bits])
        mix = p_hat * c1 + (1.0 - p_hat) * c0
        out = torch.where(forced_t, torch.ones_like(mix), mix)
        bad = int((out < 0).sum() + (out > 1).sum())
        if bad:
            clamp_diagnostics.count += bad
            out = out.clamp(0.0, 1.0)
        return out
    p_hat = np.asarray(p_hat, dtype=np.float64)
    mix = p_hat * given1[at_bits] + (1.0 - p_hat) * given0[at_bits]
    out = np.where(forced[at_bits], 1.0, mix)
    bad = int(np.sum(out < 0) + np.sum(out > 1))
    if bad:
        clamp_diagnostics.count += bad
        out = np.clip(out, 0.0, 1.0)
    return out


def reverse_step_distribution(state: DiffusionState, p_hat, pairs: np.ndarray,
                              sched: NoiseSchedule):
    """Reverse-step Bernoulli probabilities for the given candidate pairs."""
    at_bits = _pair_membership(pairs, state.graph.edges).astype(np.int64)
    return reverse_probabilities(at_bits, p_hat, state.t, sched)


def _bernoulli_kl(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Elementwise KL(Bern(q) || Bern(p)); exact zero when q == p bitwise."""
    return (
        torch.xlogy(q, q) - torch.xlogy(q, p)
        + torch.xlogy(1.0 - q, 1.0 - q) - torch.xlogy(1.0 - q, 1.0 - p)
    )


@dataclass
class VlbTerms:
    loss: torch.Tensor        # differentiable: KL sum (t >= 2) or recon NLL (t = 1)
    kl_sum: float
    recon_nll: float
    prior_kl: float
    num_pairs: int
    t: int
    p_hat: torch.Tensor | None = None
    a0_bits: np.ndarray | None = None


def vlb_terms(g0: Graph, state: DiffusionState, pairs: np.ndarray,
              p_hat: torch.Tensor, sched: NoiseSchedule) -> VlbTerms:
    """Per-timestep variational-bound terms for precomputed predictions.

    For t >= 2: sum over candidate pairs of
    KL(q(A^{t-1}|A^t,A^0) || p_theta(A^{t-1}|A^t)); for t = 1 the Bernoulli
    reconstruction NLL of A^0 under p_hat. The prior KL(q(A^T|A^0) || p(A^T))
    is constant in the parameters and reported without gradient.
    """
    t = state.t
    a0_bits = _pair_membership(pairs, g0.edges).astype(np.int64)
    at_bits = _pair_membership(pairs, state.graph.edges).astype(np.int64)
    a0 = torch.from_numpy(a0_bits.astype(np.float64))
    if p_hat.numel() != len(pairs):
        raise ValueError("p_hat must align with candidate pairs")

    if t >= 2:
        given1, given0, forced = _mixture_coeffs(t, sched)
        undefined = (a0_bits == 0) & forced[at_bits]
        if np.any(undefined):
            raise ImpossibleLatentError(
                "state contains an edge impossible under the clean graph"
            )
        q_np = np.where(a0_bits == 1, given1[at_bits], given0[at_bits])
        q_np = np.where(forced[at_bits], 1.0, q_np)
        q = torch.from_numpy(q_np)
        p = reverse_probabilities(at_bits, p_hat, t, sched)
        kl = _bernoulli_kl(q, p).sum()
        loss = kl
        kl_sum = float(kl.detach())
        recon = 0.0
    else:
        nll = -(torch.xlogy(a0, p_hat) + torch.xlogy(1.0 - a0, 1.0 - p_hat)).sum()
        loss = nll
        recon = float(nll.detach())
        kl_sum = 0.0

    q_T = forward_bit_prob(a0_bits, sched.T, sched)
    pi_c = min(max(sched.pi, _PRIOR_EPS), 1.0 - _PRIOR_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        prior = (
            np.where(q_T > 0, q_T * np.log(q_T / pi_c), 0.0)
            + np.where(q_T < 1, (1 - q_T) * np.log((1 - q_T) / (1 - pi_c)), 0.0)
        )
    return VlbTerms(loss=loss, kl_sum=kl_sum, recon_nll=recon,
                    prior_kl=float(prior.sum()), num_pairs=len(pairs), t=t,
                    p_hat=p_hat, a0_bits=a0_bits)


def vlb_loss(g0: Graph, denoiser, sched: NoiseSchedule, t: int,
             rng: np.random.Generator, label: int = 0,
             state: DiffusionState | None = None,
             pairs: np.ndarray | None = None) -> VlbTerms:
    """Corrupt g0 to timestep t and evaluate the variational-bound terms."""
    if state is None:
        state = forward_marginal_sample(g0, t, sched, rng, label=label)
    if pairs is None:
        pairs = candidate_pairs(g0.n, g0.edges, rng)
    h = denoiser.encode(state)
    p_hat = denoiser.predict_edges(h, pairs)
    return vlb_terms(g0, state, pairs, p_hat, sched)


def sample(n: int, label: int, denoiser, sched: NoiseSchedule,
           rng: np.random.Generator, guidance=None,
           threshold_q: float | None = None, trace: list | None = None,
           tag=None) -> Graph:
    """Generate an n-node structure by running the reverse chain T..1.

    `guidance`, when given, is called as guidance(h, pairs) between the
    encoder and the edge decoder at every step. With threshold_q set,
    edges are kept deterministically when their probability exceeds q
    instead of being sampled.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if threshold_q is not None and not 0.0 < threshold_q < 1.0:
        raise ValueError(f"threshold_q must be in (0, 1), got {threshold_q}")
    pi = sched.pi
    if pi == 0.0:
        edges: frozenset = frozenset()
    else:
        total = n * (n - 1) // 2
        k = int(rng.binomial(total, pi)) if total else 0
        edges = frozenset(sample_non_edges(n, frozenset(), k, rng))

    for t in range(sched.T, 0, -1):
        state = DiffusionState(graph=Graph(n=n, edges=edges), t=t, label=label)
        pairs = candidate_pairs(n, edges, rng, min_non_edges=n)
        if len(pairs) == 0:
            break
        h = denoiser.encode(state)
        if guidance is not None:
            try:
                h = guidance(h, pairs)
            except Exception as exc:
                raise GuidanceError(
                    f"guidance failed at t={t} (graph {tag!r})"
                ) from exc
        p_hat = denoiser.predict_edges(h, pairs)
        if isinstance(p_hat, torch.Tensor):
            p_hat = p_hat.detach().numpy()
        at_bits = _pair_membership(pairs, edges).astype(np.int64)
        probs = reverse_probabilities(at_bits, np.asarray(p_hat, dtype=np.float64),
                                      t, sched)
        if threshold_q is not None:
            keep = probs > threshold_q
        else:
            keep = rng.random(len(pairs)) < probs
        edges = frozenset(tuple(map(int, p)) for p in pairs[keep])
        if trace is not None:
            trace.append({"t": t, "edges": len(edges),
                          "mean_p_hat": float(np.mean(p_hat)) if len(p_hat) else 0.0})
    return Graph(n=n, edges=edges)
