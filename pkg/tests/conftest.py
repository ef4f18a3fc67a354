import numpy as np
import pytest
import torch

from diffaug import DenoiserConfig, Denoiser, build_schedule
from diffaug.denoiser import HiddenStates
from diffaug.schedule import NoiseSchedule

torch.set_num_threads(1)


TINY_CFG = DenoiserConfig(d=16, layers=2, heads=2, dropout=0.0,
                          max_degree_clip=64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def sched8():
    return build_schedule(8, "cosine", 0.0)


@pytest.fixture
def tiny_denoiser():
    den = Denoiser(TINY_CFG, num_labels=2, T=8, seed=0)
    den.eval()
    return den


def random_schedule(rng: np.random.Generator, T: int | None = None,
                    pi: float = 0.0) -> NoiseSchedule:
    """Schedule with random strictly-decreasing abar, for oracle tests."""
    T = T or int(rng.integers(2, 24))
    alpha = rng.uniform(0.55, 0.98, size=T)
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=np.cumprod(alpha),
                         pi=float(pi))


def random_graph(rng: np.random.Generator, n: int | None = None,
                 p: float = 0.3):
    from diffaug import Graph
    n = n or int(rng.integers(2, 12))
    iu = np.triu_indices(n, k=1)
    mask = rng.random(len(iu[0])) < p
    edges = frozenset((int(a), int(b)) for a, b in zip(iu[0][mask], iu[1][mask]))
    return Graph(n=n, edges=edges)


class StubDenoiser:
    """Denoiser stand-in with a fixed clean-edge probability function."""

    def __init__(self, prob_fn, d: int = 4):
        self.prob_fn = prob_fn
        self.d = d

    def encode(self, state):
        return HiddenStates(h=torch.zeros((state.graph.n, self.d),
                                          dtype=torch.float64),
                            t=state.t, label=state.label)

    def predict_edges(self, h, pairs):
        vals = np.array([self.prob_fn(int(i), int(j)) for i, j in pairs],
                        dtype=np.float64)
        return torch.from_numpy(vals)


def perfect_denoiser(g0):
    """Predicts the clean adjacency exactly."""
    edges = g0.edges
    return StubDenoiser(lambda i, j: 1.0 if (i, j) in edges else 0.0)


def constant_denoiser(p: float):
    return StubDenoiser(lambda i, j: p)
