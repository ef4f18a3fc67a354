import math

import numpy as np
import pytest
import torch

from diffaug import Graph, build_schedule
from diffaug import diffusion as D
from diffaug.errors import GuidanceError, ImpossibleLatentError
from diffaug.schedule import NoiseSchedule
from diffaug.toycorpus import complete_graph, path_graph

from conftest import (
    StubDenoiser,
    constant_denoiser,
    perfect_denoiser,
    random_graph,
    random_schedule,
)


def chain_posterior(a0: int, at: int, t: int, sched: NoiseSchedule) -> float:
    """Brute-force Bayes over the enumerated two-state chain.

    Runs the per-step transition forward t-1 steps, forms the joint with the
    final step, and conditions. Uses only the per-step alphas, never the
    closed-form cumulative product.
    """
    pi = sched.pi
    d = np.array([1.0 - a0, float(a0)])
    for s in range(1, t):
        a = sched.a(s)
        p1 = d[1] * (a + (1 - a) * pi) + d[0] * ((1 - a) * pi)
        d = np.array([1.0 - p1, p1])
    a = sched.a(t)
    step = lambda x: a * x + (1 - a) * pi  # P(A^t = 1 | A^{t-1} = x)
    joint = np.array([
        d[0] * (step(0) if at == 1 else 1 - step(0)),
        d[1] * (step(1) if at == 1 else 1 - step(1)),
    ])
    total = joint.sum()
    if total == 0.0:
        raise ImpossibleLatentError("unreachable configuration")
    return joint[1] / total


def chain_marginal(a0: int, t: int, sched: NoiseSchedule) -> float:
    d = float(a0)
    for s in range(1, t + 1):
        a = sched.a(s)
        d = d * (a + (1 - a) * sched.pi) + (1 - d) * (1 - a) * sched.pi
    return d


class TestPosterior:
    def test_hand_example(self):
        alpha = np.array([0.8, 0.75])  # abar = [0.8, 0.6]
        sc = NoiseSchedule(T=2, alpha=alpha, alpha_bar=np.cumprod(alpha), pi=0.0)
        assert D.posterior_prob(1, 0, 2, sc) == pytest.approx(0.5, abs=1e-15)
        assert D.posterior_prob(1, 1, 2, sc) == 1.0
        assert D.posterior_prob(0, 0, 2, sc) == 0.0

    def test_impossible_configuration(self):
        alpha = np.array([0.8, 0.75])
        sc = NoiseSchedule(T=2, alpha=alpha, alpha_bar=np.cumprod(alpha), pi=0.0)
        with pytest.raises(ImpossibleLatentError):
            D.posterior_prob(0, 1, 2, sc)

    def test_t_range(self, sched8):
        with pytest.raises(ValueError):
            D.posterior_prob(1, 1, 1, sched8)
        with pytest.raises(ValueError):
            D.posterior_prob(1, 1, 9, sched8)

    def test_matches_bruteforce_bayes(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 300:
            pi = float(rng.choice([0.0, 0.5, rng.uniform(0.05, 0.9)]))
            sched = random_schedule(rng, pi=pi)
            t = int(rng.integers(2, sched.T + 1))
            a0 = int(rng.integers(0, 2))
            at = int(rng.integers(0, 2))
            try:
                expected = chain_posterior(a0, at, t, sched)
            except ImpossibleLatentError:
                with pytest.raises(ImpossibleLatentError):
                    D.posterior_prob(a0, at, t, sched)
                continue
            got = D.posterior_prob(a0, at, t, sched)
            assert got == pytest.approx(expected, abs=1e-12)
            checked += 1

    def test_marginal_composition_identity(self):
        # sum_x q(a_t | x) q(x | a_0) == q(a_t | a_0), exactly
        rng = np.random.default_rng(1)
        for _ in range(50):
            pi = float(rng.choice([0.0, 0.5, 0.25]))
            sched = random_schedule(rng, pi=pi)
            t = int(rng.integers(2, sched.T + 1))
            for a0 in (0, 1):
                prior1 = sched.abar(t - 1) * a0 + (1 - sched.abar(t - 1)) * pi
                a = sched.a(t)
                step1 = a + (1 - a) * pi
                step0 = (1 - a) * pi
                composed = step1 * prior1 + step0 * (1 - prior1)
                closed = sched.abar(t) * a0 + (1 - sched.abar(t)) * pi
                assert composed == pytest.approx(closed, abs=1e-12)


class TestForward:
    def test_identity_endpoint(self):
        # abar == 1 keeps the clean graph exactly (pi = 0)
        sc = NoiseSchedule(T=1, alpha=np.array([1.0]),
                           alpha_bar=np.array([1.0]), pi=0.0)
        g = complete_graph(5)
        state = D.forward_marginal_sample(g, 1, sc, np.random.default_rng(0))
        assert state.graph.edges == g.edges

    def test_absorbing_containment(self, sched8):
        rng = np.random.default_rng(2)
        g = random_graph(rng, n=12, p=0.5)
        for _ in range(300):
            t = int(rng.integers(1, 9))
            state = D.forward_marginal_sample(g, t, sched8, rng)
            assert state.graph.edges <= g.edges

    def test_edge_count_binomial(self):
        # abar = 0.5, pi = 0: kept edges ~ Binomial(m, 0.5)
        alpha = np.array([0.5])
        sc = NoiseSchedule(T=1, alpha=alpha, alpha_bar=alpha, pi=0.0)
        g = complete_graph(46)  # m = 1035
        rng = np.random.default_rng(3)
        counts = [D.forward_marginal_sample(g, 1, sc, rng).graph.m
                  for _ in range(200)]
        mean = np.mean(counts)
        sigma = math.sqrt(g.m * 0.25) / math.sqrt(len(counts))
        assert abs(mean - g.m * 0.5) < 4 * sigma

    def test_pi_positive_adds_edges(self):
        alpha = np.array([0.01])
        sc = NoiseSchedule(T=1, alpha=alpha, alpha_bar=alpha, pi=0.5)
        g = Graph(n=30, edges=frozenset({(0, 1)}))
        rng = np.random.default_rng(4)
        state = D.forward_marginal_sample(g, 1, sc, rng)
        assert state.graph.m > 50  # ~ half of 435 pairs switched on

    def test_step_simulation_matches_closed_form(self):
        rng = np.random.default_rng(5)
        trials = 40_000
        for pi in (0.0, 0.5, 0.13):
            sched = random_schedule(rng, T=6, pi=pi)
            t = int(rng.integers(1, 7))
            for a0 in (0, 1):
                bits = np.full(trials, a0, dtype=np.int8)
                for s in range(1, t + 1):
                    bits = D.forward_step_bits(bits, s, sched, rng)
                frac = bits.mean()
                p = chain_marginal(a0, t, sched)
                closed = sched.abar(t) * a0 + (1 - sched.abar(t)) * pi
                assert p == pytest.approx(closed, abs=1e-12)
                sigma = math.sqrt(max(p * (1 - p), 1e-12) / trials)
                assert abs(frac - p) < 4 * sigma

    def test_t_out_of_range(self, sched8):
        g = path_graph(4)
        with pytest.raises(ValueError):
            D.forward_marginal_sample(g, 0, sched8, np.random.default_rng(0))
        with pytest.raises(ValueError):
            D.forward_marginal_sample(g, 9, sched8, np.random.default_rng(0))


class TestReverseStep:
    def _sched(self):
        alpha = np.array([0.8, 0.75])  # abar = [0.8, 0.6]
        return NoiseSchedule(T=2, alpha=alpha, alpha_bar=np.cumprod(alpha),
                             pi=0.0)

    def test_degenerate_mixture_equals_posterior(self):
        sc = self._sched()
        at = np.array([0, 1])
        out = D.reverse_probabilities(at, np.array([1.0, 1.0]), 2, sc)
        assert out[0] == pytest.approx(D.posterior_prob(1, 0, 2, sc), abs=1e-15)
        assert out[1] == 1.0

    def test_absorbing_edge_stays(self):
        sc = self._sched()
        out = D.reverse_probabilities(np.array([1]), np.array([0.123]), 2, sc)
        assert out[0] == 1.0

    def test_hand_mixture(self):
        sc = self._sched()
        out = D.reverse_probabilities(np.array([0]), np.array([0.4]), 2, sc)
        assert out[0] == pytest.approx(0.2, abs=1e-15)

    def test_t1_returns_p_hat(self):
        sc = self._sched()
        p = np.array([0.37, 0.9])
        assert D.reverse_probabilities(np.array([0, 1]), p, 1, sc) is p

    def test_outputs_in_unit_interval(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            pi = float(rng.choice([0.0, 0.5, 0.3]))
            sched = random_schedule(rng, pi=pi)
            t = int(rng.integers(2, sched.T + 1))
            at = rng.integers(0, 2, size=32)
            p_hat = rng.random(32)
            out = D.reverse_probabilities(at, p_hat, t, sched)
            assert np.all(out >= 0) and np.all(out <= 1)

    def test_state_wrapper(self, sched8, tiny_denoiser):
        rng = np.random.default_rng(7)
        g = random_graph(rng, n=8, p=0.4)
        state = D.forward_marginal_sample(g, 4, sched8, rng)
        pairs = D.candidate_pairs(g.n, g.edges, rng)
        h = tiny_denoiser.encode(state)
        p_hat = tiny_denoiser.predict_edges(h, pairs)
        out = D.reverse_step_distribution(state, p_hat, pairs, sched8)
        vals = out.detach().numpy()
        assert np.all(vals >= 0) and np.all(vals <= 1)


def bernoulli_kl_explicit(q1: float, p1: float) -> float:
    """KL between two explicitly enumerated Bernoulli distributions."""
    total = 0.0
    for x, (qx, px) in enumerate(zip((1 - q1, q1), (1 - p1, p1))):
        if qx == 0.0:
            continue
        total += qx * math.log(qx / px)
    return total


class TestVlb:
    def test_perfect_denoiser_zero_kl(self, sched8):
        rng = np.random.default_rng(8)
        for _ in range(10):
            g = random_graph(rng, n=7, p=0.4)
            den = perfect_denoiser(g)
            for t in range(2, 9):
                terms = D.vlb_loss(g, den, sched8, t, rng)
                assert abs(float(terms.loss)) <= 1e-9

    def test_t1_uniform_nll(self, sched8):
        g = complete_graph(4)  # every candidate pair is a true edge
        den = constant_denoiser(0.5)
        rng = np.random.default_rng(9)
        terms = D.vlb_loss(g, den, sched8, 1, rng)
        assert float(terms.loss.detach()) == pytest.approx(terms.num_pairs * math.log(2),
                                                  rel=1e-12)

    def test_bruteforce_kl_on_4_node_graphs(self, sched8, tiny_denoiser):
        rng = np.random.default_rng(10)
        for _ in range(10):
            g = random_graph(rng, n=4, p=0.5)
            t = int(rng.integers(2, 9))
            state = D.forward_marginal_sample(g, t, sched8, rng)
            pairs = D.candidate_pairs(g.n, g.edges, rng)
            h = tiny_denoiser.encode(state)
            p_hat = tiny_denoiser.predict_edges(h, pairs)
            terms = D.vlb_terms(g, state, pairs, p_hat, sched8)

            expected = 0.0
            phat_np = p_hat.detach().numpy()
            for idx, (i, j) in enumerate(map(tuple, pairs)):
                a0 = 1 if (i, j) in g.edges else 0
                at = 1 if (i, j) in state.graph.edges else 0
                q1 = chain_posterior(a0, at, t, sched8)
                if at == 1 and sched8.pi == 0.0:
                    p1 = 1.0
                else:
                    p1 = (phat_np[idx] * chain_posterior(1, at, t, sched8)
                          + (1 - phat_np[idx]) * chain_posterior(0, at, t, sched8))
                expected += bernoulli_kl_explicit(q1, p1)
            assert float(terms.loss.detach()) == pytest.approx(expected, abs=1e-9)

    def test_prior_term_reported_without_grad(self, sched8, tiny_denoiser):
        rng = np.random.default_rng(11)
        g = random_graph(rng, n=6, p=0.4)
        terms = D.vlb_loss(g, tiny_denoiser, sched8, 3, rng)
        assert isinstance(terms.prior_kl, float)
        assert terms.prior_kl >= 0.0

    def test_inconsistent_state_rejected(self, sched8):
        g = Graph(n=4, edges=frozenset({(0, 1)}))
        # an edge at t that is absent from the clean graph: impossible at pi=0
        bad = D.DiffusionState(graph=Graph(n=4, edges=frozenset({(2, 3)})), t=3)
        pairs = D.candidate_pairs(4, g.edges, np.random.default_rng(0))
        p_hat = torch.full((len(pairs),), 0.5, dtype=torch.float64)
        with pytest.raises(ImpossibleLatentError):
            D.vlb_terms(g, bad, pairs, p_hat, sched8)


class TestCandidatePairs:
    def test_small_graph_exact(self, rng):
        pairs = D.candidate_pairs(10, frozenset({(0, 1)}), rng)
        assert len(pairs) == 45
        assert np.all(pairs[:, 0] < pairs[:, 1])

    def test_large_graph_subsampled(self, rng):
        g = random_graph(rng, n=100, p=0.05)
        pairs = D.candidate_pairs(g.n, g.edges, rng)
        keys = {tuple(p) for p in pairs}
        assert set(g.edges) <= keys
        assert len(keys) == len(pairs)
        assert np.all(pairs[:, 0] < pairs[:, 1])
        assert len(pairs) >= 4 * g.m

    def test_non_edge_floor_for_sampler(self, rng):
        pairs = D.candidate_pairs(80, frozenset(), rng, min_non_edges=80)
        assert len(pairs) >= 80


class TestSampling:
    def test_zero_predictor_gives_empty_graph(self, sched8):
        out = D.sample(10, 0, constant_denoiser(0.0), sched8,
                       np.random.default_rng(12))
        assert out.n == 10 and out.m == 0

    def test_threshold_recovers_target_set(self, sched8):
        target = {(0, 1), (1, 2), (3, 4), (0, 5)}
        den = StubDenoiser(lambda i, j: 1.0 if (i, j) in target else 0.0)
        out = D.sample(6, 0, den, sched8, np.random.default_rng(13),
                       threshold_q=0.5)
        assert out.edges == target

    def test_single_node(self, sched8, tiny_denoiser):
        out = D.sample(1, 0, tiny_denoiser, sched8, np.random.default_rng(14))
        assert out.n == 1 and out.m == 0

    def test_no_self_loops_or_duplicates(self, sched8):
        out = D.sample(12, 0, constant_denoiser(0.7), sched8,
                       np.random.default_rng(15))
        for u, v in out.edges:
            assert u < v

    def test_trace_records_steps(self, sched8):
        trace = []
        D.sample(6, 0, constant_denoiser(0.4), sched8,
                 np.random.default_rng(16), trace=trace)
        assert [r["t"] for r in trace] == list(range(8, 0, -1))

    def test_guidance_failure_context(self, sched8, tiny_denoiser):
        def broken(h, pairs):
            raise RuntimeError("boom")

        with pytest.raises(GuidanceError, match="t=8"):
            D.sample(6, 0, tiny_denoiser, sched8, np.random.default_rng(17),
                     guidance=broken, tag="g0")

    def test_uniform_kernel_start(self):
        sc = build_schedule(4, "cosine", pi=0.5)
        out = D.sample(12, 0, constant_denoiser(0.5), sc,
                       np.random.default_rng(18))
        assert out.n == 12
