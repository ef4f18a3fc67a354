import json

import numpy as np
import pytest
import torch

from diffaug import (
    Denoiser,
    DenoiserConfig,
    Graph,
    GuidanceConfig,
    HeadSpec,
    build_schedule,
)
from diffaug import diffusion as D
from diffaug.augment import (
    AugmentPlan,
    augment_graph_classification,
    augment_link_prediction,
    augment_node_classification,
    export_tu_dataset,
    merge_generated_with_train,
    write_provenance,
)
from diffaug.denoiser import Checkpoint
from diffaug.downstream import LinkSplit, make_link_split
from diffaug.errors import DataError
from diffaug.graphs import load_tu_corpus
from diffaug.guidance import train_head
from diffaug.toycorpus import (
    make_toy_graph_dataset,
    make_toy_link_graph,
    make_toy_node_graph,
    path_graph,
)

from conftest import TINY_CFG, constant_denoiser, random_graph


@pytest.fixture(scope="module")
def ckpt():
    sched = build_schedule(6, "cosine", 0.0)
    den = Denoiser(TINY_CFG, num_labels=1, T=6, seed=0)
    den.eval()
    return Checkpoint(denoiser=den, config=TINY_CFG, schedule=sched,
                      cluster_model=None)


def stub_ckpt(prob, T=6):
    sched = build_schedule(T, "cosine", 0.0)
    return Checkpoint(denoiser=constant_denoiser(prob), config=TINY_CFG,
                      schedule=sched, cluster_model=None)


class TestPlan:
    def test_zero_repeats_rejected(self):
        with pytest.raises(DataError):
            AugmentPlan(task="graph", repeats=0)

    def test_graph_grid(self):
        for r in (1, 5, 10, 32, 64):
            assert AugmentPlan(task="graph", repeats=r).repeats == r
        with pytest.raises(DataError):
            AugmentPlan(task="graph", repeats=3)

    def test_node_grid(self):
        for r in (1, 5, 10):
            assert AugmentPlan(task="node", repeats=r).repeats == r
        with pytest.raises(DataError):
            AugmentPlan(task="node", repeats=32)

    def test_unknown_task(self):
        with pytest.raises(DataError):
            AugmentPlan(task="edge")


class TestGraphAugmentation:
    def test_split_doubles_with_one_repeat(self, ckpt):
        train = make_toy_graph_dataset(per_class=4, seed=0)
        plan = AugmentPlan(task="graph", repeats=1,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        aug = augment_graph_classification(train, ckpt, None, plan,
                                           np.random.default_rng(0))
        assert len(aug.graphs) == 2 * len(train)
        assert len(aug.originals) == len(train)

    def test_split_size_arithmetic(self, ckpt):
        train = make_toy_graph_dataset(per_class=2, seed=1)
        plan = AugmentPlan(task="graph", repeats=5,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        aug = augment_graph_classification(train, ckpt, None, plan,
                                           np.random.default_rng(0))
        assert len(aug.graphs) == len(train) * (1 + 5)

    def test_features_and_labels_preserved_bitwise(self, ckpt):
        train = make_toy_graph_dataset(per_class=3, seed=2)
        plan = AugmentPlan(task="graph", repeats=1,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        aug = augment_graph_classification(train, ckpt, None, plan,
                                           np.random.default_rng(0))
        for g, src in aug.synthetics:
            source = train[src]
            assert g.node_features is source.node_features or \
                np.array_equal(g.node_features, source.node_features)
            assert g.graph_label == source.graph_label
            assert g.n == source.n

    def test_guided_path_runs(self, ckpt):
        train = make_toy_graph_dataset(per_class=2, seed=3)
        head = train_head(ckpt, train, HeadSpec("graph_label", r=2),
                          epochs=2, seed=0)
        plan = AugmentPlan(task="graph", repeats=1,
                           guidance_cfg=GuidanceConfig(gamma=0.5, num_updates=2))
        aug = augment_graph_classification(train, ckpt, head, plan,
                                           np.random.default_rng(0))
        assert len(aug.synthetics) == len(train)

    def test_guided_without_head_rejected(self, ckpt):
        train = make_toy_graph_dataset(per_class=1, seed=3)
        plan = AugmentPlan(task="graph", repeats=1,
                           guidance_cfg=GuidanceConfig(gamma=0.5, num_updates=2))
        with pytest.raises(DataError):
            augment_graph_classification(train, ckpt, None, plan,
                                         np.random.default_rng(0))


class TestLinkAugmentation:
    def test_empty_generation_keeps_exactly_train(self):
        g = make_toy_link_graph(30, seed=0)
        split = make_link_split(g, 0.1, 0.2, seed=0)
        plan = AugmentPlan(task="link",
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        out = augment_link_prediction(g, split, stub_ckpt(0.0), None, plan,
                                      np.random.default_rng(0))
        assert out.edges == {tuple(e) for e in split.train}

    def test_training_edges_always_preserved(self):
        rng = np.random.default_rng(1)
        plan = AugmentPlan(task="link",
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        ck = stub_ckpt(0.6, T=4)
        for trial in range(25):
            g = random_graph(rng, n=int(rng.integers(8, 24)), p=0.3)
            if g.m < 5:
                continue
            split = make_link_split(g, 0.1, 0.2, seed=trial)
            out = augment_link_prediction(g, split, ck, None, plan, rng)
            train_set = {tuple(e) for e in split.train}
            assert train_set <= set(out.edges)

    def test_val_test_edges_not_visible(self):
        # with a zero generator the output is exactly the training edges,
        # so no val/test edge can leak through generation
        g = make_toy_link_graph(24, seed=2)
        split = make_link_split(g, 0.15, 0.25, seed=1)
        plan = AugmentPlan(task="link",
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        out = augment_link_prediction(g, split, stub_ckpt(0.0), None, plan,
                                      np.random.default_rng(0))
        held_out = {tuple(e) for e in np.concatenate([split.val, split.test])}
        assert not (held_out & set(out.edges))

    def test_partitioned_identity_round_trip(self):
        g = path_graph(16)
        split = LinkSplit(train=g.edge_array,
                          val=np.zeros((0, 2), dtype=np.int64),
                          test=np.zeros((0, 2), dtype=np.int64))
        plan = AugmentPlan(task="link", max_block_nodes=4,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        out = augment_link_prediction(g, split, stub_ckpt(0.0), None, plan,
                                      np.random.default_rng(0))
        assert out.edges == g.edges

    def test_partitioned_preserves_cut_train_edges(self):
        rng = np.random.default_rng(3)
        g = random_graph(rng, n=40, p=0.15)
        split = make_link_split(g, 0.1, 0.1, seed=2)
        plan = AugmentPlan(task="link", max_block_nodes=10,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        out = augment_link_prediction(g, split, stub_ckpt(0.4, T=4), None,
                                      plan, rng)
        assert {tuple(e) for e in split.train} <= set(out.edges)

    def test_merge_invariant_randomized(self):
        rng = np.random.default_rng(4)
        for _ in range(500):
            n = int(rng.integers(4, 20))
            gen = random_graph(rng, n=n, p=float(rng.uniform(0, 0.5)))
            base = random_graph(rng, n=n, p=float(rng.uniform(0.1, 0.5)))
            merged = merge_generated_with_train(gen, base.edge_array)
            assert base.edges <= merged.edges
            assert gen.edges <= merged.edges


class TestNodeAugmentation:
    def test_smoke_on_toy_graph(self, ckpt):
        g = make_toy_node_graph(30, seed=0)
        plan = AugmentPlan(task="node", repeats=1, hop_radius=2,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        items = augment_node_classification(g, [0, 1, 2], ckpt, None, plan,
                                            np.random.default_rng(0))
        assert len(items) == 3 * (1 + 1)
        for ego, src, synthetic in items:
            assert ego.graph.graph_label == int(g.node_labels[src])
            assert ego.hop_radius == 2

    def test_repeats_scaling(self, ckpt):
        g = make_toy_node_graph(30, seed=1)
        plan = AugmentPlan(task="node", repeats=5, hop_radius=2,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        items = augment_node_classification(g, [4, 9], ckpt, None, plan,
                                            np.random.default_rng(0))
        assert len(items) == 2 * (1 + 5)

    def test_features_preserved_on_variants(self, ckpt):
        g = make_toy_node_graph(24, seed=2)
        plan = AugmentPlan(task="node", repeats=1, hop_radius=2,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        items = augment_node_classification(g, [5], ckpt, None, plan,
                                            np.random.default_rng(0))
        original = next(it for it in items if not it[2])
        variant = next(it for it in items if it[2])
        assert np.array_equal(original[0].graph.node_features,
                              variant[0].graph.node_features)

    def test_hop_radius_matches_receptive_field(self, ckpt):
        # 2-hop subgraphs for the default 2-layer downstream classifier
        plan = AugmentPlan(task="node",
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        assert plan.hop_radius == 2
        assert plan.downstream.model == "gin"  # overridden per task by the cli


class TestExport:
    def test_tu_round_trip(self, tmp_path, ckpt):
        train = make_toy_graph_dataset(per_class=3, seed=4)
        plan = AugmentPlan(task="graph", repeats=1,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        aug = augment_graph_classification(train, ckpt, None, plan,
                                           np.random.default_rng(0))
        export_tu_dataset(aug.graphs, tmp_path / "ds", name="TOY")
        corpus = load_tu_corpus(tmp_path / "ds")
        assert len(corpus) == len(aug.graphs)
        for orig, loaded in zip(aug.graphs, corpus.graphs):
            assert loaded.n == orig.n
            assert loaded.edges == orig.edges
            assert np.allclose(loaded.node_features, orig.node_features)

    def test_provenance_records(self, tmp_path, ckpt):
        train = make_toy_graph_dataset(per_class=2, seed=5)
        plan = AugmentPlan(task="graph", repeats=1,
                           guidance_cfg=GuidanceConfig(ablation="no_guidance"))
        aug = augment_graph_classification(train, ckpt, None, plan,
                                           np.random.default_rng(0))
        path = tmp_path / "prov.jsonl"
        write_provenance(aug, path, seed=7, extra={"ablation": "no_guidance"})
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(rows) == len(aug.graphs)
        synth = [r for r in rows if r["synthetic"]]
        assert len(synth) == len(train)
        assert all(r["ablation"] == "no_guidance" for r in rows)
        assert all(r["seed"] == 7 for r in rows)
