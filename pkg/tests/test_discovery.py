import numpy as np
import pytest

from _oracles import reference_top_w, run_both
from mmkd.config import LinkPolicy, Strategy
from mmkd.discovery import (
    assign_global, assign_local, build_candidates, discovery_pass, estimate_popularity, label_threshold,
)
from mmkd.graph import MultiModalGraph
from mmkd.scorers import MatrixScorer
from mmkd.synthetic import WorldSpec, generate_world


def small_world(seed=0, n_images=20):
    return generate_world(WorldSpec(n_images=n_images, n_concepts=30, seed=seed))


class TestCandidates:
    def test_wide_window_keeps_everything(self):
        s = np.random.default_rng(0).random((3, 5))
        c = build_candidates(s, 3, 5, 10)
        assert all(sorted(r) == list(range(5)) for r in c.img_to_txt.tolist())

    def test_ties_go_to_low_index(self):
        c = build_candidates(np.full((4, 6), 0.3), 4, 6, 2)
        assert c.img_to_txt.tolist() == [[0, 1]] * 4
        assert c.txt_to_img.tolist() == [[0, 1]] * 6

    def test_against_exhaustive_sort(self):
        s = np.array([[0.1, 0.9, 0.5, 0.5, 0.2], [0.7, 0.7, 0.1, 0.0, 0.3], [0.4, 0.2, 0.8, 0.6, 0.8]])
        c = build_candidates(s, 3, 5, 3)
        assert c.img_to_txt.tolist() == reference_top_w(s, 3)
        assert c.txt_to_img.tolist() == reference_top_w(s.T, 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            build_candidates(np.zeros((0, 3)), 0, 3, 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_candidates(np.zeros((2, 3)), 3, 3, 2)


class TestThresholds:
    def test_popularity_mean(self):
        assert estimate_popularity([0.2, 0.4, 0.6], 3) == pytest.approx(0.4, abs=1e-15)

    def test_popularity_top_one(self):
        assert estimate_popularity([0.2, 0.9, 0.6], 1) == 0.9

    def test_popularity_empty(self):
        with pytest.raises(ValueError):
            estimate_popularity([], 2)

    def test_power_identity(self):
        assert label_threshold(0.25, 1.0) == 0.25

    def test_one_stays_one(self):
        assert label_threshold(1.0, 0.37) == 1.0

    def test_power(self):
        assert label_threshold(0.5, 0.98) == pytest.approx(0.5 ** 0.98, abs=1e-15)
        assert label_threshold(0.5, 0.98) == pytest.approx(0.50697, abs=1e-5)


class TestAssign:
    def test_bl_weak(self):
        assert assign_global(0.9, LinkPolicy(strategy=Strategy.BL), 0.8, 0.95) == 0.5

    def test_bl_strong(self):
        assert assign_global(0.9, LinkPolicy(strategy=Strategy.BL), 0.8, 0.8) == 1.0

    def test_ge_comparison(self):
        assert assign_global(0.8, LinkPolicy(strategy=Strategy.BL), 0.8, 0.8) == 1.0
        assert assign_global(0.6, LinkPolicy(strategy=Strategy.AT, abs_threshold=0.6)) == 1.0

    def test_la_single_threshold(self):
        assert assign_global(0.85, LinkPolicy(strategy=Strategy.LA), 0.8, 0.99) == 1.0

    def test_at_against_brute_force(self):
        s = np.random.default_rng(1).random((10, 50))
        pol = LinkPolicy(strategy=Strategy.AT, abs_threshold=0.6)
        got = {(i, j) for i in range(10) for j in range(50) if assign_global(s[i, j], pol) == 1.0}
        assert got == set(zip(*np.nonzero(s >= 0.6)))

    def test_local_gate(self):
        assert assign_local(np.ones((2, 2)), 0.0, 0.1) == []

    def test_local_single_object(self):
        assert assign_local(np.array([[1.0], [1.0]]), 1.0, 1.0) == [(0, 0), (1, 0)]

    def test_local_softmax_threshold(self):
        cos = np.array([[0.9, 0.1, 0.1], [0.2, 0.3, 1.5]])
        probs = np.exp(cos) / np.exp(cos).sum(axis=1, keepdims=True)
        expect = [(r, c) for r in range(2) for c in range(3) if probs[r, c] >= 0.5]
        assert assign_local(probs, 0.5, 0.5) == expect


class TestPass:
    def test_perfect_scorer_recovers_truth(self):
        c = small_world()
        s = np.zeros((c.n_images, c.n_sentences))
        for i, j in c.gt_global:
            s[i, j] = 1.0
        g = MultiModalGraph(c.image_objects, c.sentence_phrases)
        cands = build_candidates(s, c.n_images, c.n_sentences, 40)
        discovery_pass(MatrixScorer(s, c), g, c, cands, LinkPolicy())
        in_cands = {(i, j) for i, j in c.gt_global if j in cands.img_to_txt[i] or i in cands.txt_to_img[j]}
        assert g.strong_pairs() == in_cands == c.gt_global

    def test_constant_scorer_under_at(self):
        c = small_world()
        s = np.full((c.n_images, c.n_sentences), 0.5)
        g = MultiModalGraph(c.image_objects, c.sentence_phrases)
        pol = LinkPolicy(strategy=Strategy.AT, abs_threshold=0.6)
        discovery_pass(MatrixScorer(s, c), g, c, build_candidates(s, c.n_images, c.n_sentences, 40), pol)
        assert not g.strong_pairs() and not g.local_pairs()

    @pytest.mark.parametrize("strategy", list(Strategy))
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_reference(self, strategy, seed):
        c = small_world(seed)
        s = np.random.default_rng(seed).random((c.n_images, c.n_sentences))
        pol = LinkPolicy(strategy=strategy, width=12, k_img=5, k_txt=2, local_threshold=0.4)
        got_g, got_l, ref_g, ref_l = run_both(c, s, pol, seed)
        assert got_g == ref_g
        assert got_l == ref_l

    def test_stale_candidates(self):
        c = small_world()
        s = np.random.default_rng(0).random((c.n_images, c.n_sentences))
        cands = build_candidates(s[:-1], c.n_images - 1, c.n_sentences, 5)
        with pytest.raises(ValueError):
            discovery_pass(MatrixScorer(s, c), MultiModalGraph(c.image_objects, c.sentence_phrases), c, cands,
                           LinkPolicy())

    def test_iteration_stamp(self):
        c = small_world()
        s = np.random.default_rng(0).random((c.n_images, c.n_sentences))
        g = MultiModalGraph(c.image_objects, c.sentence_phrases)
        cands = build_candidates(s, c.n_images, c.n_sentences, 5)
        discovery_pass(MatrixScorer(s, c), g, c, cands, LinkPolicy())
        discovery_pass(MatrixScorer(s, c), g, c, cands, LinkPolicy())
        assert g.iteration == 2

    def test_raising_threshold_never_adds_links(self):
        c = small_world(2)
        s = np.random.default_rng(2).random((c.n_images, c.n_sentences))
        cands = build_candidates(s, c.n_images, c.n_sentences, 10)
        prev = None
        for lam in (0.3, 0.5, 0.7, 0.9):
            g = MultiModalGraph(c.image_objects, c.sentence_phrases)
            discovery_pass(MatrixScorer(s, c), g, c, cands, LinkPolicy(strategy=Strategy.AT, abs_threshold=lam))
            if prev is not None:
                assert g.strong_pairs() <= prev
            prev = g.strong_pairs()

    def test_bl_strong_implies_la_strong(self):
        c = small_world(4)
        s = np.random.default_rng(4).random((c.n_images, c.n_sentences))
        cands = build_candidates(s, c.n_images, c.n_sentences, 10)
        graphs = {}
        for st in (Strategy.BL, Strategy.LA):
            graphs[st] = MultiModalGraph(c.image_objects, c.sentence_phrases)
            discovery_pass(MatrixScorer(s, c), graphs[st], c, cands, LinkPolicy(strategy=st))
        assert graphs[Strategy.BL].strong_pairs() <= graphs[Strategy.LA].strong_pairs()
