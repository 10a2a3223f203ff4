import itertools
import json

import numpy as np
import pytest

from mmkd.graph import (
    CrossLink, MultiModalGraph, NodeId, NodeKind, neighbors_global, pp_fraction, two_hop_phrases,
)

I, T, O, P = NodeKind.IMAGE, NodeKind.SENTENCE, NodeKind.OBJECT, NodeKind.PHRASE


def toy(n_img=3, n_txt=3, objs_per=2, phr_per=2):
    objs = [list(range(k * objs_per, (k + 1) * objs_per)) for k in range(n_img)]
    phrs = [list(range(k * phr_per, (k + 1) * phr_per)) for k in range(n_txt)]
    return MultiModalGraph(objs, phrs)


class TestNeighbors:
    def test_single_strong_link(self):
        g = toy()
        g.set_global(0, 0, 1.0, 0.9)
        assert neighbors_global(g, NodeId(I, 0), 1.0) == [NodeId(T, 0)]

    def test_weak_link_below_threshold(self):
        g = toy()
        g.set_global(0, 0, 0.5, 0.7)
        assert neighbors_global(g, NodeId(I, 0), 0.6) == []

    def test_sorted_filter(self):
        g = toy(n_txt=4)
        g.set_global(0, 0, 1.0, 0.9)
        g.set_global(0, 3, 0.5, 0.7)
        g.set_global(0, 1, 1.0, 0.8)
        assert neighbors_global(g, NodeId(I, 0), 1.0) == [NodeId(T, 0), NodeId(T, 1)]

    def test_zero_strength_never_neighbour(self):
        g = toy()
        g.set_global(0, 2, 0.0, 0.1)
        assert neighbors_global(g, NodeId(I, 0), 0.0) == []

    def test_unknown_node(self):
        with pytest.raises(KeyError):
            neighbors_global(toy(), NodeId(I, 7), 1.0)

    def test_sentence_side(self):
        g = toy()
        g.set_global(2, 1, 1.0, 0.9)
        g.set_global(0, 1, 0.5, 0.9)
        assert neighbors_global(g, NodeId(T, 1), 0.5) == [NodeId(I, 0), NodeId(I, 2)]


class TestTwoHop:
    def test_definition_instance(self):
        g = toy()
        g.set_global(0, 0, 1.0, 0.9)
        g.set_local(0, 0, 0.8)
        assert two_hop_phrases(g, NodeId(I, 0)) == [NodeId(P, 0)]

    def test_weak_link_gives_nothing(self):
        g = toy()
        g.set_global(0, 0, 0.5, 0.9)
        g.set_local(0, 0, 0.8)
        assert two_hop_phrases(g, NodeId(I, 0)) == []

    def test_requires_local_link(self):
        g = toy()
        g.set_global(0, 0, 1.0, 0.9)
        assert two_hop_phrases(g, NodeId(I, 0)) == []

    def test_rejects_non_image(self):
        with pytest.raises(ValueError):
            two_hop_phrases(toy(), NodeId(T, 0))

    def test_matches_path_enumeration(self):
        # 3x3 toy where sentences 0 and 2 share a phrase node's reachability
        g = toy()
        for s in (0, 2):
            g.set_global(1, s, 1.0, 0.9)
        g.set_global(1, 1, 0.5, 0.6)
        g.set_local(2, 1, 0.9)   # object 2 (image 1) -> phrase 1 (sentence 0)
        g.set_local(3, 1, 0.7)   # a second object reaches the same phrase
        g.set_local(3, 5, 0.7)   # phrase 5 of sentence 2
        g.set_local(2, 2, 0.7)   # phrase 2 of sentence 1, weak so excluded
        brute = set()
        for s, o, p in itertools.product(range(3), g.image_objects[1], range(g.n_phrases)):
            if g.strength(1, s) == 1.0 and p in g.sentence_phrases[s] and g.has_local(int(o), p):
                brute.add(p)
        got = two_hop_phrases(g, NodeId(I, 1))
        assert [n.index for n in got] == sorted(brute) == [1, 5]


class TestPopularity:
    def test_arithmetic(self):
        # image 0 has 11 strong links, image 1 has 9 elsewhere
        g = MultiModalGraph([[0], [1]], [[k] for k in range(20)])
        for s in range(11):
            g.set_global(0, s, 1.0, 0.9)
        for s in range(11, 20):
            g.set_global(1, s, 1.0, 0.9)
        assert pp_fraction(g, 10) == pytest.approx(11 / 20, abs=1e-15)

    def test_no_popular_nodes(self):
        g = toy()
        g.set_global(0, 0, 1.0, 0.9)
        assert pp_fraction(g, 10) == 0.0

    def test_empty(self):
        assert pp_fraction(toy(), 10) == 0.0

    def test_weak_links_do_not_count(self):
        g = MultiModalGraph([[0]], [[k] for k in range(12)])
        for s in range(12):
            g.set_global(0, s, 0.5, 0.9)
        assert pp_fraction(g, 10) == 0.0

    def test_bad_cutoff(self):
        with pytest.raises(ValueError):
            pp_fraction(toy(), 0)


class TestStore:
    def test_overwrite(self):
        g = toy()
        g.set_global(0, 1, 1.0, 0.9)
        g.set_global(0, 1, 0.5, 0.4)
        assert g.global_link(0, 1) == (0.5, 0.4)
        assert g.n_links == 1

    @pytest.mark.parametrize("a,b", [((I, 0), (O, 0)), ((T, 0), (P, 0)), ((I, 0), (P, 0))])
    def test_invalid_kinds(self, a, b):
        with pytest.raises(ValueError):
            CrossLink(NodeId(*a), NodeId(*b), 1.0, 0.5)

    def test_no_weak_local(self):
        with pytest.raises(ValueError):
            CrossLink(NodeId(O, 0), NodeId(P, 0), 0.5, 0.5)

    def test_bad_strength(self):
        with pytest.raises(ValueError):
            CrossLink(NodeId(I, 0), NodeId(T, 0), 0.7, 0.5)

    def test_shared_object_rejected(self):
        with pytest.raises(ValueError):
            MultiModalGraph([[0, 1], [1]], [[0]])

    def test_orphan_rejected(self):
        with pytest.raises(ValueError):
            MultiModalGraph([[0, 2]], [[0]])

    def test_snapshot_round_trip(self, tmp_path):
        g = toy()
        g.set_global(0, 1, 1.0, 0.875)
        g.set_global(2, 2, 0.5, 1 / 3)
        g.set_local(1, 2, 0.6)
        g.iteration = 4
        path = tmp_path / "g.jsonl"
        g.export_jsonl(path)
        h = toy()
        h.load_jsonl(path)
        assert h.global_items() == g.global_items()
        assert h.local_items() == g.local_items()
        assert h.iteration == 4
        first = json.loads(path.read_text().splitlines()[0])
        assert set(first) == {"a_kind", "a_index", "b_kind", "b_index", "strength", "confidence", "iteration"}

    def test_relabel_invariance(self):
        rng = np.random.default_rng(3)
        g = MultiModalGraph([[k] for k in range(6)], [[k] for k in range(30)])
        pairs = {(int(rng.integers(6)), int(rng.integers(30))) for _ in range(60)}
        for i, s in pairs:
            g.set_global(i, s, 1.0, 0.5)
        pi, ps = rng.permutation(6), rng.permutation(30)
        h = MultiModalGraph([[k] for k in range(6)], [[k] for k in range(30)])
        for i, s in pairs:
            h.set_global(int(pi[i]), int(ps[s]), 1.0, 0.5)
        assert pp_fraction(g, 3) == pp_fraction(h, 3)
