"""Multi-modal knowledge graph: images, sentences, objects and phrases.

Intra-modality containment edges are fixed when the graph is built; the
cross-modality links (image-sentence, object-phrase) are rewritten on every
discovery pass.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class NodeKind(str, enum.Enum):
    IMAGE = "image"
    SENTENCE = "sentence"
    OBJECT = "object"
    PHRASE = "phrase"


class NodeId(NamedTuple):
    kind: NodeKind
    index: int


_CROSS_KINDS = {
    (NodeKind.IMAGE, NodeKind.SENTENCE),
    (NodeKind.OBJECT, NodeKind.PHRASE),
}
_STRENGTHS = (0.0, 0.5, 1.0)


@dataclass(frozen=True)
class CrossLink:
    a: NodeId
    b: NodeId
    strength: float
    confidence: float

    def __post_init__(self):
        if (self.a.kind, self.b.kind) not in _CROSS_KINDS:
            raise ValueError(f"not a cross-modality pair: {self.a.kind.value}-{self.b.kind.value}")
        if self.strength not in _STRENGTHS:
            raise ValueError(f"strength must be one of {_STRENGTHS}, got {self.strength}")
        if self.a.kind is NodeKind.OBJECT and self.strength == 0.5:
            raise ValueError("object-phrase links cannot be weak")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of [0, 1]: {self.confidence}")


class MultiModalGraph:
    """Sparse pair-keyed link store over a fixed node universe.

    ``image_objects[i]`` lists the object nodes contained in image ``i`` and
    ``sentence_phrases[s]`` the phrase nodes of sentence ``s``.
    """

    def __init__(self, image_objects: Sequence[Sequence[int]], sentence_phrases: Sequence[Sequence[int]]):
        self.image_objects = [np.asarray(o, dtype=np.int64) for o in image_objects]
        self.sentence_phrases = [np.asarray(p, dtype=np.int64) for p in sentence_phrases]
        self.n_images = len(self.image_objects)
        self.n_sentences = len(self.sentence_phrases)
        self.n_objects = int(sum(len(o) for o in self.image_objects))
        self.n_phrases = int(sum(len(p) for p in self.sentence_phrases))
        for ids, n, what in ((self.image_objects, self.n_objects, "object"),
                             (self.sentence_phrases, self.n_phrases, "phrase")):
            if any(len(x) and (x.min() < 0 or x.max() >= n) for x in ids):
                raise ValueError(f"{what} ids must be numbered 0..{n - 1}")
        self.object_image = np.full(self.n_objects, -1, dtype=np.int64)
        for i, objs in enumerate(self.image_objects):
            if np.any(self.object_image[objs] >= 0):
                raise ValueError("an object belongs to more than one image")
            self.object_image[objs] = i
        self.phrase_sentence = np.full(self.n_phrases, -1, dtype=np.int64)
        for s, phr in enumerate(self.sentence_phrases):
            if np.any(self.phrase_sentence[phr] >= 0):
                raise ValueError("a phrase belongs to more than one sentence")
            self.phrase_sentence[phr] = s
        if np.any(self.object_image < 0) or np.any(self.phrase_sentence < 0):
            raise ValueError("every object and phrase needs a parent")
        self.iteration = 0
        # (image, sentence) -> (strength, confidence)
        self._global: dict[tuple[int, int], tuple[float, float]] = {}
        # (object, phrase) -> confidence, strength is always 1
        self._local: dict[tuple[int, int], float] = {}
        self._img_adj: dict[int, dict[int, float]] = {}
        self._txt_adj: dict[int, dict[int, float]] = {}

    # -- node bookkeeping -------------------------------------------------

    def count(self, kind: NodeKind) -> int:
        return {
            NodeKind.IMAGE: self.n_images,
            NodeKind.SENTENCE: self.n_sentences,
            NodeKind.OBJECT: self.n_objects,
            NodeKind.PHRASE: self.n_phrases,
        }[kind]

    def _check(self, n: NodeId) -> None:
        if not 0 <= n.index < self.count(n.kind):
            raise KeyError(f"unknown node {n.kind.value}:{n.index}")

    # -- link writes ------------------------------------------------------

    def set_link(self, link: CrossLink) -> None:
        self._check(link.a)
        self._check(link.b)
        if link.a.kind is NodeKind.IMAGE:
            self.set_global(link.a.index, link.b.index, link.strength, link.confidence)
        else:
            if link.strength == 0.0:
                self._local.pop((link.a.index, link.b.index), None)
            else:
                self.set_local(link.a.index, link.b.index, link.confidence)

    def set_global(self, image: int, sentence: int, strength: float, confidence: float) -> None:
        if strength not in _STRENGTHS:
            raise ValueError(f"bad strength {strength}")
        self._global[(image, sentence)] = (float(strength), float(confidence))
        self._img_adj.setdefault(image, {})[sentence] = float(strength)
        self._txt_adj.setdefault(sentence, {})[image] = float(strength)

    def set_local(self, obj: int, phrase: int, confidence: float) -> None:
        if self.object_image[obj] < 0 or self.phrase_sentence[phrase] < 0:
            raise KeyError("unknown object or phrase")
        self._local[(obj, phrase)] = float(confidence)

    def clear_links(self) -> None:
        self._global.clear()
        self._local.clear()
        self._img_adj.clear()
        self._txt_adj.clear()

    # -- reads ------------------------------------------------------------

    def global_link(self, image: int, sentence: int) -> tuple[float, float] | None:
        return self._global.get((image, sentence))

    def strength(self, image: int, sentence: int) -> float:
        hit = self._global.get((image, sentence))
        return 0.0 if hit is None else hit[0]

    def has_local(self, obj: int, phrase: int) -> bool:
        return (obj, phrase) in self._local

    @property
    def n_links(self) -> int:
        return len(self._global) + len(self._local)

    def global_items(self) -> Iterable[tuple[tuple[int, int], tuple[float, float]]]:
        return sorted(self._global.items())

    def local_items(self) -> Iterable[tuple[tuple[int, int], float]]:
        return sorted(self._local.items())

    def strong_pairs(self) -> set[tuple[int, int]]:
        return {k for k, (s, _) in self._global.items() if s == 1.0}

    def local_pairs(self) -> set[tuple[int, int]]:
        return set(self._local)

    def neighbor_strengths(self, n: NodeId) -> dict[int, float]:
        """All stored counterpart strengths of an image or sentence (including 0)."""
        self._check(n)
        if n.kind is NodeKind.IMAGE:
            return self._img_adj.get(n.index, {})
        if n.kind is NodeKind.SENTENCE:
            return self._txt_adj.get(n.index, {})
        raise ValueError("global neighbors need an image or sentence")

    def snapshot(self) -> list[dict]:
        rows = []
        for (i, s), (strength, conf) in self.global_items():
            rows.append(dict(a_kind="image", a_index=i, b_kind="sentence", b_index=s,
                             strength=strength, confidence=conf, iteration=self.iteration))
        for (o, p), conf in self.local_items():
            rows.append(dict(a_kind="object", a_index=o, b_kind="phrase", b_index=p,
                             strength=1.0, confidence=conf, iteration=self.iteration))
        return rows

    def export_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.snapshot():
                fh.write(json.dumps(row) + "\n")

    def load_jsonl(self, path) -> None:
        """Replace all cross links with those of an exported snapshot."""
        self.clear_links()
        iteration = None
        with open(path) as fh:
            for line in fh:
                row = json.loads(line)
                a = NodeId(NodeKind(row["a_kind"]), row["a_index"])
                b = NodeId(NodeKind(row["b_kind"]), row["b_index"])
                self.set_link(CrossLink(a, b, row["strength"], row["confidence"]))
                iteration = row["iteration"]
        if iteration is not None:
            self.iteration = iteration


def neighbors_global(g: MultiModalGraph, n: NodeId, min_strength: float) -> list[NodeId]:
    other = NodeKind.SENTENCE if n.kind is NodeKind.IMAGE else NodeKind.IMAGE
    adj = g.neighbor_strengths(n)
    return [NodeId(other, j) for j in sorted(adj) if adj[j] >= min_strength and adj[j] > 0]


def two_hop_phrases(g: MultiModalGraph, i: NodeId) -> list[NodeId]:
    """Phrases of strongly linked sentences that are linked to one of the image's objects."""
    if i.kind is not NodeKind.IMAGE:
        raise ValueError("two_hop_phrases expects an image node")
    return [NodeId(NodeKind.PHRASE, p) for p in two_hop_phrase_ids(g, i.index)]


def two_hop_phrase_ids(g: MultiModalGraph, image: int) -> list[int]:
    adj = g._img_adj.get(image, {})
    objs = g.image_objects[image]
    out = []
    for s in sorted(adj):
        if adj[s] != 1.0:
            continue
        for p in g.sentence_phrases[s]:
            p = int(p)
            if any((int(o), p) in g._local for o in objs):
                out.append(p)
    return sorted(set(out))


def strong_degrees(g: MultiModalGraph) -> tuple[np.ndarray, np.ndarray]:
    deg_i = np.zeros(g.n_images, dtype=np.int64)
    deg_t = np.zeros(g.n_sentences, dtype=np.int64)
    for (i, s) in g.strong_pairs():
        deg_i[i] += 1
        deg_t[s] += 1
    return deg_i, deg_t


def pp_fraction(g: MultiModalGraph, degree_cutoff: int = 10) -> float:
    """Share of strong image-sentence links touching a node with more than ``degree_cutoff`` strong links."""
    if degree_cutoff < 1:
        raise ValueError("degree_cutoff must be >= 1")
    pairs = g.strong_pairs()
    if not pairs:
        return 0.0
    deg_i, deg_t = strong_degrees(g)
    popular = sum(1 for (i, s) in pairs if deg_i[i] > degree_cutoff or deg_t[s] > degree_cutoff)
    return popular / len(pairs)
