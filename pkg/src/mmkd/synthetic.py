"""Latent-concept worlds with exact global and local ground truth.

Every image is a bag of objects, one per sampled concept. Captions name a
random subset of those concepts with synonym tokens and sprinkle in
distractor tokens. Object ids equal concept ids, token ids are laid out as
``concept * tokens_per_concept + synonym`` followed by the distractor pool.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class WorldSpec:
    n_images: int = 200
    captions_per_image: int = 5
    n_concepts: int = 60
    objects_per_image: tuple[int, int] = (3, 5)
    mentions_per_caption: tuple[int, int] = (2, 3)
    tokens_per_concept: int = 3
    n_distractors: int = 20
    distractor_rate: float = 0.3
    obs_noise: float = 0.0
    zipf_skew: float = 1.0
    distinctive_captions: bool = True
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.objects_per_image
        mlo, mhi = self.mentions_per_caption
        if self.captions_per_image < 1 or self.n_images < 1 or self.n_concepts < 1:
            raise ValueError("counts must be positive")
        if not 1 <= lo <= hi or not 1 <= mlo <= mhi:
            raise ValueError("bad range")
        if self.tokens_per_concept < 1 or self.n_distractors < 0:
            raise ValueError("bad vocabulary sizes")
        if self.obs_noise < 0 or not 0 <= self.distractor_rate <= 1 or self.zipf_skew < 0:
            raise ValueError("bad noise settings")
        if self.n_concepts < hi:
            raise ValueError(f"vocabulary of {self.n_concepts} concepts cannot fill {hi} objects")

    @property
    def n_tokens(self) -> int:
        return self.n_concepts * self.tokens_per_concept + self.n_distractors


@dataclass
class SyntheticCorpus:
    """Flat node arrays plus ground truth.

    Object and phrase nodes are numbered globally; ``image_objects[i]`` and
    ``sentence_phrases[s]`` hold their node ids.
    """

    n_concepts: int
    n_object_vocab: int
    n_token_vocab: int
    tokens_per_concept: int
    image_objects: list[np.ndarray]      # object node ids per image
    object_vocab: np.ndarray             # object node -> object vocab id
    sentence_phrases: list[np.ndarray]   # phrase node ids per sentence
    phrase_tokens: list[np.ndarray]      # phrase node -> token ids
    sentence_tokens: list[np.ndarray]    # full token sequence per sentence
    phrase_concept: np.ndarray
    image_features: np.ndarray           # normalised concept bags with observation noise
    image_noise: np.ndarray
    sentence_noise: np.ndarray
    gt_global: set = field(default_factory=set)   # {(image, sentence)}
    gt_local: set = field(default_factory=set)    # {(object, phrase)}
    world_ids: tuple = ()
    split: str = "train"

    @property
    def n_images(self) -> int:
        return len(self.image_objects)

    @property
    def n_sentences(self) -> int:
        return len(self.sentence_phrases)

    @property
    def n_objects(self) -> int:
        return len(self.object_vocab)

    @property
    def n_phrases(self) -> int:
        return len(self.phrase_tokens)

    def object_concepts(self, image: int) -> np.ndarray:
        return self.object_vocab[self.image_objects[image]]

    def sentence_concepts(self, s: int) -> np.ndarray:
        return self.phrase_concept[self.sentence_phrases[s]]

    def image_vocab(self, image: int) -> np.ndarray:
        return self.object_vocab[self.image_objects[image]]

    def sentence_bags(self) -> np.ndarray:
        """Normalised concept-mention bags, shape (n_sentences, n_concepts)."""
        bags = np.zeros((self.n_sentences, self.n_concepts))
        for s in range(self.n_sentences):
            np.add.at(bags[s], self.sentence_concepts(s), 1.0)
        return bags / np.maximum(np.linalg.norm(bags, axis=1, keepdims=True), 1e-12)

    def oracle_similarity(self) -> np.ndarray:
        """Cosine between image features and sentence concept bags, shape (|I|, |T|)."""
        feats = self.image_features
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.where(norms > 0, norms, 1.0)
        return feats @ self.sentence_bags().T

    # -- JSONL export ----------------------------------------------------

    def to_jsonl(self, path) -> None:
        meta = dict(
            record="meta", n_concepts=self.n_concepts, n_object_vocab=self.n_object_vocab,
            n_token_vocab=self.n_token_vocab, tokens_per_concept=self.tokens_per_concept,
            world_ids=list(self.world_ids), split=self.split,
        )
        with open(path, "w") as fh:
            fh.write(json.dumps(meta) + "\n")
            for i, objs in enumerate(self.image_objects):
                fh.write(json.dumps(dict(
                    record="image", index=i, objects=self.object_vocab[objs].tolist(),
                    features=self.image_features[i].tolist(), noise=bool(self.image_noise[i]),
                )) + "\n")
            for s, phr in enumerate(self.sentence_phrases):
                fh.write(json.dumps(dict(
                    record="sentence", index=s, tokens=self.sentence_tokens[s].tolist(),
                    phrases=[self.phrase_tokens[p].tolist() for p in phr],
                    phrase_concepts=self.phrase_concept[phr].tolist(),
                    noise=bool(self.sentence_noise[s]),
                )) + "\n")
            for i, s in sorted(self.gt_global):
                fh.write(json.dumps(dict(record="global_link", image=i, sentence=s)) + "\n")
            for o, p in sorted(self.gt_local):
                fh.write(json.dumps(dict(record="local_link", object=o, phrase=p)) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "SyntheticCorpus":
        images, sentences, gl, ll, meta = [], [], set(), set(), None
        with open(path) as fh:
            for line in fh:
                row = json.loads(line)
                kind = row["record"]
                if kind == "meta":
                    meta = row
                elif kind == "image":
                    images.append(row)
                elif kind == "sentence":
                    sentences.append(row)
                elif kind == "global_link":
                    gl.add((row["image"], row["sentence"]))
                elif kind == "local_link":
                    ll.add((row["object"], row["phrase"]))
        if meta is None:
            raise ValueError(f"{path}: missing meta record")
        b = _Builder(meta["n_concepts"], meta["tokens_per_concept"], meta["n_object_vocab"], meta["n_token_vocab"])
        for row in images:
            b.add_image(row["objects"], np.asarray(row["features"], dtype=float), row["noise"])
        for row in sentences:
            b.add_sentence(row["phrases"], row["phrase_concepts"], row["tokens"], row["noise"])
        corpus = b.build(tuple(meta["world_ids"]), meta["split"])
        corpus.gt_global = gl
        corpus.gt_local = ll
        return corpus


class _Builder:
    def __init__(self, n_concepts, tokens_per_concept, n_object_vocab, n_token_vocab):
        self.n_concepts = n_concepts
        self.tpc = tokens_per_concept
        self.n_object_vocab = n_object_vocab
        self.n_token_vocab = n_token_vocab
        self.image_objects, self.object_vocab, self.features, self.image_noise = [], [], [], []
        self.sentence_phrases, self.phrase_tokens, self.phrase_concept = [], [], []
        self.sentence_tokens, self.sentence_noise = [], []

    def add_image(self, vocab_ids, features, noise=False) -> int:
        start = len(self.object_vocab)
        self.object_vocab.extend(int(v) for v in vocab_ids)
        self.image_objects.append(np.arange(start, len(self.object_vocab), dtype=np.int64))
        self.features.append(np.asarray(features, dtype=float))
        self.image_noise.append(bool(noise))
        return len(self.image_objects) - 1

    def add_sentence(self, phrases, concepts, tokens, noise=False) -> int:
        start = len(self.phrase_tokens)
        self.phrase_tokens.extend(np.asarray(p, dtype=np.int64) for p in phrases)
        self.phrase_concept.extend(int(c) for c in concepts)
        self.sentence_phrases.append(np.arange(start, len(self.phrase_tokens), dtype=np.int64))
        self.sentence_tokens.append(np.asarray(tokens, dtype=np.int64))
        self.sentence_noise.append(bool(noise))
        return len(self.sentence_phrases) - 1

    def build(self, world_ids=(), split="train") -> SyntheticCorpus:
        feats = np.vstack(self.features) if self.features else np.zeros((0, self.n_concepts))
        return SyntheticCorpus(
            n_concepts=self.n_concepts, n_object_vocab=self.n_object_vocab,
            n_token_vocab=self.n_token_vocab, tokens_per_concept=self.tpc,
            image_objects=self.image_objects,
            object_vocab=np.asarray(self.object_vocab, dtype=np.int64),
            sentence_phrases=self.sentence_phrases, phrase_tokens=self.phrase_tokens,
            sentence_tokens=self.sentence_tokens,
            phrase_concept=np.asarray(self.phrase_concept, dtype=np.int64),
            image_features=feats,
            image_noise=np.asarray(self.image_noise, dtype=bool),
            sentence_noise=np.asarray(self.sentence_noise, dtype=bool),
            world_ids=tuple(world_ids), split=split,
        )


def zipf_weights(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=float) ** skew
    return w / w.sum()


def _sample_named(rng, spec: WorldSpec, concepts: np.ndarray, allowed=None) -> np.ndarray:
    mlo, mhi = spec.mentions_per_caption
    hi = min(mhi, len(concepts))
    if allowed is None:
        k = int(rng.integers(min(mlo, hi), hi + 1))
        return rng.choice(concepts, size=k, replace=False)
    return np.asarray(allowed[int(rng.integers(len(allowed)))])


def _caption(rng, spec: WorldSpec, concepts: np.ndarray, allowed=None):
    named = _sample_named(rng, spec, concepts, allowed)
    named = named[rng.permutation(len(named))]
    phrases, tokens = [], []
    for c in named:
        n_tok = 1 if spec.tokens_per_concept == 1 else int(rng.integers(1, 3))
        syn = rng.choice(spec.tokens_per_concept, size=n_tok, replace=False)
        phr = (int(c) * spec.tokens_per_concept + syn).tolist()
        phrases.append(phr)
        tokens.append(phr)
        if spec.n_distractors and rng.random() < spec.distractor_rate:
            d = spec.n_concepts * spec.tokens_per_concept + int(rng.integers(spec.n_distractors))
            tokens.append([d])
    order = rng.permutation(len(tokens))
    flat = [t for j in order for t in tokens[j]]
    return phrases, [int(c) for c in named], flat


def _distinctive_subsets(concepts: frozenset, others: list[frozenset], sizes: range) -> list[tuple[int, ...]]:
    """Subsets of ``concepts`` with an allowed size that no other image fully contains."""
    out = []
    for k in sizes:
        for sub in itertools.combinations(sorted(concepts), k):
            s = set(sub)
            if not any(s <= o for o in others):
                out.append(sub)
    return out


def _sample_concept_sets(rng, spec: WorldSpec, weights: np.ndarray) -> tuple[list[np.ndarray], list]:
    """Distinct concept sets per image, plus each image's admissible caption subsets.

    With ``distinctive_captions`` every image must own at least one subset of
    allowed size that appears in no other image; offending images are redrawn.
    """
    lo, hi = spec.objects_per_image

    def draw(taken):
        for _ in range(1000):
            k = int(rng.integers(lo, hi + 1))
            c = rng.choice(spec.n_concepts, size=k, replace=False, p=weights)
            if frozenset(c.tolist()) not in taken:
                return c
        raise ValueError("could not draw distinct concept sets; enlarge the vocabulary")

    sets: list[np.ndarray] = []
    for _ in range(spec.n_images):
        sets.append(draw({frozenset(x.tolist()) for x in sets}))
    if not spec.distinctive_captions:
        return sets, [None] * spec.n_images
    mlo, mhi = spec.mentions_per_caption
    for _ in range(100):
        keys = [frozenset(x.tolist()) for x in sets]
        allowed = []
        for i, key in enumerate(keys):
            others = keys[:i] + keys[i + 1:]
            allowed.append(_distinctive_subsets(key, others, range(mlo, min(mhi, len(key)) + 1)))
        bad = [i for i, a in enumerate(allowed) if not a]
        if not bad:
            return sets, allowed
        for i in bad:
            sets[i] = draw(set(keys) - {keys[i]})
    raise ValueError("could not make every image's captions distinctive; enlarge the vocabulary")


def generate_world(spec: WorldSpec) -> SyntheticCorpus:
    """Sample a world; a pure function of ``spec`` (including its seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    weights = zipf_weights(spec.n_concepts, spec.zipf_skew)
    # Zipf rank is shuffled onto concept ids so popularity is not tied to index order.
    weights = weights[rng.permutation(spec.n_concepts)]
    b = _Builder(spec.n_concepts, spec.tokens_per_concept, spec.n_concepts, spec.n_tokens)
    gt_global, gt_local = set(), set()
    sets, allowed = _sample_concept_sets(rng, spec, weights)
    for concepts, subsets in zip(sets, allowed):
        k = len(concepts)
        feats = np.zeros(spec.n_concepts)
        feats[concepts] = 1.0 / np.sqrt(k)
        if spec.obs_noise > 0:
            feats = feats + rng.normal(0.0, spec.obs_noise, size=spec.n_concepts)
        img = b.add_image(concepts, feats)
        objs = b.image_objects[img]
        for _ in range(spec.captions_per_image):
            phrases, named, flat = _caption(rng, spec, concepts, subsets)
            s = b.add_sentence(phrases, named, flat)
            gt_global.add((img, s))
            for p, c in zip(b.sentence_phrases[s], named):
                o = objs[np.flatnonzero(concepts == c)[0]]
                gt_local.add((int(o), int(p)))
    corpus = b.build(world_ids=(spec.seed,))
    corpus.gt_global = gt_global
    corpus.gt_local = gt_local
    return corpus


def concat_corpora(first: SyntheticCorpus, second: SyntheticCorpus, *, images_from_second=True,
                   sentences_from_second=True, second_is_noise=True,
                   n_images: int | None = None, n_sentences: int | None = None) -> SyntheticCorpus:
    """Append images and/or sentences of ``second`` to ``first``; links of ``second`` are dropped."""
    if (first.n_concepts, first.n_token_vocab) != (second.n_concepts, second.n_token_vocab):
        raise ValueError("corpora use different vocabularies")
    b = _Builder(first.n_concepts, first.tokens_per_concept, first.n_object_vocab, first.n_token_vocab)
    for c in (first, second) if images_from_second else (first,):
        limit = c.n_images if c is first or n_images is None else n_images
        for i in range(limit):
            b.add_image(c.image_vocab(i), c.image_features[i],
                        c.image_noise[i] or (c is second and second_is_noise))
    for c in (first, second) if sentences_from_second else (first,):
        limit = c.n_sentences if c is first or n_sentences is None else n_sentences
        for s in range(limit):
            phr = c.sentence_phrases[s]
            b.add_sentence([c.phrase_tokens[p] for p in phr], c.phrase_concept[phr],
                           c.sentence_tokens[s], c.sentence_noise[s] or (c is second and second_is_noise))
    out = b.build(first.world_ids + second.world_ids, first.split)
    # Node ids of ``first`` are unchanged because it is laid out first.
    out.gt_global = set(first.gt_global)
    out.gt_local = set(first.gt_local)
    return out


class NoiseMode(str, enum.Enum):
    NOISE1 = "noise1"
    NOISE2 = "noise2"
    NOISE3 = "noise3"


def inject_noise(corpus: SyntheticCorpus, mode: NoiseMode | str, amount: int | tuple[int, int],
                 source: SyntheticCorpus, image_source: SyntheticCorpus | None = None) -> SyntheticCorpus:
    """Append counterpart-free sentences (noise1), images (noise2) or both (noise3).

    ``amount`` is a count, or an ``(images, sentences)`` pair for noise3.
    ``source`` is an independently generated world sharing the vocabulary.
    Noise3 also needs ``image_source``, a second independent world, so the added
    images and sentences are not each other's captions.
    """
    mode = NoiseMode(mode)
    if isinstance(amount, tuple):
        n_img, n_txt = amount
    else:
        n_img = n_txt = amount
    if set(source.world_ids) & set(corpus.world_ids):
        raise ValueError("noise source must be an independent world")
    if mode is NoiseMode.NOISE3:
        if image_source is None:
            raise ValueError("noise3 needs a separate image source")
        if set(image_source.world_ids) & (set(source.world_ids) | set(corpus.world_ids)):
            raise ValueError("image source must be independent of the corpus and the sentence source")
        with_text = inject_noise(corpus, NoiseMode.NOISE1, n_txt, source)
        return inject_noise(with_text, NoiseMode.NOISE2, n_img, image_source)
    add_img = mode is NoiseMode.NOISE2
    wanted, pool = (n_img, source.n_images) if add_img else (n_txt, source.n_sentences)
    if wanted > pool:
        raise ValueError("noise amount exceeds the source pool")
    return concat_corpora(corpus, source, images_from_second=add_img, sentences_from_second=not add_img,
                          n_images=n_img, n_sentences=n_txt)


def random_environment(image_world: SyntheticCorpus, text_world: SyntheticCorpus) -> SyntheticCorpus:
    """Images of one world with sentences of another: no ground-truth links at all."""
    if set(image_world.world_ids) & set(text_world.world_ids):
        raise ValueError("image and text worlds must be generated independently")
    if (image_world.n_concepts, image_world.n_token_vocab) != (text_world.n_concepts, text_world.n_token_vocab):
        raise ValueError("worlds use different vocabularies")
    b = _Builder(image_world.n_concepts, image_world.tokens_per_concept,
                 image_world.n_object_vocab, image_world.n_token_vocab)
    for i in range(image_world.n_images):
        b.add_image(image_world.image_vocab(i), image_world.image_features[i])
    for s in range(text_world.n_sentences):
        phr = text_world.sentence_phrases[s]
        b.add_sentence([text_world.phrase_tokens[p] for p in phr], text_world.phrase_concept[phr],
                       text_world.sentence_tokens[s])
    return b.build(image_world.world_ids + text_world.world_ids, "random")


def held_out_spec(spec: WorldSpec, n_images: int = 50, seed_offset: int = 10_000) -> WorldSpec:
    return replace(spec, n_images=n_images, seed=spec.seed + seed_offset)


def spec_dict(spec: WorldSpec) -> dict:
    d = asdict(spec)
    d["objects_per_image"] = list(spec.objects_per_image)
    d["mentions_per_caption"] = list(spec.mentions_per_caption)
    return d
