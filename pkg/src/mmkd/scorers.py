"""Confidence providers used by discovery and evaluation.

A scorer answers two questions about a corpus: the global confidence of any
(image, sentence) pair and, for a pair, the phrase-by-object probability
matrix used for local links.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from .encoder import EncoderParams, encode_images, encode_sentences, sigmoid, softmax
from .synthetic import SyntheticCorpus


class Scorer(Protocol):
    def score_matrix(self) -> np.ndarray: ...

    def score_pairs(self, images: np.ndarray, sentences: np.ndarray) -> np.ndarray: ...

    def local_probs(self, image: int, sentence: int) -> np.ndarray: ...


class MatrixScorer:
    """Fixed global scores with optional fixed local probabilities; mostly for tests."""

    def __init__(self, scores: np.ndarray, corpus: SyntheticCorpus | None = None, local=None):
        self.scores = np.asarray(scores, dtype=float)
        self.corpus = corpus
        self.local = local

    def score_matrix(self) -> np.ndarray:
        return self.scores

    def score_pairs(self, images, sentences):
        return self.scores[np.asarray(images), np.asarray(sentences)]

    def local_probs(self, image, sentence):
        if self.local is not None:
            return self.local(image, sentence)
        c = self.corpus
        n_p, n_o = len(c.sentence_phrases[sentence]), len(c.image_objects[image])
        return np.full((n_p, n_o), 1.0 / n_o)


class EncoderScorer:
    """Scores from encoder parameters, with image vectors optionally context-augmented.

    ``context_ids`` lists two-hop phrase ids per image. A pair is always scored
    with the sentence's own phrases removed from the image's context, so a link
    cannot vouch for itself.
    """

    def __init__(self, params: EncoderParams, corpus: SyntheticCorpus,
                 context_ids: Sequence[Sequence[int]] | None = None):
        self.params = params
        self.corpus = corpus
        objs = [corpus.image_vocab(i) for i in range(corpus.n_images)]
        ctx = None
        if context_ids is not None:
            ctx = [[corpus.phrase_tokens[q] for q in ids] for ids in context_ids]
        self.image_vecs = encode_images(params, objs, ctx)
        self.text_vecs = encode_sentences(params, corpus.sentence_tokens)
        self._img_unit = _unit(self.image_vecs)
        self._txt_unit = _unit(self.text_vecs)
        self._phrase_unit = _unit(encode_sentences(params, corpus.phrase_tokens)) if corpus.n_phrases else None
        self._object_unit = _unit(params.obj_emb[corpus.object_vocab] @ params.w_img.T)
        self._held_out = self._leave_one_out(context_ids) if context_ids is not None else {}

    def _leave_one_out(self, context_ids) -> dict[tuple[int, int], np.ndarray]:
        c = self.corpus
        owner = {}
        for s, phrases in enumerate(c.sentence_phrases):
            for q in phrases.tolist():
                owner[q] = s
        keys, objs, ctx = [], [], []
        for i, ids in enumerate(context_ids):
            for s in sorted({owner[q] for q in ids}):
                own = set(c.sentence_phrases[s].tolist())
                keys.append((i, s))
                objs.append(c.image_vocab(i))
                ctx.append([c.phrase_tokens[q] for q in ids if q not in own])
        if not keys:
            return {}
        vecs = _unit(encode_images(self.params, objs, ctx))
        return dict(zip(keys, vecs))

    def _logit(self, cos):
        return cos / self.params.temperature + float(self.params.bias)

    def score_matrix(self) -> np.ndarray:
        cos = self._img_unit @ self._txt_unit.T
        for (i, s), v in self._held_out.items():
            cos[i, s] = v @ self._txt_unit[s]
        return sigmoid(self._logit(cos))

    def score_pairs(self, images, sentences):
        images, sentences = np.asarray(images), np.asarray(sentences)
        cos = np.sum(self._img_unit[images] * self._txt_unit[sentences], axis=1)
        if self._held_out:
            for k, (i, s) in enumerate(zip(images.tolist(), sentences.tolist())):
                v = self._held_out.get((i, s))
                if v is not None:
                    cos[k] = v @ self._txt_unit[s]
        return sigmoid(self._logit(cos))

    def local_probs(self, image, sentence):
        c = self.corpus
        q = self._phrase_unit[c.sentence_phrases[sentence]]
        o = self._object_unit[c.image_objects[image]]
        return np.vstack([softmax(row) for row in q @ o.T])


class NoisyOracleScorer:
    """Warm-start stand-in: latent concept similarity corrupted by Gaussian noise.

    Global scores are ``clip(oracle_cosine + N(0, sigma^2), 0, 1)``; local
    probabilities are a softmax over ``1[concept match] + N(0, sigma^2)``.
    """

    def __init__(self, corpus: SyntheticCorpus, sigma: float, seed: int):
        self.corpus = corpus
        self.sigma = sigma
        self.seed = seed
        rng = np.random.default_rng([seed, 7])
        sim = corpus.oracle_similarity()
        self.scores = np.clip(sim + rng.normal(0.0, sigma, sim.shape), 0.0, 1.0)

    def score_matrix(self):
        return self.scores

    def score_pairs(self, images, sentences):
        return self.scores[np.asarray(images), np.asarray(sentences)]

    def local_probs(self, image, sentence):
        c = self.corpus
        obj_c = c.object_vocab[c.image_objects[image]]
        phr_c = c.phrase_concept[c.sentence_phrases[sentence]]
        match = (phr_c[:, None] == obj_c[None, :]).astype(float)
        rng = np.random.default_rng([self.seed, 11, image, sentence])
        noisy = match + rng.normal(0.0, self.sigma, match.shape)
        return np.vstack([softmax(row) for row in noisy])


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)

