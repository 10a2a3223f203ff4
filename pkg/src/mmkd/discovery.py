"""Knowledge discovery as link prediction on the multi-modal graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LinkPolicy, Strategy
from .graph import MultiModalGraph
from .scorers import Scorer
from .synthetic import SyntheticCorpus


@dataclass
class CandidateSet:
    """Top-W counterparts per node under the initial scorer, best first."""

    img_to_txt: np.ndarray   # (n_images, min(W, n_sentences))
    txt_to_img: np.ndarray   # (n_sentences, min(W, n_images))
    n_images: int
    n_sentences: int

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Union of candidate pairs from both directions, sorted by (image, sentence)."""
        ii = np.concatenate([np.repeat(np.arange(self.n_images), self.img_to_txt.shape[1]),
                             self.txt_to_img.ravel()])
        ss = np.concatenate([self.img_to_txt.ravel(),
                             np.repeat(np.arange(self.n_sentences), self.txt_to_img.shape[1])])
        keys = np.unique(ii.astype(np.int64) * self.n_sentences + ss)
        return keys // self.n_sentences, keys % self.n_sentences


def top_w(scores: np.ndarray, width: int) -> np.ndarray:
    """Row-wise indices of the ``width`` largest scores; ties go to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :width]


def build_candidates(initial: Scorer | np.ndarray, n_images: int, n_sentences: int, width: int) -> CandidateSet:
    if width < 1:
        raise ValueError("width must be >= 1")
    if n_images == 0 or n_sentences == 0:
        raise ValueError("empty corpus")
    scores = initial if isinstance(initial, np.ndarray) else initial.score_matrix()
    if scores.shape != (n_images, n_sentences):
        raise ValueError(f"score matrix {scores.shape} does not match corpus ({n_images}, {n_sentences})")
    return CandidateSet(top_w(scores, width), top_w(scores.T, width), n_images, n_sentences)


def estimate_popularity(confidences: np.ndarray, k: int) -> float:
    """Mean of the ``k`` highest candidate confidences."""
    confidences = np.asarray(confidences, dtype=float)
    if confidences.size == 0:
        raise ValueError("node has no candidates")
    k = min(k, confidences.size)
    return float(np.mean(np.sort(confidences)[::-1][:k]))


def label_threshold(popularity: float, mu: float) -> float:
    return float(popularity) ** mu


def assign_global(score: float, policy: LinkPolicy, thr_img: float | None = None,
                  thr_txt: float | None = None) -> float:
    if policy.strategy is Strategy.AT:
        return 1.0 if score >= policy.abs_threshold else 0.0
    if policy.strategy is Strategy.LA:
        return 1.0 if score >= thr_img else 0.0
    return 0.5 * (float(score >= thr_img) + float(score >= thr_txt))


def assign_local(probs: np.ndarray, global_strength: float, local_threshold: float) -> list[tuple[int, int]]:
    """(phrase position, object position) pairs with softmax probability >= threshold."""
    if global_strength == 0:
        return []
    rows, cols = np.nonzero(np.asarray(probs) >= local_threshold)
    return list(zip(rows.tolist(), cols.tolist()))


@dataclass
class DiscoveryResult:
    thr_img: np.ndarray
    thr_txt: np.ndarray
    n_pairs: int


def node_thresholds(scorer: Scorer, cands: CandidateSet, policy: LinkPolicy) -> tuple[np.ndarray, np.ndarray]:
    n_i, n_t = cands.n_images, cands.n_sentences
    w_i, w_t = cands.img_to_txt.shape[1], cands.txt_to_img.shape[1]
    conf_i = scorer.score_pairs(np.repeat(np.arange(n_i), w_i), cands.img_to_txt.ravel()).reshape(n_i, w_i)
    conf_t = scorer.score_pairs(cands.txt_to_img.ravel(), np.repeat(np.arange(n_t), w_t)).reshape(n_t, w_t)
    k_i, k_t = min(policy.k_img, w_i), min(policy.k_txt, w_t)
    pop_i = -np.sort(-conf_i, axis=1)[:, :k_i].mean(axis=1)
    pop_t = -np.sort(-conf_t, axis=1)[:, :k_t].mean(axis=1)
    return pop_i ** policy.mu_img, pop_t ** policy.mu_txt


def discovery_pass(scorer: Scorer, graph: MultiModalGraph, corpus: SyntheticCorpus,
                   cands: CandidateSet, policy: LinkPolicy) -> DiscoveryResult:
    """Rewrite every cross link of ``graph`` from the previous-iteration scorer."""
    if (cands.n_images, cands.n_sentences) != (corpus.n_images, corpus.n_sentences) or \
            (graph.n_images, graph.n_sentences) != (corpus.n_images, corpus.n_sentences):
        raise ValueError("candidate set is stale: node counts differ from the corpus")
    thr_i, thr_t = node_thresholds(scorer, cands, policy)
    ii, ss = cands.pairs()
    scores = scorer.score_pairs(ii, ss)
    if policy.strategy is Strategy.AT:
        strength = (scores >= policy.abs_threshold).astype(float)
    elif policy.strategy is Strategy.LA:
        strength = (scores >= thr_i[ii]).astype(float)
    else:
        strength = 0.5 * ((scores >= thr_i[ii]).astype(float) + (scores >= thr_t[ss]).astype(float))

    graph.clear_links()
    for i, s, st, sc in zip(ii.tolist(), ss.tolist(), strength.tolist(), scores.tolist()):
        graph.set_global(i, s, st, sc)
    for k in np.flatnonzero(strength):
        i, s = int(ii[k]), int(ss[k])
        probs = scorer.local_probs(i, s)
        objs, phrs = corpus.image_objects[i], corpus.sentence_phrases[s]
        for pi, oi in assign_local(probs, strength[k], policy.local_threshold):
            graph.set_local(int(objs[oi]), int(phrs[pi]), float(probs[pi, oi]))
    graph.iteration += 1
    return DiscoveryResult(thr_i, thr_t, len(ii))
