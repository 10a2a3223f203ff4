"""Link-prediction and retrieval metrics, and the per-iteration report row."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .encoder import DropoutMask, EncoderParams, GlobalForward
from .scorers import EncoderScorer
from .synthetic import SyntheticCorpus
from .training import loss_uncertainty


def global_prf(predicted: Iterable[tuple[int, int]], truth: Iterable[tuple[int, int]]) -> tuple[float, float, float]:
    pred, gt = set(predicted), set(truth)
    if not gt:
        raise ValueError("empty ground truth")
    hit = len(pred & gt)
    p = hit / len(pred) if pred else 0.0
    r = hit / len(gt)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def local_accuracy(predicted: Iterable[tuple[int, int]], truth: Iterable[tuple[int, int]]) -> float:
    """Fraction of ground-truth phrases whose predicted object set contains their true object.

    Pairs are ``(object, phrase)``.
    """
    truth = set(truth)
    if not truth:
        raise ValueError("empty phrase universe")
    linked: dict[int, set[int]] = {}
    for o, p in predicted:
        linked.setdefault(p, set()).add(o)
    true_obj: dict[int, set[int]] = {}
    for o, p in truth:
        true_obj.setdefault(p, set()).add(o)
    ok = sum(1 for p, objs in true_obj.items() if objs & linked.get(p, set()))
    return ok / len(true_obj)


def recall_at_k(scores: np.ndarray, truth: Sequence[set[int]], ks: Sequence[int] = (1, 5, 10)) -> dict[int, float]:
    """Query-by-gallery scores; a query hits at k if any true item ranks in its top k.

    Ties are broken toward the lower gallery index.
    """
    n_q, n_g = scores.shape
    if len(truth) != n_q:
        raise ValueError("one truth set per query required")
    if any(not t for t in truth):
        raise ValueError("every query needs a ground-truth item")
    order = np.argsort(-scores, axis=1, kind="stable")
    rank = np.empty_like(order)
    rank[np.arange(n_q)[:, None], order] = np.arange(n_g)[None, :]
    best = np.array([min(rank[q, list(t)]) for q, t in enumerate(truth)])
    return {k: float(np.mean(best < min(k, n_g))) for k in ks}


@dataclass
class RetrievalResult:
    i2t: dict
    t2i: dict

    def flat(self) -> dict[str, float]:
        out = {f"r{k}_i2t": v for k, v in self.i2t.items()}
        out.update({f"r{k}_t2i": v for k, v in self.t2i.items()})
        return out


def retrieval(scores: np.ndarray, gt: Iterable[tuple[int, int]], images: np.ndarray, sentences: np.ndarray,
              ks=(1, 5, 10)) -> RetrievalResult:
    """Bidirectional R@K restricted to the given image and sentence subsets."""
    gt = set(gt)
    img_pos = {int(i): r for r, i in enumerate(images)}
    txt_pos = {int(s): r for r, s in enumerate(sentences)}
    sub = scores[np.ix_(images, sentences)]
    i_truth = [set() for _ in images]
    t_truth = [set() for _ in sentences]
    for i, s in gt:
        if i in img_pos and s in txt_pos:
            i_truth[img_pos[i]].add(txt_pos[s])
            t_truth[txt_pos[s]].add(img_pos[i])
    qi = [r for r, t in enumerate(i_truth) if t]
    qt = [r for r, t in enumerate(t_truth) if t]
    i2t = recall_at_k(sub[qi], [i_truth[r] for r in qi], ks)
    t2i = recall_at_k(sub.T[qt], [t_truth[r] for r in qt], ks)
    return RetrievalResult(i2t, t2i)


def clean_subsets(corpus: SyntheticCorpus) -> tuple[np.ndarray, np.ndarray]:
    return np.flatnonzero(~corpus.image_noise), np.flatnonzero(~corpus.sentence_noise)


def evaluate_retrieval(params: EncoderParams, corpus: SyntheticCorpus, context_ids=None) -> RetrievalResult:
    scores = EncoderScorer(params, corpus, context_ids).score_matrix()
    imgs, txts = clean_subsets(corpus)
    return retrieval(scores, corpus.gt_global, imgs, txts)


def evaluate_inductive(params: EncoderParams, held_out: SyntheticCorpus,
                       train_corpus: SyntheticCorpus | None = None) -> RetrievalResult:
    """Retrieval on an unseen corpus with no graph context."""
    if train_corpus is not None and set(held_out.world_ids) & set(train_corpus.world_ids):
        raise ValueError("held-out corpus overlaps the training corpus")
    return evaluate_retrieval(params, held_out, context_ids=None)


def probe_pairs(corpus: SyntheticCorpus, n: int = 100) -> list[tuple[int, int]]:
    return sorted(corpus.gt_global)[:n]


def mean_uncertainty(params: EncoderParams, corpus: SyntheticCorpus, pairs, rate: float, seed: int = 12345) -> float:
    """Average symmetrised KL between two fixed dropout passes over the probe pairs."""
    if not pairs:
        return 0.0
    objs = [corpus.image_vocab(i) for i, _ in pairs]
    toks = [corpus.sentence_tokens[s] for _, s in pairs]
    f1 = GlobalForward(params, objs, None, toks, DropoutMask(seed, rate), DropoutMask(seed + 1, rate))
    f2 = GlobalForward(params, objs, None, toks, DropoutMask(seed + 2, rate), DropoutMask(seed + 3, rate))
    return loss_uncertainty(f1.scores, f2.scores) / len(pairs)


@dataclass
class IterationReport:
    iteration: int
    precision: float
    recall: float
    f1: float
    local_acc: float
    r1_i2t: float
    r5_i2t: float
    r10_i2t: float
    r1_t2i: float
    r5_t2i: float
    r10_t2i: float
    pp: float
    n_strong: int
    n_weak: int
    n_local: int
    loss_it: float
    loss_c: float
    loss_u: float
    loss_total: float
    mean_uncertainty: float
    strategy: str
    abs_threshold: float
    mu_img: float
    mu_txt: float
    k_img: int
    k_txt: int
    local_threshold: float
    width: int
    config_hash: str
    seed: int
    wall_clock: float = field(default=0.0, compare=False)

    # wall-clock is kept out of the files so they stay byte-identical across reruns
    FILE_EXCLUDE = ("wall_clock",)

    def row(self) -> dict:
        d = dataclasses.asdict(self)
        for k in self.FILE_EXCLUDE:
            d.pop(k)
        return d

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls) if f.name not in cls.FILE_EXCLUDE]

    def to_json(self) -> str:
        return json.dumps(self.row())

    @classmethod
    def from_json(cls, line: str) -> "IterationReport":
        return cls(**json.loads(line))

    def check(self) -> None:
        for name in ("precision", "recall", "f1", "local_acc", "r1_i2t", "r5_i2t", "r10_i2t",
                     "r1_t2i", "r5_t2i", "r10_t2i", "pp"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise AssertionError(f"invariant violated: {name}={v} outside [0, 1]")
        for name in ("loss_it", "loss_c", "loss_u", "loss_total", "mean_uncertainty"):
            if not np.isfinite(getattr(self, name)):
                raise AssertionError(f"invariant violated: {name} is not finite")
