"""Independent reference implementations shared by unit and acceptance tests.

The reference functions use plain Python and numpy only. The gradient helpers
drive the encoder's forward objects, and ``run_both`` drives the library side of
the discovery comparison.
"""

from __future__ import annotations

import math

import numpy as np

from mmkd.encoder import DropoutMask, EncoderParams, Tape
from mmkd.training import (
    loss_global, loss_global_bce, loss_global_bce_grad, loss_global_grad, loss_local, loss_local_grad,
    loss_uncertainty, loss_uncertainty_grad,
)

FD_STEP = 1e-5


# -- finite differences ------------------------------------------------------

def random_instance(seed: int):
    rng = np.random.default_rng(seed)
    n_obj, n_tok, dim, n = 6, 9, 4, 4
    p = EncoderParams.init(n_obj, n_tok, dim, seed=seed, temperature=float(rng.uniform(0.3, 1.5)))
    p.bias = np.array(rng.normal(0, 0.5))
    p.segment = rng.normal(0, 0.5, dim)
    objects = [rng.choice(n_obj, size=int(rng.integers(1, 4)), replace=False) for _ in range(n)]
    contexts = [[rng.integers(0, n_tok, size=int(rng.integers(1, 3))) for _ in range(int(rng.integers(0, 3)))]
                for _ in range(n)]
    tokens = [rng.integers(0, n_tok, size=int(rng.integers(1, 4))) for _ in range(n)]
    y = rng.uniform(0.05, 0.95, n)
    # local rows: phrase tokens against the objects of one image, one target each
    phr = [rng.integers(0, n_tok, size=int(rng.integers(1, 3))) for _ in range(3)]
    img = [objects[k % n] if len(objects[k % n]) > 1 else np.array([0, 1]) for k in range(3)]
    tgt = [int(rng.integers(len(o))) for o in img]
    y_it = rng.uniform(0.2, 1.0, 3)
    masks = tuple(DropoutMask(int(s), 0.1) for s in rng.integers(0, 2**31, 4))
    return dict(p=p, objects=objects, contexts=contexts, tokens=tokens, y=y, phr=phr, img=img, tgt=tgt,
                y_it=y_it, masks=masks)


def losses_and_grads(inst, which: str, params: EncoderParams | None = None):
    p = params if params is not None else inst["p"]
    tape = Tape(p)
    m = inst["masks"]
    if which in ("it_literal", "it_bce"):
        f = tape.pairs(inst["objects"], inst["contexts"], inst["tokens"], m[0], m[1])
        if which == "it_literal":
            return loss_global(inst["y"], f.scores), tape, {f: loss_global_grad(inst["y"], f.scores)}
        return loss_global_bce(inst["y"], f.scores), tape, {f: loss_global_bce_grad(inst["y"], f.scores)}
    if which == "c":
        f = tape.local(inst["phr"], inst["img"], inst["tgt"])
        return (loss_local(f.target_probs, 1.0, inst["y_it"]), tape,
                {f: loss_local_grad(f.target_probs, 1.0, inst["y_it"])})
    if which == "u":
        f1 = tape.pairs(inst["objects"], inst["contexts"], inst["tokens"], m[0], m[1])
        f2 = tape.pairs(inst["objects"], inst["contexts"], inst["tokens"], m[2], m[3])
        g1, g2 = loss_uncertainty_grad(f1.scores, f2.scores)
        return loss_uncertainty(f1.scores, f2.scores), tape, {f1: g1, f2: g2}
    raise ValueError(which)


def max_relative_error(inst, which: str) -> float:
    """Worst per-tensor ||analytic - numeric|| / max(||analytic||, ||numeric||)."""
    _, tape, up = losses_and_grads(inst, which)
    analytic = tape.backward(up).tensors()
    p = inst["p"]
    worst = 0.0
    for name, value in p.tensors().items():
        num = np.zeros_like(value, dtype=float)
        flat = value.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + FD_STEP
            hi = losses_and_grads(inst, which, p)[0]
            flat[k] = old - FD_STEP
            lo = losses_and_grads(inst, which, p)[0]
            flat[k] = old
            num.reshape(-1)[k] = (hi - lo) / (2 * FD_STEP)
        a = analytic[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(num))
        if scale > 1e-10:
            worst = max(worst, float(np.linalg.norm(a - num) / scale))
    return worst


# -- straight-line discovery ---------------------------------------------------

def reference_discovery(scores, local_fn, image_objects, sentence_phrases, cand_i2t, cand_t2i,
                        strategy, lam, mu_i, mu_t, k_i, k_t, lam_c):
    """Link assignment written out loop by loop.

    Returns ({(i, s): strength} over all candidate pairs, {(object, phrase)}).
    """
    n_i, n_t = scores.shape
    thr_i, thr_t = [], []
    for i in range(n_i):
        conf = sorted((scores[i, s] for s in cand_i2t[i]), reverse=True)
        kk = min(k_i, len(conf))
        thr_i.append((sum(conf[:kk]) / kk) ** mu_i)
    for s in range(n_t):
        conf = sorted((scores[i, s] for i in cand_t2i[s]), reverse=True)
        kk = min(k_t, len(conf))
        thr_t.append((sum(conf[:kk]) / kk) ** mu_t)
    pairs = set()
    for i in range(n_i):
        for s in cand_i2t[i]:
            pairs.add((i, int(s)))
    for s in range(n_t):
        for i in cand_t2i[s]:
            pairs.add((int(i), s))
    glob, loc = {}, set()
    for i, s in sorted(pairs):
        f = scores[i, s]
        if strategy == "AT":
            st = 1.0 if f >= lam else 0.0
        elif strategy == "LA":
            st = 1.0 if f >= thr_i[i] else 0.0
        else:
            st = 0.5 * ((1.0 if f >= thr_i[i] else 0.0) + (1.0 if f >= thr_t[s] else 0.0))
        glob[(i, s)] = st
        if st != 0.0:
            probs = local_fn(i, s)
            for a, p in enumerate(sentence_phrases[s]):
                for b, o in enumerate(image_objects[i]):
                    if probs[a][b] >= lam_c:
                        loc.add((int(o), int(p)))
    return glob, loc


def reference_top_w(scores, w):
    """Per-row indices of the w best scores, ties to the lower index, via plain sorting."""
    out = []
    for row in scores:
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out.append(order[:w])
    return out


def run_both(corpus, scores, policy, seed):
    """Run the library discovery pass and the reference on the same random scores.

    Local probabilities are random row-stochastic matrices, fixed per pair.
    """
    from mmkd.discovery import build_candidates, discovery_pass
    from mmkd.graph import MultiModalGraph
    from mmkd.scorers import MatrixScorer

    rng = np.random.default_rng([seed, 5])
    loc = {}

    def local(i, s):
        if (i, s) not in loc:
            raw = rng.random((len(corpus.sentence_phrases[s]), len(corpus.image_objects[i])))
            loc[(i, s)] = raw / raw.sum(axis=1, keepdims=True)
        return loc[(i, s)]

    scorer = MatrixScorer(scores, corpus, local)
    cands = build_candidates(scorer, corpus.n_images, corpus.n_sentences, policy.width)
    g = MultiModalGraph(corpus.image_objects, corpus.sentence_phrases)
    discovery_pass(scorer, g, corpus, cands, policy)
    got_global = {k: s for k, (s, _) in g.global_items()}
    ref_global, ref_local = reference_discovery(
        scores, local, corpus.image_objects, corpus.sentence_phrases,
        reference_top_w(scores, policy.width), reference_top_w(scores.T, policy.width),
        policy.strategy.value, policy.abs_threshold, policy.mu_img, policy.mu_txt,
        policy.k_img, policy.k_txt, policy.local_threshold)
    return got_global, g.local_pairs(), ref_global, ref_local


# -- closed-form formula cases ----------------------------------------------

def sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def bernoulli_sym_kl(a: float, b: float) -> float:
    kl = lambda x, y: x * math.log(x / y) + (1 - x) * math.log((1 - x) / (1 - y))
    return 0.5 * kl(a, b) + 0.5 * kl(b, a)
