"""Shallow dual encoder with hand-written gradients.

Images are bags of object ids, sentences bags of token ids. Both are
mean-pooled, optionally dropped out, projected, and compared by cosine:

    F(I, T) = sigmoid(cos(W_img h_I, W_txt h_T) / temperature + bias)

The scalar bias absorbs the base rate of positive labels so the embedding
geometry does not have to.

Two-hop context phrases are folded into the image bag with weight
``ctx_weight`` after adding a learned segment offset. Object-phrase scores
are a softmax over the cosine of the phrase against each object of the
image.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

CTX_WEIGHT = 0.5
EPS = 1e-6


@dataclass
class EncoderParams:
    obj_emb: np.ndarray
    tok_emb: np.ndarray
    w_img: np.ndarray
    w_txt: np.ndarray
    segment: np.ndarray
    log_temp: np.ndarray   # 0-d; temperature = exp(log_temp) keeps it positive
    bias: np.ndarray       # 0-d logit offset
    seed: int = 0

    @classmethod
    def init(cls, n_objects: int, n_tokens: int, dim: int = 32, seed: int = 0,
             temperature: float = 0.5) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        return cls(
            obj_emb=rng.normal(0.0, scale, (n_objects, dim)),
            tok_emb=rng.normal(0.0, scale, (n_tokens, dim)),
            w_img=np.eye(dim) + rng.normal(0.0, 0.1 * scale, (dim, dim)),
            w_txt=np.eye(dim) + rng.normal(0.0, 0.1 * scale, (dim, dim)),
            segment=rng.normal(0.0, scale, dim),
            log_temp=np.array(np.log(temperature)),
            bias=np.array(0.0),
            seed=seed,
        )

    @property
    def dim(self) -> int:
        return self.obj_emb.shape[1]

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temp))

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "seed"}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.tensors().items()}, seed=self.seed)

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(**{k: np.zeros_like(v) for k, v in self.tensors().items()}, seed=self.seed)

    def finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors().values())

    def save(self, path, **extra: np.ndarray) -> None:
        np.savez(path, seed=np.array(self.seed), **self.tensors(), **extra)

    @classmethod
    def load(cls, path) -> tuple["EncoderParams", dict[str, np.ndarray]]:
        with np.load(path) as z:
            data = {k: z[k] for k in z.files}
        names = [f.name for f in fields(cls) if f.name != "seed"]
        params = cls(**{k: data.pop(k) for k in names}, seed=int(data.pop("seed")))
        return params, data


@dataclass(frozen=True)
class DropoutMask:
    seed: int
    rate: float = 0.1

    def sample(self, shape) -> np.ndarray:
        """Inverted-dropout multiplier; rate 0 gives exact ones."""
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.rate == 0.0:
            return np.ones(shape)
        keep = np.random.default_rng(self.seed).random(shape) >= self.rate
        return keep / (1.0 - self.rate)


@dataclass
class PairScore:
    value: float
    cosine: float
    logit: float


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


# -- pooling -----------------------------------------------------------------

def bag_matrix(bags: Sequence[Sequence[int]], width: int) -> np.ndarray:
    """Row-stochastic averaging matrix: row r averages the ids in ``bags[r]``."""
    m = np.zeros((len(bags), width))
    for r, bag in enumerate(bags):
        bag = np.asarray(bag, dtype=np.int64)
        if len(bag):
            np.add.at(m[r], bag, 1.0 / len(bag))
    return m


def context_matrix(contexts: Sequence[Sequence[Sequence[int]]], width: int) -> tuple[np.ndarray, np.ndarray]:
    """Average over context phrases of each phrase's token mean, plus a has-context flag."""
    m = np.zeros((len(contexts), width))
    has = np.zeros(len(contexts))
    for r, phrases in enumerate(contexts):
        if not len(phrases):
            continue
        has[r] = 1.0
        for toks in phrases:
            np.add.at(m[r], np.asarray(toks, dtype=np.int64), 1.0 / (len(toks) * len(phrases)))
    return m, has


def _require_nonempty(bags, what):
    for bag in bags:
        if len(bag) == 0:
            raise ValueError(f"empty {what} list")


def _row_cosine(u: np.ndarray, v: np.ndarray):
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    denom = nu * nv
    ok = denom > 0
    cos = np.where(ok, np.sum(u * v, axis=-1) / np.where(ok, denom, 1.0), 0.0)
    return cos, nu, nv, ok


def _cosine_backward(dcos, u, v, cos, nu, nv, ok):
    safe_nu = np.where(nu > 0, nu, 1.0)[..., None]
    safe_nv = np.where(nv > 0, nv, 1.0)[..., None]
    g = np.where(ok, dcos, 0.0)[..., None]
    du = g * (v / (safe_nu * safe_nv) - cos[..., None] * u / safe_nu**2)
    dv = g * (u / (safe_nu * safe_nv) - cos[..., None] * v / safe_nv**2)
    return du, dv


# -- single-item API ------------------------------------------------------------

def encode_image(p: EncoderParams, objects: Sequence[int], ctx_phrases: Sequence[Sequence[int]] = (),
                 mask: DropoutMask | None = None) -> np.ndarray:
    return encode_images(p, [objects], [ctx_phrases], mask)[0]


def encode_sentence(p: EncoderParams, tokens: Sequence[int], mask: DropoutMask | None = None) -> np.ndarray:
    return encode_sentences(p, [tokens], mask)[0]


def encode_images(p: EncoderParams, objects: Sequence[Sequence[int]],
                  contexts: Sequence[Sequence[Sequence[int]]] | None = None,
                  mask: DropoutMask | None = None) -> np.ndarray:
    _require_nonempty(objects, "object")
    pooled = bag_matrix(objects, p.obj_emb.shape[0]) @ p.obj_emb
    if contexts is not None:
        q, has = context_matrix(contexts, p.tok_emb.shape[0])
        ctx = q @ p.tok_emb + p.segment
        pooled = pooled + (CTX_WEIGHT * has)[:, None] * (ctx - pooled)
    if mask is not None:
        pooled = pooled * mask.sample(pooled.shape)
    return pooled @ p.w_img.T


def encode_sentences(p: EncoderParams, tokens: Sequence[Sequence[int]], mask: DropoutMask | None = None) -> np.ndarray:
    _require_nonempty(tokens, "token")
    pooled = bag_matrix(tokens, p.tok_emb.shape[0]) @ p.tok_emb
    if mask is not None:
        pooled = pooled * mask.sample(pooled.shape)
    return pooled @ p.w_txt.T


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    return (a / np.where(na > 0, na, 1.0)) @ (b / np.where(nb > 0, nb, 1.0)).T


def score_global(p: EncoderParams, image_vec: np.ndarray, text_vec: np.ndarray) -> PairScore:
    cos, *_ = _row_cosine(np.asarray(image_vec, float), np.asarray(text_vec, float))
    z = float(cos) / p.temperature + float(p.bias)
    return PairScore(value=float(sigmoid(z)), cosine=float(cos), logit=z)


def score_matrix(p: EncoderParams, image_vecs: np.ndarray, text_vecs: np.ndarray) -> np.ndarray:
    return sigmoid(cosine_matrix(image_vecs, text_vecs) / p.temperature + float(p.bias))


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def local_probs(p: EncoderParams, phrase_tokens: Sequence[int], image_objects: Sequence[int]) -> np.ndarray:
    """Softmax over objects of the phrase-object cosines."""
    _require_nonempty([image_objects], "object")
    q = encode_sentence(p, phrase_tokens)
    objs = p.obj_emb[np.asarray(image_objects, dtype=np.int64)] @ p.w_img.T
    return softmax(cosine_matrix(q[None, :], objs)[0])


def score_local(p: EncoderParams, phrase_tokens: Sequence[int], image_objects: Sequence[int], target: int) -> float:
    if not 0 <= target < len(image_objects):
        raise IndexError(f"target position {target} outside image of {len(image_objects)} objects")
    return float(local_probs(p, phrase_tokens, image_objects)[target])


# -- recorded forwards with backward -------------------------------------------

class GlobalForward:
    """Scores of a batch of (image, sentence) pairs under one pair of dropout masks."""

    def __init__(self, p: EncoderParams, objects, contexts, tokens,
                 img_mask: DropoutMask | None = None, txt_mask: DropoutMask | None = None):
        _require_nonempty(objects, "object")
        _require_nonempty(tokens, "token")
        self.p = p
        self.P_o = bag_matrix(objects, p.obj_emb.shape[0])
        self.Q, self.has = context_matrix(contexts if contexts is not None else [()] * len(objects),
                                          p.tok_emb.shape[0])
        self.P_t = bag_matrix(tokens, p.tok_emb.shape[0])
        a = self.P_o @ p.obj_emb
        ctx = self.Q @ p.tok_emb + p.segment
        self.mix = (CTX_WEIGHT * self.has)[:, None]
        h = a + self.mix * (ctx - a)
        self.m_img = img_mask.sample(h.shape) if img_mask is not None else np.ones_like(h)
        self.h = h * self.m_img
        self.u = self.h @ p.w_img.T
        g = self.P_t @ p.tok_emb
        self.m_txt = txt_mask.sample(g.shape) if txt_mask is not None else np.ones_like(g)
        self.g = g * self.m_txt
        self.v = self.g @ p.w_txt.T
        self.cos, self.nu, self.nv, self.ok = _row_cosine(self.u, self.v)
        self.tau = float(np.exp(p.log_temp))
        self.z = self.cos / self.tau
        self.logit = self.z + float(p.bias)
        self.scores = sigmoid(self.logit)

    def backward(self, d_scores: np.ndarray, grads: EncoderParams) -> None:
        p = self.p
        dz = d_scores * self.scores * (1.0 - self.scores)
        grads.log_temp += -np.sum(dz * self.z)
        grads.bias += np.sum(dz)
        du, dv = _cosine_backward(dz / self.tau, self.u, self.v, self.cos, self.nu, self.nv, self.ok)
        grads.w_img += du.T @ self.h
        grads.w_txt += dv.T @ self.g
        dh = (du @ p.w_img) * self.m_img
        grads.obj_emb += self.P_o.T @ (dh * (1.0 - self.mix))
        dctx = dh * self.mix
        grads.tok_emb += self.Q.T @ dctx
        grads.segment += dctx.sum(axis=0)
        dg = (dv @ p.w_txt) * self.m_txt
        grads.tok_emb += self.P_t.T @ dg


class LocalForward:
    """Per-anchor softmax of phrase-object cosines; exposes the target log-probabilities."""

    def __init__(self, p: EncoderParams, phrase_tokens, image_objects, targets):
        _require_nonempty(image_objects, "object")
        self.p = p
        self.P_q = bag_matrix(phrase_tokens, p.tok_emb.shape[0])
        self.raw_q = self.P_q @ p.tok_emb
        self.q = self.raw_q @ p.w_txt.T
        # flatten (anchor, object) rows
        self.obj_ids = [np.asarray(o, dtype=np.int64) for o in image_objects]
        self.rows = np.concatenate([np.full(len(o), k) for k, o in enumerate(self.obj_ids)]).astype(np.int64)
        flat = np.concatenate(self.obj_ids)
        self.flat_obj = flat
        self.raw_o = p.obj_emb[flat]
        self.o = self.raw_o @ p.w_img.T
        qr = self.q[self.rows]
        self.cos, self.nq, self.no, self.ok = _row_cosine(qr, self.o)
        self.offsets = np.concatenate([[0], np.cumsum([len(o) for o in self.obj_ids])])
        self.targets = np.asarray(targets, dtype=np.int64)
        for k, t in enumerate(self.targets):
            if not 0 <= t < len(self.obj_ids[k]):
                raise IndexError(f"target {t} outside image of {len(self.obj_ids[k])} objects")
        self.probs = np.empty_like(self.cos)
        for k in range(len(self.obj_ids)):
            sl = slice(self.offsets[k], self.offsets[k + 1])
            self.probs[sl] = softmax(self.cos[sl])
        self.target_probs = self.probs[self.offsets[:-1] + self.targets]

    def backward(self, d_target_probs: np.ndarray, grads: EncoderParams) -> None:
        p = self.p
        # d p_t / d cos_j = p_t (1[j=t] - p_j)
        dcos = np.empty_like(self.cos)
        for k in range(len(self.obj_ids)):
            sl = slice(self.offsets[k], self.offsets[k + 1])
            pt = self.target_probs[k]
            onehot = np.zeros(sl.stop - sl.start)
            onehot[self.targets[k]] = 1.0
            dcos[sl] = d_target_probs[k] * pt * (onehot - self.probs[sl])
        dq_rows, do = _cosine_backward(dcos, self.q[self.rows], self.o, self.cos, self.nq, self.no, self.ok)
        dq = np.zeros_like(self.q)
        np.add.at(dq, self.rows, dq_rows)
        grads.w_txt += dq.T @ self.raw_q
        grads.tok_emb += self.P_q.T @ (dq @ p.w_txt)
        grads.w_img += do.T @ self.raw_o
        np.add.at(grads.obj_emb, self.flat_obj, do @ p.w_img)


class Tape:
    """Collects recorded forwards so gradients can be pulled in one call."""

    def __init__(self, p: EncoderParams):
        self.p = p
        self.records: list = []

    def pairs(self, objects, contexts, tokens, img_mask=None, txt_mask=None) -> GlobalForward:
        f = GlobalForward(self.p, objects, contexts, tokens, img_mask, txt_mask)
        self.records.append(f)
        return f

    def local(self, phrase_tokens, image_objects, targets) -> LocalForward:
        f = LocalForward(self.p, phrase_tokens, image_objects, targets)
        self.records.append(f)
        return f

    def backward(self, upstream: dict) -> EncoderParams:
        """``upstream`` maps each recorded forward to d(loss)/d(its scores)."""
        if not self.records:
            raise RuntimeError("backward called before any forward was recorded")
        grads = self.p.zeros_like()
        for rec in self.records:
            if rec in upstream:
                rec.backward(upstream[rec], grads)
        return grads


def backward(p: EncoderParams, tape: Tape | None, upstream: dict | None = None) -> EncoderParams:
    if tape is None or not tape.records:
        raise RuntimeError("backward called before any forward was recorded")
    return tape.backward(upstream or {})
