"""Knowledge-guided training of the dual encoder from graph links."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import Switches, TrainConfig
from .encoder import DropoutMask, EncoderParams, Tape
from .graph import MultiModalGraph, NodeId, NodeKind, two_hop_phrase_ids
from .synthetic import SyntheticCorpus

EPS = 1e-6


class Origin(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class SoftLabel:
    value: float
    origin: Origin


def soft_label(f_prev: float, strength: float, gamma: float, mu_weak: float) -> SoftLabel:
    """Sharpened target from the previous-iteration confidence of a sampled pair."""
    f = min(max(float(f_prev), 0.0), 1.0)
    if strength == 1.0:
        y, origin = f**gamma, Origin.STRONG
    elif strength == 0.5:
        y, origin = mu_weak * f**gamma, Origin.WEAK
    elif strength == 0.0:
        y, origin = 1.0 - (1.0 - f) ** gamma, Origin.NEGATIVE
    else:
        raise ValueError(f"bad strength {strength}")
    return SoftLabel(min(max(y, 0.0), 1.0), origin)


def hard_label(strength: float) -> SoftLabel:
    origin = {1.0: Origin.STRONG, 0.5: Origin.WEAK, 0.0: Origin.NEGATIVE}[strength]
    return SoftLabel(float(strength), origin)


def _clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


def _inside(p):
    p = np.asarray(p, dtype=float)
    return (p > EPS) & (p < 1.0 - EPS)


# -- losses and their derivatives with respect to the probabilities ----------

def loss_global(y, f_now):
    """-Y log F, summed over pairs."""
    return float(np.sum(-np.asarray(y) * np.log(_clamp(np.asarray(f_now, dtype=float)))))


def loss_global_grad(y, f_now):
    f = np.asarray(f_now, dtype=float)
    return np.where(_inside(f), -np.asarray(y) / _clamp(f), 0.0)


def loss_global_bce(y, f_now):
    """-Y log F - (1 - Y) log(1 - F): the symmetric reading for negatives."""
    y = np.asarray(y, dtype=float)
    f = _clamp(np.asarray(f_now, dtype=float))
    return float(np.sum(-y * np.log(f) - (1.0 - y) * np.log(1.0 - f)))


def loss_global_bce_grad(y, f_now):
    y = np.asarray(y, dtype=float)
    f = np.asarray(f_now, dtype=float)
    fc = _clamp(f)
    return np.where(_inside(f), -y / fc + (1.0 - y) / (1.0 - fc), 0.0)


def loss_local(target_probs, y_op, y_it):
    """-sum Y_it * Y_op * log p(target object | phrase)."""
    p = _clamp(np.asarray(target_probs, dtype=float))
    return float(np.sum(-np.asarray(y_it) * np.asarray(y_op) * np.log(p)))


def loss_local_grad(target_probs, y_op, y_it):
    p = np.asarray(target_probs, dtype=float)
    return np.where(_inside(p), -np.asarray(y_it) * np.asarray(y_op) / _clamp(p), 0.0)


def loss_uncertainty(p1, p2):
    """Symmetrised Bernoulli KL between two dropout passes, summed over pairs."""
    a = _clamp(np.asarray(p1, dtype=float))
    b = _clamp(np.asarray(p2, dtype=float))
    kl_ab = a * np.log(a / b) + (1 - a) * np.log((1 - a) / (1 - b))
    kl_ba = b * np.log(b / a) + (1 - b) * np.log((1 - b) / (1 - a))
    return float(np.sum(0.5 * kl_ab + 0.5 * kl_ba))


def loss_uncertainty_grad(p1, p2):
    a0, b0 = np.asarray(p1, dtype=float), np.asarray(p2, dtype=float)
    a, b = _clamp(a0), _clamp(b0)
    logit_gap = np.log(a / b) - np.log((1 - a) / (1 - b))
    da = 0.5 * logit_gap + 0.5 * ((1 - b) / (1 - a) - b / a)
    db = -0.5 * logit_gap + 0.5 * ((1 - a) / (1 - b) - a / b)
    return np.where(_inside(a0), da, 0.0), np.where(_inside(b0), db, 0.0)


def total_loss(l_it: float, l_c: float, l_u: float, cfg: TrainConfig) -> float:
    return cfg.w_global * l_it + cfg.w_local * l_c + cfg.w_uncertainty * l_u


# -- optimisation -------------------------------------------------------------

def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    warm = warmup_frac * total_steps
    if warm > 0 and step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warm))


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: EncoderParams, grads: EncoderParams, lr: float) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for name, g in grads.tensors().items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr != 0.0:
                param = getattr(params, name)
                param -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam_step": np.array(self.step)}
        out.update({f"adam_m_{k}": v for k, v in self.m.items()})
        out.update({f"adam_v_{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], cfg: TrainConfig) -> "Adam":
        opt = cls(cfg.beta1, cfg.beta2, cfg.adam_eps, int(state.get("adam_step", 0)))
        for k, v in state.items():
            if k.startswith("adam_m_"):
                opt.m[k[len("adam_m_"):]] = v.copy()
            elif k.startswith("adam_v_"):
                opt.v[k[len("adam_v_"):]] = v.copy()
        return opt


# -- sampling -----------------------------------------------------------------

def sample_triplet(graph: MultiModalGraph, anchor: NodeId, rng: np.random.Generator):
    """Positive from strong neighbours, else weak ones; negative from every unlinked counterpart.

    Counterparts outside the candidate prefilter carry no stored link and count
    as strength 0. Returns ``(positive, negative)`` indices, either may be None.
    """
    if anchor.kind not in (NodeKind.IMAGE, NodeKind.SENTENCE):
        raise ValueError("anchor must be an image or a sentence")
    adj = graph.neighbor_strengths(anchor)
    strong = sorted(j for j, s in adj.items() if s == 1.0)
    weak = sorted(j for j, s in adj.items() if s == 0.5)
    pool = strong or weak
    pos = pool[int(rng.integers(len(pool)))] if pool else None
    n_other = graph.n_sentences if anchor.kind is NodeKind.IMAGE else graph.n_images
    zero = np.setdiff1d(np.arange(n_other), np.array(strong + weak, dtype=int))
    neg = int(zero[int(rng.integers(len(zero)))]) if len(zero) else None
    return pos, neg


def anchor_rng(seed: int, iteration: int, kind: NodeKind, index: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, epoch, 0 if kind is NodeKind.IMAGE else 1, index])


# -- one epoch ---------------------------------------------------------------

def image_context_ids(graph: MultiModalGraph, corpus: SyntheticCorpus, enabled: bool = True) -> list[list[int]]:
    if not enabled:
        return [[] for _ in range(corpus.n_images)]
    return [two_hop_phrase_ids(graph, i) for i in range(corpus.n_images)]


def image_contexts(graph: MultiModalGraph, corpus: SyntheticCorpus, enabled: bool = True) -> list[list[np.ndarray]]:
    return [[corpus.phrase_tokens[p] for p in ids] for ids in image_context_ids(graph, corpus, enabled)]


def pair_context(context_ids: Sequence[int], corpus: SyntheticCorpus, sentence: int) -> list[np.ndarray]:
    """Two-hop phrases of an image minus those of the sentence it is being scored against.

    Without the exclusion a linked sentence would find its own phrases inside the
    image representation and the encoder would learn to read them back.
    """
    own = set(corpus.sentence_phrases[sentence].tolist())
    return [corpus.phrase_tokens[p] for p in context_ids if p not in own]


@dataclass
class EpochStats:
    steps: int = 0
    pairs: int = 0
    loss_it: float = 0.0
    loss_c: float = 0.0
    loss_u: float = 0.0
    loss_total: float = 0.0
    trace: list = field(default_factory=list)

    def mean(self, name: str) -> float:
        return getattr(self, name) / self.pairs if self.pairs else 0.0


@dataclass
class _Pair:
    image: int
    sentence: int
    label: float
    local: list  # [(phrase node, object position)]


def _anchor_pairs(graph, corpus, kind, anchor, rng, cfg, switches) -> list[_Pair]:
    pos, neg = sample_triplet(graph, NodeId(kind, anchor), rng)
    if pos is None:
        return []
    out = []
    for other, positive in ((pos, True), (neg, False)):
        if other is None:
            continue
        i, s = (anchor, other) if kind is NodeKind.IMAGE else (other, anchor)
        strength, conf = graph.global_link(i, s) or (0.0, 0.0)
        lab = soft_label(conf, strength, cfg.gamma, cfg.mu_weak) if switches.cal else hard_label(strength)
        local = []
        if positive:
            objs = corpus.image_objects[i]
            for p in corpus.sentence_phrases[s]:
                for pos_o, o in enumerate(objs):
                    if graph.has_local(int(o), int(p)):
                        local.append((int(p), pos_o))
        out.append(_Pair(i, s, lab.value, local))
    return out


def batch_objective(params: EncoderParams, pairs: list[_Pair], corpus: SyntheticCorpus, contexts,
                    cfg: TrainConfig, switches: Switches, mask_seeds: tuple[int, int, int, int]):
    """Losses of a minibatch and their gradients, both averaged over its pairs."""
    tape = Tape(params)
    objects = [corpus.image_vocab(p.image) for p in pairs]
    ctx = [pair_context(contexts[p.image], corpus, p.sentence) for p in pairs]
    tokens = [corpus.sentence_tokens[p.sentence] for p in pairs]
    y = np.array([p.label for p in pairs])
    rate = cfg.dropout
    f1 = tape.pairs(objects, ctx, tokens, DropoutMask(mask_seeds[0], rate), DropoutMask(mask_seeds[1], rate))
    n = len(pairs)
    upstream = {}
    if cfg.negative_loss == "bce":
        l_it = loss_global_bce(y, f1.scores)
        d1 = cfg.w_global * loss_global_bce_grad(y, f1.scores)
    else:
        l_it = loss_global(y, f1.scores)
        d1 = cfg.w_global * loss_global_grad(y, f1.scores)
    l_u = 0.0
    if switches.ur and cfg.w_uncertainty > 0:
        f2 = tape.pairs(objects, ctx, tokens, DropoutMask(mask_seeds[2], rate), DropoutMask(mask_seeds[3], rate))
        l_u = loss_uncertainty(f1.scores, f2.scores)
        g1, g2 = loss_uncertainty_grad(f1.scores, f2.scores)
        d1 = d1 + cfg.w_uncertainty * g1
        upstream[f2] = cfg.w_uncertainty * g2 / n
    upstream[f1] = d1 / n
    l_c = 0.0
    rows = [(k, ph, o) for k, p in enumerate(pairs) for ph, o in p.local]
    if rows and cfg.w_local > 0:
        loc = tape.local([corpus.phrase_tokens[ph] for _, ph, _ in rows],
                         [objects[k] for k, _, _ in rows], [o for _, _, o in rows])
        y_it = y[[k for k, _, _ in rows]]
        l_c = loss_local(loc.target_probs, 1.0, y_it)
        upstream[loc] = cfg.w_local * loss_local_grad(loc.target_probs, 1.0, y_it) / n
    grads = tape.backward(upstream)
    return (l_it, l_c, l_u), grads


def steps_per_epoch(corpus: SyntheticCorpus, batch_size: int) -> int:
    return math.ceil(corpus.n_images / batch_size) + math.ceil(corpus.n_sentences / batch_size)


def train_iteration(params: EncoderParams, opt: Adam, graph: MultiModalGraph, corpus: SyntheticCorpus,
                    cfg: TrainConfig, switches: Switches, seed: int, iteration: int,
                    total_steps: int, global_step: int, trace: bool = False, epoch: int = 0) -> tuple[int, EpochStats]:
    """One sweep over image anchors then sentence anchors; updates ``params`` in place.

    Returns the new global step count and the epoch statistics.
    """
    if corpus.n_images == 0 or corpus.n_sentences == 0:
        raise ValueError("empty corpus")
    contexts = image_context_ids(graph, corpus, switches.gl)
    stats = EpochStats()
    order_rng = np.random.default_rng([seed, iteration, epoch, 99])
    for kind, count in ((NodeKind.IMAGE, corpus.n_images), (NodeKind.SENTENCE, corpus.n_sentences)):
        order = order_rng.permutation(count)
        for start in range(0, count, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            pairs = []
            for a in chunk:
                pairs.extend(_anchor_pairs(graph, corpus, kind, int(a), anchor_rng(seed, iteration, kind, int(a), epoch),
                                           cfg, switches))
            lr = lr_schedule(min(global_step, total_steps), total_steps, cfg.lr, cfg.warmup_frac)
            if pairs:
                ss = np.random.SeedSequence([seed, iteration, global_step]).generate_state(4)
                (l_it, l_c, l_u), grads = batch_objective(params, pairs, corpus, contexts, cfg, switches,
                                                          tuple(int(x) for x in ss))
                opt.update(params, grads, lr)
                stats.pairs += len(pairs)
                stats.loss_it += l_it
                stats.loss_c += l_c
                stats.loss_u += l_u
                stats.loss_total += total_loss(l_it, l_c, l_u, cfg)
                if trace:
                    n = len(pairs)
                    stats.trace.append((global_step, l_it / n, l_c / n, l_u / n, lr))
            global_step += 1
            stats.steps += 1
    if not params.finite():
        raise FloatingPointError("non-finite encoder parameters after training")
    return global_step, stats
