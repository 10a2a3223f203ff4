"""The discovery -> training loop and the experiment suites built on it."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig, Strategy, Switches, dump_config
from .discovery import CandidateSet, build_candidates, discovery_pass
from .encoder import EncoderParams
from .graph import MultiModalGraph, pp_fraction
from .metrics import (
    IterationReport, RetrievalResult, evaluate_inductive, evaluate_retrieval, global_prf, local_accuracy,
    mean_uncertainty, probe_pairs,
)
from .scorers import EncoderScorer, NoisyOracleScorer
from .synthetic import (
    NoiseMode, SyntheticCorpus, generate_world, held_out_spec, inject_noise, random_environment,
)
from .training import Adam, image_context_ids, steps_per_epoch, train_iteration

log = logging.getLogger(__name__)

# seed offsets that keep auxiliary worlds independent of the main one
NOISE_WORLD_OFFSET = 50_000
NOISE_IMAGE_WORLD_OFFSET = 60_000
TEXT_WORLD_OFFSET = 70_000


def world_for(cfg: RunConfig, seed: int) -> SyntheticCorpus:
    if cfg.corpus:
        return SyntheticCorpus.from_jsonl(cfg.corpus)
    return generate_world(replace(cfg.world, seed=cfg.world.seed + seed))


def init_params(cfg: RunConfig, corpus: SyntheticCorpus, seed: int) -> EncoderParams:
    return EncoderParams.init(corpus.n_object_vocab, corpus.n_token_vocab, cfg.train.dim,
                              seed=seed, temperature=cfg.train.temperature)


def initial_scorer(cfg: RunConfig, corpus: SyntheticCorpus, params: EncoderParams, seed: int):
    if cfg.init.scorer == "warm":
        return NoisyOracleScorer(corpus, cfg.init.sigma, seed)
    return EncoderScorer(params, corpus)


def effective_policy(cfg: RunConfig):
    # without iterative discovery the loop degenerates to one absolute-threshold pass
    return cfg.policy if cfg.switches.kd else replace(cfg.policy, strategy=Strategy.AT)


@dataclass
class RunState:
    params: EncoderParams
    opt: Adam
    graph: MultiModalGraph
    cands: CandidateSet
    step: int = 0
    t: int = 0


class RunWriter:
    def __init__(self, out: Path | None, cfg: RunConfig):
        self.out = out
        self.cfg = cfg
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)

    def reports(self, rows: list[IterationReport]) -> None:
        if self.out is None:
            return
        cols = IterationReport.columns()
        with open(self.out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                d = r.row()
                w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in cols])
        with open(self.out / "report.jsonl", "w") as fh:
            for r in rows:
                fh.write(r.to_json() + "\n")

    def snapshot(self, state: RunState) -> None:
        if self.out is None or not self.cfg.save_snapshots:
            return
        state.graph.export_jsonl(self.out / f"graph_t{state.t}.jsonl")
        state.params.save(self.out / f"checkpoint_t{state.t}.npz", iteration=np.array(state.t),
                          global_step=np.array(state.step), **state.opt.state())

    def trace(self, rows) -> None:
        if self.out is None or not rows:
            return
        path = self.out / "loss_trace.csv"
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(["step", "loss_it", "loss_c", "loss_u", "lr"])
            w.writerows(rows)

    def summary(self, seed: int, rows: list[IterationReport], elapsed: float) -> None:
        if self.out is None:
            return
        dump_config(self.cfg, self.out / "config.yaml")
        blob = json.dumps(dict(config=self.cfg.to_dict(), seed=seed), sort_keys=True).encode()
        summary = dict(
            run_id=hashlib.sha1(blob).hexdigest()[:10], config_hash=self.cfg.hash(), seed=seed,
            config=self.cfg.to_dict(), final=rows[-1].row() if rows else None,
            wall_clock=[r.wall_clock for r in rows], elapsed=elapsed,
        )
        with open(self.out / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)


def evaluate_iteration(cfg: RunConfig, corpus: SyntheticCorpus, state: RunState, stats, seed: int,
                       started: float) -> IterationReport:
    g = state.graph
    strong = g.strong_pairs()
    n_weak = sum(1 for _, (s, _) in g.global_items() if s == 0.5)
    if corpus.gt_global:
        p, r, f = global_prf(strong, corpus.gt_global)
    else:
        p = r = f = 0.0
    acc = local_accuracy(g.local_pairs(), corpus.gt_local) if corpus.gt_local else 0.0
    if corpus.gt_global:
        ret = evaluate_retrieval(state.params, corpus, _context_ids(cfg, corpus, g)).flat()
        probe = probe_pairs(corpus)
    else:
        ret = {k: 0.0 for k in ("r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i")}
        probe = []
    pol = effective_policy(cfg)
    report = IterationReport(
        iteration=state.t, precision=p, recall=r, f1=f, local_acc=acc, **ret,
        pp=pp_fraction(g, cfg.policy.pp_cutoff), n_strong=len(strong), n_weak=n_weak,
        n_local=len(g.local_pairs()),
        loss_it=stats.mean("loss_it"), loss_c=stats.mean("loss_c"), loss_u=stats.mean("loss_u"),
        loss_total=stats.mean("loss_total"),
        mean_uncertainty=mean_uncertainty(state.params, corpus, probe, cfg.train.dropout),
        strategy=pol.strategy.value, abs_threshold=pol.abs_threshold, mu_img=pol.mu_img, mu_txt=pol.mu_txt,
        k_img=pol.k_img, k_txt=pol.k_txt, local_threshold=pol.local_threshold, width=pol.width,
        config_hash=cfg.hash(), seed=seed, wall_clock=time.perf_counter() - started,
    )
    report.check()
    return report


def _discovery_scorer(cfg: RunConfig, corpus, state: RunState, init):
    if state.t == 1:
        return init
    return EncoderScorer(state.params, corpus, _context_ids(cfg, corpus, state.graph))


def _context_ids(cfg: RunConfig, corpus, graph):
    if cfg.policy.context_in_discovery and cfg.switches.gl:
        return image_context_ids(graph, corpus, True)
    return None


def run_single(cfg: RunConfig, seed: int, out_dir: str | Path | None = None,
               corpus: SyntheticCorpus | None = None, resume: str | Path | None = None,
               callback=None) -> tuple[list[IterationReport], RunState]:
    """Initialise, build candidates once, then alternate discovery and training ``t_max`` times."""
    cfg.validate()
    t0 = time.perf_counter()
    corpus = corpus if corpus is not None else world_for(cfg, seed)
    writer = RunWriter(Path(out_dir) if out_dir is not None else None, cfg)
    params = init_params(cfg, corpus, seed)
    init = initial_scorer(cfg, corpus, params, seed)
    policy = effective_policy(cfg)
    cands = build_candidates(init, corpus.n_images, corpus.n_sentences, policy.width)
    state = RunState(params, Adam(cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps),
                     MultiModalGraph(corpus.image_objects, corpus.sentence_phrases), cands)
    reports: list[IterationReport] = []
    if resume is not None:
        reports = _resume(cfg, state, Path(resume))
    total = cfg.t_max * cfg.train.epochs_per_iteration * steps_per_epoch(corpus, cfg.train.batch_size)

    while state.t < cfg.t_max:
        state.t += 1
        if state.t == 1 or cfg.switches.kd:
            scorer = _discovery_scorer(cfg, corpus, state, init)
            if state.t > 1 and cfg.policy.refresh_candidates:
                state.cands = build_candidates(scorer, corpus.n_images, corpus.n_sentences, policy.width)
            discovery_pass(scorer, state.graph, corpus, state.cands, policy)
        else:
            state.graph.iteration += 1
        for epoch in range(cfg.train.epochs_per_iteration):
            state.step, stats = train_iteration(state.params, state.opt, state.graph, corpus, cfg.train,
                                                cfg.switches, seed, state.t, total, state.step,
                                                trace=cfg.write_trace, epoch=epoch)
            writer.trace(stats.trace if cfg.write_trace else None)
        report = evaluate_iteration(cfg, corpus, state, stats, seed, t0)
        reports.append(report)
        log.info("seed %d t=%d F1=%.3f R@1 i2t=%.3f t2i=%.3f PP=%.3f", seed, state.t, report.f1,
                 report.r1_i2t, report.r1_t2i, report.pp)
        writer.snapshot(state)
        writer.reports(reports)
        if callback is not None:
            callback(state, report)
    writer.summary(seed, reports, time.perf_counter() - t0)
    return reports, state


def _resume(cfg: RunConfig, state: RunState, ckpt: Path) -> list[IterationReport]:
    params, extra = EncoderParams.load(ckpt)
    k = int(extra.pop("iteration"))
    state.t = k
    state.step = int(extra.pop("global_step"))
    state.params = params
    state.opt = Adam.from_state(extra, cfg.train)
    state.graph.load_jsonl(ckpt.parent / f"graph_t{k}.jsonl")
    if state.graph.iteration != k:
        raise ValueError(f"graph snapshot iteration {state.graph.iteration} does not match checkpoint {k}")
    rows = []
    report_path = ckpt.parent / "report.jsonl"
    if report_path.exists():
        with open(report_path) as fh:
            rows = [r for r in map(IterationReport.from_json, fh) if r.iteration <= k]
    return rows


def run(cfg: RunConfig, out_dir: str | Path | None = None, resume=None) -> dict[int, list[IterationReport]]:
    out = Path(out_dir or cfg.out_dir)
    results = {}
    for seed in cfg.seeds:
        target = out if len(cfg.seeds) == 1 else out / f"seed_{seed}"
        results[seed], _ = run_single(cfg, seed, target, resume=resume)
    return results


# -- experiment suites ---------------------------------------------------------

LADDER = (
    ("baseline", Switches(kd=False, cal=False, gl=False, ur=False)),
    ("+KD", Switches(kd=True, cal=False, gl=False, ur=False)),
    ("+CAL", Switches(kd=True, cal=True, gl=False, ur=False)),
    ("+GL", Switches(kd=True, cal=True, gl=True, ur=False)),
    ("+UR", Switches(kd=True, cal=True, gl=True, ur=True)),
)


def _quiet(cfg: RunConfig) -> RunConfig:
    return replace(cfg, save_snapshots=False)


def _sub(out, name):
    return None if out is None else Path(out) / name


def run_ablation_ladder(cfg: RunConfig, seed: int, out_dir=None) -> dict[str, IterationReport]:
    corpus = world_for(cfg, seed)
    table = {}
    for name, sw in LADDER:
        reports, _ = run_single(_quiet(replace(cfg, switches=sw)), seed, _sub(out_dir, name), corpus=corpus)
        table[name] = reports[-1]
    return table


def run_strategy_comparison(cfg: RunConfig, seed: int, out_dir=None) -> dict[str, IterationReport]:
    corpus = world_for(cfg, seed)
    table = {}
    for strat in (Strategy.AT, Strategy.LA, Strategy.BL):
        sub = replace(cfg, policy=replace(cfg.policy, strategy=strat), switches=replace(cfg.switches, kd=True))
        reports, _ = run_single(_quiet(sub), seed, _sub(out_dir, strat.value), corpus=corpus)
        table[strat.value] = reports[-1]
    return table


def noise_corpora(cfg: RunConfig, seed: int) -> dict[str, SyntheticCorpus]:
    clean = world_for(cfg, seed)
    # extra sentences and extra images come from two unrelated worlds
    texts = generate_world(replace(cfg.world, seed=cfg.world.seed + seed + NOISE_WORLD_OFFSET))
    images = generate_world(replace(cfg.world, seed=cfg.world.seed + seed + NOISE_IMAGE_WORLD_OFFSET))
    amount = (clean.n_images, clean.n_sentences)
    return {
        "clean": clean,
        "noise1": inject_noise(clean, NoiseMode.NOISE1, clean.n_sentences, texts),
        "noise2": inject_noise(clean, NoiseMode.NOISE2, clean.n_images, images),
        "noise3": inject_noise(clean, NoiseMode.NOISE3, amount, texts, images),
    }


def run_noise_suite(cfg: RunConfig, seed: int, out_dir=None, modes=("clean", "noise1", "noise2", "noise3")):
    corpora = noise_corpora(cfg, seed)
    return {m: run_single(_quiet(cfg), seed, _sub(out_dir, m), corpus=corpora[m])[0][-1] for m in modes}


NO_DISCOVERY = Switches(kd=False, cal=False, gl=False, ur=False)


def run_random_env(cfg: RunConfig, seed: int, out_dir=None) -> dict[str, RetrievalResult]:
    """Ours and a no-discovery baseline, each trained on the linked world and on the random pairing.

    All four models are scored on the linked world without graph context.
    """
    linked = world_for(cfg, seed)
    text_world = generate_world(replace(cfg.world, seed=cfg.world.seed + seed + TEXT_WORLD_OFFSET))
    rand = random_environment(linked, text_world)
    out = {}
    for name, sw in (("ours", cfg.switches), ("baseline", NO_DISCOVERY)):
        for env, corpus in (("clean", linked), ("random", rand)):
            _, state = run_single(_quiet(replace(cfg, switches=sw)), seed, _sub(out_dir, f"{name}_{env}"),
                                  corpus=corpus)
            out[f"{name}_{env}"] = evaluate_retrieval(state.params, linked, None)
    return out


def run_inductive(cfg: RunConfig, seed: int, out_dir=None) -> dict[str, RetrievalResult]:
    train = world_for(cfg, seed)
    held = generate_world(held_out_spec(replace(cfg.world, seed=cfg.world.seed + seed), cfg.held_out_images))
    untrained = init_params(cfg, train, seed)
    _, state = run_single(_quiet(cfg), seed, _sub(out_dir, "train"), corpus=train)
    return {
        "untrained": evaluate_inductive(untrained, held, train),
        "trained": evaluate_inductive(state.params, held, train),
        "transductive": evaluate_retrieval(state.params, train, image_context_ids(state.graph, train, True)),
        "train_no_context": evaluate_retrieval(state.params, train, None),
    }
