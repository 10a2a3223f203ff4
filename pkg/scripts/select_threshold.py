"""Pick the AT score threshold by graph F1 on a validation world.

The validation world uses a seed outside the run seeds, so the choice never
sees the worlds that acceptance runs train on. By default AT is scored on its
final graph after the full discovery/training loop, since the same threshold
is reapplied to the trained encoder's scores every iteration. --warm-only
scores the first pass of the warm scorer alone.
"""

import argparse
from dataclasses import replace

import numpy as np

from mmkd import harness
from mmkd.config import RunConfig, Strategy
from mmkd.discovery import build_candidates, discovery_pass
from mmkd.graph import MultiModalGraph, pp_fraction
from mmkd.metrics import global_prf
from mmkd.synthetic import generate_world


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=900)
    ap.add_argument("--step", type=float, default=0.05)
    ap.add_argument("--warm-only", action="store_true")
    args = ap.parse_args()
    cfg = replace(RunConfig(), save_snapshots=False)
    world = generate_world(replace(cfg.world, seed=args.seed))
    warm = harness.initial_scorer(cfg, world, None, args.seed)
    cands = build_candidates(warm, world.n_images, world.n_sentences, cfg.policy.width)
    best = (-1.0, None)
    for lam in np.round(np.arange(args.step, 1.0, args.step), 6):
        policy = replace(cfg.policy, strategy=Strategy.AT, abs_threshold=float(lam))
        if args.warm_only:
            g = MultiModalGraph(world.image_objects, world.sentence_phrases)
            discovery_pass(warm, g, world, cands, policy)
        else:
            g = harness.run_single(replace(cfg, policy=policy), args.seed, corpus=world)[1].graph
        p, r, f = global_prf(g.strong_pairs(), world.gt_global)
        print(f"{lam:.2f}  P {p:.3f}  R {r:.3f}  F1 {f:.3f}  links {len(g.strong_pairs())}  PP {pp_fraction(g):.3f}")
        best = max(best, (f, float(lam)))
    print(f"best threshold {best[1]:.2f} (F1 {best[0]:.3f})")


if __name__ == "__main__":
    main()
