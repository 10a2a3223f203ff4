"""Command-line entry point: ``mmkd <subcommand> [--config F] [--seed N] [--out DIR] [--resume CKPT]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import RunConfig, load_config
from .metrics import IterationReport, RetrievalResult
from .synthetic import generate_world

log = logging.getLogger("mmkd")

SUITES = {
    "ablation": harness.run_ablation_ladder,
    "strategies": harness.run_strategy_comparison,
    "noise": harness.run_noise_suite,
    "random-env": harness.run_random_env,
    "inductive": harness.run_inductive,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmkd", description="Iterative multi-modal knowledge discovery on synthetic worlds.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", *SUITES, "gen-world"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        sp.add_argument("--out", help="output directory (gen-world: corpus file or directory)")
        if name == "run":
            sp.add_argument("--resume", help="checkpoint_t<k>.npz to continue from")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ValueError("--seed must be non-negative")
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _row(value) -> dict:
    if isinstance(value, IterationReport):
        return value.row()
    if isinstance(value, RetrievalResult):
        return value.flat()
    raise TypeError(f"cannot tabulate {type(value).__name__}")


def _write_table(out: Path, seed: int, table: dict) -> None:
    rows = [{"setting": k, **_row(v), "seed": seed} for k, v in table.items()]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    with open(out / "table.json", "w") as fh:
        json.dump(rows, fh, indent=2)


def cmd_run(cfg: RunConfig, args) -> None:
    if args.resume and len(cfg.seeds) != 1:
        raise ValueError("--resume needs exactly one seed")
    results = harness.run(cfg, cfg.out_dir, resume=args.resume)
    for seed, reports in results.items():
        last = reports[-1]
        print(f"seed {seed}: t={last.iteration} F1={last.f1:.3f} "
              f"R@1 i2t={last.r1_i2t:.3f} t2i={last.r1_t2i:.3f} -> {cfg.out_dir}")


def cmd_suite(name: str, cfg: RunConfig) -> None:
    fn = SUITES[name]
    for seed in cfg.seeds:
        out = Path(cfg.out_dir) if len(cfg.seeds) == 1 else Path(cfg.out_dir) / f"seed_{seed}"
        table = fn(cfg, seed, out)
        _write_table(out, seed, table)
        for k, v in table.items():
            r = _row(v)
            print(f"seed {seed} {k:>16}: " + " ".join(f"{c}={r[c]:.3f}" for c in ("f1", "pp", "r1_i2t", "r1_t2i")
                                                     if c in r))


def cmd_gen_world(cfg: RunConfig) -> None:
    target = Path(cfg.out_dir)
    for seed in cfg.seeds:
        corpus = generate_world(replace(cfg.world, seed=cfg.world.seed + seed))
        path = target if target.suffix == ".jsonl" and len(cfg.seeds) == 1 else target / f"world_seed{seed}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        corpus.to_jsonl(path)
        print(f"seed {seed}: {corpus.n_images} images, {corpus.n_sentences} sentences, "
              f"{len(corpus.gt_global)} links -> {path}")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "run":
            cmd_run(cfg, args)
        elif args.command == "gen-world":
            cmd_gen_world(cfg)
        else:
            cmd_suite(args.command, cfg)
    except (ValueError, OSError, AssertionError) as exc:
        print(f"mmkd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
