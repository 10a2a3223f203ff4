"""Run configuration: dataclasses plus YAML loading.

Schema (every key optional, defaults below)::

    world:      WorldSpec fields (n_images, captions_per_image, n_concepts, ...)
    corpus:     path to a JSONL corpus; overrides ``world`` when set
    policy:     LinkPolicy fields (strategy, abs_threshold, mu_img, mu_txt,
                k_img, k_txt, local_threshold, width, refresh_candidates,
                context_in_discovery, pp_cutoff)
    train:      TrainConfig fields (loss weights, gamma, mu_weak, batch_size,
                lr, betas, warmup_frac, dropout, dim, negative_loss, ...)
    switches:   {kd, cal, gl, ur} booleans for the ablation ladder
    init:       {scorer: warm|cold, sigma}
    t_max, seeds, mode, out_dir, held_out_images, save_snapshots, write_trace
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .synthetic import WorldSpec, spec_dict


class Strategy(str, enum.Enum):
    AT = "AT"
    LA = "LA"
    BL = "BL"


class Mode(str, enum.Enum):
    STANDARD = "standard"
    ABLATION = "ablation"
    STRATEGIES = "strategies"
    NOISE = "noise"
    RANDOM_ENV = "random-env"
    INDUCTIVE = "inductive"


@dataclass(frozen=True)
class LinkPolicy:
    strategy: Strategy = Strategy.BL
    abs_threshold: float = 0.8
    mu_img: float = 0.98
    mu_txt: float = 1.0
    k_img: int = 7
    k_txt: int = 2
    local_threshold: float = 0.4
    width: int = 40
    refresh_candidates: bool = False
    context_in_discovery: bool = False
    pp_cutoff: int = 10

    def validate(self) -> None:
        if not 0 < self.abs_threshold < 1 or not 0 < self.local_threshold < 1:
            raise ValueError("thresholds must lie in (0, 1)")
        if not (0 < self.mu_img <= 1 and 0 < self.mu_txt <= 1):
            raise ValueError("threshold powers must lie in (0, 1]")
        if self.width < 1 or not 1 <= self.k_img <= self.width or not 1 <= self.k_txt <= self.width:
            raise ValueError("need 1 <= K <= width")


@dataclass(frozen=True)
class TrainConfig:
    w_global: float = 1.0
    w_local: float = 0.05
    w_uncertainty: float = 0.5
    gamma: float = 0.25
    mu_weak: float = 0.6
    batch_size: int = 32
    epochs_per_iteration: int = 8
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1
    dropout: float = 0.1
    dim: int = 32
    temperature: float = 0.5
    negative_loss: str = "bce"   # "literal" keeps -Y log F for every pair

    def validate(self) -> None:
        for name in ("w_global", "w_local", "w_uncertainty"):
            v = getattr(self, name)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"{name} must be finite and non-negative")
        if not 0 < self.gamma <= 1 or not 0 < self.mu_weak < 1:
            raise ValueError("gamma in (0, 1], mu_weak in (0, 1)")
        if self.negative_loss not in ("bce", "literal"):
            raise ValueError("negative_loss must be 'bce' or 'literal'")
        if self.batch_size < 1 or self.epochs_per_iteration < 1:
            raise ValueError("batch size and epochs must be positive")


@dataclass(frozen=True)
class Switches:
    """Ablation axes: iterative discovery, soft labels, graph context, uncertainty term."""

    kd: bool = True
    cal: bool = True
    gl: bool = True
    ur: bool = True


@dataclass(frozen=True)
class InitConfig:
    scorer: str = "warm"
    sigma: float = 0.3


@dataclass(frozen=True)
class RunConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    corpus: str | None = None
    policy: LinkPolicy = field(default_factory=LinkPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)
    switches: Switches = field(default_factory=Switches)
    init: InitConfig = field(default_factory=InitConfig)
    t_max: int = 15
    seeds: tuple[int, ...] = (0,)
    mode: Mode = Mode.STANDARD
    out_dir: str = "runs/default"
    held_out_images: int = 50
    save_snapshots: bool = True
    write_trace: bool = False

    def validate(self) -> None:
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.init.scorer not in ("warm", "cold") or self.init.sigma < 0:
            raise ValueError("init.scorer must be warm|cold with sigma >= 0")
        self.world.validate()
        self.policy.validate()
        self.train.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["world"] = spec_dict(self.world)
        d["seeds"] = list(self.seeds)
        d["mode"] = self.mode.value
        d["policy"]["strategy"] = self.policy.strategy.value
        return d

    def hash(self) -> str:
        """Short digest of everything except output location."""
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("save_snapshots")
        d.pop("write_trace")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def _build(cls, data: dict | None):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for key in ("objects_per_image", "mentions_per_caption"):
        if key in data:
            data[key] = tuple(data[key])
    if cls is LinkPolicy and "strategy" in data:
        data["strategy"] = Strategy(data["strategy"])
    return cls(**data)


def from_dict(d: dict) -> RunConfig:
    d = dict(d or {})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(
        world=_build(WorldSpec, d.pop("world", None)),
        policy=_build(LinkPolicy, d.pop("policy", None)),
        train=_build(TrainConfig, d.pop("train", None)),
        switches=_build(Switches, d.pop("switches", None)),
        init=_build(InitConfig, d.pop("init", None)),
    )
    if "seeds" in d:
        d["seeds"] = tuple(int(s) for s in d["seeds"])
    if "mode" in d:
        d["mode"] = Mode(d["mode"])
    cfg = replace(cfg, **d)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return from_dict(data or {})


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
