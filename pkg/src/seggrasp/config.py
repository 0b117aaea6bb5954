"""Run configuration: one TOML file with a section per subsystem, and named seed substreams."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .dagger import DaggerConfig, E2EConfig
from .simenv import SimConfig

OUTPUT_ENV, THREADS_ENV = "SEGGRASP_OUTPUT", "SEGGRASP_THREADS"
STREAMS = {"env": 1, "init": 2, "shuffle": 3, "render": 4}


def substream(seed: int, name: str, *extra) -> np.random.Generator:
    """Independent generator for a named purpose derived from the global seed."""
    return np.random.default_rng([seed, STREAMS[name], *extra])


@dataclass
class ChainConfig:
    camera_back: float = 0.05
    camera_up: float = 0.03


@dataclass
class VisionConfig:
    widths: tuple = (16, 16, 32, 32)
    epochs: int = 40
    eval_every: int = 10
    batch: int = 8
    lr: float = 0.003
    n_held_out: int = 100


@dataclass
class DataConfig:
    kind: str = "composed"
    n: int = 500
    n_backgrounds: int = 100
    background: str = "mixed"
    photo_dir: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    env: SimConfig = field(default_factory=SimConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    dagger: DaggerConfig = field(default_factory=DaggerConfig.desk)
    vision: VisionConfig = field(default_factory=VisionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    e2e: E2EConfig = field(default_factory=E2EConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = _plain(asdict(v)) if dataclasses.is_dataclass(v) else v
        return out

    def chain_model(self):
        from .kinematics import reference_chain

        return reference_chain(self.chain.camera_back, self.chain.camera_up)


def _plain(obj):
    """Tuples to lists (recursively) so the dict is TOML-serialisable."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuples(obj):
    if isinstance(obj, list):
        return tuple(_tuples(v) for v in obj)
    return obj


_SECTIONS = {"env": SimConfig, "chain": ChainConfig, "dagger": DaggerConfig, "vision": VisionConfig,
             "data": DataConfig, "e2e": E2EConfig}


def from_dict(d: dict) -> RunConfig:
    """Build a RunConfig; unknown keys are rejected and the seed is mandatory."""
    if "seed" not in d:
        raise ValueError("config: 'seed' is required")
    unknown = set(d) - {"seed", "output_dir", *_SECTIONS}
    if unknown:
        raise ValueError(f"config: unknown keys {sorted(unknown)}")
    base = RunConfig()
    kw = {"seed": int(d["seed"]), "output_dir": d.get("output_dir", base.output_dir)}
    for name, cls in _SECTIONS.items():
        section = d.get(name, {})
        known = {f.name for f in fields(cls)}
        bad = set(section) - known
        if bad:
            raise ValueError(f"config [{name}]: unknown keys {sorted(bad)}")
        merged = {**asdict(getattr(base, name)), **{k: _tuples(v) for k, v in section.items()}}
        kw[name] = cls(**merged)
    cfg = RunConfig(**kw)
    if cfg.data.photo_dir and not Path(cfg.data.photo_dir).is_dir():
        raise ValueError(f"config: photo_dir {cfg.data.photo_dir} does not exist")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    return from_dict(raw)


def dumps_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(path, cfg: RunConfig):
    with open(path, "w") as f:
        f.write(dumps_config(cfg))


def output_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def apply_thread_limit():
    """Honour SEGGRASP_THREADS by capping BLAS threads (effective only before numpy loads BLAS)."""
    n = os.environ.get(THREADS_ENV)
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n
