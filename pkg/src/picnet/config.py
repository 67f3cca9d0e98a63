"""Experiment configuration: a TOML file with ``run``, ``world``, ``pipeline``
and ``train`` tables.  Every key is optional; missing keys take the defaults
that ``picnet print-config`` shows.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .daynight import WorldError, WorldSpec
from .fusion import PIC_VARIANTS, PipelineConfig
from .retrieval import SUCCESS_RADIUS_M
from .training import TrainParams

OUTPUT_ROOT_ENV = "PICNET_OUTPUT_ROOT"
VARIANTS = ("image-only", "point-only", *PIC_VARIANTS)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSettings:
    output: str = "runs/default"
    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    variant: str = "PIC-04"
    daynight: bool = False
    radius_m: float = SUCCESS_RADIUS_M
    variants: tuple = ("image-only", "point-only", "PIC-01", "PIC-02", "PIC-03", "PIC-04")

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "variants", tuple(self.variants))
        for v in (self.variant, *self.variants):
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("run.seeds must not be empty")
        if self.radius_m <= 0:
            raise ConfigError("run.radius_m must be positive")


def _default_world() -> WorldSpec:
    return WorldSpec()


def _default_pipeline() -> PipelineConfig:
    return PipelineConfig(gate_sigmoid=True)


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSettings = field(default_factory=RunSettings)
    world: WorldSpec = field(default_factory=_default_world)
    pipeline: PipelineConfig = field(default_factory=_default_pipeline)
    train: TrainParams = field(default_factory=TrainParams)

    def output_dir(self) -> Path:
        """``run.output`` resolved against ``$PICNET_OUTPUT_ROOT`` (if set)."""
        out = Path(self.run.output)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict:
        run = {f.name: getattr(self.run, f.name) for f in fields(RunSettings)}
        run["seeds"] = list(run["seeds"])
        run["variants"] = list(run["variants"])
        pipe = self.pipeline.to_dict()
        pipe["lca_enabled"] = "auto" if pipe["lca_enabled"] is None else pipe["lca_enabled"]
        return {"run": run, "world": self.world.to_dict(), "pipeline": pipe,
                "train": self.train.to_dict()}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _build(cls, table: dict, section: str, base):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    try:
        return replace(base, **table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    unknown = sorted(set(data) - {"run", "world", "pipeline", "train"})
    if unknown:
        raise ConfigError(f"unknown table(s): {', '.join(unknown)}")
    for name, table in data.items():
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
    base = ExperimentConfig()
    pipe = dict(data.get("pipeline", {}))
    if pipe.get("lca_enabled") == "auto":
        pipe["lca_enabled"] = None
    try:
        return ExperimentConfig(
            run=_build(RunSettings, data.get("run", {}), "run", base.run),
            world=_build(WorldSpec, data.get("world", {}), "world", base.world),
            pipeline=_build(PipelineConfig, pipe, "pipeline", base.pipeline),
            train=_build(TrainParams, data.get("train", {}), "train", base.train),
        )
    except WorldError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)
