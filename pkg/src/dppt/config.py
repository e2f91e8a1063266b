"""Run configuration: nested dataclasses serialised as one JSON document."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from dppt.accounting import BASE_BATCH, BASE_DATASET_SIZE, BASE_STEPS
from dppt.bestrq import DataSpec, MaskSpec, ModelDims, ProbeSpec
from dppt.dp import ClipSpec, NoiseSpec
from dppt.errors import ConfigError

SCHEMA_VERSION = 1
OUT_ENV = "DPPT_OUT"


@dataclass(frozen=True)
class FreezeSpec:
    enabled: bool = False
    p: float = 0.01
    freeze_top: bool = True
    reset_moments: bool = True

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ConfigError("freeze.p must lie in (0, 1]")


@dataclass(frozen=True)
class AccountingBase:
    n0: float = BASE_DATASET_SIZE
    b0: int = BASE_BATCH
    steps: int = BASE_STEPS
    target_eps: float = 10.0


@dataclass(frozen=True)
class Schedule:
    warmstart_steps: int = 2000
    warmstart_batch: int = 16
    dp_steps: int = 10000
    batch_size: int = 8
    eval_examples: int = 64
    eval_every: int = 0

    def __post_init__(self):
        if self.warmstart_steps < 0 or self.dp_steps < 1:
            raise ConfigError("dp_steps must be positive and warmstart_steps non-negative")
        if self.warmstart_batch < 1 or self.batch_size < 1 or self.eval_examples < 1:
            raise ConfigError("batch sizes must be positive")


@dataclass(frozen=True)
class OptimSpec:
    lr: float = 1e-3
    warmstart_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class DivergenceSpec:
    factor: float = 10.0
    patience: int = 100


@dataclass(frozen=True)
class RunConfig:
    model: ModelDims = field(default_factory=ModelDims)
    data: DataSpec = field(default_factory=DataSpec)
    mask: MaskSpec = field(default_factory=MaskSpec)
    clip: ClipSpec = field(default_factory=ClipSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    freeze: FreezeSpec = field(default_factory=FreezeSpec)
    accounting: AccountingBase = field(default_factory=AccountingBase)
    schedule: Schedule = field(default_factory=Schedule)
    optim: OptimSpec = field(default_factory=OptimSpec)
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    divergence: DivergenceSpec = field(default_factory=DivergenceSpec)
    public_fraction: float = 0.01
    seed: int = 0
    out_dir: str = "runs/default"
    record_wallclock: bool = False
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not 0 < self.public_fraction < 1:
            raise ConfigError("public_fraction must lie in (0, 1)")
        if self.model.d_feat != self.data.d_feat:
            raise ConfigError("model.d_feat must equal data.d_feat")
        if self.freeze.enabled and self.schedule.warmstart_steps < 1:
            raise ConfigError("layer freezing needs a warm-start stage")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {path}: {exc.message}") from None
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in raw:
                continue
            sub = _SECTIONS.get(f.name)
            kwargs[f.name] = sub(**raw[f.name]) if sub else raw[f.name]
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.out_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.from_json(path.read_text())


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Override the run seed (init, sampling, masks) and the noise seed."""
    return cfg.replace(seed=seed, noise=dataclasses.replace(cfg.noise, seed=seed))


_SECTIONS = {
    "model": ModelDims, "data": DataSpec, "mask": MaskSpec, "clip": ClipSpec,
    "noise": NoiseSpec, "freeze": FreezeSpec, "accounting": AccountingBase,
    "schedule": Schedule, "optim": OptimSpec, "probe": ProbeSpec, "divergence": DivergenceSpec,
}

_JSON_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _section_schema(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props = {f.name: {"type": _JSON_TYPES[hints[f.name]]} for f in dataclasses.fields(cls)}
    return {"type": "object", "properties": props, "additionalProperties": False}


def _build_schema() -> dict:
    props = {name: _section_schema(cls) for name, cls in _SECTIONS.items()}
    props.update({
        "public_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "record_wallclock": {"type": "boolean"},
        "schema_version": {"const": SCHEMA_VERSION},
    })
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "dppt run config",
        "type": "object",
        "properties": props,
        "additionalProperties": False,
    }


SCHEMA = _build_schema()
