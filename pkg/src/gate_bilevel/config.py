"""Run configuration: a YAML document with one mapping per section.

See ``docs/config.md`` for the full grammar.  Unknown keys and wrongly typed
values raise :class:`ConfigError` naming the dotted field path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_z: int = 32
    d_m: int = 32
    embed_hidden: list[int] = field(default_factory=lambda: [64, 64])
    enc_hidden: list[int] = field(default_factory=lambda: [64])
    map_hidden: list[int] = field(default_factory=lambda: [64])
    head_hidden: list[int] = field(default_factory=list)
    embed_out_act: str = "tanh"
    latent_out_act: str = "tanh"


@dataclass
class TaskFile:
    task: str
    path: str


@dataclass
class DataSection:
    preset: str | None = None
    preset_args: dict = field(default_factory=dict)
    synthetic: dict | None = None
    data_seed: int = 0
    tasks: list[TaskFile] = field(default_factory=list)
    manifest: str | None = None
    split: list[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])
    split_seed: int | None = None
    swap_fraction: float | None = 0.2


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    inner_steps_per_epoch: int | None = None
    patience: int | None = 20
    divergence_limit: float = 1e6
    checkpoint_every: int = 10


@dataclass
class BilevelSection:
    enabled: bool = True
    lambda_init: float = 1.0
    lambda_min: float = 0.0
    beta0: float = 0.9
    beta1: float = 0.999
    eta: float = 0.01
    eps: float = 1e-8
    cadence: str = "batch"
    symmetric: bool = False
    skip_threshold: float | None = None
    sources: list[str] | None = None
    targets: list[str] | None = None


@dataclass
class LossSection:
    m: int = 4
    sigma: float = 0.1
    c: float | dict = 1.0


@dataclass
class GridSection:
    pairs: list[list[str]] = field(default_factory=list)
    values: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    noise_seeds: list[int] = field(default_factory=list)


@dataclass
class OutputSection:
    wall_clock: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    bilevel: BilevelSection = field(default_factory=BilevelSection)
    loss: LossSection = field(default_factory=LossSection)
    grid: GridSection = field(default_factory=GridSection)
    output: OutputSection = field(default_factory=OutputSection)
    base_dir: str = field(default=".", metadata={"internal": True})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        """Stable digest of every setting that influences a training run."""
        d = self.to_dict()
        d.pop("output")
        d.pop("grid")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and str(origin) == "types.UnionType"):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value {value!r}")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {value!r}")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"{where}: unknown key")
    for name, f in fields.items():
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING and name not in data:
            raise ConfigError(f"{path}.{name}: required key missing" if path else f"{name}: required key missing")
    kwargs = {}
    for name in fields:
        if name in data:
            kwargs[name] = _coerce(hints[name], data[name], f"{path}.{name}" if path else name)
    return cls(**kwargs)


def from_dict(data: dict, base_dir: str | Path = ".") -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.base_dir = str(base_dir)
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML parse error: {exc}") from None
    return from_dict(data or {}, path.parent)


def validate(cfg: RunConfig) -> None:
    d = cfg.data
    modes = sum([d.preset is not None, d.synthetic is not None, bool(d.tasks)])
    if modes != 1:
        raise ConfigError("data: set exactly one of preset, synthetic, tasks")
    if d.preset is not None and d.preset not in ("three_task", "mixed_suite"):
        raise ConfigError(f"data.preset: unknown preset {d.preset!r}")
    if len(d.split) != 3 or any(f <= 0 for f in d.split) or abs(sum(d.split) - 1.0) > 1e-9:
        raise ConfigError("data.split: need three positive fractions summing to 1")
    if d.swap_fraction is not None and not 0 < d.swap_fraction <= 0.5:
        raise ConfigError("data.swap_fraction: must be in (0, 0.5]")
    t = cfg.train
    for name in ("epochs", "batch_size", "checkpoint_every"):
        if getattr(t, name) < 1:
            raise ConfigError(f"train.{name}: must be >= 1")
    if t.optimizer not in ("adam", "sgd"):
        raise ConfigError(f"train.optimizer: unknown optimizer {t.optimizer!r}")
    if t.lr <= 0:
        raise ConfigError("train.lr: must be > 0")
    b = cfg.bilevel
    if b.cadence not in ("batch", "epoch"):
        raise ConfigError(f"bilevel.cadence: must be batch or epoch, got {b.cadence!r}")
    if not (0 <= b.beta0 < 1 and 0 <= b.beta1 < 1):
        raise ConfigError("bilevel.beta0/beta1: must lie in [0, 1)")
    if b.eta <= 0 or b.eps <= 0:
        raise ConfigError("bilevel.eta/eps: must be > 0")
    if b.lambda_min < 0:
        raise ConfigError("bilevel.lambda_min: must be >= 0")
    if cfg.loss.m < 1 or cfg.loss.sigma <= 0:
        raise ConfigError("loss: m must be >= 1 and sigma > 0")
    for i, pair in enumerate(cfg.grid.pairs):
        if len(pair) != 2 or pair[0] == pair[1]:
            raise ConfigError(f"grid.pairs[{i}]: need two distinct task ids")
