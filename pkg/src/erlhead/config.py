"""Run configuration: a YAML file with one mapping per section.

Every key is optional; omitted keys take the dataclass defaults below.
Unknown keys and ill-typed values are rejected with the offending key and
its line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field as dc_field, fields, replace
from pathlib import Path

import yaml

from .fields import FieldConfig
from .geometry import Intrinsics
from .motion import MotionConfig
from .optim import TrainConfig
from .training import PipelineConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class SceneConfig:
    seed: int | None = None  # synthesis seed when no path is given; None -> run seed
    frames: int = 8
    size: int = 128  # ground-truth resolution
    path: str | None = None  # directory written by make-scene
    track: str | None = None  # MotionFrame track for `render`


@dataclass(frozen=True)
class PipelineOptions:
    n_samples: int = 64
    stratified: bool = False
    upsample_blocks: int = 1
    fusion_alpha: float = 1e-6
    blur: str = "binomial"
    perceptual_channels: tuple = (8, 16, 32)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.fusion_alpha > 0:
            raise ValueError("fusion_alpha must be positive")
        if not 0 <= self.upsample_blocks <= 3:
            raise ValueError("upsample_blocks must be between 0 and 3")
        if self.blur not in ("binomial", "identity"):
            raise ValueError("blur must be 'binomial' or 'identity'")
        if not self.perceptual_channels or min(self.perceptual_channels) < 1:
            raise ValueError("perceptual_channels must be positive widths")


@dataclass(frozen=True)
class RenderOptions:
    chunk: int = 1024
    workers: int = 1

    def __post_init__(self):
        if self.chunk < 1 or self.workers < 1:
            raise ValueError("chunk and workers must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    scene: SceneConfig = dc_field(default_factory=SceneConfig)
    geometry: Intrinsics = dc_field(default_factory=Intrinsics)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    pipeline: PipelineOptions = dc_field(default_factory=PipelineOptions)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    motion: MotionConfig = dc_field(default_factory=MotionConfig)
    render: RenderOptions = dc_field(default_factory=RenderOptions)

    def pipeline_config(self) -> PipelineConfig:
        p = self.pipeline
        return PipelineConfig(field=self.field, intrinsics=self.geometry, n_samples=p.n_samples,
                              stratified=p.stratified, upsample_blocks=p.upsample_blocks,
                              fusion_alpha=p.fusion_alpha, blur=p.blur,
                              perceptual_channels=tuple(p.perceptual_channels))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig) if f.default_factory is not dataclasses.MISSING}


def _coerce(value, default, key: str, line: int):
    kind = type(default)
    if default is None:
        if value is None or isinstance(value, (str, int)) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a string or integer, got {value!r}", line)
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):  # YAML 1.1 reads 1e-3 (no dot) as a string
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind is tuple:
        if isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return tuple(value)
    raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}", line)


def _build(cls, node, values: dict, prefix: str):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{prefix or 'config'} must be a mapping", node.start_mark.line + 1)
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kw = {}
    for key_node, value_node in node.value:
        key, line = key_node.value, key_node.start_mark.line + 1
        name = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown key {name!r}", line)
        if key in kw:
            raise ConfigError(f"duplicate key {name!r}", line)
        value = values[key]
        if cls is RunConfig and key in SECTIONS:
            kw[key] = _build(type(getattr(defaults, key)), value_node, value or {}, key)
        else:
            kw[key] = _coerce(value, getattr(defaults, key), name, line)
    try:
        return cls(**kw)
    except ValueError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}", node.start_mark.line + 1) from None


def parse_config(text: str) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        values = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                          None if mark is None else mark.line + 1) from None
    if node is None:
        return RunConfig()
    return _build(RunConfig, node, values, "")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    doc = cfg.to_dict()
    doc["pipeline"]["perceptual_channels"] = list(doc["pipeline"]["perceptual_channels"])
    return yaml.safe_dump(doc, sort_keys=False)


def with_section(cfg: RunConfig, section: str, **kw) -> RunConfig:
    return replace(cfg, **{section: replace(getattr(cfg, section), **kw)})


# Sizes used for the desk-scale acceptance runs; see README.
DESK = {
    "field": dict(depth=4, width=32, skip=2, feature_dim=16, pos_freqs=6, dir_freqs=2, cond_freqs=2,
                  deform_depth=2, deform_width=32),
    "pipeline": dict(n_samples=12, perceptual_channels=(8, 16, 32)),
    "train": dict(lr_nerf=2e-3, lr_vq=1e-3, lr_adf=1e-3, log_every=10),
}


def desk_config(**top) -> RunConfig:
    cfg = RunConfig(**top)
    for section, kw in DESK.items():
        cfg = with_section(cfg, section, **kw)
    return cfg
