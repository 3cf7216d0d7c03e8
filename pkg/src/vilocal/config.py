"""Run configuration: one TOML file with a section per pipeline stage.

Command line overrides use dotted keys (``train.lr_stage1=1e-3``) and are
parsed as TOML values, falling back to plain strings.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .clipset.manifest import DatasetSpec
from .clipset.synthetic import SyntheticConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .objectives import ContrastiveConfig, FocalConfig


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 2
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    max_steps: int = 0  # 0 = run all epochs
    lr_stage1: float = 1e-4
    lr_stage2: float = 1e-3
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    seed: int = 0
    use_hp3d: bool = True
    use_contrastive: bool = True
    manifest: str = ""
    stage1_checkpoint: str = ""
    split: str = "train"
    stride: int = 1
    resolution: list = field(default_factory=list)  # empty = native clip size
    hp3d_kernel: str = ""  # path to a 27-value kernel file; empty = built-in Laplacian
    residual_gain: float = 20.0
    checkpoint_every: int = 0
    threads: int = 1
    cache_embeddings: bool = True

    def validate(self) -> "TrainConfig":
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ConfigError("learning rates must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"bad Adam betas {self.betas}")
        if self.resolution and len(self.resolution) != 2:
            raise ConfigError("resolution must be [H, W] or empty")
        return self

    @property
    def target_resolution(self):
        return tuple(self.resolution) if self.resolution else None

    def lr(self) -> float:
        return self.lr_stage1 if self.stage == 1 else self.lr_stage2

    def epochs(self) -> int:
        return self.epochs_stage1 if self.stage == 1 else self.epochs_stage2


@dataclass
class EvalConfig:
    threshold: float = 0.5
    stride: int = 5
    split: str = "test"
    codecs: list = field(default_factory=lambda: ["x264", "x265", "ffv1", "mpeg4"])
    qualities: list = field(default_factory=lambda: [13, 18, 23, 28])
    recompression_quality: int = 23


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    focal: FocalConfig = field(default_factory=FocalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.data.synthetic.validate()
        self.model.validate()
        self.contrastive.validate()
        self.focal.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        data = dict(d.pop("data", {}))
        synthetic = SyntheticConfig.from_dict(data.pop("synthetic", {}))
        sections = {
            "data": _build(DatasetSpec, data, synthetic=synthetic),
            "model": _build(EncoderConfig, d.pop("model", {})),
            "contrastive": _build(ContrastiveConfig, d.pop("contrastive", {})),
            "focal": _build(FocalConfig, d.pop("focal", {})),
            "train": _build(TrainConfig, d.pop("train", {})),
            "eval": _build(EvalConfig, d.pop("eval", {})),
        }
        if d:
            raise ConfigError(f"unknown config sections {sorted(d)}")
        return cls(**sections)


def _build(kind, values: dict, **extra):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys for [{kind.__name__}]: {sorted(unknown)}")
    return kind(**values, **extra)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = tomli.loads(p.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    for item in overrides:
        apply_override(data, item)
    try:
        return RunConfig.from_dict(data).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def apply_override(data: dict, item: str) -> None:
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    node = data
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r} descends into a non-table")
    node[parts[-1]] = value


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path
