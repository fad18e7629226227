"""Run configuration: nested dataclasses with strict JSON round-tripping.

Defaults follow the best settings of the ablations: per-stage bases
``[4, 4, 2]``, halving group counts, ``s = 1``, ``tau = 4``, a mixed curve
schedule and dynamic sites on the last block of every stage.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .sng import DEFAULT_CURVES, SngConfig


class ConfigError(ValueError):
    pass


@dataclass
class StageSpec:
    channels: int = 32
    blocks: int = 2
    patch: int = 16
    pool: int = 2  # grid coarsening applied on entry to this stage (ignored for the first)
    groups: int = 32


def _toy_stages() -> list[StageSpec]:
    return [StageSpec(32, 2, 16, 2, 32), StageSpec(64, 2, 16, 2, 16), StageSpec(128, 2, 16, 2, 8)]


@dataclass
class BackboneConfig:
    in_channels: int = 6
    num_classes: int = 6
    stages: list[StageSpec] = field(default_factory=_toy_stages)
    voxel: float = 0.1
    mlp_ratio: int = 4
    head_dim: int = 16
    order_bits: int = 10
    curves: list[str] = field(default_factory=lambda: list(DEFAULT_CURVES))

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        widths = [s.channels for s in self.stages]
        if widths != sorted(widths):
            raise ConfigError(f"stage channels must be nondecreasing, got {widths}")
        for s in self.stages:
            if s.blocks < 1 or s.patch < 1 or s.groups < 1:
                raise ConfigError(f"invalid stage {s}")
            if s.pool < 2:
                raise ConfigError("pool factor must be >= 2")


@dataclass
class InsertionConfig:
    strategy: str = "LastBlockPerStage"
    overrides: dict[str, list[str]] = field(default_factory=dict)


@dataclass
class PeftConfig:
    insertion: InsertionConfig = field(default_factory=InsertionConfig)
    bases: list[int] = field(default_factory=lambda: [4, 4, 2])
    bottleneck_ratio: int = 8
    bottleneck: typing.Optional[list[int]] = None
    temperature: float = 4.0
    scale: float = 1.0
    adapter_scale: float = 1.0
    sng: bool = True
    group_mode: str = "count"
    first_stage_groups: typing.Optional[int] = None  # None: use backbone.stages[*].groups
    points_per_group: int = 200
    curves: list[str] = field(default_factory=lambda: list(DEFAULT_CURVES))
    router_hidden: typing.Union[str, int] = "half"
    position: str = "down"

    def bottlenecks(self, channels: list[int]) -> list[int]:
        if self.bottleneck is not None:
            if len(self.bottleneck) != len(channels):
                raise ConfigError("peft.bottleneck needs one entry per stage")
            return list(self.bottleneck)
        return [max(1, c // self.bottleneck_ratio) for c in channels]

    def bases_for(self, n_stages: int) -> list[int]:
        if len(self.bases) < n_stages:
            raise ConfigError(f"peft.bases needs {n_stages} entries, got {len(self.bases)}")
        return list(self.bases[:n_stages])


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    steps: int = 1000
    batch: int = 1
    seed: int = 0
    pretrain_epochs: int = 3
    pretrain_lr: float = 0.02


@dataclass
class DataConfig:
    pretrain_spec: str = "pretrain"
    downstream_spec: str = "downstream"
    points: int = 1024
    pretrain_scenes: int = 48
    train_scenes: int = 32
    val_scenes: int = 16
    pretrain_seed: int = 1000
    train_seed: int = 2000
    val_seed: int = 3000


@dataclass
class IoConfig:
    checkpoint: str = "model.ptpk"
    report: str = "metrics.json"
    loss_log: str = "loss.csv"


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        n = len(self.backbone.stages)
        self.peft.bases_for(n)
        self.peft.bottlenecks([s.channels for s in self.backbone.stages])
        if self.peft.group_mode not in ("count", "points"):
            raise ConfigError(f"unknown group_mode {self.peft.group_mode!r}")
        if self.peft.temperature <= 0:
            raise ConfigError("temperature must be positive")
        try:
            self.sng_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self

    def sng_config(self) -> SngConfig:
        kwargs = dict(
            mode=self.peft.group_mode,
            points_per_group=self.peft.points_per_group,
            curves=list(self.peft.curves),
            order_bits=self.backbone.order_bits,
            enabled=self.peft.sng,
        )
        if self.peft.first_stage_groups is not None:
            return SngConfig.halving(self.peft.first_stage_groups, len(self.backbone.stages), **kwargs)
        return SngConfig(group_counts=[s.groups for s in self.backbone.stages], **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None


def _build(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where or 'config'}: expected an object")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"unknown config keys at {where or 'top level'}: {', '.join(unknown)}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}".lstrip(".")) for k, v in value.items()}
        return tp(**kwargs)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        (item,) = typing.get_args(tp)
        return [_build(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        _, item = typing.get_args(tp)
        return {str(k): _build(item, v, f"{where}.{k}") for k, v in value.items()}
    if origin is typing.Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _build(arg, value, where)
            except ConfigError:
                continue
        raise ConfigError(f"{where}: invalid value {value!r}")
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is int or tp is bool or tp is str:
        if type(value) is not tp:
            raise ConfigError(f"{where}: expected {tp.__name__}")
        return value
    return value


def gradcheck_config(base: RunConfig | None = None) -> RunConfig:
    """Miniature widths for finite-difference checks, keeping the PEFT settings."""
    cfg = RunConfig.from_dict((base or RunConfig()).to_dict())
    n = len(cfg.backbone.stages)
    cfg.backbone.stages = [StageSpec(8 * min(2**i, 2), min(s.blocks, 2), 4, s.pool, max(1, 4 >> i)) for i, s in enumerate(cfg.backbone.stages)]
    cfg.backbone.voxel = 0.25
    cfg.peft.bottleneck = [4] * n
    cfg.peft.first_stage_groups = None
    cfg.peft.points_per_group = 8
    return cfg.validate()


def paper_proportional_config() -> RunConfig:
    """Toy widths with the reference bottleneck ratio (64 hidden units at 512 channels)
    and deeper last stage, mirroring the reference encoder's depth profile."""
    cfg = RunConfig()
    cfg.backbone.stages = [StageSpec(32, 2, 16, 2, 32), StageSpec(64, 2, 16, 2, 16), StageSpec(128, 6, 16, 2, 8)]
    cfg.peft.bottleneck_ratio = 8
    return cfg.validate()
