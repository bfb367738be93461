"""Run configuration: a flat TOML file with one table per subsystem.

Unknown keys are rejected.  ``--set section.key=value`` overrides are applied
before validation, and every run writes back a resolved snapshot
(``resolved-config.toml``) from which the run is exactly reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python 3.10
    import tomli as tomllib

from .distill import MergeOp, TargetSpec, default_tap_set
from .losses import LossKind, LossSpec, Reduction
from .masking import MaskConfig, TruncationPolicy
from .vit import LayerTap, PredictorConfig, ViTConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | image_folder
    root: str = ""
    num_samples: int = 2048
    num_classes: int = 10
    image_side: int = 32
    crop_area: tuple[float, float] = (0.35, 1.0)
    crop_aspect: tuple[float, float] = (0.75, 4.0 / 3.0)
    hflip: bool = True
    norm_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: tuple[float, float, float] = (0.25, 0.25, 0.25)


@dataclass
class ModelConfig:
    patch_side: int = 4
    depth: int = 8
    width: int = 64
    heads: int = 4
    registers: int = 4
    cls_tokens: int = 1


@dataclass
class PredictorSectionConfig:
    depth: int = 4
    width: int = 32
    heads: int = 4
    registers: int = 4


@dataclass
class MaskSectionConfig:
    num_rects: int = 4
    scale_min: float = -1.0  # negative = mode default
    scale_max: float = -1.0
    aspect_min: float = -1.0
    aspect_max: float = -1.0
    background_min: float = 0.85
    background_max: float = 1.0
    alternate_aspect: bool = True
    truncation: str = "random_corner_edge"
    legacy_ijepa: bool = False


@dataclass
class TargetSectionConfig:
    taps: tuple[str, ...] = ("auto",)
    merge: str = "concat_per_tap_zscore"
    epsilon: float = 1e-6


@dataclass
class LossSectionConfig:
    kind: str = "mse_no_forward"
    reduction: str = "mean"
    monitor_every: int = 10
    smooth_l1_beta: float = 1.0


@dataclass
class OptimSectionConfig:
    lr_init: float = 3e-5
    lr_max: float = 3e-3
    lr_final: float = 3e-5
    lr_reference_batch: int = 2048
    warmup_epochs: int = -1  # negative = use the warmup formula
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    ema_momentum: float = 0.9985
    schedule_stretch: float = 1.0


@dataclass
class RunSectionConfig:
    epochs: int = 63
    batch_size: int = 128
    worker_batch: int = -1  # negative = one worker per global batch
    max_steps: int = -1  # negative = no cap
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only


@dataclass
class ProbeSectionConfig:
    kind: str = "patch_mean"  # patch_mean | cls | xattn | xblk
    epochs: int = 20
    warmup_epochs: int = 5
    lr_grid: tuple[float, ...] = (5e-4, 2e-3, 8e-3)
    wd_grid: tuple[float, ...] = (5e-4, 2e-3, 8e-3)
    batch_size: int = 128
    val_fraction: float = 0.2


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "predictor": PredictorSectionConfig,
    "mask": MaskSectionConfig,
    "targets": TargetSectionConfig,
    "loss": LossSectionConfig,
    "optim": OptimSectionConfig,
    "train": RunSectionConfig,
    "probe": ProbeSectionConfig,
}


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    predictor: PredictorSectionConfig = field(default_factory=PredictorSectionConfig)
    mask: MaskSectionConfig = field(default_factory=MaskSectionConfig)
    targets: TargetSectionConfig = field(default_factory=TargetSectionConfig)
    loss: LossSectionConfig = field(default_factory=LossSectionConfig)
    optim: OptimSectionConfig = field(default_factory=OptimSectionConfig)
    train: RunSectionConfig = field(default_factory=RunSectionConfig)
    probe: ProbeSectionConfig = field(default_factory=ProbeSectionConfig)

    # ---- derived objects -------------------------------------------------

    def vit_config(self) -> ViTConfig:
        return ViTConfig(
            image_side=self.data.image_side,
            patch_side=self.model.patch_side,
            channels=3,
            depth=self.model.depth,
            width=self.model.width,
            heads=self.model.heads,
            registers=self.model.registers,
            cls_tokens=self.model.cls_tokens,
        )

    def mask_config(self) -> MaskConfig:
        vit = self.vit_config()
        m = self.mask
        scale = None if m.scale_min < 0 else (m.scale_min, m.scale_max)
        aspect = None if m.aspect_min < 0 else (m.aspect_min, m.aspect_max)
        return MaskConfig(
            grid_h=vit.grid_side,
            grid_w=vit.grid_side,
            num_rects=m.num_rects,
            scale_range=scale,
            aspect_range=aspect,
            background_area_range=(m.background_min, m.background_max),
            alternate_aspect=m.alternate_aspect,
            truncation_policy=TruncationPolicy(m.truncation),
            legacy_ijepa=m.legacy_ijepa,
        )

    def target_spec(self) -> TargetSpec:
        t = self.targets
        if tuple(t.taps) == ("auto",):
            taps = default_tap_set(self.model.depth)
        else:
            taps = tuple(LayerTap.parse(s) for s in t.taps)
        return TargetSpec(taps=taps, merge=MergeOp(t.merge), epsilon=t.epsilon)

    def predictor_config(self) -> PredictorConfig:
        spec = self.target_spec()
        p = self.predictor
        return PredictorConfig(
            depth=p.depth,
            width=p.width,
            heads=p.heads,
            registers=p.registers,
            output_dim=spec.output_dim(self.vit_config()),
        )

    def loss_spec(self) -> LossSpec:
        ls = self.loss
        return LossSpec(
            kind=LossKind(ls.kind),
            reduction=Reduction(ls.reduction),
            monitor_every=ls.monitor_every,
            smooth_l1_beta=ls.smooth_l1_beta,
        )

    def validate(self) -> None:
        # constructing the derived objects runs their invariant checks
        try:
            self.vit_config()
            self.mask_config()
            self.predictor_config()
            self.loss_spec()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.train.epochs < 1 or self.train.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if self.data.kind not in ("synthetic", "image_folder"):
            raise ConfigError(f"unknown data.kind {self.data.kind!r}")
        if self.probe.kind not in ("patch_mean", "cls", "xattn", "xblk"):
            raise ConfigError(f"unknown probe.kind {self.probe.kind!r}")
        if not self.probe.lr_grid or not self.probe.wd_grid:
            raise ConfigError("probe lr/wd grids must be nonempty")
        ww = self.optim
        if min(ww.lr_init, ww.lr_max, ww.lr_final) <= 0:
            raise ConfigError("learning rates must be positive")


def _coerce(section: str, key: str, value, target_type) -> object:
    origin = getattr(target_type, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"[{section}] {key} expects an array")
        return tuple(value)
    if target_type is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, target_type) or (
        target_type is int and isinstance(value, bool)
    ):
        raise ConfigError(
            f"[{section}] {key} expects {target_type.__name__}, got {type(value).__name__}"
        )
    return value


def config_from_dict(raw: dict) -> TrainConfig:
    unknown_sections = set(raw) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {sorted(unknown_sections)}")
    kwargs = {}
    for section, cls in _SECTIONS.items():
        data = raw.get(section, {})
        if not isinstance(data, dict):
            raise ConfigError(f"section [{section}] must be a table")
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
        values = {}
        for key, value in data.items():
            f = known[key]
            base = f.type if isinstance(f.type, type) else _resolve_type(cls, key)
            values[key] = _coerce(section, key, value, base)
        kwargs[section if section != "train" else "train"] = cls(**values)
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


def _resolve_type(cls, key):
    import typing

    hints = typing.get_type_hints(cls)
    return hints[key]


def load_config(path: str | Path, overrides: list[str] | None = None) -> TrainConfig:
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    for item in overrides or []:
        raw = apply_override(raw, item)
    return config_from_dict(raw)


def apply_override(raw: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    path, _, value_text = item.partition("=")
    parts = path.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override path {path!r} must be section.key")
    try:
        parsed = tomllib.loads(f"v = {value_text.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value_text.strip()
    section, key = parts
    raw.setdefault(section, {})[key] = parsed
    return raw


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        out[section] = {
            f.name: (list(v) if isinstance(v := getattr(sub, f.name), tuple) else v)
            for f in fields(sub)
        }
    return out


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialise {type(v).__name__}")


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for section, table in config_to_dict(cfg).items():
        lines.append(f"[{section}]")
        for key, value in table.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: TrainConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()
