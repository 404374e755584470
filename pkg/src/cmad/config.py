"""Configuration tree, YAML loading, dotted-key overrides, and config hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class BackboneConfig:
    kind: str = "standin"  # {standin, pretrained}
    weights_path: str | None = None
    # Channel counts per tapped level; must sum to 272.
    level_channels: tuple[int, ...] = (24, 56, 192)
    # Seed for the frozen stand-in weights (independent of the training seed).
    weights_seed: int = 710
    # Feature-stage indices tapped by the pretrained adapter.
    pretrained_stages: tuple[int, ...] = (2, 4, 6)


@dataclass
class PromptsConfig:
    encoder: str = "stub"  # {stub, clip_frozen}
    fusion: str = "add"  # {add, mul}
    pooling: str = "mean"  # {mean, concat_project}
    registry_path: str | None = None  # None -> packaged default registry
    clip_weights_path: str | None = None


@dataclass
class DecoderConfig:
    n_layers: int = 4
    n_heads: int = 8
    d_model: int = 256
    ff_dim: int = 1024
    dropout: float = 0.0
    # Train the reverse (prompt-from-target) direction with shared weights.
    bidirectional: bool = True


@dataclass
class SegmentorConfig:
    diffusion_steps: int = 10
    heads: int = 4
    d_t: int = 64
    # Channel widths of the refinement CNN (also the attention width) and the
    # diffusion denoiser.
    refine_width: int = 32
    denoiser_width: int = 16
    cond_channels: int = 8
    init: str = "noised_map"  # {noised_map, pure_noise}


@dataclass
class LossConfig:
    w_mse: float = 1.0
    w_dice: float = 1.0
    w_focal: float = 1.0
    alpha: float = 0.75
    gamma: float = 2.0
    alpha_balanced: bool = False
    dice_smooth: float = 1.0


@dataclass
class Toggles:
    use_vlm: bool = True
    use_focal: bool = True
    use_segmentor: bool = True


@dataclass
class StepLRConfig:
    step_size: int = 800
    decay: float = 0.1


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-5
    step_lr: StepLRConfig = field(default_factory=StepLRConfig)
    batch_size: int = 8
    seed: int = 0
    pseudo_anomaly_ratio: float = 0.5
    pseudo_min_area: float = 0.004
    pseudo_max_area: float = 0.08
    # Weight on the denoiser noise-prediction term (outside the composite).
    denoise_weight: float = 1.0
    toggles: Toggles = field(default_factory=Toggles)


@dataclass
class EvalConfig:
    # Gaussian smoothing of anomaly maps before scoring; 0 disables.
    smooth_sigma: float = 0.0
    # Base seed for per-sample diffusion noise at evaluation time.
    map_seed: int = 77


@dataclass
class PipelineConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompts: PromptsConfig = field(default_factory=PromptsConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    segmentor: SegmentorConfig = field(default_factory=SegmentorConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if sum(self.backbone.level_channels) != 272:
            raise ConfigError(
                f"backbone.level_channels must sum to 272, got {sum(self.backbone.level_channels)}"
            )
        if self.decoder.d_model % self.decoder.n_heads != 0:
            raise ConfigError("decoder.d_model must be divisible by decoder.n_heads")
        if not 0.0 <= self.decoder.dropout < 1.0:
            raise ConfigError("decoder.dropout must be in [0, 1)")
        if self.segmentor.d_t % 2 != 0:
            raise ConfigError("segmentor.d_t must be even")
        if self.segmentor.refine_width % self.segmentor.heads != 0:
            raise ConfigError("segmentor.refine_width must be divisible by segmentor.heads")
        if self.segmentor.init not in ("noised_map", "pure_noise"):
            raise ConfigError(f"unknown segmentor.init {self.segmentor.init!r}")
        if self.prompts.fusion not in ("add", "mul"):
            raise ConfigError(f"unknown prompts.fusion {self.prompts.fusion!r}")
        if self.prompts.pooling not in ("mean", "concat_project"):
            raise ConfigError(f"unknown prompts.pooling {self.prompts.pooling!r}")
        if self.losses.w_mse == self.losses.w_dice == self.losses.w_focal == 0.0:
            raise ConfigError("loss weights must not all be zero")
        if min(self.losses.w_mse, self.losses.w_dice, self.losses.w_focal) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.train.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.train.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if not 0.0 < self.train.step_lr.decay <= 1.0:
            raise ConfigError("train.step_lr.decay must be in (0, 1]")
        if not 0.0 < self.train.pseudo_min_area <= self.train.pseudo_max_area < 1.0:
            raise ConfigError("pseudo-anomaly area fractions must satisfy 0 < min <= max < 1")


def to_dict(cfg) -> dict:
    """Recursively convert the config dataclass tree to plain dicts/lists."""
    out = dataclasses.asdict(cfg)

    def _clean(node):
        if isinstance(node, dict):
            return {k: _clean(v) for k, v in node.items()}
        if isinstance(node, tuple):
            return [_clean(v) for v in node]
        if isinstance(node, list):
            return [_clean(v) for v in node]
        return node

    return _clean(out)


def _coerce(value, target_type, key: str):
    origin = getattr(target_type, "__origin__", None)
    if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected str, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return tuple(value)
    return value


def _update_dataclass(obj, data: dict, prefix: str = ""):
    valid = {f.name for f in fields(obj)}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in valid:
            raise ConfigError(f"unknown config key: {dotted}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected a mapping")
            _update_dataclass(current, value, prefix=f"{dotted}.")
        elif value is None:
            setattr(obj, key, None)
        else:
            setattr(obj, key, _coerce(value, _resolve_type(obj, key), dotted))


def _resolve_type(obj, name: str):
    import typing

    hints = typing.get_type_hints(type(obj))
    t = hints[name]
    # unwrap Optional[X]
    args = typing.get_args(t)
    if args and type(None) in args:
        non_none = [a for a in args if a is not type(None)]
        if len(non_none) == 1:
            return non_none[0]
    return t


def from_dict(data: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    if data:
        _update_dataclass(cfg, data)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    """Load a YAML config file; parse errors carry the offending line number."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"cannot parse {path}{where}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data)


def apply_overrides(cfg: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply ``section.key=value`` overrides in place; values parse as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = cfg
        for part in parts[:-1]:
            if not hasattr(node, part) or not is_dataclass(getattr(node, part)):
                raise ConfigError(f"unknown config section in override: {dotted}")
            node = getattr(node, part)
        leaf = parts[-1]
        if not any(f.name == leaf for f in fields(node)):
            raise ConfigError(f"unknown config key in override: {dotted}")
        if value is None:
            setattr(node, leaf, None)
        else:
            setattr(node, leaf, _coerce(value, _resolve_type(node, leaf), dotted))
    cfg.validate()
    return cfg


def config_hash(cfg: PipelineConfig) -> str:
    """Content hash of the resolved config (stable across key ordering)."""
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def desk_config() -> PipelineConfig:
    """Small configuration sized for CPU-only runs on the synthetic corpus.

    Mirrors configs/desk.yaml; kept in sync by a unit test.
    """
    cfg = PipelineConfig()
    cfg.decoder.n_layers = 1
    cfg.decoder.ff_dim = 256
    cfg.decoder.bidirectional = False
    cfg.train.epochs = 200
    cfg.train.batch_size = 40
    cfg.train.lr = 1e-3
    cfg.train.step_lr = StepLRConfig(step_size=120, decay=0.3)
    cfg.train.seed = 1234
    cfg.validate()
    return cfg
