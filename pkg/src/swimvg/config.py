"""Model/training configuration and derived shape arithmetic.

A config is a flat key/value mapping. ``validate_config`` fills defaults,
checks every invariant and returns an immutable :class:`ModelConfig`.
Keys are grouped (``model``, ``fusion``, ``head``, ``loss``, ``train``,
``data``) only so that command-line overrides can be written as
``fusion.swip_enabled=false``; the stored form stays flat.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping


class ConfigError(ValueError):
    """Base class for configuration problems; always names the key."""

    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


class MissingKey(ConfigError):
    def __init__(self, key: str):
        super().__init__(key, "required key missing")


class InvalidValue(ConfigError):
    pass


REQUIRED_KEYS = (
    "text_depth",
    "text_dim",
    "vision_depth",
    "vision_dim",
    "image_size",
    "patch_size",
    "bottleneck_dim",
)


@dataclass(frozen=True)
class ModelConfig:
    # text encoder
    text_depth: int
    text_dim: int
    vision_depth: int
    vision_dim: int
    image_size: int
    patch_size: int
    bottleneck_dim: int
    text_heads: int = 2
    vision_heads: int = 4
    mlp_ratio: int = 4
    backbone_init_std: float = 0.02
    pos_embedding: str = "learned"
    in_channels: int = 3
    max_text_len: int = 12
    vocab_size: int = 40

    # fusion
    adapter_scale_vt: float = 0.2
    adapter_scale_t: float = 0.2
    cia_heads: int = 2
    cia_layers: tuple[int, ...] = ()
    dosa_layers: tuple[int, ...] = ()
    swip_enabled: bool = True
    cia_enabled: bool = True
    dosa_enabled: bool = True
    swip_bridge: str = "shared"
    cia_bridge: str = "per_layer"

    # head / loss
    head_hidden_dim: int = 48
    lambda_l1: float = 1.0
    lambda_giou: float = 1.0

    # training
    seed: int = 0
    dtype: str = "float32"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 1
    grad_clip: float = 1.0
    warmup_steps: int = 0
    eval_every: int = 1
    attention_query: str = "reg"

    # synthetic data
    n_train: int = 2000
    n_eval: int = 500
    data_seed: int = 0
    min_objects: int = 2
    max_objects: int = 4
    ambiguity_rate: float = 0.5

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["cia_layers"] = list(self.cia_layers)
        out["dosa_layers"] = list(self.dosa_layers)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **changes: Any) -> "ModelConfig":
        raw = self.to_dict()
        raw.update(changes)
        return validate_config(raw)

    @property
    def patch_count(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}

KEY_GROUPS: dict[str, tuple[str, ...]] = {
    "model": (
        "text_depth", "text_dim", "text_heads", "vision_depth", "vision_dim",
        "vision_heads", "image_size", "patch_size", "in_channels", "mlp_ratio",
        "max_text_len", "vocab_size", "bottleneck_dim", "backbone_init_std",
        "pos_embedding",
    ),
    "fusion": (
        "adapter_scale_vt", "adapter_scale_t", "cia_heads", "cia_layers",
        "dosa_layers", "swip_enabled", "cia_enabled", "dosa_enabled",
        "swip_bridge", "cia_bridge",
    ),
    "head": ("head_hidden_dim",),
    "loss": ("lambda_l1", "lambda_giou"),
    "train": (
        "seed", "dtype", "lr", "weight_decay", "batch_size", "epochs",
        "grad_clip", "warmup_steps", "eval_every", "attention_query",
    ),
    "data": (
        "n_train", "n_eval", "data_seed", "min_objects", "max_objects",
        "ambiguity_rate",
    ),
}

TOY_PROFILE: dict[str, Any] = {
    "text_depth": 2,
    "text_dim": 32,
    "text_heads": 2,
    "vision_depth": 4,
    "vision_dim": 48,
    "vision_heads": 4,
    "image_size": 64,
    "patch_size": 8,
    "bottleneck_dim": 8,
    "max_text_len": 12,
    "vocab_size": 40,
}

# Sizes quoted for the full-scale model: CLIP-B text tower (512-d, 12 layers,
# 49408-token vocabulary, 77-token context) and a 24-layer 768-d ViT/14 at 224px.
FULL_PROFILE: dict[str, Any] = {
    "text_depth": 12,
    "text_dim": 512,
    "text_heads": 8,
    "vision_depth": 24,
    "vision_dim": 768,
    "vision_heads": 12,
    "image_size": 224,
    "patch_size": 14,
    "bottleneck_dim": 56,
    "cia_heads": 8,
    "max_text_len": 76,
    "vocab_size": 49408,
    "head_hidden_dim": 768,
    "adapter_scale_vt": 0.2,
    "adapter_scale_t": 0.2,
    "cia_bridge": "shared",
}

PROFILES = {"toy": TOY_PROFILE, "full": FULL_PROFILE}


def _coerce(key: str, value: Any) -> Any:
    f = _FIELDS[key]
    kind = f.type
    if kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise InvalidValue(key, f"expected bool, got {value!r}")
    if kind == "int":
        if isinstance(value, bool):
            raise InvalidValue(key, f"expected int, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise InvalidValue(key, f"expected int, got {value!r}")
    if kind == "float":
        if isinstance(value, bool):
            raise InvalidValue(key, f"expected real, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise InvalidValue(key, f"expected real, got {value!r}") from None
    if kind == "str":
        if not isinstance(value, str):
            raise InvalidValue(key, f"expected string, got {value!r}")
        return value
    # layer index sets
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    if not isinstance(value, (list, tuple, set, frozenset)):
        raise InvalidValue(key, f"expected a list of layer indices, got {value!r}")
    try:
        items = {int(v) for v in value}
    except (TypeError, ValueError):
        raise InvalidValue(key, f"expected integer layer indices, got {value!r}") from None
    return tuple(sorted(items))


def validate_config(raw: Mapping[str, Any]) -> ModelConfig:
    """Build a :class:`ModelConfig` from a flat mapping, applying defaults.

    Raises MissingKey / InvalidValue naming the offending key. Unknown keys
    are rejected so that typos in config files surface immediately.
    """
    for key in raw:
        if key not in _FIELDS:
            raise InvalidValue(key, "unknown configuration key")
    for key in REQUIRED_KEYS:
        if key not in raw:
            raise MissingKey(key)

    values = {k: _coerce(k, v) for k, v in raw.items()}
    if "cia_layers" not in values:
        values["cia_layers"] = tuple(range(values["vision_depth"] // 2, values["vision_depth"]))
    if "dosa_layers" not in values:
        values["dosa_layers"] = tuple(range(values["text_depth"]))
    cfg = ModelConfig(**values)
    _check(cfg)
    return cfg


def _positive(cfg: ModelConfig, *keys: str) -> None:
    for key in keys:
        if getattr(cfg, key) < 1:
            raise InvalidValue(key, "must be >= 1")


def _check(cfg: ModelConfig) -> None:
    _positive(
        cfg, "text_depth", "text_dim", "text_heads", "vision_depth", "vision_dim",
        "vision_heads", "image_size", "patch_size", "in_channels", "mlp_ratio",
        "max_text_len", "vocab_size", "bottleneck_dim", "cia_heads",
        "head_hidden_dim", "batch_size", "eval_every", "min_objects",
    )
    if cfg.image_size % cfg.patch_size:
        raise InvalidValue(
            "patch_size", f"image_size {cfg.image_size} not divisible by {cfg.patch_size}"
        )
    if cfg.vision_dim % cfg.vision_heads:
        raise InvalidValue("vision_heads", "must divide vision_dim")
    if cfg.text_dim % cfg.text_heads:
        raise InvalidValue("text_heads", "must divide text_dim")
    if cfg.bottleneck_dim > min(cfg.text_dim, cfg.vision_dim):
        raise InvalidValue("bottleneck_dim", "must not exceed min(text_dim, vision_dim)")
    if cfg.bottleneck_dim % cfg.cia_heads:
        raise InvalidValue("cia_heads", "must divide bottleneck_dim")
    if any(i < 0 or i >= cfg.vision_depth for i in cfg.cia_layers):
        raise InvalidValue("cia_layers", f"indices must lie in [0, {cfg.vision_depth})")
    if any(i < 0 or i >= cfg.text_depth for i in cfg.dosa_layers):
        raise InvalidValue("dosa_layers", f"indices must lie in [0, {cfg.text_depth})")
    if not (math.isfinite(cfg.backbone_init_std) and cfg.backbone_init_std > 0):
        raise InvalidValue("backbone_init_std", "must be finite and > 0")
    for key in ("adapter_scale_vt", "adapter_scale_t", "lr", "weight_decay", "grad_clip"):
        if not math.isfinite(getattr(cfg, key)):
            raise InvalidValue(key, "must be finite")
    for key in ("lambda_l1", "lambda_giou", "lr", "weight_decay", "grad_clip"):
        value = getattr(cfg, key)
        if not math.isfinite(value) or value < 0:
            raise InvalidValue(key, "must be finite and >= 0")
    if cfg.swip_bridge not in ("shared", "per_layer"):
        raise InvalidValue("swip_bridge", "must be 'shared' or 'per_layer'")
    if cfg.cia_bridge not in ("shared", "per_layer"):
        raise InvalidValue("cia_bridge", "must be 'shared' or 'per_layer'")
    if cfg.pos_embedding not in ("learned", "sincos"):
        raise InvalidValue("pos_embedding", "must be 'learned' or 'sincos'")
    if cfg.dtype not in ("float32", "float64"):
        raise InvalidValue("dtype", "must be 'float32' or 'float64'")
    if cfg.attention_query not in ("reg", "swip"):
        raise InvalidValue("attention_query", "must be 'reg' or 'swip'")
    if cfg.epochs < 0 or cfg.warmup_steps < 0:
        raise InvalidValue("epochs" if cfg.epochs < 0 else "warmup_steps", "must be >= 0")
    if cfg.n_train < 1 or cfg.n_eval < 1:
        raise InvalidValue("n_train" if cfg.n_train < 1 else "n_eval", "must be >= 1")
    if cfg.max_objects < cfg.min_objects or cfg.min_objects < 2 or cfg.max_objects > 4:
        raise InvalidValue("max_objects", "object counts must satisfy 2 <= min <= max <= 4")
    if cfg.image_size < 32:
        raise InvalidValue("image_size", "synthetic canvas must be >= 32 pixels")
    if not 0.0 <= cfg.ambiguity_rate <= 1.0:
        raise InvalidValue("ambiguity_rate", "must lie in [0, 1]")


def profile(name: str, **overrides: Any) -> ModelConfig:
    """Return a validated named profile ('toy' or 'full') with overrides."""
    try:
        base = dict(PROFILES[name])
    except KeyError:
        raise InvalidValue("profile", f"unknown profile {name!r}") from None
    base.update(overrides)
    return validate_config(base)


def load_config(path: str) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidValue("<file>", f"malformed JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise InvalidValue("<file>", "config must be a JSON object")
    return validate_config(raw)


def apply_overrides(raw: Mapping[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``group.key=value`` (or bare ``key=value``) strings to a raw mapping.

    Values are parsed as JSON when possible, otherwise kept as strings and
    coerced later by :func:`validate_config`.
    """
    out = dict(raw)
    for item in overrides:
        if "=" not in item:
            raise InvalidValue(item, "override must look like key=value")
        dotted, text = item.split("=", 1)
        parts = dotted.strip().split(".")
        key = parts[-1]
        if len(parts) > 2:
            raise InvalidValue(dotted, "override keys have at most one group prefix")
        if len(parts) == 2:
            group = parts[0]
            if group not in KEY_GROUPS:
                raise InvalidValue(dotted, f"unknown key group {group!r}")
            if key not in KEY_GROUPS[group]:
                raise InvalidValue(dotted, f"{key!r} is not in group {group!r}")
        if key not in _FIELDS:
            raise InvalidValue(dotted, "unknown configuration key")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        out[key] = value
    return out


@dataclass(frozen=True)
class ShapeReport:
    patch_count: int
    vision_tokens_at_layer: tuple[int, ...]
    text_tokens: int
    tunable_fraction_estimate: float
    extras: dict = field(default_factory=dict, compare=False)


def vision_token_counts(cfg: ModelConfig) -> tuple[int, ...]:
    """Tokens entering each vision layer: REG + carried Swips + patches."""
    n = cfg.patch_count
    if not cfg.swip_enabled:
        return tuple(1 + n for _ in range(cfg.vision_depth))
    return tuple(1 + min(i + 1, cfg.text_depth) + n for i in range(cfg.vision_depth))


def derive_shapes(cfg: ModelConfig) -> ShapeReport:
    from .budget import closed_form_budget

    budget = closed_form_budget(cfg)
    return ShapeReport(
        patch_count=cfg.patch_count,
        vision_tokens_at_layer=vision_token_counts(cfg),
        text_tokens=1 + cfg.max_text_len,
        tunable_fraction_estimate=budget.tunable_fraction,
    )
