"""Frozen/tunable partition and parameter accounting.

Two independent routes produce a :class:`ParamBudget`: enumeration over a
constructed model, and closed-form arithmetic over the config alone. The
closed form never builds a module, so it also works at full scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch.nn as nn

from .config import ModelConfig
from .fusion import swip_schedule
from .model import FROZEN, TUNABLE_GROUPS, UntaggedParameter


@dataclass(frozen=True)
class ParamBudget:
    frozen_count: int
    tunable_count: int
    per_group: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.frozen_count + self.tunable_count

    @property
    def tunable_fraction(self) -> float:
        return self.tunable_count / self.total

    def as_dict(self) -> dict:
        return {
            "frozen_count": self.frozen_count,
            "tunable_count": self.tunable_count,
            "tunable_fraction": self.tunable_fraction,
            "per_group": dict(self.per_group),
        }


def partition_parameters(model: nn.Module) -> tuple[set[str], set[str]]:
    """Split parameter names into (frozen, tunable) using the model's tags."""
    tags = model.param_tags
    frozen, tunable = set(), set()
    for name, _ in model.named_parameters():
        if name not in tags:
            raise UntaggedParameter(name)
        (frozen if tags[name] == FROZEN else tunable).add(name)
    return frozen, tunable


def param_budget(model: nn.Module) -> ParamBudget:
    """Exact counts by walking every parameter tensor."""
    partition_parameters(model)
    tags = model.param_tags
    groups = {g: 0 for g in TUNABLE_GROUPS}
    frozen = 0
    for name, p in model.named_parameters():
        if tags[name] == FROZEN:
            frozen += p.numel()
        else:
            groups[tags[name]] += p.numel()
    groups = {g: n for g, n in groups.items() if n}
    return ParamBudget(frozen, sum(groups.values()), groups)


def encoder_layer_count(dim: int, mlp_ratio: int) -> int:
    # two LayerNorms, fused qkv + output projection, two-layer FFN; all with bias
    hidden = mlp_ratio * dim
    return 2 * 2 * dim + (3 * dim * dim + 3 * dim) + (dim * dim + dim) + (
        dim * hidden + hidden) + (hidden * dim + dim)


def cia_count(cfg: ModelConfig) -> int:
    """One CIA: down + linear + up + (Wq, Wk, Wv), excluding any bridge."""
    cv, cd = cfg.vision_dim, cfg.bottleneck_dim
    return cv * cd + cd * cd + cd * cv + (cd * cd + cv * cd + cv * cd)


def dosa_count(cfg: ModelConfig) -> int:
    return 2 * cfg.text_dim * cfg.bottleneck_dim


def closed_form_budget(cfg: ModelConfig) -> ParamBudget:
    ct, cv = cfg.text_dim, cfg.vision_dim
    bridge = ct * cv
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels

    frozen = (
        cfg.vocab_size * ct + cfg.max_text_len * ct
        + cfg.text_depth * encoder_layer_count(ct, cfg.mlp_ratio) + 2 * ct
        + patch_dim * cv + cv + cfg.patch_count * cv
        + cfg.vision_depth * encoder_layer_count(cv, cfg.mlp_ratio) + 2 * cv
    )
    groups = {g: 0 for g in TUNABLE_GROUPS}
    if cfg.swip_enabled:
        groups["prompts"] += ct
    else:
        frozen += ct

    n_cia = len(cfg.cia_layers) if cfg.cia_enabled else 0
    n_swip = sum(s.inject for s in swip_schedule(cfg))
    shared = (cfg.swip_enabled and cfg.swip_bridge == "shared") or (
        n_cia > 0 and cfg.cia_bridge == "shared")
    groups["bridges"] += bridge * int(shared)
    if cfg.swip_enabled and cfg.swip_bridge == "per_layer":
        groups["bridges"] += bridge * n_swip
    if cfg.cia_bridge == "per_layer":
        groups["bridges"] += bridge * n_cia
    groups["cia"] = n_cia * cia_count(cfg)
    groups["dosa"] = (len(cfg.dosa_layers) if cfg.dosa_enabled else 0) * dosa_count(cfg)
    h = cfg.head_hidden_dim
    groups["head"] = cv * h + h + h * 4 + 4
    groups["reg"] = cv
    groups = {g: n for g, n in groups.items() if n}
    return ParamBudget(frozen, sum(groups.values()), groups)


def budget_diff(a: ParamBudget, b: ParamBudget) -> list[str]:
    """Human-readable differences between two budgets (empty when equal)."""
    out = []
    if a.frozen_count != b.frozen_count:
        out.append(f"frozen: {a.frozen_count} != {b.frozen_count}")
    for g in sorted(set(a.per_group) | set(b.per_group)):
        x, y = a.per_group.get(g, 0), b.per_group.get(g, 0)
        if x != y:
            out.append(f"{g}: {x} != {y}")
    return out
