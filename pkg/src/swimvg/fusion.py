"""Text-to-vision fusion: bridge projection, step-wise prompt schedule,
cross-modal interactive adapter (CIA) and domain-specific adapter (DoSA).

Weights are stored ``[in, out]`` and applied as ``x @ W`` so shapes read the
same way as the projection matrices they implement. All projections are
bias-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .backbone import ShapeMismatch
from .config import ModelConfig


class EmptyContext(ValueError):
    pass


def kaiming_normal_(w: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """He-normal init for an ``[in, out]`` weight: std = sqrt(2 / in)."""
    return nn.init.normal_(w, 0.0, math.sqrt(2.0 / w.shape[0]), generator=generator)


def _check_cols(x: torch.Tensor, expected: int, what: str) -> None:
    if x.shape[-1] != expected:
        raise ShapeMismatch(f"{what}: expected last dim {expected}, got {x.shape[-1]}")


class Bridge(nn.Module):
    """Linear text->vision map (no bias, no activation)."""

    def __init__(self, text_dim: int, vision_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(text_dim, vision_dim))

    def reset_parameters(self, generator=None):
        kaiming_normal_(self.weight, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return bridge_project(x, self.weight)


def bridge_project(text_features: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    _check_cols(text_features, weight.shape[0], "bridge input")
    return text_features @ weight


@dataclass(frozen=True)
class SwipSlot:
    inject: bool
    source_text_layer: Optional[int]


def swip_schedule(cfg: ModelConfig) -> list[SwipSlot]:
    """Vision layer i takes the prompt emitted by text layer i, while one exists."""
    slots = []
    for i in range(cfg.vision_depth):
        if cfg.swip_enabled and i < cfg.text_depth:
            slots.append(SwipSlot(True, i))
        else:
            slots.append(SwipSlot(False, None))
    return slots


def cia_text_layer(cfg: ModelConfig, vision_layer: int) -> int:
    """Text layer whose post-attention features feed CIA at ``vision_layer``."""
    return min(vision_layer, cfg.text_depth - 1)


def cross_attention(
    query: torch.Tensor,
    context: torch.Tensor,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
    heads: int,
    context_pad_mask: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """Multi-head cross-attention of ``query [.., Q, C_d]`` over ``context [.., M, C_v]``.

    Heads split the C_d projection space; outputs are concatenated back to C_d.
    PAD context keys are excluded; a row with no valid key is an error.
    """
    _check_cols(query, wq.shape[0], "cross-attention query")
    _check_cols(context, wk.shape[0], "cross-attention context")
    c_d = wq.shape[1]
    if c_d % heads:
        raise ShapeMismatch(f"{c_d} channels not divisible by {heads} heads")
    hd = c_d // heads
    if context_pad_mask is not None and not context_pad_mask.is_meta and context_pad_mask.all(dim=-1).any():
        raise EmptyContext("every context token is masked")

    def split(x):
        return x.reshape(*x.shape[:-1], heads, hd).movedim(-2, -3)  # [.., H, T, hd]

    q = split(query @ wq)
    k = split(context @ wk)
    v = split(context @ wv)
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
    if context_pad_mask is not None:
        scores = scores.masked_fill(context_pad_mask[..., None, None, :], float("-inf"))
    weights = scores.softmax(dim=-1)
    out = (weights @ v).movedim(-3, -2)
    out = out.reshape(*out.shape[:-2], c_d)
    if return_weights:
        return out, weights
    return out


class CIA(nn.Module):
    """Low-rank adapter whose bottleneck cross-attends to bridged text features.

    f_down = f_v W_down; f_l = ReLU(f_down) W_linear;
    f_up = (f_l + MHCA(f_l, c)) W_up;  out = f_v + s * f_up
    """

    def __init__(self, vision_dim: int, text_dim: int, bottleneck: int, heads: int,
                 scale: float, own_bridge: bool):
        super().__init__()
        self.heads = heads
        self.scale = scale
        self.down = nn.Parameter(torch.empty(vision_dim, bottleneck))
        self.linear = nn.Parameter(torch.empty(bottleneck, bottleneck))
        self.up = nn.Parameter(torch.empty(bottleneck, vision_dim))
        self.wq = nn.Parameter(torch.empty(bottleneck, bottleneck))
        self.wk = nn.Parameter(torch.empty(vision_dim, bottleneck))
        self.wv = nn.Parameter(torch.empty(vision_dim, bottleneck))
        self.bridge = Bridge(text_dim, vision_dim) if own_bridge else None

    def reset_parameters(self, generator=None):
        for w in (self.down, self.linear, self.wq, self.wk, self.wv):
            kaiming_normal_(w, generator)
        nn.init.zeros_(self.up)
        if self.bridge is not None:
            self.bridge.reset_parameters(generator)

    def forward(self, f_v, text_feats, text_pad_mask=None, bridge: Optional[Bridge] = None):
        bridge = self.bridge if self.bridge is not None else bridge
        if bridge is None:
            raise ValueError("CIA without its own bridge needs a shared bridge")
        return cia_forward(f_v, text_feats, self, bridge.weight, text_pad_mask)


def cia_forward(
    f_v: torch.Tensor,
    text_post_mha: torch.Tensor,
    params: CIA,
    bridge_weight: torch.Tensor,
    pad_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    _check_cols(f_v, params.down.shape[0], "CIA visual input")
    context = bridge_project(text_post_mha, bridge_weight)
    f_l = torch.relu(f_v @ params.down) @ params.linear
    attended = cross_attention(f_l, context, params.wq, params.wk, params.wv, params.heads, pad_mask)
    f_up = (f_l + attended) @ params.up
    return f_v + params.scale * f_up


class DoSA(nn.Module):
    """Down-ReLU-Up text adapter: f + s * ReLU(f W_down) W_up."""

    def __init__(self, text_dim: int, bottleneck: int, scale: float):
        super().__init__()
        self.scale = scale
        self.down = nn.Parameter(torch.empty(text_dim, bottleneck))
        self.up = nn.Parameter(torch.empty(bottleneck, text_dim))

    def reset_parameters(self, generator=None):
        kaiming_normal_(self.down, generator)
        nn.init.zeros_(self.up)

    def forward(self, f_t: torch.Tensor) -> torch.Tensor:
        return dosa_forward(f_t, self)


def dosa_forward(f_t: torch.Tensor, params: DoSA) -> torch.Tensor:
    _check_cols(f_t, params.down.shape[0], "DoSA input")
    return f_t + params.scale * (torch.relu(f_t @ params.down) @ params.up)
