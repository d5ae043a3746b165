"""Randomly initialized pre-norm transformer encoders for text and vision.

Both encoders expose a per-layer hook on the post-attention residual
stream; the fusion adapters attach there. Attention is written out by
hand (rather than ``nn.MultiheadAttention``) so that weights come back
per head and float64 runs behave identically to float32 ones.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig

BACKBONE_INIT_STD = 0.02

AdapterHook = Callable[[torch.Tensor], torch.Tensor]


class ShapeMismatch(ValueError):
    pass


class VocabOverflow(ValueError):
    pass


class ScheduleMismatch(ValueError):
    pass


class Role(enum.IntEnum):
    REG = 0
    SWIP = 1
    PATCH = 2
    PROMPT = 3
    WORD = 4
    PAD = 5


@dataclass
class TokenSequence:
    """Token features ``[..., T, C]`` with a role id per token ``[..., T]``."""

    data: torch.Tensor
    roles: torch.Tensor

    def __post_init__(self):
        if self.roles.shape != self.data.shape[:-1]:
            raise ShapeMismatch(
                f"roles shape {tuple(self.roles.shape)} does not match tokens {tuple(self.data.shape[:-1])}"
            )

    @property
    def pad_mask(self) -> torch.Tensor:
        return self.roles == Role.PAD

    def select(self, role: Role) -> torch.Tensor:
        """Rows with the given role (single, unbatched sequence only)."""
        if self.data.dim() != 2:
            raise ShapeMismatch("select() expects an unbatched [T, C] sequence")
        return self.data[self.roles == role]

    def __len__(self) -> int:
        return self.data.shape[-2]


@dataclass
class LayerTrace:
    """Per-layer post-attention features plus the last layer's attention."""

    post_mha: list[torch.Tensor] = field(default_factory=list)
    roles: list[torch.Tensor] = field(default_factory=list)
    final_attention: Optional[torch.Tensor] = None
    final_roles: Optional[torch.Tensor] = None


def init_backbone_(
    module: nn.Module, std: float = BACKBONE_INIT_STD, generator: Optional[torch.Generator] = None
) -> None:
    """Normal(0, std) weights and embeddings, zero biases, unit LayerNorm."""
    for name, p in module.named_parameters(recurse=True):
        if name.endswith("norm1.weight") or name.endswith("norm2.weight") or name == "norm.weight":
            nn.init.ones_(p)
        elif name.endswith("bias"):
            nn.init.zeros_(p)
        else:
            nn.init.normal_(p, 0.0, std, generator=generator)


def sincos_1d(length: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal table ``[length, dim]``: half sines, half cosines."""
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (torch.arange(half, dtype=torch.float64) / max(half, 1)))
    angles = torch.arange(length, dtype=torch.float64)[:, None] * freqs[None, :]
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, :half] = torch.sin(angles)
    table[:, half:2 * half] = torch.cos(angles)
    return table.float()


def sincos_2d(grid: int, dim: int) -> torch.Tensor:
    """Row-major ``[grid*grid, dim]`` table; first half encodes y, second half x."""
    half = dim // 2
    rows = sincos_1d(grid, half)
    cols = sincos_1d(grid, dim - half)
    y = rows.repeat_interleave(grid, dim=0)
    x = cols.repeat(grid, 1)
    return torch.cat([y, x], dim=1)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def attention(
        self, x: torch.Tensor, key_pad_mask: Optional[torch.Tensor] = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        *lead, t, c = x.shape
        hd = c // self.heads
        qkv = self.qkv(x).reshape(*lead, t, 3, self.heads, hd).movedim(-4, -2)
        q, k, v = qkv.unbind(-4)  # each [..., H, T, hd]
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if key_pad_mask is not None:
            scores = scores.masked_fill(key_pad_mask[..., None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).movedim(-3, -2).reshape(*lead, t, c)
        return self.proj(out), weights

    def forward(
        self,
        x: torch.Tensor,
        key_pad_mask: Optional[torch.Tensor] = None,
        adapter: Optional[AdapterHook] = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if x.shape[-1] != self.dim:
            raise ShapeMismatch(f"expected channel dim {self.dim}, got {x.shape[-1]}")
        attn_out, weights = self.attention(self.norm1(x), key_pad_mask)
        post_mha = x + attn_out
        h = adapter(post_mha) if adapter is not None else post_mha
        out = h + self.fc2(F.gelu(self.fc1(self.norm2(h))))
        return out, post_mha, weights


def encoder_layer_forward(
    tokens: TokenSequence, layer: EncoderLayer, hook: Optional[AdapterHook] = None
) -> tuple[TokenSequence, torch.Tensor, torch.Tensor]:
    """Run one block on a role-tagged sequence; PAD tokens are masked as keys."""
    out, post_mha, weights = layer(tokens.data, tokens.pad_mask, hook)
    return TokenSequence(out, tokens.roles), post_mha, weights


class TextEncoder(nn.Module):
    """Word embeddings + learnable prompt ``p`` prepended as ``[p, t1..tL]``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.word_emb = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_text_len, cfg.text_dim))
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.text_dim, cfg.text_heads, cfg.mlp_ratio) for _ in range(cfg.text_depth)
        )
        self.norm = nn.LayerNorm(cfg.text_dim)
        self.prompt = nn.Parameter(torch.empty(1, cfg.text_dim))

    def embed(self, word_ids: torch.Tensor, pad_id: int = 0) -> TokenSequence:
        if word_ids.shape[-1] != self.cfg.max_text_len:
            raise ShapeMismatch(
                f"expected {self.cfg.max_text_len} word ids, got {word_ids.shape[-1]}"
            )
        if not word_ids.is_meta and ((word_ids >= self.cfg.vocab_size).any() or (word_ids < 0).any()):
            raise VocabOverflow(f"word id outside [0, {self.cfg.vocab_size})")
        words = self.word_emb(word_ids) + self.pos_emb
        prompt = self.prompt.expand(*word_ids.shape[:-1], 1, -1)
        data = torch.cat([prompt, words], dim=-2)
        word_roles = torch.where(word_ids == pad_id, int(Role.PAD), int(Role.WORD))
        prompt_role = torch.full_like(word_ids[..., :1], int(Role.PROMPT))
        return TokenSequence(data, torch.cat([prompt_role, word_roles], dim=-1))

    def forward(
        self,
        word_ids: torch.Tensor,
        hooks: Optional[dict[int, AdapterHook]] = None,
    ) -> tuple[TokenSequence, list[torch.Tensor], LayerTrace]:
        seq = self.embed(word_ids)
        x, pad = seq.data, seq.pad_mask
        hooks = hooks or {}
        prompts: list[torch.Tensor] = []
        trace = LayerTrace()
        for i, layer in enumerate(self.layers):
            x, post_mha, weights = layer(x, pad, hooks.get(i))
            prompts.append(x[..., 0, :])
            trace.post_mha.append(post_mha)
            trace.roles.append(seq.roles)
        trace.final_attention = weights
        trace.final_roles = seq.roles
        return TokenSequence(self.norm(x), seq.roles), prompts, trace


class VisionEncoder(nn.Module):
    """ViT-style encoder with a learnable [REG] token and Swip insertion slots."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.in_channels
        self.patch_proj = nn.Linear(patch_dim, cfg.vision_dim)
        self.pos_emb = nn.Parameter(torch.empty(cfg.patch_count, cfg.vision_dim))
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.vision_dim, cfg.vision_heads, cfg.mlp_ratio)
            for _ in range(cfg.vision_depth)
        )
        self.norm = nn.LayerNorm(cfg.vision_dim)
        self.reg = nn.Parameter(torch.empty(1, cfg.vision_dim))

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """``[..., H, W, C]`` -> ``[..., N, P*P*C]`` in row-major patch order."""
        cfg = self.cfg
        expected = (cfg.image_size, cfg.image_size, cfg.in_channels)
        if tuple(images.shape[-3:]) != expected:
            raise ShapeMismatch(f"expected image shape {expected}, got {tuple(images.shape[-3:])}")
        g, p = cfg.grid_size, cfg.patch_size
        lead = images.shape[:-3]
        x = images.reshape(*lead, g, p, g, p, cfg.in_channels)
        x = x.movedim(-4, -3)  # [..., g, g, p, p, C]
        return x.reshape(*lead, g * g, p * p * cfg.in_channels)

    def embed(self, images: torch.Tensor) -> TokenSequence:
        patches = self.patch_proj(self.patchify(images)) + self.pos_emb
        reg = self.reg.expand(*patches.shape[:-2], 1, -1)
        data = torch.cat([reg, patches], dim=-2)
        roles = torch.full(data.shape[:-1], int(Role.PATCH), dtype=torch.long)
        roles[..., 0] = int(Role.REG)
        return TokenSequence(data, roles)

    def forward(
        self,
        images: torch.Tensor,
        swips: Optional[Sequence[Optional[torch.Tensor]]] = None,
        hooks: Optional[dict[int, AdapterHook]] = None,
    ) -> tuple[TokenSequence, LayerTrace]:
        """Run the stack; ``swips[i]`` (``[..., C_v]`` or None) is inserted before layer i.

        Swip tokens are placed after [REG] and after earlier Swips, and carry
        no positional embedding.
        """
        seq = self.embed(images)
        x, roles = seq.data, seq.roles
        hooks = hooks or {}
        if swips is not None and len(swips) != len(self.layers):
            raise ScheduleMismatch(f"got {len(swips)} swip slots for {len(self.layers)} layers")
        n_swip = 0
        trace = LayerTrace()
        for i, layer in enumerate(self.layers):
            if swips is not None and swips[i] is not None:
                pos = 1 + n_swip
                x = torch.cat([x[..., :pos, :], swips[i].unsqueeze(-2), x[..., pos:, :]], dim=-2)
                swip_role = torch.full_like(roles[..., :1], int(Role.SWIP))
                roles = torch.cat([roles[..., :pos], swip_role, roles[..., pos:]], dim=-1)
                n_swip += 1
            x, post_mha, weights = layer(x, None, hooks.get(i))
            trace.post_mha.append(post_mha)
            trace.roles.append(roles)
        trace.final_attention = weights
        trace.final_roles = roles
        return TokenSequence(self.norm(x), roles), trace


def embed_patches(image: torch.Tensor, encoder: VisionEncoder) -> TokenSequence:
    """Single image ``[H, W, 3]`` -> 1 + N tokens (REG first)."""
    return encoder.embed(image)
