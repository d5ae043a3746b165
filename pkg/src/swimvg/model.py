"""Full grounding model: frozen encoders + Swip + CIA + DoSA + box head."""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Optional

import torch
import torch.nn as nn

from .backbone import LayerTrace, ShapeMismatch, TextEncoder, VisionEncoder, init_backbone_, sincos_1d, sincos_2d
from .boxes import BoundingBox
from .config import ModelConfig
from .fusion import CIA, Bridge, DoSA, cia_text_layer, swip_schedule

FROZEN = "frozen"
TUNABLE_GROUPS = ("prompts", "bridges", "cia", "dosa", "head", "reg")


class UntaggedParameter(KeyError):
    pass


class BoxHead(nn.Module):
    """MLP on the final [REG] embedding -> sigmoid (cx, cy, w, h)."""

    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 4)

    def forward(self, reg: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(reg))))


def predict_box(reg_embedding: torch.Tensor, head: BoxHead) -> BoundingBox:
    if reg_embedding.shape != (head.fc1.in_features,):
        raise ShapeMismatch(
            f"expected a [{head.fc1.in_features}] embedding, got {tuple(reg_embedding.shape)}"
        )
    with torch.no_grad():
        cx, cy, w, h = head(reg_embedding).tolist()
    return BoundingBox(cx, cy, w, h)


@dataclass
class ForwardOutput:
    boxes: torch.Tensor
    reg: torch.Tensor
    vision_trace: LayerTrace
    text_trace: Optional[LayerTrace]


class SwimVG(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.text = TextEncoder(cfg)
        self.vision = VisionEncoder(cfg)

        self.schedule = swip_schedule(cfg)
        n_swip = sum(s.inject for s in self.schedule)
        needs_shared = (cfg.swip_enabled and cfg.swip_bridge == "shared") or (
            cfg.cia_enabled and cfg.cia_bridge == "shared" and cfg.cia_layers
        )
        self.bridge = Bridge(cfg.text_dim, cfg.vision_dim) if needs_shared else None
        self.swip_bridges = (
            nn.ModuleList(Bridge(cfg.text_dim, cfg.vision_dim) for _ in range(n_swip))
            if cfg.swip_enabled and cfg.swip_bridge == "per_layer"
            else None
        )
        self.cia = nn.ModuleDict()
        if cfg.cia_enabled:
            for i in cfg.cia_layers:
                self.cia[str(i)] = CIA(
                    cfg.vision_dim, cfg.text_dim, cfg.bottleneck_dim, cfg.cia_heads,
                    cfg.adapter_scale_vt, own_bridge=cfg.cia_bridge == "per_layer",
                )
        self.dosa = nn.ModuleDict()
        if cfg.dosa_enabled:
            for i in cfg.dosa_layers:
                self.dosa[str(i)] = DoSA(cfg.text_dim, cfg.bottleneck_dim, cfg.adapter_scale_t)
        self.head = BoxHead(cfg.vision_dim, cfg.head_hidden_dim)

        self.reset_parameters()
        self._tags = MappingProxyType(self._build_tags())
        for name, p in self.named_parameters():
            p.requires_grad_(self._tags[name] != FROZEN)
        if cfg.dtype == "float64":
            self.double()

    @property
    def needs_text(self) -> bool:
        return self.cfg.swip_enabled or bool(len(self.cia))

    def reset_parameters(self) -> None:
        g = torch.Generator().manual_seed(self.cfg.seed)
        init_backbone_(self.text, self.cfg.backbone_init_std, g)
        init_backbone_(self.vision, self.cfg.backbone_init_std, g)
        if self.cfg.pos_embedding == "sincos":
            with torch.no_grad():
                self.text.pos_emb.copy_(sincos_1d(self.cfg.max_text_len, self.cfg.text_dim))
                self.vision.pos_emb.copy_(sincos_2d(self.cfg.grid_size, self.cfg.vision_dim))
        nn.init.xavier_uniform_(self.text.prompt, generator=g)
        nn.init.xavier_uniform_(self.vision.reg, generator=g)
        for m in self.modules():
            if isinstance(m, (Bridge, CIA, DoSA)):
                m.reset_parameters(g)
        for lin in (self.head.fc1, self.head.fc2):
            nn.init.kaiming_normal_(lin.weight, nonlinearity="relu", generator=g)
            nn.init.zeros_(lin.bias)

    def _build_tags(self) -> dict[str, str]:
        tags = {}
        for name, _ in self.named_parameters():
            if name == "text.prompt":
                tags[name] = "prompts" if self.cfg.swip_enabled else FROZEN
            elif name == "vision.reg":
                tags[name] = "reg"
            elif name.startswith(("text.", "vision.")) and ".dosa" not in name:
                tags[name] = FROZEN
            elif name.startswith(("bridge.", "swip_bridges.")) or ".bridge." in name:
                tags[name] = "bridges"
            elif name.startswith("cia."):
                tags[name] = "cia"
            elif name.startswith("dosa."):
                tags[name] = "dosa"
            elif name.startswith("head."):
                tags[name] = "head"
        return tags

    @property
    def param_tags(self) -> MappingProxyType:
        return self._tags

    def swip_bridge(self, k: int) -> Bridge:
        if self.swip_bridges is not None:
            return self.swip_bridges[k]
        return self.bridge

    def forward(self, images: torch.Tensor, word_ids: torch.Tensor) -> ForwardOutput:
        cfg = self.cfg
        text_trace = None
        swips = None
        hooks = {}
        if self.needs_text:
            dosa_hooks = {int(i): m for i, m in self.dosa.items()}
            text_seq, prompts, text_trace = self.text(word_ids, dosa_hooks)
            text_pad = text_seq.pad_mask
            if cfg.swip_enabled:
                swips = [
                    self.swip_bridge(slot.source_text_layer)(prompts[slot.source_text_layer])
                    if slot.inject else None
                    for slot in self.schedule
                ]
            for key, cia in self.cia.items():
                j = int(key)
                feats = text_trace.post_mha[cia_text_layer(cfg, j)]
                hooks[j] = _CiaHook(cia, feats, text_pad, self.bridge)
        vis_seq, vision_trace = self.vision(images, swips, hooks)
        reg = vis_seq.data[..., 0, :]
        return ForwardOutput(self.head(reg), reg, vision_trace, text_trace)


class _CiaHook:
    def __init__(self, cia: CIA, feats, pad, bridge):
        self.cia, self.feats, self.pad, self.bridge = cia, feats, pad, bridge

    def __call__(self, f_v: torch.Tensor) -> torch.Tensor:
        return self.cia(f_v, self.feats, self.pad, self.bridge)


def build_model(cfg: ModelConfig) -> SwimVG:
    return SwimVG(cfg)
