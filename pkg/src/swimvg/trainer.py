"""Freeze-aware training, evaluation and gradient verification."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .boxes import LossBreakdown, box_iou_giou, regression_loss
from .budget import partition_parameters
from .config import ModelConfig
from .data import SyntheticSample
from .model import SwimVG

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.8)
NO_DECAY_GROUPS = ("prompts", "reg")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, components: dict):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components


class EmptyDataset(ValueError):
    pass


def torch_dtype(cfg: ModelConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


@dataclass
class Batch:
    images: torch.Tensor
    word_ids: torch.Tensor
    boxes: torch.Tensor
    ambiguous: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]


def collate(samples: Sequence[SyntheticSample], dtype=torch.float32) -> Batch:
    return Batch(
        images=torch.from_numpy(np.stack([s.image for s in samples])).to(dtype),
        word_ids=torch.from_numpy(np.stack([s.word_ids for s in samples])),
        boxes=torch.tensor([s.gt_box.as_tuple() for s in samples], dtype=dtype),
        ambiguous=torch.tensor([s.ambiguous for s in samples]),
    )


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0
    best_eval: float = -1.0


def tunable_named_parameters(model: SwimVG) -> list[tuple[str, torch.nn.Parameter]]:
    _, tunable = partition_parameters(model)
    return [(n, p) for n, p in model.named_parameters() if n in tunable]


def make_optimizer(model: SwimVG, cfg: ModelConfig) -> torch.optim.AdamW:
    """AdamW over tunable parameters only; prompts and [REG] skip weight decay."""
    decay, no_decay = [], []
    for name, p in tunable_named_parameters(model):
        (no_decay if model.param_tags[name] in NO_DECAY_GROUPS else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(
        [g for g in groups if g["params"]], lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8
    )


def init_state(model: SwimVG, cfg: ModelConfig) -> TrainState:
    return TrainState(make_optimizer(model, cfg), torch.Generator().manual_seed(cfg.seed))


def _lr_at(cfg: ModelConfig, step: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    return cfg.lr


def compute_loss(model: SwimVG, batch: Batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    pred = model(batch.images, batch.word_ids).boxes
    return regression_loss(pred, batch.boxes, model.cfg.lambda_l1, model.cfg.lambda_giou)


def train_step(model: SwimVG, batch: Batch, state: TrainState) -> LossBreakdown:
    """One AdamW update on the batch-mean L1 + GIoU loss; advances ``state``."""
    if len(batch) == 0:
        raise EmptyDataset("empty batch")
    cfg = model.cfg
    model.train()
    total, l1, gl = compute_loss(model, batch)
    parts = LossBreakdown(l1.item(), gl.item(), total.item())
    if not math.isfinite(parts.total):
        raise NonFiniteLoss(state.step, parts.as_dict())
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    for g in state.optimizer.param_groups:
        g["lr"] = _lr_at(cfg, state.step)
    state.optimizer.step()
    state.step += 1
    return parts


def iterate_batches(samples: Sequence, batch_size: int, generator: Optional[torch.Generator] = None):
    order = (
        torch.randperm(len(samples), generator=generator).tolist()
        if generator is not None else list(range(len(samples)))
    )
    for i in range(0, len(order), batch_size):
        yield [samples[j] for j in order[i:i + batch_size]]


@dataclass
class MetricsReport:
    precision: dict[float, float]
    mean_iou: float
    loss: dict[str, float]
    count: int
    subsets: dict[str, dict] = field(default_factory=dict)

    def pr(self, tau: float) -> float:
        return self.precision[tau]

    def as_dict(self) -> dict:
        out = {
            "count": self.count,
            "mean_iou": self.mean_iou,
            "loss": dict(self.loss),
            "subsets": self.subsets,
        }
        for tau, v in self.precision.items():
            out[f"pr@{tau:g}"] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"


def _precisions(ious: torch.Tensor, thresholds: Sequence[float]) -> dict[float, float]:
    return {float(t): float((ious >= t).double().mean()) for t in thresholds}


@torch.no_grad()
def predict(model: SwimVG, samples: Sequence[SyntheticSample], batch_size: int = 64) -> torch.Tensor:
    model.eval()
    dtype = torch_dtype(model.cfg)
    out = [model(b.images, b.word_ids).boxes for b in
           (collate(chunk, dtype) for chunk in iterate_batches(samples, batch_size))]
    return torch.cat(out)


@torch.no_grad()
def evaluate(
    model: SwimVG,
    samples: Sequence[SyntheticSample],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    batch_size: int = 64,
) -> MetricsReport:
    """Pr@tau, mean IoU and loss terms overall and on the ambiguous/unambiguous subsets."""
    if len(samples) == 0:
        raise EmptyDataset("evaluation requires at least one sample")
    preds = predict(model, samples, batch_size)
    gts = torch.tensor([s.gt_box.as_tuple() for s in samples], dtype=preds.dtype)
    amb = torch.tensor([s.ambiguous for s in samples])
    ious, _ = box_iou_giou(preds, gts)
    _, l1, gl = regression_loss(preds, gts, model.cfg.lambda_l1, model.cfg.lambda_giou)
    cfg = model.cfg
    loss = {"l1": float(l1), "giou_loss": float(gl),
            "total": cfg.lambda_l1 * float(l1) + cfg.lambda_giou * float(gl)}
    subsets = {}
    for name, mask in (("ambiguous", amb), ("unambiguous", ~amb)):
        if mask.any():
            sub = {f"pr@{t:g}": v for t, v in _precisions(ious[mask], thresholds).items()}
            sub["count"] = int(mask.sum())
            sub["mean_iou"] = float(ious[mask].mean())
            subsets[name] = sub
    return MetricsReport(
        precision=_precisions(ious, thresholds),
        mean_iou=float(ious.mean()),
        loss=loss,
        count=len(samples),
        subsets=subsets,
    )


def train(
    model: SwimVG,
    train_samples: Sequence[SyntheticSample],
    eval_samples: Optional[Sequence[SyntheticSample]] = None,
    state: Optional[TrainState] = None,
    epochs: Optional[int] = None,
    on_eval: Optional[Callable[[int, MetricsReport, TrainState], None]] = None,
    log: Optional[Callable[[str], None]] = None,
) -> TrainState:
    """Run ``epochs`` passes over ``train_samples`` with per-epoch shuffling."""
    cfg = model.cfg
    state = state or init_state(model, cfg)
    epochs = cfg.epochs if epochs is None else epochs
    dtype = torch_dtype(cfg)
    for epoch in range(epochs):
        t0 = time.time()
        losses = []
        for chunk in iterate_batches(train_samples, cfg.batch_size, state.generator):
            losses.append(train_step(model, collate(chunk, dtype), state).total)
        msg = f"epoch {epoch + 1}/{epochs} step {state.step} loss {np.mean(losses):.4f} ({time.time() - t0:.1f}s)"
        if eval_samples and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == epochs):
            report = evaluate(model, eval_samples)
            msg += f" pr@0.5 {report.pr(0.5):.3f}"
            if on_eval is not None:
                on_eval(epoch + 1, report, state)
        if log is not None:
            log(msg)
    return state


def finite_diff_check(
    model: SwimVG,
    batch: Batch,
    eps: float = 1e-5,
    coords_per_tensor: int = 4,
    min_coords: int = 200,
    seed: int = 0,
) -> dict:
    """Compare autograd gradients with central differences on sampled coordinates.

    Every tunable tensor contributes at least ``coords_per_tensor`` coordinates
    (more are drawn until ``min_coords`` is reached). Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``. Frozen tensors must carry no gradient.
    """
    if model.cfg.dtype != "float64":
        raise ValueError("finite differences need a float64 model (dtype='float64')")
    model.eval()
    named = tunable_named_parameters(model)
    for p in model.parameters():
        p.grad = None
    total, _, _ = compute_loss(model, batch)
    total.backward()
    frozen_grads = [p.grad for p in model.parameters() if not p.requires_grad]
    g = torch.Generator().manual_seed(seed)

    picks: list[tuple[str, torch.nn.Parameter, int]] = []
    for name, p in named:
        k = min(p.numel(), coords_per_tensor)
        for idx in torch.randperm(p.numel(), generator=g)[:k].tolist():
            picks.append((name, p, idx))
    while len(picks) < min_coords:
        name, p = named[int(torch.randint(len(named), (1,), generator=g))]
        picks.append((name, p, int(torch.randint(p.numel(), (1,), generator=g))))

    worst = 0.0
    per_group: dict[str, float] = {}
    with torch.no_grad():
        for name, p, idx in picks:
            flat = p.data.view(-1)
            analytic = float(p.grad.view(-1)[idx])
            orig = float(flat[idx])
            flat[idx] = orig + eps
            plus = float(compute_loss(model, batch)[0])
            flat[idx] = orig - eps
            minus = float(compute_loss(model, batch)[0])
            flat[idx] = orig
            numeric = (plus - minus) / (2 * eps)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, err)
            group = model.param_tags[name]
            per_group[group] = max(per_group.get(group, 0.0), err)
    return {
        "max_rel_error": worst,
        "per_group": per_group,
        "coords": len(picks),
        "frozen_grads_none": all(gr is None for gr in frozen_grads),
    }
