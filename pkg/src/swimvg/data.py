"""Synthetic referring-expression data: shape scenes, templated expressions,
tokenizer and an on-disk export format.

Every sample is a pure function of its integer seed. Rasterization uses
integer arithmetic only, so images are bit-identical across platforms.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .boxes import BoundingBox

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
SIZES = ("small", "large")
RELATIONS = ("left", "right", "above", "below")
BACKGROUND = 0.5

# (min, max) side length in pixels on a 64-pixel canvas; scaled with the canvas
_SIDE_RANGE = {"small": (8, 12), "large": (16, 22)}
_PLACEMENT_TRIES = 200


class GenerationExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...] = (
        "<pad>", "<unk>", "the", "of", *SHAPES, *COLORS, *SIZES, *RELATIONS,
    )

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.words.index(word)
        except ValueError:
            return self.unk_id


VOCAB = Vocab()


def tokenize_expression(words: Sequence[str], vocab: Vocab = VOCAB, length: int = 12) -> np.ndarray:
    """Map words to ids (OOV -> UNK), truncate to ``length`` and right-pad with PAD."""
    if length < 1:
        raise ValueError("length must be >= 1")
    ids = [vocab.id(w) for w in words[:length]]
    ids += [vocab.pad_id] * (length - len(ids))
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids: Iterable[int], vocab: Vocab = VOCAB) -> list[str]:
    return [vocab.words[i] for i in ids if i != vocab.pad_id]


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    x0: int
    y0: int
    w: int
    h: int

    @property
    def corners(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x0 + self.w, self.y0 + self.h

    @property
    def center(self) -> tuple[float, float]:
        return self.x0 + self.w / 2, self.y0 + self.h / 2

    def box(self, canvas: int) -> BoundingBox:
        cx, cy = self.center
        return BoundingBox(cx / canvas, cy / canvas, self.w / canvas, self.h / canvas)


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    canvas_size: int


def corner_iou(a: SceneObject, b: SceneObject) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = max(0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def relation_holds(rel: str, a: SceneObject, b: SceneObject) -> bool:
    """Whether ``a`` lies entirely ``rel`` of ``b`` (image y grows downward)."""
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    if rel == "left":
        return ax2 <= bx1
    if rel == "right":
        return ax1 >= bx2
    if rel == "above":
        return ay2 <= by1
    if rel == "below":
        return ay1 >= by2
    raise ValueError(f"unknown relation {rel!r}")


@dataclass(frozen=True)
class Expression:
    """Parsed referring expression; ``relation`` / anchor fields only for the relational form."""

    shape: str
    color: Optional[str] = None
    size: Optional[str] = None
    relation: Optional[str] = None
    anchor_color: Optional[str] = None
    anchor_shape: Optional[str] = None

    def words(self) -> list[str]:
        out = ["the"]
        if self.relation is None:
            out += [w for w in (self.size, self.color) if w] + [self.shape]
            return out
        out.append(self.shape)
        out += [self.relation, "of"] if self.relation in ("left", "right") else [self.relation]
        return out + ["the", self.anchor_color, self.anchor_shape]

    def _attr_match(self, o: SceneObject) -> bool:
        return (
            o.shape == self.shape
            and (self.color is None or o.color == self.color)
            and (self.size is None or o.size == self.size)
        )

    def matches(self, scene: Scene) -> list[int]:
        """Indices of scene objects satisfying the expression, by exhaustive check."""
        objs = scene.objects
        if self.relation is None:
            return [i for i, o in enumerate(objs) if self._attr_match(o)]
        anchors = [j for j, o in enumerate(objs)
                   if o.color == self.anchor_color and o.shape == self.anchor_shape]
        if len(anchors) != 1:
            return []
        a = objs[anchors[0]]
        return [i for i, o in enumerate(objs)
                if i != anchors[0] and o.shape == self.shape and relation_holds(self.relation, o, a)]


@dataclass(frozen=True)
class GenConfig:
    canvas: int = 64
    min_objects: int = 2
    max_objects: int = 4
    ambiguity_rate: float = 0.5
    max_text_len: int = 12
    max_attempts: int = 100
    template_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)

    def __post_init__(self):
        if self.canvas < 32:
            raise ValueError("canvas must be >= 32")
        if not 2 <= self.min_objects <= self.max_objects <= 4:
            raise ValueError("object counts must satisfy 2 <= min <= max <= 4")

    @classmethod
    def from_model_config(cls, cfg) -> "GenConfig":
        return cls(cfg.image_size, cfg.min_objects, cfg.max_objects, cfg.ambiguity_rate,
                   cfg.max_text_len)


@dataclass
class SyntheticSample:
    seed: int
    image: np.ndarray
    expression: list[str]
    word_ids: np.ndarray
    gt_box: BoundingBox
    ambiguous: bool
    scene: Optional[Scene] = field(default=None, repr=False)

    def digest(self) -> str:
        h = hashlib.sha256(self.image.tobytes())
        h.update(" ".join(self.expression).encode())
        return h.hexdigest()


def _side(rng: np.random.Generator, size: str, canvas: int) -> int:
    lo, hi = _SIDE_RANGE[size]
    lo, hi = max(3, lo * canvas // 64), max(4, hi * canvas // 64)
    return int(rng.integers(lo, hi + 1))


def _place(rng, canvas: int, side: int, placed: list[SceneObject]) -> Optional[tuple[int, int]]:
    for _ in range(_PLACEMENT_TRIES):
        x0 = int(rng.integers(0, canvas - side + 1))
        y0 = int(rng.integers(0, canvas - side + 1))
        # one pixel of clearance keeps shapes visually separate
        if all(x0 + side + 1 <= o.x0 or o.x0 + o.w + 1 <= x0
               or y0 + side + 1 <= o.y0 or o.y0 + o.h + 1 <= y0 for o in placed):
            return x0, y0
    return None


def random_scene(rng: np.random.Generator, cfg: GenConfig, force_shape_pair: bool) -> Optional[Scene]:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    shapes = [SHAPES[int(rng.integers(3))] for _ in range(n)]
    if force_shape_pair:
        shapes[1] = shapes[0]
    objs: list[SceneObject] = []
    for shape in shapes:
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        size = SIZES[int(rng.integers(2))]
        side = _side(rng, size, cfg.canvas)
        pos = _place(rng, cfg.canvas, side, objs)
        if pos is None:
            return None
        objs.append(SceneObject(shape, color, size, pos[0], pos[1], side, side))
    return Scene(tuple(objs), cfg.canvas)


def _candidate_expressions(scene: Scene, target: int) -> list[list[Expression]]:
    t = scene.objects[target]
    attr = [Expression(t.shape, color=t.color)]
    attr_size = [Expression(t.shape, color=t.color, size=t.size)]
    rel = []
    for j, a in enumerate(scene.objects):
        if j == target:
            continue
        for r in RELATIONS:
            if relation_holds(r, t, a):
                rel.append(Expression(t.shape, relation=r, anchor_color=a.color, anchor_shape=a.shape))
    return [attr, attr_size, rel]


def generate_sample(seed: int, cfg: GenConfig = GenConfig()) -> SyntheticSample:
    """Deterministically build one (image, expression, box) triple from ``seed``.

    Scenes are resampled until some template refers to the chosen target
    uniquely; the uniqueness check is exhaustive over scene objects.
    """
    rng = np.random.default_rng(seed)
    weights = np.asarray(cfg.template_weights, dtype=np.float64)
    for _ in range(cfg.max_attempts):
        force = bool(rng.random() < cfg.ambiguity_rate)
        scene = random_scene(rng, cfg, force)
        if scene is None:
            continue
        # a forced pair puts the shared shape on objects 0 and 1; target one of them
        target = int(rng.integers(2)) if force else int(rng.integers(len(scene.objects)))
        groups = _candidate_expressions(scene, target)
        order = rng.choice(3, size=3, replace=False, p=weights / weights.sum())
        for g in order:
            options = [e for e in groups[g] if e.matches(scene) == [target]]
            if options:
                expr = options[int(rng.integers(len(options)))]
                break
        else:
            continue
        tgt = scene.objects[target]
        words = expr.words()
        return SyntheticSample(
            seed=seed,
            image=render_scene(scene, cfg.canvas),
            expression=words,
            word_ids=tokenize_expression(words, VOCAB, cfg.max_text_len),
            gt_box=tgt.box(cfg.canvas),
            ambiguous=sum(o.shape == tgt.shape for o in scene.objects) > 1,
            scene=scene,
        )
    raise GenerationExhausted(f"seed {seed}: no uniquely referable scene in {cfg.max_attempts} attempts")


def render_scene(scene: Scene, size: Optional[int] = None) -> np.ndarray:
    """Rasterize filled shapes over a gray background as float32 ``[S, S, 3]``.

    Pixel (x, y) is covered when its center lies inside the shape; all tests
    are integer comparisons on doubled coordinates.
    """
    size = scene.canvas_size if size is None else size
    img = np.full((size, size, 3), BACKGROUND, dtype=np.float32)
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = 2 * xs + 1, 2 * ys + 1
    for o in scene.objects:
        inside_box = (px >= 2 * o.x0) & (px <= 2 * (o.x0 + o.w)) & (py >= 2 * o.y0) & (py <= 2 * (o.y0 + o.h))
        dx = px - (2 * o.x0 + o.w)
        if o.shape == "square":
            mask = inside_box
        elif o.shape == "circle":
            dy = py - (2 * o.y0 + o.h)
            mask = dx * dx + dy * dy <= o.w * o.w
        else:  # apex at top-center, base along the bottom edge
            depth = py - 2 * o.y0
            mask = inside_box & (np.abs(dx) * 2 * o.h <= o.w * depth)
        img[mask] = COLORS[o.color]
    return img


def make_split(cfg: GenConfig, n_train: int, n_eval: int, seed: int) -> dict[str, list[SyntheticSample]]:
    """Train/eval lists drawn from disjoint seed ranges (split bit in the seed)."""
    if n_train < 1 or n_eval < 1:
        raise ValueError("n_train and n_eval must both be >= 1")
    train = [generate_sample(split_seed(seed, 0, i), cfg) for i in range(n_train)]
    evals = [generate_sample(split_seed(seed, 1, i), cfg) for i in range(n_eval)]
    return {
        "train": train,
        "eval": evals,
        "eval_ambiguous": [s for s in evals if s.ambiguous],
        "eval_unambiguous": [s for s in evals if not s.ambiguous],
    }


def split_seed(seed: int, split: int, index: int) -> int:
    if not 0 <= index < 2**31:
        raise ValueError("sample index out of range")
    return (seed << 32) | (split << 31) | index


# -- on-disk export ----------------------------------------------------------

_IMG_HEADER = struct.Struct("<iii")


def write_image(path: str, image: np.ndarray) -> None:
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(_IMG_HEADER.pack(w, h, c))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_image(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h, c = _IMG_HEADER.unpack(fh.read(_IMG_HEADER.size))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} floats, found {data.size}")
    return data.reshape(h, w, c).astype(np.float32)


def export_dataset(samples: Sequence[SyntheticSample], out_dir: str) -> str:
    """Write ``manifest.jsonl`` plus ``images/NNNNNN.bin`` under ``out_dir``."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, s in enumerate(samples):
            rel = f"images/{i:06d}.bin"
            write_image(os.path.join(out_dir, rel), s.image)
            fh.write(json.dumps({
                "seed": s.seed,
                "expression": " ".join(s.expression),
                "word_ids": [int(v) for v in s.word_ids],
                "gt_box": list(s.gt_box.as_tuple()),
                "ambiguous": s.ambiguous,
                "image": rel,
            }, sort_keys=True) + "\n")
    return manifest


def load_dataset(out_dir: str) -> list[SyntheticSample]:
    samples = []
    with open(os.path.join(out_dir, "manifest.jsonl"), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(SyntheticSample(
                seed=rec["seed"],
                image=read_image(os.path.join(out_dir, rec["image"])),
                expression=rec["expression"].split(),
                word_ids=np.asarray(rec["word_ids"], dtype=np.int64),
                gt_box=BoundingBox(*rec["gt_box"]),
                ambiguous=bool(rec["ambiguous"]),
            ))
    return samples
