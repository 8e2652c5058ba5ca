"""Synthetic captioned scenes: one or two coloured shapes on a dark canvas.

Images are rendered with 2x supersampling and a fixed caption grammar, e.g.
``"a red circle at the top and a blue square at the left"``.  Every scene is
re-rendered from its descriptor, nothing is stored as pixels.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .toyvlm import EOS_ID, TokenSeq, Vocabulary

KINDS = ("circle", "square", "triangle")
# Saturated hues, rendered at reduced contrast against a mid-grey background.
# At full contrast an 8/255 perturbation cannot change a colour word, which
# leaves no room to measure robustness differences at that budget.
HUES = {
    "red": (0.92, 0.12, 0.12),
    "green": (0.12, 0.80, 0.18),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.88, 0.12),
}
BACKGROUND = (0.5, 0.5, 0.5)
CONTRAST = 0.4
COLORS = {k: tuple(b + CONTRAST * (v - b) for v, b in zip(hue, BACKGROUND)) for k, hue in HUES.items()}
# Shape centres in 32x32 pixel coordinates (x, y).
POSITIONS = {"top": (16.0, 8.0), "bottom": (16.0, 24.0), "left": (8.0, 16.0), "right": (24.0, 16.0)}
IMAGE_SIZE = 32
SUPERSAMPLE = 2
SHAPE_RADIUS = 5.0

GRAMMAR_WORDS = ("a", "at", "the", "and", *KINDS, *COLORS, *POSITIONS)
PROMPT_WORDS = (
    "what", "is", "content", "of", "image", "?", "describe", "this", "picture", "in", "shown", "please", "caption", "scene",
)
DEFAULT_PROMPT = "what is the content of the image ?"
# Words that carry no scene information; ignored by the token-overlap score.
FUNCTION_WORDS = frozenset({"a", "at", "the", "and"})


def default_vocabulary() -> Vocabulary:
    return Vocabulary(GRAMMAR_WORDS + PROMPT_WORDS)


@dataclass(frozen=True, order=True)
class Shape:
    kind: str
    color: str
    position: str

    def __post_init__(self):
        if self.kind not in KINDS or self.color not in COLORS or self.position not in POSITIONS:
            raise ConfigError(f"invalid shape record {self}")

    def phrase(self) -> str:
        return f"a {self.color} {self.kind} at the {self.position}"


_POS_ORDER = {p: i for i, p in enumerate(POSITIONS)}


@dataclass(frozen=True)
class Scene:
    """1-2 shapes at distinct positions, stored in canonical position order."""

    shapes: tuple[Shape, ...]
    render_seed: int = 0

    def __post_init__(self):
        shapes = tuple(sorted(self.shapes, key=lambda s: _POS_ORDER.get(s.position, 99)))
        if not 1 <= len(shapes) <= 2:
            raise ConfigError(f"a scene holds 1 or 2 shapes, got {len(shapes)}")
        if len({s.position for s in shapes}) != len(shapes):
            raise ConfigError("shapes in a scene must occupy distinct positions")
        object.__setattr__(self, "shapes", shapes)

    @property
    def key(self) -> tuple[Shape, ...]:
        """Identity of the scene content, independent of the render seed."""
        return self.shapes

    def caption(self) -> str:
        return " and ".join(s.phrase() for s in self.shapes)

    def descriptor(self) -> str:
        return "|".join(f"{s.color} {s.kind} {s.position}" for s in self.shapes)

    @classmethod
    def from_descriptor(cls, text: str, render_seed: int = 0) -> "Scene":
        shapes = []
        for part in text.split("|"):
            color, kind, position = part.split()
            shapes.append(Shape(kind, color, position))
        return cls(tuple(shapes), render_seed)


@lru_cache(maxsize=1)
def all_scenes() -> tuple[Scene, ...]:
    """Every distinct scene of the grammar in a fixed enumeration order."""
    records = [Shape(k, c, p) for p in POSITIONS for k in KINDS for c in COLORS]
    singles = [Scene((r,)) for r in records]
    pairs = [
        Scene((a, b))
        for a, b in itertools.combinations(records, 2)
        if a.position != b.position
    ]
    return tuple(singles + pairs)


def num_distinct_scenes() -> int:
    n_rec = len(KINDS) * len(COLORS)
    n_pos = len(POSITIONS)
    return n_pos * n_rec + (n_pos * (n_pos - 1) // 2) * n_rec**2


def _inside(kind: str, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = xs - cx, ys - cy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        h = 0.8 * r
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    # upward triangle: apex at (cx, cy - r), base at y = cy + 0.8 r with half-width r
    base = 0.8 * r
    t = (dy + r) / (base + r)
    return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)


def render(scene: Scene) -> torch.Tensor:
    """Deterministic (3, 32, 32) float32 rendering in [0, 1]."""
    size = IMAGE_SIZE * SUPERSAMPLE
    # sample points at sub-pixel centres, expressed in output-pixel units
    coords = (np.arange(size) + 0.5) / SUPERSAMPLE
    xs, ys = np.meshgrid(coords, coords)
    img = np.empty((3, size, size), dtype=np.float64)
    img[:] = np.array(BACKGROUND)[:, None, None]
    rng = np.random.default_rng(scene.render_seed) if scene.render_seed else None
    for shape in scene.shapes:
        cx, cy = POSITIONS[shape.position]
        r = SHAPE_RADIUS
        if rng is not None:
            cx += rng.uniform(-1.0, 1.0)
            cy += rng.uniform(-1.0, 1.0)
            r *= rng.uniform(0.9, 1.1)
        mask = _inside(shape.kind, xs, ys, cx, cy, r)
        img[:, mask] = np.array(COLORS[shape.color])[:, None]
    img = img.reshape(3, IMAGE_SIZE, SUPERSAMPLE, IMAGE_SIZE, SUPERSAMPLE).mean(axis=(2, 4))
    return torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))


def render_batch(scenes) -> torch.Tensor:
    return torch.stack([render(s) for s in scenes])


def caption_of(scene: Scene, vocab: Vocabulary) -> TokenSeq:
    """Caption tokens followed by EOS, all flagged as answer."""
    return TokenSeq.answer_only(caption_ids(scene, vocab))


def caption_ids(scene: Scene, vocab: Vocabulary) -> list[int]:
    return vocab.encode(scene.caption()) + [EOS_ID]


@dataclass(frozen=True)
class TrainSplit:
    """Images only: the adversarial trainer never sees captions."""

    images: torch.Tensor

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class EvalSplit:
    images: torch.Tensor
    scenes: tuple[Scene, ...]
    captions: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.captions:
            object.__setattr__(self, "captions", tuple(s.caption() for s in self.scenes))

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> "EvalSplit":
        return EvalSplit(self.images[:n], self.scenes[:n], self.captions[:n])


def _render_seed(seed: int, index: int) -> int:
    return 1 + (seed * 1_000_003 + index * 7919) % (2**31 - 2)


def split_scenes(seed: int, n_train: int, n_eval: int) -> tuple[list[Scene], list[Scene], list[Scene]]:
    """Seeded partition into (eval, train, rest) scene lists with render seeds attached.

    Eval scenes come first in the permutation, so growing ``n_train`` never
    changes the eval split.
    """
    if n_train <= 0 or n_eval <= 0:
        raise ConfigError("n_train and n_eval must be positive")
    total = num_distinct_scenes()
    if n_train + n_eval > total:
        raise ConfigError(f"n_train + n_eval = {n_train + n_eval} exceeds the {total} distinct scenes")
    order = np.random.default_rng(seed).permutation(total)
    scenes = all_scenes()
    placed = [Scene(scenes[i].shapes, _render_seed(seed, int(i))) for i in order]
    return placed[:n_eval], placed[n_eval : n_eval + n_train], placed[n_eval + n_train :]


def make_dataset(seed: int, n_train: int, n_eval: int) -> tuple[TrainSplit, EvalSplit]:
    eval_scenes, train_scenes, _ = split_scenes(seed, n_train, n_eval)
    return TrainSplit(render_batch(train_scenes)), EvalSplit(render_batch(eval_scenes), tuple(eval_scenes))


def pretrain_scenes(seed: int, n_eval: int) -> list[Scene]:
    """Every scene outside the eval split (render seeds are re-drawn during pretraining)."""
    eval_scenes, train, rest = split_scenes(seed, 1, n_eval)
    return train + rest


def write_manifest(path, seed: int, n_train: int, n_eval: int) -> None:
    """One JSON record per line: scene descriptor, split and render seed."""
    eval_scenes, train_scenes, _ = split_scenes(seed, n_train, n_eval)
    lines = []
    for split, scenes in (("train", train_scenes), ("eval", eval_scenes)):
        for s in scenes:
            lines.append(json.dumps({"scene": s.descriptor(), "split": split, "seed": s.render_seed}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> tuple[TrainSplit, EvalSplit]:
    train, evals = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        scene = Scene.from_descriptor(rec["scene"], rec["seed"])
        (train if rec["split"] == "train" else evals).append(scene)
    return TrainSplit(render_batch(train)), EvalSplit(render_batch(evals), tuple(evals))
