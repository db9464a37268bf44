"""Procedural captioned sprites: compositional caption grammar, deterministic
renderer, template-matching classifier, and corpus generation.

Canvases are RGB in [-1, 1] on a black (-1) background. Glyph boxes never
touch the canvas border, and two-object scenes keep the boxes disjoint along
the relation axis, so template matching recovers every attribute exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..models.text import COLORS, SHAPES

COLOR_VALUES = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "purple": (1.0, -1.0, 1.0),
    "orange": (1.0, 0.0, -1.0),
}

BACKGROUND = -1.0

RELATIONS = ("above", "below", "left of", "right of")


def _mask(rows):
    return np.array([[ch == "X" for ch in row] for row in rows], dtype=bool)


SHAPE_MASKS = {
    "square": _mask(["XXXXX"] * 5),
    "circle": _mask([".XXX.", "XXXXX", "XXXXX", "XXXXX", ".XXX."]),
    "triangle": _mask(["..X..", ".XXX.", "XXXXX"]),
    "cross": _mask(["..X..", "..X..", "XXXXX", "..X..", "..X.."]),
    # the fixed 7-pixel stick figure
    "person": _mask([".X.", "XXX", ".X.", "X.X"]),
}

PERSON_FREQUENCY = 0.1


@dataclass
class SpriteObject:
    shape: str
    color: str
    row: int
    col: int


@dataclass
class SpriteScene:
    objects: List[SpriteObject]
    relation: Optional[str] = None  # relates objects[0] to objects[1]
    size: int = 16

    def caption(self):
        parts = [f"a {o.color} {o.shape}" for o in self.objects]
        if self.relation is None:
            return parts[0]
        return f"{parts[0]} {self.relation} {parts[1]}"

    def to_dict(self):
        return {
            "objects": [vars(o) for o in self.objects],
            "relation": self.relation,
            "size": self.size,
        }

    @staticmethod
    def from_dict(d):
        return SpriteScene([SpriteObject(**o) for o in d["objects"]],
                           d.get("relation"), d.get("size", 16))


def contains_person(scene):
    return any(o.shape == "person" for o in scene.objects)


def render(scene, size=None):
    """Rasterize a scene to (3, size, size); integer upscaling for hi-res."""
    size = size or scene.size
    if size % scene.size:
        raise ValueError(f"render size {size} not a multiple of scene size {scene.size}")
    unit = size // scene.size
    img = np.full((3, size, size), BACKGROUND, dtype=np.float32)
    for obj in scene.objects:
        mask = np.kron(SHAPE_MASKS[obj.shape], np.ones((unit, unit), dtype=bool))
        h, w = mask.shape
        r, c = obj.row * unit, obj.col * unit
        color = COLOR_VALUES[obj.color]
        for ch in range(3):
            img[ch, r:r + h, c:c + w][mask] = color[ch]
    return img


def parse_caption(caption):
    """Invert the grammar: caption -> (shape, color) pairs and relation."""
    words = caption.lower().split()
    objs = []
    relation = None
    i = 0
    while i < len(words):
        if words[i] == "a" and i + 2 < len(words) + 1:
            color, shape = words[i + 1], words[i + 2]
            if color not in COLORS or shape not in SHAPES:
                raise ValueError(f"unparseable object at {words[i:i+3]}")
            objs.append((color, shape))
            i += 3
        elif words[i] in ("above", "below"):
            relation = words[i]
            i += 1
        elif words[i] in ("left", "right") and i + 1 < len(words) and words[i + 1] == "of":
            relation = f"{words[i]} of"
            i += 2
        else:
            raise ValueError(f"unparseable caption {caption!r} at {words[i]!r}")
    return objs, relation


def classify(image, scene_size=16, atol=0.01):
    """Template matching; returns (color, shape, row, col) per detection.

    The tolerance absorbs 8-bit PNG round-trip quantization; palette values
    are separated by >= 0.5 per channel so matches stay unambiguous.
    """
    size = image.shape[-1]
    unit = size // scene_size
    found = []
    for shape, base_mask in SHAPE_MASKS.items():
        mask = np.kron(base_mask, np.ones((unit, unit), dtype=bool))
        h, w = mask.shape
        for color, vals in COLOR_VALUES.items():
            target = np.where(mask[None], np.array(vals, np.float32).reshape(3, 1, 1),
                              BACKGROUND).astype(np.float32)
            for r in range(size - h + 1):
                for c in range(size - w + 1):
                    if np.abs(image[:, r:r + h, c:c + w] - target).max() <= atol:
                        found.append((color, shape, r // unit, c // unit))
    return found


def detect_person(image, tol=0.3, scene_size=16):
    """Tolerant detector for the stick figure in any palette color."""
    size = image.shape[-1]
    unit = size // scene_size
    mask = np.kron(SHAPE_MASKS["person"], np.ones((unit, unit), dtype=bool))
    h, w = mask.shape
    for color, vals in COLOR_VALUES.items():
        target = np.where(mask[None], np.array(vals, np.float32).reshape(3, 1, 1),
                          BACKGROUND).astype(np.float32)
        for r in range(size - h + 1):
            for c in range(size - w + 1):
                if np.abs(image[:, r:r + h, c:c + w] - target).max() <= tol:
                    return True
    return False


def _sample_shape(rng, include_person):
    if include_person and rng.random() < PERSON_FREQUENCY:
        return "person"
    others = [s for s in SHAPES if s != "person"]
    return others[rng.integers(len(others))]


def _box(shape):
    m = SHAPE_MASKS[shape]
    return m.shape[0], m.shape[1]


def generate_scene(rng, include_person=True, size=16):
    """One random scene; borders are avoided and relation axes kept disjoint."""
    two = rng.random() < 0.5
    s1 = _sample_shape(rng, include_person)
    c1 = COLORS[rng.integers(len(COLORS))]
    h1, w1 = _box(s1)
    lo, hi = 1, size - 1  # exclusive upper bound for box end
    if not two:
        r1 = int(rng.integers(lo, hi - h1 + 1))
        col1 = int(rng.integers(lo, hi - w1 + 1))
        return SpriteScene([SpriteObject(s1, c1, r1, col1)], None, size)

    s2 = _sample_shape(rng, include_person)
    c2 = COLORS[rng.integers(len(COLORS))]
    h2, w2 = _box(s2)
    relation = RELATIONS[rng.integers(len(RELATIONS))]
    # place along the constrained axis first, free axis anywhere inside
    if relation in ("above", "below"):
        ha, hb = (h1, h2) if relation == "above" else (h2, h1)
        ra = int(rng.integers(lo, hi - ha - hb + 1))
        rb = int(rng.integers(ra + ha, hi - hb + 1))
        r1, r2 = (ra, rb) if relation == "above" else (rb, ra)
        col1 = int(rng.integers(lo, hi - w1 + 1))
        col2 = int(rng.integers(lo, hi - w2 + 1))
    else:
        wa, wb = (w1, w2) if relation == "left of" else (w2, w1)
        ca = int(rng.integers(lo, hi - wa - wb + 1))
        cb = int(rng.integers(ca + wa, hi - wb + 1))
        col1, col2 = (ca, cb) if relation == "left of" else (cb, ca)
        r1 = int(rng.integers(lo, hi - h1 + 1))
        r2 = int(rng.integers(lo, hi - h2 + 1))
    return SpriteScene([SpriteObject(s1, c1, r1, col1), SpriteObject(s2, c2, r2, col2)],
                       relation, size)


def generate_sprites(n, seed, include_person=True, size=16):
    """Deterministic corpus of (image, caption, scene) triples."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        scene = generate_scene(rng, include_person=include_person)
        out.append((render(scene, size), scene.caption(), scene))
    return out


def write_manifest(path, records):
    """Line-delimited corpus manifest: {file, caption, scene, labels}."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
