"""Synthetic textured-shape images with boundary ground truth and a matching detector.

Each class is bound to one shape kind and one period-2 texture:

============  ============  =========================
class         shape         texture (bright/dark 0/1)
============  ============  =========================
square        square        checkerboard
triangle      right angle   horizontal stripes
disc          disc          vertical stripes
============  ============  =========================

Shapes sit on a mid-gray noisy background. The detector is hand-built: a
2x2 conv layer with one zero-mean Walsh filter per class (the three filters are
mutually orthogonal, so a texture only excites its own channel), ReLU with a
threshold above any edge response, 2x2 max-pooling and a dense layer summing
each class channel minus an offset. Shape-absent images therefore score
``-offset`` and present ones score well above zero.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import network as nn
from .errors import FixtureError, IoError
from .evaluation import BoundaryMap

SHAPES = ("square", "triangle", "disc")
_FILTERS = {
    "square": [[1.0, -1.0], [-1.0, 1.0]],
    "triangle": [[1.0, 1.0], [-1.0, -1.0]],
    "disc": [[1.0, -1.0], [1.0, -1.0]],
}
BACKGROUND = 0.5
CONV_THRESHOLD = 4.0  # own texture responds 6 over 3 channels, edges at most 3
SCORE_OFFSET = 1.0


@dataclass(frozen=True)
class FixtureSpec:
    size: int = 32
    classes: tuple = ("square",)
    min_shape: int = 10
    max_shape: int = 16
    noise: float = 0.02
    count: int = 20
    negatives: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise ValueError("classes must be non-empty and distinct")
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}; choose from {SHAPES}")
        if not 4 <= self.min_shape <= self.max_shape <= self.size - 2:
            raise ValueError("need 4 <= min_shape <= max_shape <= size - 2")
        if self.noise < 0 or self.count < 0 or self.negatives < 0:
            raise ValueError("noise, count and negatives must be non-negative")


@dataclass
class Fixture:
    spec: FixtureSpec
    model: nn.NetworkModel
    images: dict = field(default_factory=dict)  # image id -> (3, H, W)
    gts: dict = field(default_factory=dict)  # (image id, class) -> BoundaryMap
    labels: dict = field(default_factory=dict)  # image id -> class name or None


def shape_mask(kind: str, size: int, top: int, left: int, extent: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    rows, cols = np.mgrid[0:extent, 0:extent]
    if kind == "square":
        local = np.ones((extent, extent), dtype=bool)
    elif kind == "triangle":
        local = cols <= rows
    elif kind == "disc":
        c = (extent - 1) / 2.0
        local = (rows - c) ** 2 + (cols - c) ** 2 <= (extent / 2.0) ** 2
    else:
        raise ValueError(f"unknown shape {kind!r}")
    m[top:top + extent, left:left + extent] = local
    return m


def outline(mask: np.ndarray) -> np.ndarray:
    """Shape pixels with a 4-neighbour outside the shape (or beyond the image edge)."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def texture(kind: str, size: int) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size]
    if kind == "square":
        return ((r + c) % 2 == 0).astype(float)
    if kind == "triangle":
        return (r % 2 == 0).astype(float)
    return (c % 2 == 0).astype(float)


def detector_model(size: int, classes) -> nn.NetworkModel:
    classes = tuple(classes)
    k = len(classes)
    filters = np.stack([np.repeat(np.array(_FILTERS[c])[None], 3, axis=0) for c in classes])
    conv = nn.Conv2D(filters, np.full(k, -CONV_THRESHOLD))
    pool = nn.MaxPool2D((2, 2), (2, 2))
    side = (size - 1) // 2
    per = side * side
    w = np.zeros((k, k * per))
    for i in range(k):
        w[i, i * per:(i + 1) * per] = 1.0
    dense = nn.Dense(w, np.full(k, -SCORE_OFFSET))
    return nn.NetworkModel((3, size, size), (conv, nn.ReLU(), pool, nn.Flatten(), dense), classes)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _background(rng, size, noise) -> np.ndarray:
    return BACKGROUND + noise * rng.standard_normal((3, size, size))


def build_fixture(spec: FixtureSpec) -> Fixture:
    """Generate images, outlines and detector in memory (deterministic in ``spec.seed``)."""
    rng = np.random.default_rng(spec.seed)
    fx = Fixture(spec, detector_model(spec.size, spec.classes))
    for n in range(spec.count):
        kind = spec.classes[n % len(spec.classes)]
        extent = int(rng.integers(spec.min_shape, spec.max_shape + 1))
        top = int(rng.integers(1, spec.size - extent))
        left = int(rng.integers(1, spec.size - extent))
        mask = shape_mask(kind, spec.size, top, left, extent)
        img = _background(rng, spec.size, spec.noise)
        tex = texture(kind, spec.size) + spec.noise * rng.standard_normal((3, spec.size, spec.size))
        img = np.where(mask[None], tex, img)
        image_id = f"img_{n:03d}"
        fx.images[image_id] = _quantize(img)
        fx.gts[(image_id, kind)] = BoundaryMap(outline(mask), kind)
        fx.labels[image_id] = kind
    for n in range(spec.negatives):
        image_id = f"neg_{n:03d}"
        fx.images[image_id] = _quantize(_background(rng, spec.size, spec.noise))
        fx.labels[image_id] = None
    self_test(fx, rng)
    return fx


def self_test(fx: Fixture, rng=None) -> None:
    """Each positive image must outscore a shape-absent image for its class."""
    rng = np.random.default_rng(0) if rng is None else rng
    blank = _quantize(_background(rng, fx.spec.size, fx.spec.noise))
    neg = nn.predict(fx.model, blank)
    for image_id, kind in fx.labels.items():
        if kind is None:
            continue
        c = fx.model.class_index(kind)
        pos = nn.predict(fx.model, fx.images[image_id])[c]
        if not pos > neg[c]:
            raise FixtureError(f"detector self-test failed on {image_id}: {pos} <= {neg[c]}")


def write_fixture(fx: Fixture, out_dir) -> Path:
    """Lay ``fx`` out on disk::

        out_dir/model.pxm
        out_dir/fixture.json
        out_dir/images/<id>.ppm
        out_dir/gt/<id>/<class>.pgm
    """
    from .io import save_boundary_gt, save_image, save_model

    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "gt").mkdir(exist_ok=True)
        save_model(fx.model, out / "model.pxm")
        for image_id, img in fx.images.items():
            save_image(img, out / "images" / f"{image_id}.ppm")
        for (image_id, cls), bmap in fx.gts.items():
            d = out / "gt" / image_id
            d.mkdir(exist_ok=True)
            save_boundary_gt(bmap, d / f"{cls}.pgm")
        meta = {"spec": asdict(fx.spec), "labels": fx.labels}
        (out / "fixture.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoError(f"cannot write fixture to {out}: {e}") from e
    return out


def generate_fixture(spec: FixtureSpec, out_dir=None) -> Fixture:
    fx = build_fixture(spec)
    if out_dir is not None:
        write_fixture(fx, out_dir)
    return fx
