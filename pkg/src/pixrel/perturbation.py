"""Monte-Carlo perturbation analysis.

The relevance of a pixel set ``S`` for a class score is measured as the
expected decline ``m = f(x) - E[f(x~_S)]`` where ``x~_S`` replaces every
channel of the pixels in ``S`` by random (or fixed) values.

Random draws are replayable: repetition ``i`` of a run seeded with ``seed``
uses numpy's PCG64 bit generator fed by ``SeedSequence(seed, spawn_key=(i,))``,
independently of execution order.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from . import network as nn
from .attribution import Heatmap, HeatmapRecipe
from .errors import KTooLarge, OutOfBounds
from .evaluation import BoundaryMap, thicken

RNG_ALGORITHM = "numpy-PCG64/SeedSequence(seed,spawn_key=(draw_index,))"
DEFAULT_REPETITIONS = 200


@dataclass(frozen=True)
class PixelSet:
    coords: tuple  # sorted unique (row, col) pairs

    def __post_init__(self):
        pts = sorted({(int(r), int(c)) for r, c in self.coords})
        object.__setattr__(self, "coords", tuple(pts))

    @classmethod
    def from_mask(cls, mask) -> "PixelSet":
        m = mask.mask if isinstance(mask, BoundaryMap) else np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(m)
        return cls(tuple(zip(rows.tolist(), cols.tolist())))

    def __len__(self):
        return len(self.coords)

    def __iter__(self):
        return iter(self.coords)

    def __contains__(self, item):
        return tuple(item) in set(self.coords)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.coords:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
        a = np.array(self.coords, dtype=np.intp)
        return a[:, 0], a[:, 1]

    def to_mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        rows, cols = self.arrays()
        m[rows, cols] = True
        return m


@dataclass(frozen=True)
class Uniform01:
    """Each perturbed subpixel drawn i.i.d. from U[0, 1)."""

    def describe(self) -> str:
        return "uniform01"


@dataclass(frozen=True)
class FixedValue:
    value: tuple = (0.0,)  # one entry, or one per channel

    def __post_init__(self):
        v = self.value
        v = (float(v),) if np.isscalar(v) else tuple(float(a) for a in v)
        object.__setattr__(self, "value", v)

    def describe(self) -> str:
        return "fixed:" + ",".join(f"{a:g}" for a in self.value)


@dataclass(frozen=True)
class PerturbationSpec:
    distribution: Union[Uniform01, FixedValue] = field(default_factory=Uniform01)
    repetitions: int = DEFAULT_REPETITIONS
    seed: int = 0

    def __post_init__(self):
        if int(self.repetitions) < 1:
            raise ValueError("repetitions must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "repetitions", int(self.repetitions))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class PerturbationResult:
    baseline: float
    mean_perturbed: float
    decline: float
    std: float
    repetitions: int
    set_size: int = 0
    rng: str = RNG_ALGORITHM


def parse_distribution(text: str):
    """``uniform01`` or ``fixed:v`` / ``fixed:v1,v2,v3``."""
    text = text.strip()
    if text == "uniform01":
        return Uniform01()
    if text.startswith("fixed:"):
        try:
            vals = tuple(float(a) for a in text[len("fixed:"):].split(","))
        except ValueError:
            raise ValueError(f"bad fixed distribution {text!r}") from None
        return FixedValue(vals)
    raise ValueError(f"unknown distribution {text!r}; expected uniform01 or fixed:v")


def draw_rng(seed: int, draw_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(int(draw_index),))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *labels: str) -> int:
    """Stable 64-bit sub-seed for a named stream (e.g. one image/class pair)."""
    words = [int(seed) & 0xFFFFFFFF, int(seed) >> 32] + [zlib.crc32(s.encode()) for s in labels]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


def perturb_once(image, pset: PixelSet, spec: PerturbationSpec, draw_index: int) -> np.ndarray:
    """Copy of ``image`` (C, H, W) with every channel of the pixels in ``pset`` replaced."""
    img = np.array(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got {img.shape}")
    rows, cols = pset.arrays()
    if rows.size == 0:
        return img
    c, h, w = img.shape
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w:
        raise OutOfBounds(f"pixel set exceeds image bounds {(h, w)}")
    dist = spec.distribution
    if isinstance(dist, Uniform01):
        vals = draw_rng(spec.seed, draw_index).random((rows.size, c))
        img[:, rows, cols] = vals.T
    else:
        v = np.asarray(dist.value, dtype=np.float64)
        if v.size not in (1, c):
            raise ValueError(f"fixed value has {v.size} entries for {c} channels")
        img[:, rows, cols] = np.broadcast_to(v.reshape(-1, 1), (c, rows.size))
    return img


def expected_decline(model: nn.NetworkModel, image, class_index: int, pset: PixelSet,
                     spec: PerturbationSpec) -> PerturbationResult:
    baseline = float(nn.predict(model, image)[class_index])
    if len(pset) == 0:
        return PerturbationResult(baseline, baseline, 0.0, 0.0, spec.repetitions, 0)
    reps = 1 if isinstance(spec.distribution, FixedValue) else spec.repetitions
    vals = np.array([nn.predict(model, perturb_once(image, pset, spec, i))[class_index]
                     for i in range(reps)])
    if np.all(vals == vals[0]):
        mean, std = float(vals[0]), 0.0
    else:
        mean, std = float(vals.mean()), float(vals.std())
    return PerturbationResult(baseline, mean, baseline - mean, std, spec.repetitions, len(pset))


def top_k_pixels(heatmap, k: int) -> PixelSet:
    """The ``k`` highest-scoring pixels; ties go to the earlier row-major position."""
    s = heatmap.scores if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > s.size:
        raise KTooLarge(f"k={k} exceeds pixel count {s.size}")
    order = np.argsort(-s.ravel(), kind="stable")[:k]
    rows, cols = np.unravel_index(order, s.shape)
    return PixelSet(tuple(zip(rows.tolist(), cols.tolist())))


# --- resizing to the network input -------------------------------------------------


def _src_index(n_dst: int, n_src: int) -> np.ndarray:
    return np.minimum(((np.arange(n_dst) + 0.5) * n_src / n_dst).astype(np.intp), n_src - 1)


def resize_nearest(mask, shape) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape == tuple(shape):
        return m.copy()
    return m[np.ix_(_src_index(shape[0], m.shape[0]), _src_index(shape[1], m.shape[1]))]


def _bilinear_axis(n_dst: int, n_src: int):
    pos = np.clip((np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5, 0, n_src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, pos - lo


def resize_bilinear(image, shape) -> np.ndarray:
    """Resize a (C, H, W) image to spatial ``shape`` using pixel-centre bilinear sampling."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[1:] == tuple(shape):
        return img.copy()
    r0, r1, fr = _bilinear_axis(shape[0], img.shape[1])
    c0, c1, fc = _bilinear_axis(shape[1], img.shape[2])
    top = img[:, r0][:, :, c0] * (1 - fc) + img[:, r0][:, :, c1] * fc
    bot = img[:, r1][:, :, c0] * (1 - fc) + img[:, r1][:, :, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def prepare_gt(gt: BoundaryMap, shape, iterations: int = 1) -> BoundaryMap:
    """Nearest-neighbour resize to the network resolution, then thicken."""
    resized = BoundaryMap(resize_nearest(gt.mask, shape), gt.label)
    return thicken(resized, iterations)


# --- ground truth vs. method study ---------------------------------------------------


def compute_heatmaps(model: nn.NetworkModel, images: Mapping, pairs: Sequence,
                     recipe: HeatmapRecipe) -> dict:
    """Heatmaps for each ``(image_id, class_name)`` in ``pairs`` at network resolution."""
    out = {}
    traces = {}
    for image_id, cls in pairs:
        if image_id not in traces:
            x = resize_bilinear(images[image_id], model.input_shape[1:])
            traces[image_id] = nn.forward(model, x)[1]
        out[(image_id, cls)] = recipe.apply(traces[image_id], model.class_index(cls))
    return out


@dataclass(frozen=True)
class StudyRow:
    method: str
    f: float  # mean unperturbed score
    m: float  # mean decline
    std: float  # per-pair std over repetitions, averaged over pairs

    @property
    def perturbed(self) -> float:
        return self.f - self.m


@dataclass(frozen=True)
class StudyTable:
    rows: tuple
    pairs: int
    rng: str = RNG_ALGORITHM

    def row(self, method: str) -> StudyRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def _study_pair(model, image, cls, gt, heatmaps, spec, image_id):
    shape = model.input_shape[1:]
    x = resize_bilinear(image, shape)
    c = model.class_index(cls)
    pair_spec = PerturbationSpec(spec.distribution, spec.repetitions,
                                 derive_seed(spec.seed, str(image_id), cls))
    gt_set = PixelSet.from_mask(prepare_gt(gt, shape))
    results = [expected_decline(model, x, c, gt_set, pair_spec)]
    for label, maps in heatmaps.items():
        hm = maps[(image_id, cls)]
        if hm.shape != tuple(shape):
            raise ValueError(f"{label} heatmap for {image_id}/{cls} is {hm.shape}, expected {tuple(shape)}")
        results.append(expected_decline(model, x, c, top_k_pixels(hm, len(gt_set)), pair_spec))
    return results


def gt_vs_method_study(model: nn.NetworkModel, images: Mapping, gts: Mapping,
                       heatmaps: Mapping, spec: PerturbationSpec, jobs: int = 1) -> StudyTable:
    """Compare the decline caused by ground-truth boundary pixels with top-scoring pixels.

    ``gts`` maps ``(image_id, class_name)`` to a :class:`BoundaryMap`; each is
    resized to the network input and thickened one step before use.
    ``heatmaps`` maps a method label to ``{(image_id, class_name): Heatmap}``;
    each method's set is its top-``|gt|`` pixels. The GT set and all method sets
    of a pair share one random stream derived from the pair's names, so the
    table does not depend on ``jobs``.
    """
    pairs = sorted(gts)

    def run(pair):
        image_id, cls = pair
        return _study_pair(model, images[image_id], cls, gts[pair], heatmaps, spec, image_id)

    if jobs > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_pair = list(pool.map(run, pairs))
    else:
        per_pair = [run(p) for p in pairs]

    rows = []
    for j, name in enumerate(["gt"] + list(heatmaps)):
        results = [res[j] for res in per_pair]
        if results:
            rows.append(StudyRow(name,
                                 float(np.mean([r.baseline for r in results])),
                                 float(np.mean([r.decline for r in results])),
                                 float(np.mean([r.std for r in results]))))
        else:
            rows.append(StudyRow(name, 0.0, 0.0, 0.0))
    return StudyTable(tuple(rows), len(pairs))
