"""Heatmaps scored as semantic boundary predictions.

A predicted boundary pixel is a true positive when some ground-truth pixel
lies within ``radius`` (Euclidean) of it; a ground-truth pixel is missed when
no predicted pixel lies within ``radius``. Matching is many-to-many and
computed with exact Euclidean distance transforms.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import ndimage

from .attribution import Heatmap
from .errors import DimensionMismatch, MissingGroundTruth

DEFAULT_RADIUS = 2.0
DEFAULT_NUM_THRESHOLDS = 99

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class BoundaryMap:
    mask: np.ndarray  # bool (height, width)
    label: str = ""

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError(f"boundary map must be 2-D, got shape {m.shape}")
        if m.dtype != bool:
            if not np.isin(m, (0, 1)).all():
                raise ValueError("boundary map entries must be 0 or 1")
            m = m.astype(bool)
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def shape(self):
        return self.mask.shape

    def count(self) -> int:
        return int(self.mask.sum())

    def __eq__(self, other):
        if not isinstance(other, BoundaryMap):
            return NotImplemented
        return self.label == other.label and np.array_equal(self.mask, other.mask)


def _mask(m) -> np.ndarray:
    return m.mask if isinstance(m, BoundaryMap) else np.asarray(m, dtype=bool)


def _scores(h) -> np.ndarray:
    return h.scores if isinstance(h, Heatmap) else np.asarray(h, dtype=np.float64)


def thicken(bmap: BoundaryMap, iterations: int = 1) -> BoundaryMap:
    """Dilate with the 4-neighbour cross ``iterations`` times."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    m = bmap.mask
    if iterations > 0 and m.any():
        m = ndimage.binary_dilation(m, structure=_CROSS, iterations=iterations)
    return BoundaryMap(m, bmap.label)


def _distance_to(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance from every pixel to the nearest True pixel of ``mask``."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)


def match_counts(pred, gt, radius: float = DEFAULT_RADIUS) -> tuple[int, int, int]:
    """Return ``(tp, fp, fn)`` for a binary prediction against binary ground truth."""
    p, g = _mask(pred), _mask(gt)
    if p.shape != g.shape:
        raise DimensionMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    near_gt = _distance_to(g) <= radius
    near_pred = _distance_to(p) <= radius
    tp = int(np.count_nonzero(p & near_gt))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g & ~near_pred))
    return tp, fp, fn


def _prf(tp, fp, fn, gt_total):
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    npred = tp + fp
    precision = np.ones_like(tp)
    np.divide(tp, npred, out=precision, where=npred > 0)
    recall = np.zeros_like(tp)
    if gt_total > 0:
        recall = (gt_total - fn) / gt_total
    denom = precision + recall
    f = np.zeros_like(tp)
    np.divide(2 * precision * recall, denom, out=f, where=denom > 0)
    return precision, recall, f


@dataclass(frozen=True, eq=False)
class PrCurve:
    thresholds: np.ndarray  # ascending
    precision: np.ndarray
    recall: np.ndarray
    fscore: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    gt_total: int

    @classmethod
    def from_counts(cls, thresholds, tp, fp, fn, gt_total) -> "PrCurve":
        tp, fp, fn = (np.asarray(a, dtype=np.int64) for a in (tp, fp, fn))
        p, r, f = _prf(tp, fp, fn, gt_total)
        return cls(np.asarray(thresholds, dtype=np.float64), p, r, f, tp, fp, fn, int(gt_total))

    def __len__(self):
        return len(self.thresholds)

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(),
                        self.recall.tolist(), self.fscore.tolist()))


def default_thresholds(values, n: int = DEFAULT_NUM_THRESHOLDS) -> np.ndarray:
    """``n`` evenly spaced quantiles (0..1) of the strictly positive ``values``.

    Quantiles follow the inverted empirical CDF, so every threshold is an
    observed value and repeating the data leaves the thresholds unchanged.
    Duplicates are dropped. Without positive values the single threshold is the
    smallest positive float, which selects nothing from a non-positive map.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    pos = v[v > 0]
    if pos.size == 0:
        return np.array([np.nextafter(0.0, 1.0)])
    return np.unique(np.quantile(pos, np.linspace(0.0, 1.0, n), method="inverted_cdf"))


def _check_thresholds(thresholds) -> np.ndarray:
    t = np.asarray(thresholds, dtype=np.float64).ravel()
    if t.size == 0:
        raise ValueError("thresholds must be non-empty")
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be sorted ascending")
    return t


def sweep_counts(heatmap, gt, radius: float, thresholds) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-threshold ``(tp, fp, fn)`` arrays for predictions ``score >= t``."""
    s, g = _scores(heatmap), _mask(gt)
    if s.shape != g.shape:
        raise DimensionMismatch(f"heatmap {s.shape} vs ground truth {g.shape}")
    t = _check_thresholds(thresholds)
    counts = np.array([match_counts(s >= ti, g, radius) for ti in t], dtype=np.int64).reshape(-1, 3)
    return counts[:, 0], counts[:, 1], counts[:, 2]


def pr_curve(heatmap, gt, radius: float = DEFAULT_RADIUS, thresholds=None) -> PrCurve:
    s = _scores(heatmap)
    t = default_thresholds(s) if thresholds is None else _check_thresholds(thresholds)
    tp, fp, fn = sweep_counts(s, gt, radius, t)
    return PrCurve.from_counts(t, tp, fp, fn, int(_mask(gt).sum()))


def average_precision(curve: PrCurve) -> float:
    """Rectangle rule on the recall axis: sum of P(k) * (R(k) - R(k+1)), R(K) = 0."""
    if len(curve) == 0:
        raise ValueError("empty PR curve")
    r_next = np.append(curve.recall[1:], 0.0)
    return math.fsum((curve.precision * (curve.recall - r_next)).tolist())


def max_fscore(curve: PrCurve) -> float:
    if len(curve) == 0:
        raise ValueError("empty PR curve")
    return float(np.max(curve.fscore))


@dataclass(frozen=True)
class ClassResult:
    class_name: str
    ap: float
    mf: float
    curve: PrCurve
    images: int


@dataclass(frozen=True)
class EvaluationTable:
    per_class: dict  # class name -> ClassResult, insertion ordered by class name

    @property
    def mean_ap(self) -> float:
        return float(np.mean([c.ap for c in self.per_class.values()])) if self.per_class else 0.0

    @property
    def mean_mf(self) -> float:
        return float(np.mean([c.mf for c in self.per_class.values()])) if self.per_class else 0.0


def evaluate_dataset(heatmaps: Mapping, gts: Mapping, radius: float = DEFAULT_RADIUS,
                     thresholds=None, num_thresholds: int = DEFAULT_NUM_THRESHOLDS) -> EvaluationTable:
    """Dataset-level AP and maximal F-score per class.

    ``heatmaps`` and ``gts`` are keyed by ``(image_id, class_name)``. Counts are
    pooled over all images of a class at each threshold before precision and
    recall are formed. With ``thresholds=None`` each class gets
    ``num_thresholds`` quantiles of its pooled positive heatmap values.
    """
    by_class = defaultdict(list)
    for key in sorted(heatmaps):
        image_id, cls = key
        if key not in gts:
            raise MissingGroundTruth(image_id, cls)
        by_class[cls].append(key)

    results = {}
    for cls in sorted(by_class):
        keys = by_class[cls]
        if thresholds is None:
            pooled = np.concatenate([_scores(heatmaps[k]).ravel() for k in keys])
            t = default_thresholds(pooled, num_thresholds)
        else:
            t = _check_thresholds(thresholds)
        tp = np.zeros(len(t), dtype=np.int64)
        fp = np.zeros_like(tp)
        fn = np.zeros_like(tp)
        gt_total = 0
        for k in keys:
            a, b, c = sweep_counts(heatmaps[k], gts[k], radius, t)
            tp += a
            fp += b
            fn += c
            gt_total += int(_mask(gts[k]).sum())
        curve = PrCurve.from_counts(t, tp, fp, fn, gt_total)
        results[cls] = ClassResult(cls, average_precision(curve), max_fscore(curve), curve, len(keys))
    return EvaluationTable(results)
