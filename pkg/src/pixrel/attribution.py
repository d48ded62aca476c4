"""Pixel-wise attribution: gradient, deconvolution and LRP backward passes.

Every method walks the layers of a recorded :class:`~pixrel.network.ActivationTrace`
from the output back to the input and returns one score per input entry
(a *subpixel*, i.e. one channel of one pixel). :func:`aggregate_subpixels`
then reduces the channel axis to a per-pixel :class:`Heatmap`.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

from . import network as nn
from .errors import InvalidMethodParams

# --- method descriptors --------------------------------------------------------


@dataclass(frozen=True)
class Gradient:
    label = "gradient"


@dataclass(frozen=True)
class Deconvolution:
    # "pass": backward scores cross a ReLU where the forward unit was active.
    # "rectify": backward scores are clipped at zero instead, ignoring the forward mask.
    relu: str = "pass"

    def __post_init__(self):
        if self.relu not in ("pass", "rectify"):
            raise InvalidMethodParams(f"deconvolution relu mode must be 'pass' or 'rectify', got {self.relu!r}")

    @property
    def label(self) -> str:
        return "deconv" if self.relu == "pass" else "deconv-rectify"


@dataclass(frozen=True)
class LrpEpsilon:
    epsilon: float = 0.0

    def __post_init__(self):
        eps = float(self.epsilon)
        if not np.isfinite(eps) or eps < 0:
            raise InvalidMethodParams(f"epsilon must be finite and >= 0, got {self.epsilon}")
        object.__setattr__(self, "epsilon", eps)

    @property
    def label(self) -> str:
        return f"lrp-eps({self.epsilon:g})"


@dataclass(frozen=True)
class LrpAlphaBeta:
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        a, b = float(self.alpha), float(self.beta)
        if not (np.isfinite(a) and np.isfinite(b)):
            raise InvalidMethodParams("alpha and beta must be finite")
        if a <= 0 or b > 0 or abs(a + b - 1.0) > 1e-12:
            raise InvalidMethodParams(
                f"alpha-beta rule needs alpha + beta = 1, alpha > 0, beta <= 0; got alpha={a:g}, beta={b:g}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @property
    def label(self) -> str:
        return f"lrp-ab({self.alpha:g},{self.beta:g})"


AttributionMethod = Union[Gradient, Deconvolution, LrpEpsilon, LrpAlphaBeta]


class AggregationMode(str, Enum):
    SUM = "sum"
    NEGATIVE_SUM = "negsum"
    L2 = "l2"


@dataclass(frozen=True, eq=False)
class RelevanceMap:
    scores: np.ndarray  # model input shape
    class_index: int
    method: AttributionMethod

    def total(self) -> float:
        return float(self.scores.sum())


@dataclass(frozen=True, eq=False)
class Heatmap:
    scores: np.ndarray  # (height, width)
    class_index: int = -1

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError(f"heatmap must be 2-D, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError("heatmap contains non-finite entries")
        object.__setattr__(self, "scores", s)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def _relevance_map(scores, class_index, method) -> RelevanceMap:
    scores = np.array(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError(f"{method.label} produced non-finite scores")
    scores.setflags(write=False)
    return RelevanceMap(scores, class_index, method)


# --- gradient and deconvolution --------------------------------------------------


def gradient_relevance(trace: nn.ActivationTrace, class_index: int) -> RelevanceMap:
    """Raw derivatives of the class score; aggregate with L2 for the usual sensitivity map."""
    g = nn.input_gradient(trace.model, trace, class_index)
    return _relevance_map(g, class_index, Gradient())


def deconv_relevance(trace: nn.ActivationTrace, class_index: int, relu: str = "pass") -> RelevanceMap:
    """Project the class score down with transposed weights and pooling switches.

    The pass starts from ``f_c(x)`` at the chosen output. Biases are ignored.
    """
    method = Deconvolution(relu)
    model = trace.model
    g = nn.output_seed(trace, class_index, float(trace.scores[class_index]))
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        if isinstance(layer, nn.ReLU) and relu == "rectify":
            g = np.maximum(g, 0.0)
        else:
            g = nn.backward_layer(layer, g, trace.inputs[i], trace.winners.get(i))
    return _relevance_map(g, class_index, method)


# --- layer-wise relevance propagation --------------------------------------------


def _safe_div(num, den):
    """num / den with 0 where den == 0 (such neurons redistribute nothing)."""
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


def _redistribute(z: np.ndarray, r: np.ndarray, axes, rule) -> np.ndarray:
    """Per-contribution share of upper relevance.

    ``z`` holds x_i * w_ij with the upper-neuron axes leading; ``axes`` are the
    lower-neuron axes summed to form each denominator. Returns an array shaped
    like ``z`` with each entry's slice of ``r``.
    """
    expand = (...,) + (None,) * len(axes)
    if isinstance(rule, LrpEpsilon):
        den = z.sum(axis=axes)
        if rule.epsilon > 0:
            den = den + rule.epsilon * np.where(den >= 0, 1.0, -1.0)
        return z * _safe_div(r, den)[expand]
    zp = np.maximum(z, 0.0)
    zn = np.minimum(z, 0.0)
    sp = _safe_div(rule.alpha * r, zp.sum(axis=axes))
    out = zp * sp[expand]
    if rule.beta != 0:
        sn = _safe_div(rule.beta * r, zn.sum(axis=axes))
        out = out + zn * sn[expand]
    return out


def lrp_dense(layer: nn.Dense, x: np.ndarray, r: np.ndarray, rule) -> np.ndarray:
    z = layer.weights * x[None, :]
    return _redistribute(z, r, (1,), rule).sum(axis=0)


def lrp_conv(layer: nn.Conv2D, x: np.ndarray, r: np.ndarray, rule) -> np.ndarray:
    win = nn.conv_windows(x, layer)  # (C, oh, ow, kh, kw)
    f = layer.filters  # (O, C, kh, kw)
    z = f[:, :, None, None, :, :] * win[None]  # (O, C, oh, ow, kh, kw)
    z = z.transpose(0, 2, 3, 1, 4, 5)  # (O, oh, ow, C, kh, kw)
    parts = _redistribute(z, r, (3, 4, 5), rule).sum(axis=0)  # (oh, ow, C, kh, kw)
    return nn.conv_scatter(parts.transpose(2, 0, 1, 3, 4), layer, x.shape)


def lrp_relevance(trace: nn.ActivationTrace, class_index: int, variant) -> RelevanceMap:
    """Redistribute ``f_c(x)`` layer by layer down to the input.

    Contributions are ``z_ij = x_i * w_ij`` (biases excluded). Max-pool layers
    hand each cell's relevance to the recorded winner, ReLU and Flatten pass it
    through unchanged.
    """
    if not isinstance(variant, (LrpEpsilon, LrpAlphaBeta)):
        raise InvalidMethodParams(f"not an LRP variant: {variant!r}")
    model = trace.model
    r = nn.output_seed(trace, class_index, float(trace.scores[class_index]))
    for i in reversed(range(len(model.layers))):
        layer, x = model.layers[i], trace.inputs[i]
        if isinstance(layer, nn.Dense):
            r = lrp_dense(layer, x, r, variant)
        elif isinstance(layer, nn.Conv2D):
            r = lrp_conv(layer, x, r, variant)
        elif isinstance(layer, nn.MaxPool2D):
            r = nn.maxpool_route(r, trace.winners[i], x.shape)
        elif isinstance(layer, nn.Flatten):
            r = r.reshape(x.shape)
        # ReLU: unchanged
    return _relevance_map(r, class_index, variant)


# --- dispatch and post-processing -----------------------------------------------


def relevance_from_trace(trace: nn.ActivationTrace, class_index: int, method) -> RelevanceMap:
    if isinstance(method, Gradient):
        return gradient_relevance(trace, class_index)
    if isinstance(method, Deconvolution):
        return deconv_relevance(trace, class_index, method.relu)
    if isinstance(method, (LrpEpsilon, LrpAlphaBeta)):
        return lrp_relevance(trace, class_index, method)
    raise InvalidMethodParams(f"unknown attribution method {method!r}")


def attribute(model: nn.NetworkModel, x, class_index: int, method) -> RelevanceMap:
    """Forward ``x`` through ``model`` and explain score ``class_index`` with ``method``."""
    if not isinstance(method, (Gradient, Deconvolution, LrpEpsilon, LrpAlphaBeta)):
        raise InvalidMethodParams(f"unknown attribution method {method!r}")
    if not 0 <= class_index < model.num_classes:
        raise IndexError(f"class_index {class_index} out of range for {model.num_classes} classes")
    _, trace = nn.forward(model, x)
    return relevance_from_trace(trace, class_index, method)


def aggregate_subpixels(rmap: RelevanceMap, mode) -> Heatmap:
    """Collapse the channel axis of a (C, H, W) relevance map.

    ``sum`` adds channels, ``negsum`` returns the magnitude of the negative
    channel mass and ``l2`` the Euclidean norm over channels. A 1-D map is
    treated as a single row of single-channel pixels.
    """
    mode = AggregationMode(mode)
    v = rmap.scores
    if v.ndim == 1:
        v = v[None, None, :]
    elif v.ndim != 3:
        raise ValueError(f"cannot aggregate a map of shape {v.shape}")
    if mode is AggregationMode.SUM:
        s = v.sum(axis=0)
    elif mode is AggregationMode.NEGATIVE_SUM:
        s = -np.minimum(v, 0.0).sum(axis=0)
    else:
        s = np.sqrt((v * v).sum(axis=0))
    return Heatmap(s, rmap.class_index)


def rectify(heatmap: Heatmap) -> Heatmap:
    return Heatmap(np.maximum(heatmap.scores, 0.0), heatmap.class_index)


@dataclass(frozen=True)
class HeatmapRecipe:
    """A method plus the post-processing that turns its map into a heatmap."""

    method: AttributionMethod
    aggregation: AggregationMode = AggregationMode.SUM
    rectify: bool = True

    def __post_init__(self):
        object.__setattr__(self, "aggregation", AggregationMode(self.aggregation))

    @property
    def label(self) -> str:
        return self.method.label

    def apply(self, trace: nn.ActivationTrace, class_index: int) -> Heatmap:
        h = aggregate_subpixels(relevance_from_trace(trace, class_index, self.method), self.aggregation)
        return rectify(h) if self.rectify else h


def standard_recipes() -> list[HeatmapRecipe]:
    """Method/aggregation pairings used for boundary prediction.

    Gradient and deconvolution use the negative-sum aggregation, LRP variants
    plain channel sums; every heatmap is rectified.
    """
    neg = AggregationMode.NEGATIVE_SUM
    return [
        HeatmapRecipe(Gradient(), neg),
        HeatmapRecipe(Deconvolution(), neg),
        HeatmapRecipe(LrpAlphaBeta(1.0, 0.0)),
        HeatmapRecipe(LrpAlphaBeta(2.0, -1.0)),
        HeatmapRecipe(LrpEpsilon(1.0)),
        HeatmapRecipe(LrpEpsilon(0.01)),
    ]
