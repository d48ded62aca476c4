"""Feed-forward inference for small dense/conv/pool networks.

Supported layers are ``Dense``, ``Conv2D``, ``MaxPool2D``, ``ReLU`` and
``Flatten``. Tensors are plain float64 numpy arrays; convolutional layers
use channel-first ``(channels, height, width)`` layout and a network consumes
one image at a time.

``forward`` records an :class:`ActivationTrace` (every layer's input and
output plus the max-pool winners) which is the starting point for all of the
backward passes in :mod:`pixrel.attribution`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch, TraceMismatch


def as_tensor(data, shape=None) -> np.ndarray:
    """Return a read-only float64 copy of ``data``, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    arr.setflags(write=False)
    return arr


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v), int(v))
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True, eq=False)
class Dense:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w = as_tensor(self.weights)
        b = as_tensor(self.bias)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"Dense weights {w.shape} and bias {b.shape} are inconsistent")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True, eq=False)
class Conv2D:
    filters: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        f = as_tensor(self.filters)
        b = as_tensor(self.bias)
        if f.ndim != 4 or b.shape != (f.shape[0],):
            raise ValueError(f"Conv2D filters {f.shape} and bias {b.shape} are inconsistent")
        stride, padding = _pair(self.stride), _pair(self.padding)
        if min(stride) < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if min(padding) < 0:
            raise ValueError(f"padding must be >= 0, got {padding}")
        object.__setattr__(self, "filters", f)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "padding", padding)


@dataclass(frozen=True)
class MaxPool2D:
    window: tuple[int, int] = (2, 2)
    stride: tuple[int, int] = (2, 2)

    def __post_init__(self):
        window, stride = _pair(self.window), _pair(self.stride)
        if min(window) < 1 or min(stride) < 1:
            raise ValueError(f"window and stride must be >= 1, got {window}, {stride}")
        object.__setattr__(self, "window", window)
        object.__setattr__(self, "stride", stride)


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv2D, MaxPool2D, ReLU, Flatten]


def _layer_params(layer) -> list[np.ndarray]:
    if isinstance(layer, Dense):
        return [layer.weights, layer.bias]
    if isinstance(layer, Conv2D):
        return [layer.filters, layer.bias]
    return []


@dataclass(frozen=True, eq=False)
class NetworkModel:
    input_shape: tuple[int, ...]
    layers: tuple
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}; model has {list(self.class_names)}") from None

    def fingerprint(self) -> str:
        """SHA-256 over structure and the exact bytes of every parameter."""
        h = hashlib.sha256()
        h.update(repr((self.input_shape, self.class_names)).encode())
        for layer in self.layers:
            h.update(type(layer).__name__.encode())
            if isinstance(layer, (Conv2D, MaxPool2D)):
                h.update(repr((getattr(layer, "stride", None), getattr(layer, "padding", None),
                               getattr(layer, "window", None))).encode())
            for p in _layer_params(layer):
                h.update(repr(p.shape).encode())
                h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, NetworkModel):
            return NotImplemented
        return self.fingerprint() == other.fingerprint()

    def __hash__(self):
        return hash(self.fingerprint())


def layer_output_shape(layer, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    """Shape produced by ``layer`` from an input of ``shape``; raises ShapeMismatch."""
    if isinstance(layer, Dense):
        n_out, n_in = layer.weights.shape
        if shape != (n_in,):
            raise ShapeMismatch(index, (n_in,), shape)
        return (n_out,)
    if isinstance(layer, Conv2D):
        out_ch, in_ch, kh, kw = layer.filters.shape
        if len(shape) != 3 or shape[0] != in_ch:
            raise ShapeMismatch(index, (in_ch, "H", "W"), shape)
        (ph, pw), (sh, sw) = layer.padding, layer.stride
        h, w = shape[1] + 2 * ph, shape[2] + 2 * pw
        if h < kh or w < kw:
            raise ShapeMismatch(index, f"spatial >= {(kh, kw)}", shape, "filter larger than padded input")
        return (out_ch, (h - kh) // sh + 1, (w - kw) // sw + 1)
    if isinstance(layer, MaxPool2D):
        (kh, kw), (sh, sw) = layer.window, layer.stride
        if len(shape) != 3:
            raise ShapeMismatch(index, ("C", "H", "W"), shape)
        if shape[1] < kh or shape[2] < kw:
            raise ShapeMismatch(index, f"spatial >= {(kh, kw)}", shape, "window larger than input")
        return (shape[0], (shape[1] - kh) // sh + 1, (shape[2] - kw) // sw + 1)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise TypeError(f"unsupported layer type {type(layer).__name__}")


def validate_model(model: NetworkModel) -> list[tuple[int, ...]]:
    """Return the shape chain ``[input, after layer 0, ...]`` of ``model``.

    Raises :class:`ShapeMismatch` naming the first inconsistent layer. A final
    output that is not a flat vector of ``len(class_names)`` entries is reported
    against index ``len(model.layers)``.
    """
    shape = model.input_shape
    if not shape or min(shape) < 1:
        raise ShapeMismatch(-1, "positive dimensions", shape, "input shape")
    chain = [shape]
    for i, layer in enumerate(model.layers):
        shape = layer_output_shape(layer, shape, i)
        chain.append(shape)
    if shape != (model.num_classes,):
        raise ShapeMismatch(len(model.layers), (model.num_classes,), shape, "network output vs class_names")
    return chain


def parameter_count(layer) -> int:
    return int(sum(p.size for p in _layer_params(layer)))


# --- layer kernels -----------------------------------------------------------

def conv_windows(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    """Receptive-field view of shape (in_ch, out_h, out_w, kh, kw), zero padded."""
    (ph, pw), (sh, sw) = layer.padding, layer.stride
    kh, kw = layer.filters.shape[2:]
    if ph or pw:
        x = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::sh, ::sw]


def conv_forward(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    win = conv_windows(x, layer)
    out = np.tensordot(layer.filters, win, axes=([1, 2, 3], [0, 3, 4]))
    return out + layer.bias[:, None, None]


def conv_scatter(cols: np.ndarray, layer: Conv2D, input_shape) -> np.ndarray:
    """Adjoint of :func:`conv_windows`: sum per-window contributions back onto the input.

    ``cols`` has shape (in_ch, out_h, out_w, kh, kw).
    """
    (ph, pw), (sh, sw) = layer.padding, layer.stride
    c, h, w = input_shape
    _, oh, ow, kh, kw = cols.shape
    acc = np.zeros((c, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            acc[:, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += cols[:, :, :, i, j]
    return acc[:, ph:ph + h, pw:pw + w]


def conv_transpose(g: np.ndarray, layer: Conv2D, input_shape) -> np.ndarray:
    """Multiply an output-shaped signal by the transposed filter bank."""
    cols = np.tensordot(layer.filters, g, axes=([0], [0]))  # (in, kh, kw, oh, ow)
    return conv_scatter(cols.transpose(0, 3, 4, 1, 2), layer, input_shape)


def maxpool_forward(x: np.ndarray, layer: MaxPool2D) -> tuple[np.ndarray, np.ndarray]:
    """Return pooled output and, per output cell, the flat (h*W + w) winner index."""
    (kh, kw), (sh, sw) = layer.window, layer.stride
    c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    oh, ow = win.shape[1:3]
    flat = win.reshape(c, oh, ow, kh * kw)
    local = np.argmax(flat, axis=-1)  # first maximum == smallest row-major index
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * sh + local // kw
    cols = np.arange(ow)[None, :] * sw + local % kw
    return out, rows * w + cols


def maxpool_route(g: np.ndarray, winners: np.ndarray, input_shape) -> np.ndarray:
    """Send each output cell's value to its recorded winner (summing on overlap)."""
    c, h, w = input_shape
    out = np.zeros((c, h * w))
    chan = np.broadcast_to(np.arange(c)[:, None, None], winners.shape)
    np.add.at(out, (chan.ravel(), winners.ravel()), g.ravel())
    return out.reshape(input_shape)


def apply_layer(layer, x: np.ndarray):
    """Return ``(output, winners_or_None)`` for a single layer."""
    if isinstance(layer, Dense):
        return layer.weights @ x + layer.bias, None
    if isinstance(layer, Conv2D):
        return conv_forward(x, layer), None
    if isinstance(layer, MaxPool2D):
        return maxpool_forward(x, layer)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0), None
    if isinstance(layer, Flatten):
        return x.reshape(-1), None
    raise TypeError(f"unsupported layer type {type(layer).__name__}")


# --- forward / backward ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ActivationTrace:
    model: NetworkModel
    inputs: tuple  # inputs[l] is what layer l consumed
    outputs: tuple  # outputs[l] is what layer l produced
    winners: dict = field(default_factory=dict)  # layer index -> flat winner indices

    @property
    def input(self) -> np.ndarray:
        return self.inputs[0]

    @property
    def scores(self) -> np.ndarray:
        return self.outputs[-1] if self.outputs else self.inputs[0]


def _check_input(model: NetworkModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeMismatch(-1, model.input_shape, x.shape, "network input")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite entries")
    return x


def forward(model: NetworkModel, x) -> tuple[np.ndarray, ActivationTrace]:
    """Evaluate ``model`` on a single input, recording every activation."""
    validate_model(model)
    x = _check_input(model, x).copy()
    inputs, outputs, winners = [], [], {}
    h = x
    for i, layer in enumerate(model.layers):
        inputs.append(h)
        h, win = apply_layer(layer, h)
        if win is not None:
            winners[i] = win
        outputs.append(h)
    for a in inputs + outputs:
        a.setflags(write=False)
    trace = ActivationTrace(model, tuple(inputs), tuple(outputs), winners)
    return trace.scores, trace


def predict(model: NetworkModel, x) -> np.ndarray:
    """Class scores only; same arithmetic as :func:`forward`, no trace kept."""
    h = _check_input(model, x)
    for layer in model.layers:
        h, _ = apply_layer(layer, h)
    return h


def check_trace(model: NetworkModel, trace: ActivationTrace) -> None:
    if trace.model is model:
        return
    if not isinstance(trace, ActivationTrace) or trace.model.fingerprint() != model.fingerprint():
        raise TraceMismatch("activation trace was not produced by this model")


def backward_layer(layer, g: np.ndarray, x_in: np.ndarray, winners=None) -> np.ndarray:
    """Chain-rule step: derivative w.r.t. the layer input given ``g`` at its output."""
    if isinstance(layer, Dense):
        return layer.weights.T @ g
    if isinstance(layer, Conv2D):
        return conv_transpose(g, layer, x_in.shape)
    if isinstance(layer, MaxPool2D):
        return maxpool_route(g, winners, x_in.shape)
    if isinstance(layer, ReLU):
        return g * (x_in > 0)
    if isinstance(layer, Flatten):
        return g.reshape(x_in.shape)
    raise TypeError(f"unsupported layer type {type(layer).__name__}")


def output_seed(trace: ActivationTrace, class_index: int, value: float = 1.0) -> np.ndarray:
    n = trace.model.num_classes
    if not 0 <= class_index < n:
        raise IndexError(f"class_index {class_index} out of range for {n} classes")
    g = np.zeros(n)
    g[class_index] = value
    return g


def input_gradient(model: NetworkModel, trace: ActivationTrace, class_index: int) -> np.ndarray:
    """Exact derivative of score ``class_index`` w.r.t. every input entry.

    ReLU backward uses the strict mask ``x > 0`` so the derivative at a
    pre-activation of exactly 0 is 0.
    """
    check_trace(model, trace)
    g = output_seed(trace, class_index)
    for i in reversed(range(len(model.layers))):
        g = backward_layer(model.layers[i], g, trace.inputs[i], trace.winners.get(i))
    return g


def layer_summary(model: NetworkModel) -> list[dict]:
    chain = validate_model(model)
    rows = []
    for i, layer in enumerate(model.layers):
        rows.append({
            "index": i,
            "kind": type(layer).__name__,
            "input": chain[i],
            "output": chain[i + 1],
            "params": parameter_count(layer),
        })
    return rows
