"""File formats: model files, portable pixmaps, heatmap CSV and report tables.

Model file (text manifest, UTF-8)::

    pixrel-model 1
    input_shape 3 32 32
    classes square disc
    layers 5
    conv2d out=2 in=3 kh=2 kw=2 stride=1,1 padding=0,0
    relu
    maxpool2d window=2,2 stride=2,2
    flatten
    dense out=2 in=450
    weights inline 7424
    <base64, 76 characters per line>
    end

``weights`` is followed by ``inline <nbytes>`` or ``file <name> <nbytes>`` (a
sidecar next to the manifest). The blob holds little-endian float64 values:
for each dense/conv layer in order, its weights then its bias, row-major.
Dense weights are (out, in); conv filters (out, in, kh, kw).

Heatmap CSV: a ``rows,cols`` header line, a line with the two sizes, then one
line per row of ``%.17g`` values.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import os
import re
from pathlib import Path

import numpy as np

from . import network as nn
from .attribution import Heatmap
from .errors import IoError, ParseError, UnsupportedMaxval, UnsupportedVersion
from .evaluation import BoundaryMap

MODEL_MAGIC = "pixrel-model"
MODEL_VERSION = 1
_B64_LINE = 76


# --- models -------------------------------------------------------------------


def _layer_descriptor(layer) -> str:
    if isinstance(layer, nn.Dense):
        o, i = layer.weights.shape
        return f"dense out={o} in={i}"
    if isinstance(layer, nn.Conv2D):
        o, i, kh, kw = layer.filters.shape
        (sh, sw), (ph, pw) = layer.stride, layer.padding
        return f"conv2d out={o} in={i} kh={kh} kw={kw} stride={sh},{sw} padding={ph},{pw}"
    if isinstance(layer, nn.MaxPool2D):
        (kh, kw), (sh, sw) = layer.window, layer.stride
        return f"maxpool2d window={kh},{kw} stride={sh},{sw}"
    if isinstance(layer, nn.ReLU):
        return "relu"
    if isinstance(layer, nn.Flatten):
        return "flatten"
    raise TypeError(f"cannot serialise layer {type(layer).__name__}")


def _weight_blob(model: nn.NetworkModel) -> bytes:
    parts = []
    for layer in model.layers:
        for p in nn._layer_params(layer):
            parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return b"".join(parts)


def model_to_text(model: nn.NetworkModel, sidecar: str | None = None) -> tuple[str, bytes]:
    """Serialise ``model``; returns the manifest text and the raw weight blob."""
    nn.validate_model(model)
    for name in model.class_names:
        if not name or re.search(r"\s", name):
            raise ValueError(f"class names must be non-empty and whitespace-free: {name!r}")
    blob = _weight_blob(model)
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        "input_shape " + " ".join(str(d) for d in model.input_shape),
        "classes " + " ".join(model.class_names),
        f"layers {len(model.layers)}",
    ]
    lines += [_layer_descriptor(layer) for layer in model.layers]
    if sidecar is None:
        lines.append(f"weights inline {len(blob)}")
        enc = base64.b64encode(blob).decode("ascii")
        lines += [enc[i:i + _B64_LINE] for i in range(0, len(enc), _B64_LINE)]
    else:
        lines.append(f"weights file {sidecar} {len(blob)}")
    lines.append("end")
    return "\n".join(lines) + "\n", blob


def save_model(model: nn.NetworkModel, path, sidecar: bool = False) -> None:
    path = Path(path)
    side_name = path.name + ".bin" if sidecar else None
    text, blob = model_to_text(model, side_name)
    try:
        if sidecar:
            (path.parent / side_name).write_bytes(blob)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot write model {path}: {e}") from e


def _kv(tokens, line_no, names):
    vals = {}
    for tok in tokens:
        k, sep, v = tok.partition("=")
        if not sep:
            raise ParseError(f"expected key=value, got {tok!r}", line=line_no)
        vals[k] = v
    missing = set(names) - set(vals)
    extra = set(vals) - set(names)
    if missing or extra:
        raise ParseError(f"layer fields {sorted(vals)} do not match {sorted(names)}", line=line_no)
    try:
        return {k: tuple(int(a) for a in vals[k].split(",")) for k in names}
    except ValueError:
        raise ParseError(f"non-integer layer field in {' '.join(tokens)!r}", line=line_no) from None


def _parse_layer(line: str, line_no: int):
    """Return ``(kind, fields)``; parameters are filled in from the blob later."""
    tokens = line.split()
    kind, rest = tokens[0], tokens[1:]
    if kind in ("relu", "flatten"):
        if rest:
            raise ParseError(f"{kind} takes no fields", line=line_no)
        return kind, {}
    if kind == "dense":
        return kind, _kv(rest, line_no, ["out", "in"])
    if kind == "conv2d":
        return kind, _kv(rest, line_no, ["out", "in", "kh", "kw", "stride", "padding"])
    if kind == "maxpool2d":
        return kind, _kv(rest, line_no, ["window", "stride"])
    raise UnsupportedVersion(f"unsupported layer kind {kind!r} (line {line_no})")


def _param_shapes(kind, f):
    if kind == "dense":
        return [(f["out"][0], f["in"][0]), (f["out"][0],)]
    if kind == "conv2d":
        return [(f["out"][0], f["in"][0], f["kh"][0], f["kw"][0]), (f["out"][0],)]
    return []


def _build_layer(kind, f, params):
    try:
        if kind == "dense":
            return nn.Dense(*params)
        if kind == "conv2d":
            return nn.Conv2D(params[0], params[1], f["stride"], f["padding"])
        if kind == "maxpool2d":
            return nn.MaxPool2D(f["window"], f["stride"])
    except ValueError as e:
        raise ParseError(f"invalid {kind} layer: {e}") from e
    return nn.ReLU() if kind == "relu" else nn.Flatten()


def model_from_text(text: str, base_dir=None) -> nn.NetworkModel:
    lines = text.splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines):
            pos += 1
            s = lines[pos - 1].strip()
            if s and not s.startswith("#"):
                return s, pos
        raise ParseError("unexpected end of model file", line=pos)

    head, ln = next_line()
    parts = head.split()
    if len(parts) != 2 or parts[0] != MODEL_MAGIC:
        raise ParseError(f"not a pixrel model file (header {head!r})", line=ln)
    if parts[1] != str(MODEL_VERSION):
        raise UnsupportedVersion(f"model format version {parts[1]!r}; this reader supports {MODEL_VERSION}")

    def keyed(key):
        s, ln = next_line()
        toks = s.split()
        if toks[0] != key:
            raise ParseError(f"expected {key!r}, got {toks[0]!r}", line=ln)
        return toks[1:], ln

    toks, ln = keyed("input_shape")
    try:
        input_shape = tuple(int(t) for t in toks)
    except ValueError:
        raise ParseError("input_shape must be integers", line=ln) from None
    class_names, _ = keyed("classes")
    toks, ln = keyed("layers")
    try:
        (n_layers,) = (int(t) for t in toks)
    except ValueError:
        raise ParseError("layers takes one integer", line=ln) from None
    specs = [_parse_layer(*next_line()) for _ in range(n_layers)]

    toks, ln = keyed("weights")
    if len(toks) == 2 and toks[0] == "inline":
        mode, declared = "inline", toks[1]
    elif len(toks) == 3 and toks[0] == "file":
        mode, side, declared = "file", toks[1], toks[2]
    else:
        raise ParseError("weights line must be 'inline <n>' or 'file <name> <n>'", line=ln)
    try:
        declared = int(declared)
    except ValueError:
        raise ParseError("weight byte count must be an integer", line=ln) from None

    if mode == "inline":
        chunks = []
        while True:
            s, ln = next_line()
            if s == "end":
                break
            chunks.append(s)
        try:
            blob = base64.b64decode("".join(chunks), validate=True)
        except (binascii.Error, ValueError) as e:
            raise ParseError(f"bad base64 weight data: {e}", line=ln) from e
    else:
        side_path = Path(base_dir or ".") / side
        try:
            blob = side_path.read_bytes()
        except OSError as e:
            raise IoError(f"cannot read weight sidecar {side_path}: {e}") from e
        s, ln = next_line()
        if s != "end":
            raise ParseError(f"expected 'end', got {s!r}", line=ln)

    shapes = [_param_shapes(kind, f) for kind, f in specs]
    needed = 8 * sum(int(np.prod(s)) for group in shapes for s in group)
    if declared != needed:
        raise ParseError(f"declared {declared} weight bytes but layers need {needed}", line=ln)
    if len(blob) < declared:
        raise ParseError(f"weight blob truncated: {len(blob)} of {declared} bytes", offset=len(blob))
    if len(blob) > declared:
        raise ParseError(f"weight blob has {len(blob) - declared} trailing bytes", offset=declared)

    layers, off = [], 0
    for (kind, f), group in zip(specs, shapes):
        params = []
        for shp in group:
            n = int(np.prod(shp))
            params.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shp))
            off += 8 * n
        layers.append(_build_layer(kind, f, params))
    model = nn.NetworkModel(input_shape, tuple(layers), tuple(class_names))
    nn.validate_model(model)
    return model


def load_model(path) -> nn.NetworkModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise IoError(f"cannot read model {path}: {e}") from e
    return model_from_text(text, base_dir=path.parent)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# --- portable any-map -------------------------------------------------------------


def parse_pnm(data: bytes) -> tuple[str, np.ndarray]:
    """Decode binary P5/P6 bytes into ``(magic, uint8 array (C, H, W))``."""
    pos = 0
    fields = []
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated pixmap header", offset=pos)
        fields.append(data[start:pos])
    magic = fields[0].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise ParseError(f"unsupported pixmap magic {magic!r}; expected P5 or P6", offset=0)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ParseError("non-integer pixmap header field", offset=pos) from None
    if width < 1 or height < 1:
        raise ParseError(f"bad pixmap size {width}x{height}", offset=pos)
    if maxval != 255:
        raise UnsupportedMaxval(f"maxval {maxval} not supported (only 255)")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after pixmap header", offset=pos)
    pos += 1
    channels = 3 if magic == "P6" else 1
    n = width * height * channels
    raster = data[pos:pos + n]
    if len(raster) < n:
        raise ParseError(f"pixmap raster truncated: {len(raster)} of {n} bytes", offset=pos + len(raster))
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return magic, arr.transpose(2, 0, 1).copy()


def encode_pnm(arr: np.ndarray) -> bytes:
    """Encode a uint8 array (C, H, W) with C in {1, 3} as binary P5/P6."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected uint8 (1|3, H, W), got {arr.dtype} {arr.shape}")
    c, h, w = arr.shape
    magic = "P6" if c == 3 else "P5"
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    return header + arr.transpose(1, 2, 0).tobytes()


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e


def _write(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_image(path) -> np.ndarray:
    """Load a P6 (or P5) image as float64 (C, H, W) with values in [0, 1]."""
    _, arr = parse_pnm(_read(path))
    return arr.astype(np.float64) / 255.0


def image_to_bytes(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image, path) -> None:
    _write(path, encode_pnm(image_to_bytes(image)))


def render_heatmap(heatmap) -> np.ndarray:
    """Min-max normalise to uint8 (H, W); a constant map renders as 128."""
    s = heatmap.scores if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi == lo:
        return np.full(s.shape, 128, dtype=np.uint8)
    return np.rint((s - lo) / (hi - lo) * 255.0).astype(np.uint8)


def heatmap_to_csv(heatmap) -> str:
    s = heatmap.scores if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    rows, cols = s.shape
    lines = ["rows,cols", f"{rows},{cols}"]
    lines += [",".join("%.17g" % v for v in row) for row in s.tolist()]
    return "\n".join(lines) + "\n"


def heatmap_from_csv(text: str, class_index: int = -1) -> Heatmap:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or lines[0].strip() != "rows,cols":
        raise ParseError("heatmap CSV must start with a 'rows,cols' header", line=1)
    try:
        rows, cols = (int(a) for a in lines[1].split(","))
    except ValueError:
        raise ParseError("bad heatmap size line", line=2) from None
    if len(lines) - 2 != rows:
        raise ParseError(f"expected {rows} data rows, found {len(lines) - 2}", line=len(lines))
    data = np.empty((rows, cols))
    for i, ln in enumerate(lines[2:]):
        vals = ln.split(",")
        if len(vals) != cols:
            raise ParseError(f"expected {cols} values, found {len(vals)}", line=i + 3)
        try:
            data[i] = [float(v) for v in vals]
        except ValueError:
            raise ParseError("non-numeric heatmap value", line=i + 3) from None
    return Heatmap(data, class_index)


def save_heatmap(heatmap, path, format: str | None = None) -> None:
    """Write ``heatmap`` as ``pgm`` (8-bit render) or ``csv`` (full precision)."""
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    if fmt in ("pgm", "portable-pixmap", "p5"):
        _write(path, encode_pnm(render_heatmap(heatmap)[None]))
    elif fmt == "csv":
        _write(path, heatmap_to_csv(heatmap).encode("ascii"))
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")


def load_heatmap(path, class_index: int = -1) -> Heatmap:
    return heatmap_from_csv(_read(path).decode("ascii"), class_index)


def load_boundary_gt(path, label: str | None = None) -> BoundaryMap:
    """Binary boundary map from a P5 (or P6) file; any nonzero sample marks a boundary."""
    _, arr = parse_pnm(_read(path))
    return BoundaryMap(arr.max(axis=0) > 0, Path(path).stem if label is None else label)


def save_boundary_gt(bmap: BoundaryMap, path) -> None:
    _write(path, encode_pnm((bmap.mask.astype(np.uint8) * 255)[None]))


# --- report tables ---------------------------------------------------------------


def _num(v: float) -> str:
    return repr(float(v))


def evaluation_tsv(tables: dict) -> str:
    """``method  class  AP  MF`` rows: per method (in given order) its classes, then ``mean``."""
    lines = ["method\tclass\tAP\tMF"]
    for method, table in tables.items():
        for cls, res in table.per_class.items():
            lines.append(f"{method}\t{cls}\t{_num(res.ap)}\t{_num(res.mf)}")
        lines.append(f"{method}\tmean\t{_num(table.mean_ap)}\t{_num(table.mean_mf)}")
    return "\n".join(lines) + "\n"


def study_tsv(table) -> str:
    lines = ["method\tf\tm\tstd"]
    lines += [f"{r.method}\t{_num(r.f)}\t{_num(r.m)}\t{_num(r.std)}" for r in table.rows]
    return "\n".join(lines) + "\n"


def read_tsv(path) -> list[dict]:
    lines = _read(path).decode("utf-8").splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, ln.split("\t"))) for ln in lines[1:] if ln]


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
