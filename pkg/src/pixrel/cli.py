"""``pixrel`` command line: synth, info, attribute, evaluate, perturb.

Directory conventions::

    images/<id>.ppm                     input images (P6, or P5 grayscale)
    gt/<id>/<class>.pgm                 boundary ground truth, nonzero = boundary
    <attribute out>/manifest.json       every parameter, hash and seed of the run
    <attribute out>/heatmaps/<id>/<class>.csv|.pgm

Exit status is 0 only when every requested output was written.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from . import __version__
from . import attribution as attr
from . import evaluation as ev
from . import io as pio
from . import network as nn
from . import perturbation as pt
from .errors import InvalidMethodParams, IoError, MissingGroundTruth, PixrelError
from .fixtures import SHAPES, FixtureSpec, generate_fixture

SEED_ENV = "PIXREL_SEED"
IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise PixrelError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def _image_paths(specs) -> list[Path]:
    out = []
    for spec in specs:
        p = Path(spec)
        if p.is_dir():
            out += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        elif p.exists():
            out.append(p)
        else:
            raise IoError(f"no such image or directory: {p}")
    ids = [p.stem for p in out]
    if len(set(ids)) != len(ids):
        raise PixrelError("image ids (file stems) must be unique")
    return sorted(out, key=lambda p: p.stem)


def _load_gt_dir(gt_dir, image_ids=None) -> dict:
    gts = {}
    root = Path(gt_dir)
    if not root.is_dir():
        raise IoError(f"ground-truth directory not found: {root}")
    for d in sorted(root.iterdir()):
        if not d.is_dir() or (image_ids is not None and d.name not in image_ids):
            continue
        for f in sorted(d.glob("*.pgm")):
            gts[(d.name, f.stem)] = pio.load_boundary_gt(f, f.stem)
    return gts


# --- method parsing ---------------------------------------------------------------


def method_from_args(args):
    try:
        if args.method == "gradient":
            return attr.Gradient()
        if args.method == "deconv":
            return attr.Deconvolution(args.deconv_relu)
        if args.method == "lrp-eps":
            return attr.LrpEpsilon(args.eps)
        return attr.LrpAlphaBeta(args.alpha, args.beta)
    except InvalidMethodParams as e:
        raise argparse.ArgumentTypeError(str(e)) from e


def _default_agg(method) -> str:
    return "negsum" if isinstance(method, (attr.Gradient, attr.Deconvolution)) else "sum"


# --- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = FixtureSpec(size=args.size, classes=tuple(args.classes), min_shape=args.min_shape,
                       max_shape=args.max_shape, noise=args.noise, count=args.count,
                       negatives=args.negatives, seed=_seed(args))
    fx = generate_fixture(spec, args.out)
    print(f"wrote {len(fx.images)} images, {len(fx.gts)} ground-truth maps and model.pxm to {args.out}")
    return 0


def cmd_info(args) -> int:
    model = pio.load_model(args.model)
    print(f"model {args.model}  sha256 {pio.file_sha256(args.model)}")
    print(f"classes: {' '.join(model.class_names)}")
    print(f"input {model.input_shape}")
    total = 0
    for row in nn.layer_summary(model):
        total += row["params"]
        print(f"  [{row['index']}] {row['kind']:<10} {row['input']} -> {row['output']}  params={row['params']}")
    print(f"total parameters: {total}")
    return 0


def _attribute_one(model, recipe, path, class_sel, tau):
    image = pio.load_image(path)
    scores, trace = nn.forward(model, image)
    if class_sel == "predicted":
        chosen = [c for c in range(model.num_classes) if scores[c] >= tau]
    else:
        chosen = [model.class_index(class_sel)]
    maps = [(model.class_names[c], recipe.apply(trace, c)) for c in chosen]
    return path, scores, maps


def cmd_attribute(args) -> int:
    method = method_from_args(args)
    recipe = attr.HeatmapRecipe(method, args.agg or _default_agg(method), args.rectify)
    model = pio.load_model(args.model)
    if args.class_ != "predicted":
        model.class_index(args.class_)
    paths = _image_paths(args.images)
    out = Path(args.out)

    def run(p):
        return _attribute_one(model, recipe, p, args.class_, args.tau)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run, paths))
    else:
        results = [run(p) for p in paths]

    records = []
    for path, scores, maps in results:
        rec = {
            "id": path.stem,
            "file": path.name,
            "sha256": pio.file_sha256(path),
            "scores": {n: float(s) for n, s in zip(model.class_names, scores)},
            "classes": [name for name, _ in maps],
            "outputs": [],
        }
        if not maps:
            rec["note"] = "no classes above threshold"
        for name, hm in maps:
            d = out / "heatmaps" / path.stem
            d.mkdir(parents=True, exist_ok=True)
            for fmt in ("csv", "pgm"):
                pio.save_heatmap(hm, d / f"{name}.{fmt}", fmt)
                rec["outputs"].append(f"heatmaps/{path.stem}/{name}.{fmt}")
        records.append(rec)

    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool": "pixrel",
        "version": __version__,
        "command": "attribute",
        "model": {"file": Path(args.model).name, "sha256": pio.file_sha256(args.model)},
        "method": {
            "label": recipe.label,
            "kind": args.method,
            "epsilon": getattr(method, "epsilon", None),
            "alpha": getattr(method, "alpha", None),
            "beta": getattr(method, "beta", None),
            "deconv_relu": getattr(method, "relu", None),
        },
        "aggregation": recipe.aggregation.value,
        "rectify": recipe.rectify,
        "class": args.class_,
        "tau": args.tau,
        "seed": _seed(args),
        "images": records,
    }
    pio.write_text_atomic(out / "manifest.json", _dump_json(manifest))
    n = sum(len(r["classes"]) for r in records)
    print(f"{recipe.label}: {n} heatmaps for {len(records)} images -> {out}")
    return 0


def load_heatmap_dir(d) -> tuple[str, dict]:
    """Method label and ``{(image_id, class): Heatmap}`` from an attribute output dir."""
    d = Path(d)
    label = d.name
    mf = d / "manifest.json"
    if mf.exists():
        try:
            label = json.loads(mf.read_text())["method"]["label"]
        except (ValueError, KeyError) as e:
            raise IoError(f"bad manifest {mf}: {e}") from e
    root = d / "heatmaps"
    if not root.is_dir():
        raise IoError(f"no heatmaps/ directory under {d}")
    maps = {}
    for img_dir in sorted(root.iterdir()):
        if img_dir.is_dir():
            for f in sorted(img_dir.glob("*.csv")):
                maps[(img_dir.name, f.stem)] = pio.load_heatmap(f)
    return label, maps


def _unique_labels(dirs) -> dict:
    loaded = {}
    for d in dirs:
        label, maps = load_heatmap_dir(d)
        if label in loaded:
            raise PixrelError(f"two heatmap directories share the method label {label!r}")
        loaded[label] = maps
    return loaded


def cmd_evaluate(args) -> int:
    loaded = _unique_labels(args.heatmaps)
    gts = _load_gt_dir(args.gt)
    tables = {}
    for label, maps in loaded.items():
        matched = {}
        for key, hm in maps.items():
            if key not in gts:
                raise MissingGroundTruth(*key)
            g = gts[key]
            if g.shape != hm.shape:
                g = ev.BoundaryMap(pt.resize_nearest(g.mask, hm.shape), g.label)
            matched[key] = g
        tables[label] = ev.evaluate_dataset(maps, matched, args.radius, num_thresholds=args.num_thresholds)
    text = pio.evaluation_tsv(tables)
    _emit(text, args.out)
    return 0


def cmd_perturb(args) -> int:
    model = pio.load_model(args.model)
    paths = {p.stem: p for p in _image_paths(args.images)}
    gts = _load_gt_dir(args.gt, set(paths))
    loaded = _unique_labels(args.heatmaps or [])
    for label, maps in loaded.items():
        for key in gts:
            if key not in maps:
                raise IoError(f"{label}: missing heatmap for image {key[0]!r}, class {key[1]!r}")
    images = {i: pio.load_image(paths[i]) for i in sorted({k[0] for k in gts})}
    spec = pt.PerturbationSpec(pt.parse_distribution(args.dist), args.reps, _seed(args))
    table = pt.gt_vs_method_study(model, images, gts, loaded, spec, jobs=args.jobs)
    text = pio.study_tsv(table)
    _emit(text, args.out)
    if args.out:
        meta = {
            "tool": "pixrel",
            "version": __version__,
            "command": "perturb",
            "model": {"file": Path(args.model).name, "sha256": pio.file_sha256(args.model)},
            "distribution": spec.distribution.describe(),
            "repetitions": spec.repetitions,
            "seed": spec.seed,
            "rng": pt.RNG_ALGORITHM,
            "pairs": [list(k) for k in sorted(gts)],
            "methods": list(loaded),
            "gt_thickening": 1,
        }
        pio.write_text_atomic(Path(str(args.out) + ".json"), _dump_json(meta))
    return 0


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        pio.write_text_atomic(out, text)
    else:
        sys.stdout.write(text)


# --- parser -------------------------------------------------------------------------


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pixrel", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"pixrel {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic fixture tree")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--negatives", type=int, default=0)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--classes", nargs="+", default=["square"], choices=SHAPES)
    s.add_argument("--min-shape", type=int, default=10)
    s.add_argument("--max-shape", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.02)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("info", help="print a model's shape chain and parameter counts")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("attribute", help="compute heatmaps")
    s.add_argument("--model", required=True)
    s.add_argument("--images", nargs="+", required=True)
    s.add_argument("--class", dest="class_", default="predicted",
                   help="class label, or 'predicted' for every class scoring >= tau")
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--method", required=True, choices=["gradient", "deconv", "lrp-eps", "lrp-ab"])
    s.add_argument("--eps", type=float, default=0.0)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--deconv-relu", choices=["pass", "rectify"], default="pass")
    s.add_argument("--agg", choices=[m.value for m in attr.AggregationMode],
                   help="default: negsum for gradient/deconv, sum for LRP")
    s.add_argument("--rectify", action="store_true", help="clip negative pixel scores to zero")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.add_argument("--seed", type=int, help="recorded only; attribution is deterministic")
    s.set_defaults(func=cmd_attribute)

    s = sub.add_parser("evaluate", help="AP / maximal F-score of heatmaps against boundaries")
    s.add_argument("--heatmaps", nargs="+", required=True, help="attribute output directories")
    s.add_argument("--gt", required=True)
    s.add_argument("--radius", type=float, default=ev.DEFAULT_RADIUS)
    s.add_argument("--num-thresholds", type=_positive_int, default=ev.DEFAULT_NUM_THRESHOLDS)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("perturb", help="ground truth vs. top-scoring pixel perturbation study")
    s.add_argument("--model", required=True)
    s.add_argument("--images", nargs="+", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--heatmaps", nargs="*", default=[])
    s.add_argument("--dist", default="uniform01")
    s.add_argument("--reps", type=_positive_int, default=pt.DEFAULT_REPETITIONS)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--jobs", type=_positive_int, default=1)
    s.set_defaults(func=cmd_perturb)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "attribute":
        try:
            method_from_args(args)
        except argparse.ArgumentTypeError as e:
            parser.error(str(e))
    if args.command == "perturb":
        try:
            pt.parse_distribution(args.dist)
        except ValueError as e:
            parser.error(str(e))
    try:
        return args.func(args)
    except (PixrelError, KeyError, ValueError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"pixrel {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
