"""Command-line harness.

Exit codes: 0 success, 1 internal failure, 2 input or validation error.
Errors are printed as a single ``grasprefine: error: <kind>: <message>`` line.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import datasets, evaluation, refinement
from .evaluation import MetricConfig
from .geometry import OrientedRect, axis_aligned_iou, rotated_iou

PROG = "grasprefine"


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def _float_list(text: str) -> list:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _metric_args(p):
    p.add_argument("--iou-threshold", type=float, default=0.25)
    p.add_argument("--angle-threshold", type=float, default=30.0, help="degrees")
    p.add_argument("--axis-aligned", action="store_true", help="IoU of axis-aligned hulls")
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)


def _noise_args(p):
    d = refinement.Noise()
    p.add_argument("--num-scenes", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-xy", type=float, default=d.xy)
    p.add_argument("--noise-w", type=float, default=d.w)
    p.add_argument("--noise-h", type=float, default=d.h)
    p.add_argument("--noise-theta", type=float, default=math.degrees(d.theta), help="degrees")
    p.add_argument("--candidates-per-grasp", type=int, default=refinement.DEFAULT_CANDIDATES_PER_GRASP)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of option defaults; flags override")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval", help="grasp accuracy report")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out-dir", required=True)
    _metric_args(p)
    p.add_argument("--sweep-iou", type=_float_list, default=list(evaluation.DEFAULT_IOUS))
    p.add_argument("--sweep-angle", type=_float_list, default=list(evaluation.DEFAULT_ANGLES_DEG))
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("sweep", help="accuracy grid over IoU and angle thresholds")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--iou", type=_float_list, default=list(evaluation.DEFAULT_IOUS))
    p.add_argument("--angle", type=_float_list, default=list(evaluation.DEFAULT_ANGLES_DEG), help="degrees")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--figure", help="optional PNG path")
    p.add_argument("--axis-aligned", action="store_true")
    p.add_argument("--top-k", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("refine", help="train or apply the refinement head")
    rsub = p.add_subparsers(dest="mode", required=True, parser_class=_Parser)
    t = rsub.add_parser("train")
    _noise_args(t)
    d = refinement.TrainConfig()
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--momentum", type=float, default=d.momentum)
    t.add_argument("--no-nesterov", action="store_true")
    t.add_argument("--batch-size", type=int, default=d.batch_size)
    t.add_argument("--hidden", type=int, default=d.hidden)
    t.add_argument("--crop", type=int, default=d.crop_h)
    t.add_argument("--weight-decay", type=float, default=d.weight_decay)
    t.add_argument("--axis-aligned-crop", action="store_true")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--params", required=True, help="output parameter file")
    t.add_argument("--curve", help="output loss CSV")
    t.add_argument("--figure", help="output loss-curve PNG")
    a = rsub.add_parser("apply")
    _noise_args(a)
    a.add_argument("--params", required=True)
    a.add_argument("--pred", help="canonical candidates; requires --maps")
    a.add_argument("--maps", help=".npz with one HxWxS probability map per image id")
    a.add_argument("--crop", type=int, default=d.crop_h)
    a.add_argument("--axis-aligned-crop", action="store_true")
    a.add_argument("--out", required=True, help="refined canonical predictions")
    a.add_argument("--gt-out", help="synthetic mode: write ground truth here")
    a.add_argument("--baseline-out", help="synthetic mode: write unrefined candidates here")

    p = sub.add_parser("convert", help="convert annotations to the canonical format")
    p.add_argument("--from", dest="src_format", required=True, choices=["cornell", "jacquard", "ocid"])
    p.add_argument("--to", dest="dst_format", default="canonical", choices=["canonical"])
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("input", nargs="+", help="annotation files (cornell/jacquard) or a directory (ocid)")
    p.add_argument("output")

    p = sub.add_parser("iou", help="rotated IoU of two inline grasps")
    p.add_argument("coords", nargs=10, type=float, metavar="V",
                   help="x y w h theta of the first then the second grasp")
    p.add_argument("--radians", action="store_true", help="angles given in radians (default degrees)")
    p.add_argument("--axis-aligned", action="store_true")
    return parser


# --- helpers --------------------------------------------------------------

def _read_images(path, what):
    images = datasets.read_canonical(path)
    if not images:
        raise InputError(f"{what} file {path} contains no images")
    return images


def _pair_images(gt_path, pred_path):
    gts = _read_images(gt_path, "ground-truth")
    preds = {img.image_id: img for img in _read_images(pred_path, "prediction")}
    unknown = sorted(set(preds) - {img.image_id for img in gts})
    if unknown:
        raise InputError(f"predictions for unknown image ids: {unknown[:5]}")
    evaluable = [img for img in gts if img.grasps]
    return evaluable, [preds.get(img.image_id) for img in evaluable]


def _metric_config(args) -> MetricConfig:
    return MetricConfig(args.iou_threshold, math.radians(args.angle_threshold),
                        not args.axis_aligned, args.top_k)


def _scene_images(scenes, which):
    out = []
    for i, sc in enumerate(scenes):
        h, w = sc.mask.shape
        grasps = sc.gts if which == "gt" else list(which[i])
        seg = sc.mask if which == "gt" else None
        out.append(datasets.AnnotatedImage(f"scene_{i:05d}", w, h, grasps, segmentation=seg))
    return out


def _scenes(args):
    noise = refinement.Noise(args.noise_xy, args.noise_w, args.noise_h, math.radians(args.noise_theta))
    return refinement.generate_synthetic_scenes(args.num_scenes, args.seed, noise,
                                                candidates_per_grasp=args.candidates_per_grasp)


# --- commands -------------------------------------------------------------

def cmd_eval(args) -> int:
    gt_imgs, pred_imgs = _pair_images(args.gt, args.pred)
    cfg = _metric_config(args)
    preds = [p.grasps if p is not None else [] for p in pred_imgs]
    gts = [g.grasps for g in gt_imgs]
    flags = [evaluation._image_correct(p, g, cfg) for p, g in zip(preds, gts)]
    acc = evaluation.image_accuracy(preds, gts, cfg, args.jobs)
    grid = evaluation.threshold_sweep(preds, gts, args.sweep_iou, [math.radians(a) for a in args.sweep_angle],
                                      cfg.rotated_iou, cfg.top_k, args.jobs)

    per_class_hits, seg_per_class, seg_means = {}, {}, []
    for g, p in zip(gt_imgs, pred_imgs):
        if p is None:
            continue
        if p.segmentation is not None and any(x.class_id is not None for x in g.grasps):
            by_class = {c: v for c, v in g.grasps_by_class().items() if c is not None}
            res = evaluation.per_class_accuracy(p.grasps, by_class, p.segmentation, cfg,
                                                known_classes=g.class_names)
            for c, v in res.items():
                per_class_hits.setdefault(c, []).append(v)
        if p.segmentation is not None and g.segmentation is not None:
            per, mean = evaluation.segmentation_iou(p.segmentation, g.segmentation)
            seg_means.append(mean)
            for c, v in per.items():
                if v is not None:
                    seg_per_class.setdefault(c, []).append(v)
    per_class = {c: float(np.mean(v)) for c, v in per_class_hits.items()}
    segmentation = {}
    if seg_means:
        segmentation = {"mean_iou": float(np.mean(seg_means)),
                        "per_class": {str(c): float(np.mean(v)) for c, v in sorted(seg_per_class.items())}}

    report = evaluation.EvalReport(
        acc, [{"image_id": g.image_id, "correct": bool(f)} for g, f in zip(gt_imgs, flags)],
        cfg, grid, per_class, segmentation)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    grid.write_csv(out / "sweep.csv")
    if not args.no_figures:
        from . import plotting

        plotting.plot_sweep({"predictions": grid}, out / "sweep.png")
        plotting.plot_sweep_heatmap(grid, out / "sweep_heatmap.png")
        if per_class:
            plotting.plot_per_class(per_class, out / "per_class.png")
    print(f"grasp_accuracy={acc:.6f} images={len(gt_imgs)}")
    return 0


def cmd_sweep(args) -> int:
    gt_imgs, pred_imgs = _pair_images(args.gt, args.pred)
    preds = [p.grasps if p is not None else [] for p in pred_imgs]
    grid = evaluation.threshold_sweep(preds, [g.grasps for g in gt_imgs], args.iou,
                                      [math.radians(a) for a in args.angle],
                                      not args.axis_aligned, args.top_k, args.jobs)
    grid.write_csv(args.out)
    if args.figure:
        from . import plotting

        plotting.plot_sweep({"predictions": grid}, args.figure)
    for row in grid.to_rows():
        print(",".join(row))
    return 0


def cmd_refine_train(args) -> int:
    cfg = refinement.TrainConfig(
        lr=args.lr, momentum=args.momentum, nesterov=not args.no_nesterov, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed, hidden=args.hidden, crop_h=args.crop,
        crop_w=args.crop, weight_decay=args.weight_decay, rotated_crop=not args.axis_aligned_crop,
        jobs=args.jobs)
    result = refinement.train_refine_head(_scenes(args), cfg)
    refinement.save_params(args.params, result.params)
    if args.curve:
        refinement.write_curve(args.curve, result.curve)
    if args.figure:
        from . import plotting

        plotting.plot_training_curve(result.curve, args.figure)
    print(f"initial_loss={result.curve[0][1]:.6g} final_loss={result.curve[-1][1]:.6g}")
    return 0


def cmd_refine_apply(args) -> int:
    try:
        params = refinement.load_params(args.params)
    except ValueError as exc:
        raise InputError(f"{args.params}: {exc}") from None
    crop = args.crop
    if params.d_in != 2 * crop * crop:
        raise InputError(f"params expect input dimension {params.d_in}, crop {crop} gives {2 * crop * crop}")
    rotated = not args.axis_aligned_crop
    if args.pred:
        if not args.maps:
            raise InputError("--pred requires --maps")
        images = _read_images(args.pred, "prediction")
        with np.load(args.maps) as maps:
            refined = []
            for img in images:
                if img.image_id not in maps:
                    raise InputError(f"no probability map for image {img.image_id}")
                new = refinement.refine_candidates(params, maps[img.image_id], img.grasps, crop, crop, rotated)
                refined.append(datasets.AnnotatedImage(img.image_id, img.width, img.height,
                                                       _clip_to_image(new, img.width, img.height),
                                                       segmentation=img.segmentation, class_names=img.class_names))
        datasets.write_canonical(args.out, refined)
        count = sum(len(img.grasps) for img in refined)
    else:
        scenes = _scenes(args)
        refined = []
        for sc in scenes:
            h, w = sc.mask.shape
            new = refinement.refine_candidates(params, sc.prob_map, sc.candidates, crop, crop, rotated)
            refined.append(_clip_to_image(new, w, h))
        datasets.write_canonical(args.out, _scene_images(scenes, refined))
        if args.gt_out:
            datasets.write_canonical(args.gt_out, _scene_images(scenes, "gt"))
        if args.baseline_out:
            datasets.write_canonical(args.baseline_out, _scene_images(scenes, [sc.candidates for sc in scenes]))
        count = sum(len(r) for r in refined)
    print(f"refined {count} grasps")
    return 0


def _clip_to_image(grasps, width, height):
    """Keep refined centers inside the image so records stay valid."""
    return [g.replace(x=min(max(g.x, 0.0), width), y=min(max(g.y, 0.0), height)) for g in grasps]


def cmd_convert(args) -> int:
    images, n_warn = [], 0
    if args.src_format == "ocid":
        if len(args.input) != 1:
            raise InputError("ocid conversion takes one directory")
        images, warns = datasets.parse_ocid_grasp(args.input[0])
        for image_id, w in warns:
            print(f"warning: {image_id}:{w.line}: {w.message}", file=sys.stderr)
        n_warn = len(warns)
    else:
        parse = datasets.parse_cornell if args.src_format == "cornell" else datasets.parse_jacquard
        default = datasets.CORNELL_SIZE if args.src_format == "cornell" else datasets.JACQUARD_SIZE
        width, height = args.width or default[0], args.height or default[1]
        for name in args.input:
            path = Path(name)
            try:
                grasps, warns = parse(path.read_text())
            except datasets.DatasetFormatError as exc:
                raise InputError(f"{path}: {exc}") from None
            for w in warns:
                print(f"warning: {path}:{w.line}: {w.message}", file=sys.stderr)
            n_warn += len(warns)
            images.append(datasets.AnnotatedImage(path.stem, width, height, grasps))
    datasets.write_canonical(args.output, images)
    print(f"images={len(images)} grasps={sum(len(i.grasps) for i in images)} warnings={n_warn}")
    return 0


def cmd_iou(args) -> int:
    v = args.coords
    conv = (lambda t: t) if args.radians else math.radians
    a = OrientedRect(v[0], v[1], v[2], v[3], conv(v[4]))
    b = OrientedRect(v[5], v[6], v[7], v[8], conv(v[9]))
    print(f"{(axis_aligned_iou if args.axis_aligned else rotated_iou)(a, b):.9f}")
    return 0


COMMANDS = {
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "convert": cmd_convert,
    "iou": cmd_iou,
}


def _parse(parser, argv):
    """Parse ``argv``; values from ``--config`` fill options not given as flags."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        config = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"config {args.config}: {exc}") from None
    if not isinstance(config, dict):
        raise InputError("config must be a JSON object")
    unknown = sorted(set(config) - set(vars(args)))
    if unknown:
        raise InputError(f"unknown config keys {unknown}")
    given = {opt[2:].split("=")[0].replace("-", "_") for opt in argv if opt.startswith("--")}
    for key, value in config.items():
        if key not in given:
            setattr(args, key, value)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(build_parser(), argv)
        if args.command == "refine":
            return cmd_refine_train(args) if args.mode == "train" else cmd_refine_apply(args)
        return COMMANDS[args.command](args)
    except (InputError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"{PROG}: error: input: {msg}", file=sys.stderr)
        return 2
    except refinement.TrainingDiverged as exc:
        print(f"{PROG}: error: diverged: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"{PROG}: error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
