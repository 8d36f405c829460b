"""Command-line entry point: ``fcos <subcommand> [options]``.

Exit codes: 0 success, 1 validation or usage error, 2 I/O error.
Tables go to stdout, progress to stderr, and every result is also written
under the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import toy
from .assignment import ambiguity_counts, build_targets
from .config import CliConfig, ConfigError, FpnConfig, load_config
from .dataio import (
    ParseError,
    load_annotations,
    load_detections,
    save_detections,
    write_csv,
    write_svg,
)
from .evaluation import (
    MatchPolicy,
    anchor_bpr,
    average_precision,
    centerness_scatter,
    evaluate,
    fcos_bpr,
    mean_average_precision,
    pr_curve,
)
from .inference import nms
from .parallel import parallel_map

logger = logging.getLogger("fcoskit")

OUTPUT_DIR_ENV = "FCOS_OUTPUT_DIR"
DEFAULT_CONFIG = "fcos.toml"
BPR_MODES = ("fcos", "fcos-nofpn", "anchors-none", "anchors-low04", "anchors-all")
_POLICIES = {
    "anchors-none": MatchPolicy.NONE,
    "anchors-low04": MatchPolicy.LOW_QUALITY_04,
    "anchors-all": MatchPolicy.ALL,
}


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 (instead of 2) on usage errors."""

    def error(self, message):
        raise UsageError(message, self.format_usage())


# --------------------------------------------------------------------------- helpers

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("must lie in (0, 1)")
    return value


def _resolve_config(args) -> CliConfig:
    """Config file (explicit or ``./fcos.toml``) overlaid with command-line flags."""
    if args.config is not None:
        cfg = load_config(args.config)
    elif Path(DEFAULT_CONFIG).is_file():
        cfg = load_config(DEFAULT_CONFIG)
    else:
        cfg = CliConfig()
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    elif os.environ.get(OUTPUT_DIR_ENV):
        cfg = replace(cfg, output_dir=os.environ[OUTPUT_DIR_ENV])
    if args.include_crowd:
        cfg = replace(cfg, include_crowd=True)
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("threads", "must be >= 1")
    return cfg


def _out(cfg: CliConfig, name: str) -> Path:
    return Path(cfg.output_dir) / name


def _write_json(path: Path, payload) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _table(rows: Sequence[tuple[str, object]]) -> str:
    width = max(len(k) for k, _ in rows)
    lines = []
    for key, value in rows:
        text = f"{value:.2f}" if isinstance(value, float) else str(value)
        lines.append(f"{key:<{width}}  {text}")
    return "\n".join(lines)


def _fpn(cfg: CliConfig, no_fpn: bool) -> FpnConfig:
    if not no_fpn:
        return cfg.fpn
    return replace(cfg.fpn, single_level="P4" if "P4" in dict(cfg.fpn.levels) else cfg.fpn.levels[0][0])


def _load_dataset(path: str):
    t0 = time.perf_counter()
    ds = load_annotations(path)
    logger.info("loaded %d images / %d annotations from %s in %.1fs",
                len(ds.images), ds.n_annotations, path, time.perf_counter() - t0)
    return ds


def _scenes(ds, cfg: CliConfig, no_resize: bool):
    return list(ds.scenes(None if no_resize else cfg.resize))


# --------------------------------------------------------------------------- subcommands

def cmd_assign(args, cfg: CliConfig) -> int:
    ds = _load_dataset(args.annotations)
    fpn = _fpn(cfg, args.no_fpn)
    if args.center_sampling:
        fpn = replace(fpn, center_sampling=True)
    ids = [im.image_id for im in ds.images]
    scenes = _scenes(ds, cfg, args.no_resize)

    def one(item):
        size, gts = item
        return build_targets(size, gts, fpn, include_crowd=cfg.include_crowd)

    targets = parallel_map(one, scenes, cfg.threads)
    rows = []
    n_pos = n_amb = 0
    for image_id, ts in zip(ids, targets):
        mask = np.ones(len(ts), dtype=bool) if args.all_locations else ts.positive
        n_pos += ts.n_pos
        n_amb += int((ts.is_ambiguous & ts.positive).sum())
        for i in np.flatnonzero(mask):
            rows.append((
                image_id, fpn.levels[int(ts.level_index[i])][0],
                int(ts.grid_x[i]), int(ts.grid_y[i]), int(ts.image_x[i]), int(ts.image_y[i]),
                int(ts.class_label[i]), *(float(v) for v in ts.regression[i]),
                float(ts.centerness[i]), int(ts.source[i]),
                bool(ts.is_ambiguous[i]), bool(ts.ambiguous_cross_class[i]),
            ))
    path = _out(cfg, "targets.csv")
    write_csv(rows, ("image_id", "level", "grid_x", "grid_y", "x", "y", "class", "l", "t", "r", "b",
                     "centerness", "annotation_index", "ambiguous", "ambiguous_cross_class"), path)
    print(_table([("images", len(ids)), ("positives", n_pos), ("ambiguous", n_amb), ("rows written", len(rows))]))
    logger.info("wrote %s", path)
    return 0


def cmd_bpr(args, cfg: CliConfig) -> int:
    ds = _load_dataset(args.annotations)
    resize = None if args.no_resize else cfg.resize
    t0 = time.perf_counter()
    if args.mode == "fcos":
        value = fcos_bpr(ds, cfg.fpn, resize, cfg.include_crowd, cfg.threads)
    elif args.mode == "fcos-nofpn":
        value = fcos_bpr(ds, _fpn(cfg, True), resize, cfg.include_crowd, cfg.threads)
    else:
        value = anchor_bpr(ds, policy=_POLICIES[args.mode], resize=resize,
                           include_crowd=cfg.include_crowd, threads=cfg.threads)
    elapsed = time.perf_counter() - t0
    logger.info("bpr %s computed in %.1fs", args.mode, elapsed)
    print(_table([("mode", args.mode), ("BPR (%)", float(value))]))
    _write_json(_out(cfg, f"bpr_{args.mode}.json"),
                {"mode": args.mode, "bpr_percent": value, "images": len(ds.images), "seconds": elapsed})
    return 0


def cmd_ambiguity(args, cfg: CliConfig) -> int:
    ds = _load_dataset(args.annotations)
    fpn = _fpn(cfg, args.no_fpn)
    counts = ambiguity_counts(_scenes(ds, cfg, args.no_resize), fpn, cfg.include_crowd, cfg.threads)
    ratio = counts.cross_class_ratio if args.exclude_same_class else counts.ratio
    label = "cross-class ambiguous (%)" if args.exclude_same_class else "ambiguous (%)"
    print(_table([("fpn", "off (P4)" if args.no_fpn else "on"), ("positives", counts.positives),
                  (label, 100.0 * ratio)]))
    _write_json(_out(cfg, "ambiguity.json"), {
        "fpn": not args.no_fpn, "exclude_same_class": args.exclude_same_class,
        "positives": counts.positives, "ambiguous": counts.ambiguous,
        "ambiguous_cross_class": counts.cross_class, "ratio_percent": 100.0 * ratio,
    })
    return 0


def cmd_eval(args, cfg: CliConfig) -> int:
    ds = _load_dataset(args.annotations)
    dets = load_detections(args.detections)
    gts = {im.image_id: ds.gts(im.image_id) for im in ds.images}
    unknown = sorted(set(dets) - set(gts), key=str)
    if unknown:
        raise ParseError(f"{args.detections}: detections reference unknown image_id {unknown[0]}")
    report = evaluate(dets, gts, args.class_agnostic, cfg.include_crowd, args.max_dets)
    curve = pr_curve(dets, gts, args.iou, args.class_agnostic, cfg.include_crowd, args.max_dets)
    ap_at = mean_average_precision(dets, gts, args.iou, args.class_agnostic, cfg.include_crowd, args.max_dets)
    tag = f"iou{int(round(args.iou * 100)):02d}"
    write_csv(curve.rows(), ("threshold", "precision", "recall"), _out(cfg, f"pr_{tag}.csv"))
    write_svg([(f"IoU {args.iou:g}", curve.recall, curve.precision)], _out(cfg, f"pr_{tag}.svg"),
              title=f"Precision-recall at IoU {args.iou:g}" + (" (class-agnostic)" if args.class_agnostic else ""),
              xlabel="recall", ylabel="precision")
    payload = report.as_dict()
    payload[f"AP@{args.iou:g}"] = 100.0 * ap_at
    payload["pooled_AP"] = 100.0 * average_precision(curve)
    _write_json(_out(cfg, "eval.json"), payload)
    print(report.table())
    print(_table([(f"AP@{args.iou:g}", 100.0 * ap_at)]))
    return 0


def cmd_nms(args, cfg: CliConfig) -> int:
    dets = load_detections(args.detections)
    iou_thr = cfg.inference.nms_threshold if args.iou_thr is None else args.iou_thr
    per_class = cfg.inference.per_class_nms and not args.class_agnostic
    ids = sorted(dets, key=str)
    kept = parallel_map(lambda i: nms(dets[i], iou_thr, per_class), ids, cfg.threads)
    result = dict(zip(ids, kept))
    path = Path(args.output) if args.output else _out(cfg, "nms.json")
    save_detections(result, path)
    n_in = sum(len(v) for v in dets.values())
    n_out = sum(len(v) for v in kept)
    print(_table([("images", len(ids)), ("detections in", n_in), ("detections kept", n_out),
                  ("iou threshold", f"{iou_thr:g}"), ("per-class", per_class)]))
    logger.info("wrote %s", path)
    return 0


def cmd_scatter(args, cfg: CliConfig) -> int:
    ds = _load_dataset(args.annotations)
    dets = load_detections(args.detections)
    gts = {im.image_id: ds.gts(im.image_id) for im in ds.images}
    points = centerness_scatter(dets, gts, fused=args.fused)
    name = "fused" if args.fused else "unfused"
    write_csv([(p.x, p.y) for p in points], ("score", "iou"), _out(cfg, f"scatter_{name}.csv"))
    write_svg([(name, [p.x for p in points], [p.y for p in points])], _out(cfg, f"scatter_{name}.svg"),
              title=f"Detection IoU vs {name} score", xlabel="score", ylabel="IoU with ground truth",
              kind="scatter", diagonal=True)
    below = sum(1 for p in points if p.y < p.x)
    print(_table([("score", name), ("detections", len(points)), ("below y=x", below)]))
    return 0


def _toy_scenes(seed: int, n: int, offset: int = 0):
    return [toy.generate_scene(seed + offset + k) for k in range(n)]


def cmd_traincheck(args, cfg: CliConfig) -> int:
    if args.lr < 0:
        raise ConfigError("lr", "must be >= 0")
    t0 = time.perf_counter()
    options = cfg.loss
    scenes = _toy_scenes(args.seed, args.scenes)
    held = _toy_scenes(args.seed, args.scenes, offset=100)
    head0 = toy.LinearHead.init(seed=args.seed)
    check = toy.gradient_check(head0, scenes[0], options=options, seed=args.seed)
    head, report = toy.train(scenes, head0, args.epochs, args.lr, options)
    report.gradcheck = check
    report.mean_best_iou = toy.mean_best_iou(head, scenes, cfg.inference)
    report.rank_corr_before, report.rank_corr_after = toy.fusion_effect(head, held, cfg.inference)
    write_csv(report.rows(), ("epoch", "cls", "reg", "ctr", "total"), _out(cfg, "train_loss.csv"))
    summary = report.summary()
    summary["seed"] = args.seed
    summary["held_out_mean_best_iou"] = toy.mean_best_iou(head, held, cfg.inference)
    summary["seconds"] = time.perf_counter() - t0
    _write_json(_out(cfg, "train_summary.json"), summary)
    print(_table([
        ("epochs", args.epochs),
        ("initial loss", float(summary["initial_loss"])),
        ("final loss", float(summary["final_loss"])),
        ("mean best IoU", f"{report.mean_best_iou:.4f}"),
        ("held-out mean best IoU", f"{summary['held_out_mean_best_iou']:.4f}"),
        ("rank corr before fusion", f"{report.rank_corr_before:.4f}"),
        ("rank corr after fusion", f"{report.rank_corr_after:.4f}"),
        ("gradient check", f"{'pass' if check.passed else 'FAIL'} ({check.max_rel_error:.2e})"),
    ]))
    return 0


def cmd_gradcheck(args, cfg: CliConfig) -> int:
    scene = toy.generate_scene(args.seed)
    head = toy.LinearHead.init(seed=args.seed)
    res = toy.gradient_check(head, scene, args.tolerance, args.n_params, seed=args.seed,
                             options=cfg.loss, corrupt=args.corrupt)
    _write_json(_out(cfg, "gradcheck.json"), {
        "passed": res.passed, "max_rel_error": res.max_rel_error,
        "n_checked": res.n_checked, "tolerance": res.tolerance, "corrupt": args.corrupt,
    })
    print(_table([("parameters checked", res.n_checked), ("max relative error", f"{res.max_rel_error:.3e}"),
                  ("tolerance", f"{res.tolerance:g}"), ("result", "pass" if res.passed else "FAIL")]))
    return 0 if res.passed else 1


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help=f"TOML config file (default: ./{DEFAULT_CONFIG} if present)")
    g.add_argument("--threads", type=_positive_int, help="worker threads (default: available cores)")
    g.add_argument("--output-dir", help=f"directory for result files (default: ${OUTPUT_DIR_ENV} or .)")
    g.add_argument("--include-crowd", action="store_true", help="treat iscrowd boxes as ordinary ground truth")
    g.add_argument("-v", "--verbose", action="store_true", help="debug-level progress on stderr")
    g.add_argument("-q", "--quiet", action="store_true", help="suppress progress on stderr")

    parser = _Parser(prog="fcos", description="Per-location detection analyses: targets, recall, evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_text, func):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    def annotations(p):
        p.add_argument("--annotations", required=True, help="COCO annotation JSON")

    def no_resize(p):
        p.add_argument("--no-resize", action="store_true", help="use original image sizes (skip the 800/1333 resize)")

    p = add("assign", "export per-location training targets as CSV", cmd_assign)
    annotations(p)
    no_resize(p)
    p.add_argument("--no-fpn", action="store_true", help="assign every object to P4")
    p.add_argument("--center-sampling", action="store_true", help="restrict positives to a radius around box centres")
    p.add_argument("--all-locations", action="store_true", help="include background locations")

    p = add("bpr", "best possible recall of an assignment scheme", cmd_bpr)
    annotations(p)
    no_resize(p)
    p.add_argument("--mode", required=True, choices=BPR_MODES, help="assignment scheme")

    p = add("ambiguity", "share of positive locations inside more than one box", cmd_ambiguity)
    annotations(p)
    no_resize(p)
    p.add_argument("--no-fpn", action="store_true", help="assign every object to P4")
    p.add_argument("--exclude-same-class", action="store_true", help="count only cross-class ambiguity")

    p = add("eval", "precision-recall curve, AP and AR of a results file", cmd_eval)
    annotations(p)
    p.add_argument("--detections", required=True, help="COCO results JSON")
    p.add_argument("--iou", type=_unit_interval, default=0.5, help="IoU threshold for the exported curve (default 0.5)")
    p.add_argument("--class-agnostic", action="store_true", help="match regardless of category")
    p.add_argument("--max-dets", type=_positive_int, default=100, help="detections per image (default 100)")

    p = add("nms", "greedy non-maximum suppression on a results file", cmd_nms)
    p.add_argument("--detections", required=True, help="COCO results JSON")
    p.add_argument("--iou-thr", type=_unit_interval, help="suppression IoU threshold (default from config, 0.5)")
    p.add_argument("--class-agnostic", action="store_true", help="suppress across categories")
    p.add_argument("--output", help="output results JSON (default OUTPUT_DIR/nms.json)")

    p = add("scatter", "detection IoU against score, with or without center-ness", cmd_scatter)
    annotations(p)
    p.add_argument("--detections", required=True, help="COCO results JSON")
    mx = p.add_mutually_exclusive_group()
    mx.add_argument("--fused", dest="fused", action="store_true", default=True, help="score = cls x center-ness (default)")
    mx.add_argument("--unfused", dest="fused", action="store_false", help="score = classification score only")

    p = add("traincheck", "train the linear toy head on synthetic scenes", cmd_traincheck)
    p.add_argument("--seed", type=int, default=0, help="scene and initialisation seed (default 0)")
    p.add_argument("--epochs", type=_positive_int, default=200, help="gradient steps (default 200)")
    p.add_argument("--lr", type=float, default=0.05, help="learning rate (default 0.05)")
    p.add_argument("--scenes", type=_positive_int, default=8, help="training scenes (default 8)")

    p = add("gradcheck", "finite-difference check of the toy head's analytic gradient", cmd_gradcheck)
    p.add_argument("--seed", type=int, default=0, help="scene and initialisation seed (default 0)")
    p.add_argument("--n-params", type=_positive_int, default=200, help="parameters to probe (default 200)")
    p.add_argument("--tolerance", type=float, default=1e-5, help="max relative error (default 1e-5)")
    p.add_argument("--corrupt", action="store_true", help="zero the analytic gradient (negative control)")
    return parser


def _setup_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(level)
    logger.propagate = False


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"fcos: error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        sys.stderr.write(parser.format_help())
        return 1
    _setup_logging(args)
    try:
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except (ConfigError, ParseError, ValueError, toy.TrainingDiverged) as exc:
        sys.stderr.write(f"fcos: error: {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"fcos: I/O error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
