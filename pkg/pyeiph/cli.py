"""
command-line entry point
  ################################################################
    usage:
      $ python -m pyeiph -h
      $ python -m pyeiph synth --fixture mini
      $ python -m pyeiph run --fixture mini --workers 4 --out out/mini
  ################################################################
  a RunConfig JSON (--config) sets every default, explicit flags win;
  reports are JSON on stdout, diagnostics go to stderr
"""
import argparse
import json
import shlex
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .annot_io import (
    load_annotations,
    load_detections,
    load_ratings,
    open_slide,
    parse_annotations,
    read_region,
    write_ppm,
)
from .baseline_regression import evaluate_baseline, fit, grid_search, patch_dataset
from .core_model import *
from .detection_math import gradient_check_suite
from .evaluation import (
    ConfusionMatrix,
    adjacent_confusion,
    agreement_summary,
    confusion,
    detection_confusion,
    match_detections,
    mean_average_precision,
    average_precision,
    score_error,
    simulated_map_from_confusion,
)
from .pipeline import ExternalDetector, NoiseModel, PipelineConfig, plan_tiles, run_pipeline, write_result
from .sampling import SamplerConfig, draw_patches, sampled_grade_distribution
from .scoring import grade_counts, ths
from .synth import FIXTURES, SpatialMode, SynthConfig, generate, golden_fixture

REPORT_VERSION = "1"
EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


##########################################
# run configuration
##########################################
class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SamplerSection(_Section):
    patch: int = Field(1024, gt=0)
    epsilon: float = Field(0.01, ge=0, lt=1)
    max_depth: int = Field(3, ge=0)
    min_cells_per_node: int = Field(300, ge=0)
    split_rule: int = Field(int(SplitRule.MinCells), ge=0, le=1)


class TileSection(_Section):
    tile: int = Field(1024, gt=0)
    overlap: int = Field(128, ge=0)
    nms_thr: float = Field(0.5, gt=0, le=1)
    read_pixels: bool = False


class NoiseSection(_Section):
    miss_rate: float = Field(0.0, ge=0, le=1)
    jitter_sigma: float = Field(0.0, ge=0)
    fp_per_mm2: float = Field(0.0, ge=0)
    confusion_diag: Optional[float] = Field(None, ge=0, le=1)
    confusion: Optional[List[List[float]]] = None


class RunConfig(_Section):
    seed: int = Field(0, ge=0)
    workers: int = Field(0, ge=0)
    out: Optional[str] = None
    # "oracle" or "external:<command line>"
    detector: str = "oracle"
    detector_timeout: float = Field(60.0, gt=0)
    sampler: SamplerSection = SamplerSection()
    tiles: TileSection = TileSection()
    noise: NoiseSection = NoiseSection()


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            return RunConfig.model_validate(json.load(f))
    except (OSError, json.JSONDecodeError) as e:
        raise EIPHError(f"cannot read config {path}: {e}")
    except ValidationError as e:
        raise EIPHError(f"invalid config {path}: {e}")


_FLAG_PATHS = {
    "seed": ("seed",),
    "workers": ("workers",),
    "out": ("out",),
    "patch": ("sampler", "patch"),
    "epsilon": ("sampler", "epsilon"),
    "max_depth": ("sampler", "max_depth"),
    "min_cells_per_node": ("sampler", "min_cells_per_node"),
    "split_rule": ("sampler", "split_rule"),
    "tile": ("tiles", "tile"),
    "overlap": ("tiles", "overlap"),
    "nms_thr": ("tiles", "nms_thr"),
    "read_pixels": ("tiles", "read_pixels"),
    "miss_rate": ("noise", "miss_rate"),
    "jitter_sigma": ("noise", "jitter_sigma"),
    "fp_per_mm2": ("noise", "fp_per_mm2"),
    "confusion_diag": ("noise", "confusion_diag"),
    "detector": ("detector",),
}


def merge_flags(config: RunConfig, args) -> RunConfig:
    """explicit flags override the config file"""
    data = config.model_dump()
    for flag, path in _FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = data
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise EIPHError(f"invalid options: {e}")


def render_args(config: RunConfig) -> dict:
    """
    turns a validated RunConfig into the algorithm configurations
    """
    s, t, n = config.sampler, config.tiles, config.noise
    if n.confusion is not None:
        matrix = n.confusion
    elif n.confusion_diag is not None:
        matrix = adjacent_confusion(n.confusion_diag).tolist()
    else:
        matrix = np.eye(N_GRADES).tolist()
    noise = NoiseModel(n.miss_rate, tuple(map(tuple, matrix)), n.jitter_sigma, n.fp_per_mm2, config.seed)
    return dict(
        sampler=SamplerConfig(
            patch_w=s.patch,
            patch_h=s.patch,
            seed=config.seed,
            epsilon=s.epsilon,
            max_depth=s.max_depth,
            min_cells_per_node=s.min_cells_per_node,
            split_rule=SplitRule(s.split_rule),
        ),
        pipeline=PipelineConfig(
            tile_w=t.tile,
            tile_h=t.tile,
            overlap=t.overlap,
            nms_thr=t.nms_thr,
            workers=config.workers,
            seed=config.seed,
            noise=noise,
            read_pixels=t.read_pixels,
        ),
    )


##########################################
# helpers
##########################################
def _emit(report: dict, out: Optional[str] = None, name="report.json"):
    report = {"version": REPORT_VERSION, **report}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        with open(Path(out) / name, "w", encoding="utf-8") as f:
            f.write(text + "\n")


def _writer(args):
    if not getattr(args, "tflogger", None):
        return None
    from torch.utils.tensorboard import SummaryWriter

    return SummaryWriter(log_dir=args.tflogger)


def _inputs(args, need_slide=True):
    """
    (slide or None, annotations) from --fixture, or from --slide / --annotations
    """
    if getattr(args, "fixture", None):
        fx = golden_fixture(args.fixture)
        return fx.slide, fx.annotations
    if not args.annotations:
        raise EIPHError("need --fixture or --annotations")
    annotations = load_annotations(args.annotations)
    slide = None
    if need_slide:
        if not getattr(args, "slide", None):
            raise EIPHError("need --slide (manifest.json) or --fixture")
        slide = open_slide(args.slide, annotations.require_slide().id)
    return slide, annotations


def _floats(text) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise EIPHError(f"expected comma separated numbers, got {text!r}")


##########################################
# subcommands
##########################################
def cmd_synth(args, config: RunConfig):
    names = sorted(FIXTURES) if args.fixture == "all" else [args.fixture] if args.fixture else []
    if names:
        root = config.out or EIPH_FIXTURE_DIR
        reports = []
        for name in names:
            fx = golden_fixture(name, root, regenerate=True)
            reports.append({"fixture": name, "directory": str(fx.directory), **fx.expected})
        _emit({"fixtures": reports})
        return EXIT_OK
    if not config.out:
        raise EIPHError("synth needs --fixture or --out")
    cfg = SynthConfig(
        width=args.width,
        height=args.height,
        cell_count=args.cells,
        grade_mix=tuple(_floats(args.mix)),
        spatial_mode=SpatialMode.parse(args.mode),
        seed=config.seed,
        slide_id=args.slide_id or Path(config.out).name,
        tile_format=TileFormat.parse(args.tile_format),
    )
    _, annotations = generate(cfg, config.out)
    counts = grade_counts(annotations.cells)
    _emit({"slide": cfg.slide_id, "directory": config.out, "cells": counts.total, "counts": list(counts)})
    return EXIT_OK


def cmd_validate(args, config):
    annotations = parse_annotations(args.annotations)
    violations = validate_annotation_set(annotations)
    _emit({"cells": len(annotations), "violations": violations, "valid": not violations}, config.out)
    return EXIT_OK if not violations else EXIT_DOMAIN


def cmd_score(args, config):
    annotations = load_annotations(args.annotations)
    counts = grade_counts(annotations.cells)
    t = ths(counts)
    _emit(
        {
            "ths": t.rounded,
            "diagnosis": t.diagnosis_confirmed,
            "score": t.score,
            "n_cells": t.n_cells,
            "counts": list(counts),
        },
        config.out,
    )
    return EXIT_OK


_STRATEGIES = {
    "uniform": SamplingStrategy.Uniform,
    "two_stage": SamplingStrategy.TwoStage,
    "quadtree": SamplingStrategy.QuadTree,
}


def cmd_sample(args, config):
    slide, annotations = _inputs(args, need_slide=args.crops)
    cfg = render_args(config)["sampler"]
    strategy = _STRATEGIES[args.strategy]
    draws = draw_patches(annotations, cfg, strategy, args.n, np.random.default_rng(config.seed))
    balance = sampled_grade_distribution(
        annotations, cfg, strategy, args.n, np.random.default_rng(config.seed)
    )
    if config.out:
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(
            [(d.origin[0], d.origin[1], d.anchor_id) for d in draws], columns=["x", "y", "anchor_id"]
        ).astype({"anchor_id": "Int64"}).to_csv(out / "origins.csv", index=False)
        if args.crops:
            for i, d in enumerate(draws):
                with read_region(slide, cfg.patch_at(d.origin)) as patch:
                    write_ppm(out / f"patch_{i:05d}.ppm", patch.pixels)
    _emit(
        {
            "strategy": args.strategy,
            "n": len(draws),
            "grade_distribution": [float(v) for v in balance],
        },
        config.out,
        "sample.json",
    )
    return EXIT_OK


def _run_inputs(args, config: RunConfig):
    """(slide, gt annotations or None, detection source)"""
    if config.detector == "oracle":
        slide, annotations = _inputs(args)
        return slide, annotations, annotations
    if not config.detector.startswith("external:"):
        raise EIPHError(f"unknown detector {config.detector!r}")
    cmd = shlex.split(config.detector[len("external:"):])
    if not cmd:
        raise EIPHError("external detector needs a command")
    if getattr(args, "fixture", None) or (args.annotations and args.slide):
        slide, annotations = _inputs(args)
    elif args.slide:
        slide, annotations = open_slide(args.slide), None
    else:
        raise EIPHError("need --slide (manifest.json) or --fixture")
    return slide, annotations, ExternalDetector(cmd, config.detector_timeout)


def cmd_run(args, config):
    slide, annotations, source = _run_inputs(args, config)
    writer = _writer(args)
    result = run_pipeline(slide, source, render_args(config)["pipeline"], writer)
    if writer is not None:
        writer.close()
    evaluation = None
    if annotations is not None and annotations.cells:
        evaluation = _evaluation(annotations, result.detections, result.plan)
    if config.out:
        write_result(result, slide.meta, config.out, evaluation)
    report = result.to_json()
    if evaluation is not None:
        report["evaluation"] = evaluation
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _evaluation(gt: AnnotationSet, pred, plan, iou_thr=0.5) -> dict:
    report = match_detections(gt, pred, iou_thr)
    slide_err, _ = score_error(gt, pred, plan, ScoreErrorMode.Slide)
    patch_mean, patch_sigma = score_error(gt, pred, plan, ScoreErrorMode.Patch)
    return {
        "map": mean_average_precision(report),
        "ap": {str(g): average_precision(report, g) for g in GRADES if report.gt_count[g]},
        "score_error": {"slide": slide_err, "patch": {"mean": patch_mean, "sigma": patch_sigma}},
        "unmatched_gt": len(report.unmatched_gt),
    }


def cmd_eval(args, config):
    gt = load_annotations(args.gt)
    _, pred = load_detections(args.pred)
    t = config.tiles
    plan = plan_tiles(gt.require_slide(), t.tile, t.tile, t.overlap)
    report = _evaluation(gt, pred, plan, args.iou)
    cm = detection_confusion(gt, pred, args.iou)
    report["confusion"] = cm.counts.tolist()
    if config.out:
        Path(config.out).mkdir(parents=True, exist_ok=True)
        cm.to_frame().to_csv(Path(config.out) / "confusion.csv")
    _emit(report, config.out, "eval.json")
    return EXIT_OK


def cmd_agree(args, config):
    ratings = load_ratings(args.ratings, args.reference)
    report = agreement_summary(ratings)
    gt = load_annotations(args.annotations) if args.annotations and args.trials else None
    for s in ratings.sessions:
        total = ConfusionMatrix.zeros()
        for r in report["sessions"][str(s)]["raters"]:
            cm = confusion(ratings, r, s)
            total = total + cm
            if config.out:
                Path(config.out).mkdir(parents=True, exist_ok=True)
                cm.to_frame().to_csv(Path(config.out) / f"confusion_{r}_s{s}.csv")
        report["sessions"][str(s)]["confusion"] = total.counts.tolist()
        if gt is not None:
            report["sessions"][str(s)]["simulated_map"] = simulated_map_from_confusion(
                gt, total.transition(), args.trials, np.random.default_rng(config.seed)
            )
    _emit(report, config.out, "agree.json")
    return EXIT_OK


def cmd_baseline(args, config):
    cfg = render_args(config)["sampler"]
    rng = np.random.default_rng(config.seed)
    slides = []
    if args.fixture:
        for name in args.fixture:
            fx = golden_fixture(name)
            slides.append((fx.slide, fx.annotations))
    else:
        if not args.slide or len(args.slide) != len(args.annotations or []):
            raise EIPHError("give as many --slide as --annotations, or --fixture")
        for s, a in zip(args.slide, args.annotations):
            annotations = load_annotations(a)
            slides.append((open_slide(s, annotations.require_slide().id), annotations))
    X, y = [], []
    for slide, annotations in slides:
        xs, ys = patch_dataset(slide, annotations, args.n_patches, cfg, rng, args.bins)
        X.append(xs)
        y.append(ys)
    X, y = np.concatenate(X), np.concatenate(y)
    writer = _writer(args)
    sigma, lam = grid_search(X, y, _floats(args.sigma_grid), _floats(args.lambda_grid), args.folds, writer)
    if writer is not None:
        writer.close()
    model = fit(X, y, sigma, lam)
    t = config.tiles
    per_slide = {}
    for slide, annotations in slides:
        plan = plan_tiles(slide.meta, t.tile, t.tile, t.overlap)
        per_slide[slide.meta.id] = evaluate_baseline(model, slide, annotations, plan, args.bins)
    _emit({"sigma": sigma, "lambda": lam, "patches": int(len(y)), "slides": per_slide}, config.out, "baseline.json")
    return EXIT_OK


def cmd_losscheck(args, config):
    rows = gradient_check_suite(config.seed)
    writer = _writer(args)
    if writer is not None:
        for i, r in enumerate(rows):
            writer.add_scalar("losscheck/max_rel_err", r["max_rel_err"], i)
        writer.close()
    print(pd.DataFrame(rows).to_markdown(tablefmt="grid"), file=sys.stderr)
    passed = all(r["passed"] for r in rows)
    _emit({"checks": rows, "passed": passed}, config.out, "losscheck.json")
    return EXIT_OK if passed else EXIT_DOMAIN


##########################################
# parser
##########################################
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyeiph",
        description="whole-slide hemosiderophage quantification",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate fixtures or a custom synthetic slide")
    add_parser_options(p)
    p.add_argument("--fixture", choices=sorted(FIXTURES) + ["all"], default=None)
    p.add_argument("--width", type=int, default=4096)
    p.add_argument("--height", type=int, default=4096)
    p.add_argument("--cells", type=int, default=200)
    p.add_argument("--mix", type=str, default="1,1,1,1,1", help="grade weights 0..4")
    p.add_argument("--mode", choices=["uniform", "gradient_x", "clustered"], default="uniform")
    p.add_argument("--tile_format", choices=["ppm", "png"], default="ppm")
    p.add_argument("--slide_id", type=str, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="lint an annotation file")
    add_parser_options(p)
    p.add_argument("--annotations", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("score", help="THS and diagnosis of an annotation file")
    add_parser_options(p)
    p.add_argument("--annotations", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sample", help="patch origins of a sampling strategy")
    add_parser_options(p)
    add_sampler_options(p)
    p.add_argument("--fixture", choices=sorted(FIXTURES), default=None)
    p.add_argument("--annotations", default=None)
    p.add_argument("--slide", default=None, help="manifest.json, needed for --crops")
    p.add_argument("--strategy", choices=sorted(_STRATEGIES), default="quadtree")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--crops", action="store_true", help="also write the patches as PPM")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("run", help="whole-slide pipeline")
    add_parser_options(p)
    add_tile_options(p)
    add_noise_options(p)
    p.add_argument("--fixture", choices=sorted(FIXTURES), default=None)
    p.add_argument("--annotations", default=None)
    p.add_argument("--slide", default=None, help="manifest.json")
    p.add_argument("--detector", default=None, help="oracle | external:<command>")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="mAP and score error of detections")
    add_parser_options(p)
    add_tile_options(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("agree", help="observer agreement from a rating table")
    add_parser_options(p)
    p.add_argument("--ratings", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--annotations", default=None, help="gt for the simulated mAP")
    p.add_argument("--trials", type=int, default=0)
    p.set_defaults(func=cmd_agree)

    p = sub.add_parser("baseline", help="histogram kernel regression baseline")
    add_parser_options(p)
    add_sampler_options(p)
    add_tile_options(p)
    p.add_argument("--fixture", action="append", choices=sorted(FIXTURES), default=None)
    p.add_argument("--slide", action="append", default=None)
    p.add_argument("--annotations", action="append", default=None)
    p.add_argument("--n_patches", type=int, default=100)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--sigma_grid", type=str, default="0.05,0.1,0.2,0.5")
    p.add_argument("--lambda_grid", type=str, default="0.01,0.1,1")
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("losscheck", help="gradient checks of the loss terms")
    add_parser_options(p)
    p.set_defaults(func=cmd_losscheck)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        config = merge_flags(load_run_config(args.config), args)
        code = args.func(args, config)
    except EIPHError as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_DOMAIN
    print_profile()
    return code


def main():
    sys.exit(dispatch(sys.argv[1:]))
