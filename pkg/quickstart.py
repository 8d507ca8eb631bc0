"""
A quickstart script for pyeiph on the synthetic golden fixtures.
@note:
  This script sweeps the grading noise of the oracle detector on one
  fixture and compares the sampling strategies on the same slide.
  ################################################################
    usage:
      $ python quickstart.py -h
  ################################################################
  You can pick the slide by option --fixture {mini,gradient,sparse-rare}
"""

import argparse
import json
import os
import time
from pprint import pprint

import numpy as np
import pandas as pd
from torch.utils.tensorboard import SummaryWriter

from pyeiph.core_model import *
from pyeiph.evaluation import adjacent_confusion, match_detections, mean_average_precision, score_error
from pyeiph.pipeline import NoiseModel, PipelineConfig, run_pipeline
from pyeiph.sampling import SamplerConfig, sampled_grade_distribution
from pyeiph.synth import FIXTURES, golden_fixture

parser = argparse.ArgumentParser(formatter_class=argparse.ArgumentDefaultsHelpFormatter)
parser.add_argument("--fixture", type=str, default="mini", choices=sorted(FIXTURES))
parser.add_argument(
    "--diag",
    type=str,
    default="1.0,0.9,0.8,0.73,0.6",
    help="diagonal masses of the oracle confusion to sweep",
)
parser.add_argument("--n_patches", type=int, default=200)
parser.add_argument("--seed", type=int, default=1)
parser.add_argument("--workers", type=int, default=0)
parser.add_argument("--tflogger", type=str, default="tf_logs/quick")


def noise_sweep(fx, diags, args, writer):
    rows = []
    for step, diag in enumerate(diags):
        noise = NoiseModel(confusion=tuple(map(tuple, adjacent_confusion(diag))), seed=args.seed)
        cfg = PipelineConfig(workers=args.workers, seed=args.seed, noise=noise)
        st = time.time()
        result = run_pipeline(fx.slide, fx.annotations, cfg)
        report = match_detections(fx.annotations, result.detections)
        slide_err, _ = score_error(fx.annotations, result.detections, result.plan, ScoreErrorMode.Slide)
        patch_err, patch_sigma = score_error(fx.annotations, result.detections, result.plan)
        row = {
            "diag": diag,
            "map": mean_average_precision(report),
            "ths": result.ths.rounded,
            "slide_err": slide_err,
            "patch_err": patch_err,
            "patch_sigma": patch_sigma,
            "time": time.time() - st,
        }
        writer.add_scalar("sweep/map", row["map"], step)
        writer.add_scalar("sweep/patch_err", patch_err, step)
        rows.append(row)
    return rows


def strategy_balance(fx, args):
    cfg = SamplerConfig(seed=args.seed)
    rows = []
    for strategy in SamplingStrategy:
        dist = sampled_grade_distribution(
            fx.annotations, cfg, strategy, args.n_patches, np.random.default_rng(args.seed)
        )
        rows.append({"strategy": strategy.name, **{f"grade_{g}": v for g, v in enumerate(dist)}})
    return rows


if __name__ == "__main__":

    args = parser.parse_args()
    pprint(vars(args))
    fx = golden_fixture(args.fixture)
    print(f"fixture {fx.name}: {fx.expected}")

    writer = SummaryWriter(log_dir=os.path.join(f"{args.tflogger}-{args.seed}", fx.name))
    diags = [float(v) for v in args.diag.split(",")]
    sweep = noise_sweep(fx, diags, args, writer)
    writer.close()
    balance = strategy_balance(fx, args)

    print("|--- ORACLE NOISE SWEEP ---")
    print(pd.DataFrame(sweep).to_markdown(index=False))
    print("|--- SAMPLED GRADE DISTRIBUTION ---")
    print(pd.DataFrame(balance).to_markdown(index=False, floatfmt=".3f"))
    print_profile()

    print("done!")
    print(json.dumps({"fixture": fx.name, "sweep": sweep, "balance": balance}, indent=2))
