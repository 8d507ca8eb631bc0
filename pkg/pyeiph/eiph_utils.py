import collections
import functools
import os
import sys
import time
from argparse import ArgumentParser
from enum import IntEnum

import pandas as pd

EIPH_VERBOSE = int(os.environ.get("EIPH_VERBOSE", 0))
EIPH_TILE_CACHE = int(os.environ.get("EIPH_TILE_CACHE", 16))
EIPH_FIXTURE_DIR = os.environ.get("EIPH_FIXTURE_DIR", "fixtures")

EIPH_GLOBAL_PROFILE = {
    "count": collections.defaultdict(int),
    "total": collections.defaultdict(float),
}

N_GRADES = 5
GRADES = tuple(range(N_GRADES))
# continuous grade range of the scaled sigmoid
GRADE_LO, GRADE_HI = -0.5, 4.5
# reference scanner resolution, micrometers per pixel
REFERENCE_MPP = 0.25


##########################################
# errors
##########################################
class EIPHError(ValueError):
    """root of every domain error; the CLI maps it to exit code 1"""


class AnnotationParseError(EIPHError):
    def __init__(self, msg, line=None):
        super().__init__(msg)
        self.line = line


class DetectorError(EIPHError):
    def __init__(self, msg, tile_index=None):
        super().__init__(msg)
        self.tile_index = tile_index


class PipelineError(EIPHError):
    def __init__(self, msg, completed=None, total=None):
        super().__init__(msg)
        self.completed = completed
        self.total = total


##########################################
# logging & profiling
##########################################
def eiph_print(*args, **kwargs):
    if EIPH_VERBOSE:
        print(*args, file=sys.stderr, **kwargs)


def eiph_timer(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        st = time.time()
        cc = func(*args, **kwargs)
        et = time.time()
        EIPH_GLOBAL_PROFILE["total"][func.__qualname__] += et - st
        EIPH_GLOBAL_PROFILE["count"][func.__qualname__] += 1
        return cc

    return wrapper


def profile_table():
    stats = pd.DataFrame.from_dict(EIPH_GLOBAL_PROFILE)
    if stats.empty:
        return stats
    stats["avg"] = stats["total"] / stats["count"]
    return stats.sort_values(by="total", ascending=False)


def print_profile():
    if not EIPH_VERBOSE:
        return
    stats = profile_table()
    if stats.empty:
        return
    eiph_print("|--- EIPH COMPUTATION STATS ---")
    eiph_print(stats.to_markdown())


def print_table(rows, title=None):
    """
    prints a list of dicts as a markdown grid, only in verbose mode
    """
    if not EIPH_VERBOSE or not rows:
        return
    if title:
        eiph_print(f"|--- {title} ---")
    eiph_print(pd.DataFrame(rows).to_markdown(tablefmt="grid"))


##########################################
# options
##########################################
class SamplingStrategy(IntEnum):
    """
    patch sampling strategies
    """

    Uniform = 0
    TwoStage = 1
    QuadTree = 2


class SplitRule(IntEnum):
    """
    when a quad-tree node is subdivided
    """

    MinCells = 0  # every child must keep at least min_cells_per_node cells
    PatchSize = 1  # children must stay at least as large as a patch


class ScoreErrorMode(IntEnum):
    Slide = 0
    Patch = 1


class TileFormat(IntEnum):
    PPM = 0
    PNG = 1

    @property
    def suffix(self):
        return "ppm" if self == TileFormat.PPM else "png"

    @staticmethod
    def parse(name):
        try:
            return TileFormat[name.upper()]
        except KeyError:
            raise EIPHError(f"unknown tile format {name!r}")


def add_parser_options(parser: ArgumentParser):
    ##############
    # shared by every subcommand
    ##############
    parser.add_argument(
        "--config", type=str, default=None, help="RunConfig JSON; flags win over it"
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="seed controlling all randomness"
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help="tile workers for `run`, 0 runs in-process",
    )
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument(
        "--tflogger", type=str, default=None, help="tensorboard log directory"
    )


def add_sampler_options(parser: ArgumentParser):
    parser.add_argument("--patch", type=int, default=None, help="patch size (px)")
    parser.add_argument(
        "--epsilon", type=float, default=None, help="empty-node probability floor"
    )
    parser.add_argument("--max_depth", type=int, default=None, help="quad-tree depth")
    parser.add_argument(
        "--min_cells_per_node",
        type=int,
        default=None,
        help="a node is split only if every child keeps this many cells",
    )
    parser.add_argument(
        "--split_rule",
        type=int,
        default=None,
        help=f"""
       quad-tree leaf criterion,
       see {SplitRule}
      """,
    )


def add_tile_options(parser: ArgumentParser):
    parser.add_argument("--tile", type=int, default=None, help="tile size (px)")
    parser.add_argument("--overlap", type=int, default=None, help="tile overlap (px)")
    parser.add_argument(
        "--nms_thr", type=float, default=None, help="class-wise NMS IoU threshold"
    )
    parser.add_argument(
        "--read_pixels",
        type=int,
        default=None,
        help="read every tile raster even if the detector does not need it",
    )


def add_noise_options(parser: ArgumentParser):
    parser.add_argument("--miss_rate", type=float, default=None)
    parser.add_argument("--jitter_sigma", type=float, default=None)
    parser.add_argument("--fp_per_mm2", type=float, default=None)
    parser.add_argument(
        "--confusion_diag",
        type=float,
        default=None,
        help="oracle confusion: diagonal mass, remainder to adjacent grades",
    )
