"""
whole-slide engine: plan overlapping tiles, detect per tile on a worker
pool, merge the tile results into slide coordinates, count, score and
build the per-tile score heatmap
@note:
  - per-tile randomness is seeded by (seed, tile index), so results do not
    depend on the number of workers or on scheduling
  - tile ownership: the boundary between two neighbouring tiles is the
    midpoint of their overlap strip; a detection survives only in the tile
    whose core holds its center, then class-wise NMS removes what is left
"""
import bisect
import json
import os
import queue
import shutil
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from multiprocessing.util import Finalize
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from torch.utils.data import DataLoader, Dataset

from .annot_io import Patch, SlideSource, dump_detections, read_region, write_ppm
from .core_model import *
from .detection_math import nms
from .scoring import ThsResult, grade_counts, ths

RESULT_VERSION = "1"
HEATMAP_BLOCK = 16


##########################################
# tile plan
##########################################
def _axis_origins(extent, tile, stride) -> List[int]:
    if extent <= tile:
        return [0]
    return list(range(0, extent - tile, stride)) + [extent - tile]


@dataclass(frozen=True)
class TilePlan:
    tile_w: int
    tile_h: int
    overlap: int
    xs: Tuple[int, ...]
    ys: Tuple[int, ...]
    slide_w: int
    slide_h: int

    @property
    def cols(self):
        return len(self.xs)

    @property
    def rows(self):
        return len(self.ys)

    @property
    def tiles(self) -> List[BoundingBox]:
        """row-major"""
        w, h = min(self.tile_w, self.slide_w), min(self.tile_h, self.slide_h)
        return [BoundingBox(x, y, w, h) for y in self.ys for x in self.xs]

    def __len__(self):
        return self.cols * self.rows

    def grid_position(self, index) -> Tuple[int, int]:
        return divmod(index, self.cols)

    def core(self, index) -> Tuple[float, float, float, float]:
        """
        the ownership region (x0, x1, y0, y1) of a tile, half-open
        """
        row, col = self.grid_position(index)
        w, h = min(self.tile_w, self.slide_w), min(self.tile_h, self.slide_h)
        return (
            *_core_span(self.xs, col, w),
            *_core_span(self.ys, row, h),
        )

    def owner(self, px, py) -> Tuple[int, int]:
        """(row, col) of the tile whose core holds the point"""
        w, h = min(self.tile_w, self.slide_w), min(self.tile_h, self.slide_h)
        col = bisect.bisect_right([_core_span(self.xs, i, w)[1] for i in range(self.cols - 1)], px)
        row = bisect.bisect_right([_core_span(self.ys, j, h)[1] for j in range(self.rows - 1)], py)
        return row, col


def _core_span(origins, i, size) -> Tuple[float, float]:
    lo = -np.inf if i == 0 else (origins[i - 1] + size + origins[i]) / 2.0
    hi = np.inf if i == len(origins) - 1 else (origins[i] + size + origins[i + 1]) / 2.0
    return lo, hi


def plan_tiles(meta: SlideMeta, tile_w=1024, tile_h=1024, overlap=128) -> TilePlan:
    """
    row-major tiles with stride (tile - overlap); the last row/column is
    clamped to the slide edge, a slide smaller than a tile gets one tile
    """
    if tile_w <= 0 or tile_h <= 0:
        raise EIPHError(f"tile size must be positive, got {tile_w}x{tile_h}")
    if not 0 <= overlap < min(tile_w, tile_h):
        raise EIPHError(f"invalid overlap {overlap} for {tile_w}x{tile_h} tiles")
    return TilePlan(
        tile_w,
        tile_h,
        overlap,
        tuple(_axis_origins(meta.width, tile_w, tile_w - overlap)),
        tuple(_axis_origins(meta.height, tile_h, tile_h - overlap)),
        meta.width,
        meta.height,
    )


##########################################
# noise model & detectors
##########################################
def _identity_confusion():
    return tuple(tuple(1.0 if r == c else 0.0 for c in GRADES) for r in GRADES)


@dataclass(frozen=True)
class NoiseModel:
    miss_rate: float = 0.0
    confusion: Tuple[Tuple[float, ...], ...] = field(default_factory=_identity_confusion)
    jitter_sigma: float = 0.0
    fp_per_mm2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise EIPHError(f"miss_rate must lie in [0,1], got {self.miss_rate}")
        if self.jitter_sigma < 0 or self.fp_per_mm2 < 0:
            raise EIPHError("jitter_sigma and fp_per_mm2 must be non-negative")
        m = np.asarray(self.confusion, dtype=np.float64)
        if m.shape != (N_GRADES, N_GRADES):
            raise EIPHError(f"confusion must be {N_GRADES}x{N_GRADES}, got {m.shape}")
        if (m < 0).any() or np.abs(m.sum(axis=1) - 1.0).max() > 1e-9:
            raise EIPHError("confusion rows must be non-negative and sum to 1")
        object.__setattr__(self, "confusion", tuple(tuple(float(v) for v in r) for r in m))

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(np.asarray(self.confusion), axis=1)


class Detector:
    """
    the per-tile detection contract: `detect` returns detections in
    tile-local coordinates, inside the tile
    """

    needs_pixels = False

    def detect(self, slide: SlideSource, tile: BoundingBox, index: int, patch: Optional[Patch]):
        raise NotImplementedError

    def close(self):
        pass


def _clip_local(box: BoundingBox, tile: BoundingBox) -> Optional[BoundingBox]:
    """intersect a global box with the tile and express it tile-locally"""
    inter = box.intersection(tile)
    if inter is None:
        return None
    return inter.translate(-tile.x, -tile.y)


def oracle_detect(
    annotations: AnnotationSet,
    tile: BoundingBox,
    noise: NoiseModel,
    rng,
    index: Optional[CellIndex] = None,
) -> List[Detection]:
    """
    ground truth seen through a noise model
    Args:
      annotations: the slide's cells
      tile: slide-coordinate tile
      noise: miss rate, confusion rows, box jitter, false positives per mm^2
      rng: the tile's Generator
      index: optional prebuilt CellIndex over `annotations.cells`
    Returns:
      tile-local detections, boxes clipped to the tile
    """
    if index is None:
        index = CellIndex(annotations.cells)
    cumulative = noise.cumulative
    out = []
    for cell in sorted(index.intersecting(tile), key=lambda c: c.id):
        missed = rng.random() < noise.miss_rate
        grade = min(int(np.searchsorted(cumulative[cell.grade], rng.random(), side="right")), N_GRADES - 1)
        dx, dy = rng.normal(0.0, noise.jitter_sigma, size=2) if noise.jitter_sigma > 0 else (0.0, 0.0)
        confidence = float(rng.uniform(0.5, 1.0))
        if missed:
            continue
        box = _clip_local(cell.box.translate(float(dx), float(dy)), tile)
        if box is not None:
            out.append(Detection.certain(box, grade, confidence))
    if noise.fp_per_mm2 > 0:
        mpp = annotations.slide.resolution if annotations.slide else REFERENCE_MPP
        area_mm2 = tile.area * (mpp / 1000.0) ** 2
        if annotations.cells:
            fw = float(np.median([c.box.w for c in annotations.cells]))
            fh = float(np.median([c.box.h for c in annotations.cells]))
        else:
            fw = fh = 70.0
        fw, fh = min(fw, tile.w), min(fh, tile.h)
        for _ in range(int(rng.poisson(noise.fp_per_mm2 * area_mm2))):
            x = float(rng.uniform(0, tile.w - fw))
            y = float(rng.uniform(0, tile.h - fh))
            grade = int(rng.integers(N_GRADES))
            out.append(Detection.certain(BoundingBox(x, y, fw, fh), grade, float(rng.uniform(0.5, 1.0))))
    return out


class OracleDetector(Detector):
    def __init__(self, annotations: AnnotationSet, noise: NoiseModel = NoiseModel(), seed=0):
        self.annotations = annotations
        self.noise = noise
        self.seed = seed
        self.index = CellIndex(annotations.cells)

    def detect(self, slide, tile, index, patch=None):
        rng = np.random.default_rng([self.seed, index])
        return oracle_detect(self.annotations, tile, self.noise, rng, self.index)


class ExternalDetector(Detector):
    """
    a child process speaking line-delimited JSON on stdin/stdout; started
    lazily, one child per worker process, requests serialized per child
    """

    needs_pixels = True

    def __init__(self, cmd: Sequence[str], timeout=60.0, needs_pixels=True):
        self.cmd = list(cmd)
        self.timeout = timeout
        self.needs_pixels = needs_pixels
        self._reset()

    def _reset(self):
        self._proc = None
        self._pid = None
        self._lines = None
        self._lock = threading.Lock()
        self._tmpdir = None
        self._finalizer = None
        self._next_id = 0

    def _ensure_started(self):
        if self._proc is not None and self._pid == os.getpid() and self._proc.poll() is None:
            return
        self._shutdown()
        try:
            self._proc = subprocess.Popen(
                self.cmd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as e:
            raise DetectorError(f"cannot start detector {self.cmd}: {e}")
        self._pid = os.getpid()
        self._lines = queue.Queue()
        threading.Thread(
            target=_pump_lines, args=(self._proc.stdout, self._lines), daemon=True
        ).start()
        self._tmpdir = tempfile.mkdtemp(prefix="eiph-tiles-")
        # fires once, and only in the process that started the child
        self._finalizer = Finalize(self, _stop_child, args=(self._proc, self._tmpdir), exitpriority=10)

    def _shutdown(self):
        if self._finalizer is not None:
            self._finalizer()
        self._finalizer = None
        self._proc = None
        self._tmpdir = None

    def _request(self, message: dict) -> dict:
        try:
            self._proc.stdin.write(json.dumps(message) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise DetectorError(f"detector process closed its input: {e}")
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self._proc.kill()
            self._shutdown()
            raise DetectorError(f"detector timed out after {self.timeout}s")
        if line is None:
            raise DetectorError("detector process exited")
        try:
            return json.loads(line)
        except json.JSONDecodeError as e:
            raise DetectorError(f"malformed detector response: {e.msg}")

    def detect(self, slide, tile, index, patch=None):
        with self._lock:
            self._ensure_started()
            path = ""
            if patch is not None:
                path = os.path.join(self._tmpdir, f"tile_{index}.ppm")
                write_ppm(path, patch.pixels)
            self._next_id += 1
            rid = self._next_id
            try:
                response = self._request(
                    {
                        "id": rid,
                        "slide": slide.meta.id,
                        "x": int(tile.x),
                        "y": int(tile.y),
                        "w": int(tile.w),
                        "h": int(tile.h),
                        "patch_ppm_path": path,
                    }
                )
            finally:
                if path and os.path.exists(path):
                    os.remove(path)
        if response.get("id") != rid:
            raise DetectorError(f"response id {response.get('id')!r} does not echo request {rid}")
        local = BoundingBox(0, 0, tile.w, tile.h)
        out = []
        try:
            for d in response.get("detections", []):
                box = BoundingBox(d["x"], d["y"], d["w"], d["h"]).intersection(local)
                if box is None:
                    continue
                out.append(Detection(box, tuple(d["probs"]), d["confidence"], d["score"]))
        except (KeyError, TypeError) as e:
            raise DetectorError(f"malformed detection in response {rid}: {e}")
        return out

    def close(self):
        self._shutdown()

    def __getstate__(self):
        return {"cmd": self.cmd, "timeout": self.timeout, "needs_pixels": self.needs_pixels}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._reset()


def _stop_child(proc, tmpdir):
    try:
        proc.stdin.close()
        proc.wait(timeout=5)
    except (OSError, subprocess.TimeoutExpired):
        proc.kill()
        proc.wait()
    shutil.rmtree(tmpdir, ignore_errors=True)


def _pump_lines(stream, sink: queue.Queue):
    for line in stream:
        sink.put(line)
    sink.put(None)


def detect(
    detector: Detector, slide: SlideSource, tile: BoundingBox, index=0, read_pixels=False
) -> List[Detection]:
    """
    runs one detector on one tile
    Returns:
      tile-local detections
    """
    try:
        if detector.needs_pixels or read_pixels:
            with read_region(slide, tile) as patch:
                dets = detector.detect(slide, tile, index, patch if detector.needs_pixels else None)
        else:
            dets = detector.detect(slide, tile, index, None)
    except DetectorError as e:
        raise DetectorError(f"tile {index}: {e}", index)
    except Exception as e:
        raise DetectorError(f"tile {index}: {type(e).__name__}: {e}", index)
    eps = 1e-9
    for d in dets:
        b = d.box
        if b.x < -eps or b.y < -eps or b.x2 > tile.w + eps or b.y2 > tile.h + eps:
            raise DetectorError(f"tile {index}: detection {b} outside the tile", index)
    return list(dets)


##########################################
# worker pool
##########################################
class TileOutcome(NamedTuple):
    index: int
    detections: Optional[List[Detection]]
    error: Optional[str]
    pid: int
    peak_bytes: int


class TileDataset(Dataset):
    """one item per planned tile"""

    def __init__(self, slide: SlideSource, plan: TilePlan, detector: Detector, read_pixels=False):
        self.slide = slide
        self.tiles = plan.tiles
        self.detector = detector
        self.read_pixels = read_pixels

    def __len__(self):
        return len(self.tiles)

    def __getitem__(self, i) -> TileOutcome:
        try:
            dets, error = detect(self.detector, self.slide, self.tiles[i], i, self.read_pixels), None
        except EIPHError as e:
            dets, error = None, str(e)
        return TileOutcome(i, dets, error, os.getpid(), self.slide.ledger.peak)


def _identity(x):
    return x


##########################################
# merge & result
##########################################
def merge_tiles(per_tile: Sequence[Tuple[BoundingBox, List[Detection]]], nms_thr=0.5) -> List[Detection]:
    """
    Args:
      per_tile: (tile, tile-local detections) for every tile of a plan
      nms_thr: IoU threshold of the class-wise NMS
    Returns:
      slide-coordinate detections, each cell reported once
    """
    if not per_tile:
        return []
    xs = sorted({t.x for t, _ in per_tile})
    ys = sorted({t.y for t, _ in per_tile})
    width = {t.x: t.w for t, _ in per_tile}
    height = {t.y: t.h for t, _ in per_tile}
    survivors = []
    for tile, dets in per_tile:
        col, row = xs.index(tile.x), ys.index(tile.y)
        x_lo, x_hi = _core_span(xs, col, width[tile.x])
        y_lo, y_hi = _core_span(ys, row, height[tile.y])
        for d in dets:
            g = d.translate(tile.x, tile.y)
            cx, cy = g.center
            if x_lo <= cx < x_hi and y_lo <= cy < y_hi:
                survivors.append(g)
    return nms(survivors, nms_thr)


@dataclass(frozen=True)
class PipelineConfig:
    tile_w: int = 1024
    tile_h: int = 1024
    overlap: int = 128
    nms_thr: float = 0.5
    workers: int = 0
    seed: int = 0
    noise: NoiseModel = field(default_factory=NoiseModel)
    read_pixels: bool = False

    def __post_init__(self):
        if not 0 < self.nms_thr <= 1:
            raise EIPHError(f"nms_thr must lie in (0,1], got {self.nms_thr}")
        if self.workers < 0:
            raise EIPHError(f"workers must be non-negative, got {self.workers}")


@dataclass
class SlideResult:
    slide_id: str
    plan: TilePlan
    detections: List[Detection]
    counts: GradeCounts
    ths: Optional[ThsResult]
    heatmap: List[List[Optional[float]]]
    ths_error: Optional[str] = None
    peak_pixel_bytes: int = 0

    def to_json(self) -> dict:
        return {
            "version": RESULT_VERSION,
            "slide": self.slide_id,
            "plan": {
                "tile_w": self.plan.tile_w,
                "tile_h": self.plan.tile_h,
                "overlap": self.plan.overlap,
                "rows": self.plan.rows,
                "cols": self.plan.cols,
            },
            "n_detections": len(self.detections),
            "counts": list(self.counts),
            "ths": None if self.ths is None else self.ths.to_dict(),
            "ths_error": self.ths_error,
            "heatmap": self.heatmap,
        }


def tile_heatmap(plan: TilePlan, detections: Sequence[Detection]) -> List[List[Optional[float]]]:
    """
    100 * mean grade of the detections owned by each tile (center in its
    core), None if none; every detection lands in exactly one cell
    """
    sums = [[0] * plan.cols for _ in range(plan.rows)]
    counts = [[0] * plan.cols for _ in range(plan.rows)]
    for d in detections:
        row, col = plan.owner(*d.box.center)
        sums[row][col] += d.grade
        counts[row][col] += 1
    return [
        [100.0 * s / n if n else None for s, n in zip(srow, nrow)]
        for srow, nrow in zip(sums, counts)
    ]


def _collect(slide, plan, detector, cfg: PipelineConfig, writer=None):
    dataset = TileDataset(slide, plan, detector, cfg.read_pixels)
    loader = DataLoader(
        dataset,
        batch_size=None,
        shuffle=False,
        num_workers=cfg.workers if cfg.workers > 1 else 0,
        collate_fn=_identity,
    )
    results: Dict[int, List[Detection]] = {}
    peaks: Dict[int, int] = {}
    total = len(dataset)
    for outcome in loader:
        if outcome.error is not None:
            raise PipelineError(
                f"{outcome.error}; completed {len(results)}/{total} tiles",
                len(results),
                total,
            )
        results[outcome.index] = outcome.detections
        peaks[outcome.pid] = max(peaks.get(outcome.pid, 0), outcome.peak_bytes)
        if writer is not None:
            writer.add_scalar("tile/detections", len(outcome.detections), outcome.index)
    return [results[i] for i in sorted(results)], sum(peaks.values())


@eiph_timer
def run_pipeline(
    slide: SlideSource,
    source: Union[AnnotationSet, Detector],
    cfg: PipelineConfig = PipelineConfig(),
    writer=None,
) -> SlideResult:
    """
    plan -> detect per tile (worker pool) -> merge -> counts -> THS -> heatmap
    Args:
      slide: the tiled raster
      source: an AnnotationSet (seen through the oracle and `cfg.noise`) or a Detector
      cfg: tiling, merging and pool parameters
      writer: optional tensorboard SummaryWriter
    """
    meta = slide.meta
    plan = plan_tiles(meta, cfg.tile_w, cfg.tile_h, cfg.overlap)
    if isinstance(source, AnnotationSet):
        detector = OracleDetector(source, cfg.noise, cfg.seed)
    else:
        detector = source
    eiph_print(f"slide {meta.id}: {len(plan)} tiles ({plan.rows}x{plan.cols}), workers {cfg.workers}")
    slide.ledger.reset_peak()
    try:
        per_tile, peak = _collect(slide, plan, detector, cfg, writer)
    finally:
        detector.close()
    detections = merge_tiles(list(zip(plan.tiles, per_tile)), cfg.nms_thr)
    counts = grade_counts(detections)
    try:
        score, error = ths(counts), None
    except EIPHError as e:
        score, error = None, str(e)
    result = SlideResult(
        meta.id, plan, detections, counts, score, tile_heatmap(plan, detections), error, peak
    )
    print_table(
        [
            {
                "slide": meta.id,
                "tiles": len(plan),
                "raw": sum(len(d) for d in per_tile),
                "merged": len(detections),
                "ths": None if score is None else score.rounded,
                "peak_px_bytes": peak,
            }
        ],
        "PIPELINE",
    )
    if writer is not None and score is not None:
        writer.add_scalar("slide/ths", score.score, 0)
    return result


##########################################
# outputs
##########################################
def _heat_color(score) -> Tuple[int, int, int]:
    if score is None:
        return 255, 255, 255
    t = min(max(score / 400.0, 0.0), 1.0)
    return int(round(255 * t)), 0, int(round(255 * (1 - t)))


def render_heatmap(result: SlideResult, out_dir, block=HEATMAP_BLOCK) -> Tuple[Path, Path]:
    """
    writes heatmap.csv (row, col, score or empty) and heatmap.ppm, each
    tile a `block` x `block` square, blue (0) to red (400), empty white
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [
        {"row": r, "col": c, "score": v}
        for r, line in enumerate(result.heatmap)
        for c, v in enumerate(line)
    ]
    csv_path = out_dir / "heatmap.csv"
    pd.DataFrame(rows, columns=["row", "col", "score"]).to_csv(csv_path, index=False, na_rep="")
    n_rows = len(result.heatmap)
    n_cols = len(result.heatmap[0]) if n_rows else 0
    image = np.full((max(n_rows, 1) * block, max(n_cols, 1) * block, 3), 255, dtype=np.uint8)
    for r, line in enumerate(result.heatmap):
        for c, v in enumerate(line):
            image[r * block : (r + 1) * block, c * block : (c + 1) * block] = _heat_color(v)
    ppm_path = out_dir / "heatmap.ppm"
    write_ppm(ppm_path, image)
    return csv_path, ppm_path


def load_heatmap(path) -> List[List[Optional[float]]]:
    df = pd.read_csv(path, float_precision="round_trip")
    if df.empty:
        return []
    grid = [[None] * (int(df["col"].max()) + 1) for _ in range(int(df["row"].max()) + 1)]
    for r, c, v in zip(df["row"], df["col"], df["score"]):
        grid[int(r)][int(c)] = None if pd.isna(v) else float(v)
    return grid


def write_result(result: SlideResult, meta: SlideMeta, out_dir, evaluation: Optional[dict] = None) -> Path:
    """
    result.json, detections.jsonl and the heatmap files; `evaluation` is
    stored under its own key of result.json
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "result.json"
    with open(path, "w", encoding="utf-8") as f:
        report = result.to_json()
        if evaluation is not None:
            report["evaluation"] = evaluation
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    dump_detections(meta, result.detections, out_dir / "detections.jsonl")
    render_heatmap(result, out_dir)
    return path
