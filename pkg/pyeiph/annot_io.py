"""
file formats and persistence
  - annotations: JSON lines, slide header first, one cell per line
  - slides: manifest.json + a sparse grid of PPM (P6) or PNG tiles;
    absent tiles are uniform white background
  - ratings: CSV (cell_id, rater_id, session, grade) + reference CSV
"""
import json
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from PIL import Image

from .core_model import *

TILE_MAGIC = "eiph-tiles/1"
WHITE = 255


##########################################
# annotations
##########################################
def _slide_header(slide: SlideMeta):
    return {
        "slide": {
            "id": slide.id,
            "width": slide.width,
            "height": slide.height,
            "staining": slide.staining.value,
            "mpp": slide.resolution,
        }
    }


def _cell_record(cell: CellAnnotation):
    b = cell.box
    return {"id": cell.id, "x": b.x, "y": b.y, "w": b.w, "h": b.h, "grade": cell.grade}


def _parse_int(rec, key, lineno):
    if key not in rec:
        raise AnnotationParseError(f"missing field {key!r}, line {lineno}", lineno)
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not float(v).is_integer():
        raise AnnotationParseError(f"field {key!r} must be an integer, line {lineno}", lineno)
    return int(v)


def _parse_slide(rec, lineno) -> SlideMeta:
    s = rec["slide"]
    try:
        return SlideMeta(
            id=str(s["id"]),
            width=int(s["width"]),
            height=int(s["height"]),
            staining=Staining.parse(s.get("staining", "prussian")),
            resolution=float(s.get("mpp", REFERENCE_MPP)),
        )
    except EIPHError as e:
        raise AnnotationParseError(f"{e}, line {lineno}", lineno)
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationParseError(f"invalid slide header ({e}), line {lineno}", lineno)


def _parse_box(rec, lineno) -> BoundingBox:
    x, y, w, h = (_parse_int(rec, k, lineno) for k in ("x", "y", "w", "h"))
    if w <= 0 or h <= 0:
        raise AnnotationParseError(f"box must have positive size, line {lineno}", lineno)
    if x < 0 or y < 0:
        raise AnnotationParseError(f"negative box origin, line {lineno}", lineno)
    return BoundingBox(x, y, w, h)


def _parse_cell(rec, lineno) -> CellAnnotation:
    cid = _parse_int(rec, "id", lineno)
    grade = _parse_int(rec, "grade", lineno)
    if grade not in GRADES:
        raise AnnotationParseError(f"grade out of range, line {lineno}", lineno)
    return CellAnnotation(cid, _parse_box(rec, lineno), grade)


def _iter_records(path):
    try:
        f = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise EIPHError(f"cannot read {path}: {e}")
    with f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationParseError(f"invalid JSON ({e.msg}), line {lineno}", lineno)


def _read_jsonl(path, parse_item):
    slide, items = None, []
    for lineno, rec in _iter_records(path):
        if not isinstance(rec, dict):
            raise AnnotationParseError(f"expected a JSON object, line {lineno}", lineno)
        if slide is None:
            if "slide" not in rec:
                raise AnnotationParseError(f"missing slide header, line {lineno}", lineno)
            slide = _parse_slide(rec, lineno)
            continue
        items.append(parse_item(rec, lineno))
    return slide, items


@eiph_timer
def parse_annotations(path, validate=False) -> AnnotationSet:
    slide, cells = _read_jsonl(path, _parse_cell)
    annotations = AnnotationSet(slide, tuple(cells))
    if validate:
        violations = validate_annotation_set(annotations)
        if violations:
            raise EIPHError(violations[0])
    return annotations


def load_annotations(path) -> AnnotationSet:
    """
    Args:
      path: JSON-lines file, `{"slide": {...}}` header then one cell per line
    Returns:
      the parsed set; an empty file gives an empty set without a slide
    """
    return parse_annotations(path, validate=True)


def dump_annotations(annotations: AnnotationSet, path):
    slide = annotations.require_slide()
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(_slide_header(slide)) + "\n")
        for cell in annotations.cells:
            f.write(json.dumps(_cell_record(cell)) + "\n")


def _parse_detection(rec, lineno) -> Detection:
    box = _parse_box(rec, lineno)
    try:
        if "probs" not in rec:
            # a plain annotation line counts as a certain detection
            grade = _parse_int(rec, "grade", lineno)
            if grade not in GRADES:
                raise AnnotationParseError(f"grade out of range, line {lineno}", lineno)
            return Detection.certain(box, grade, float(rec.get("confidence", 1.0)))
        return Detection(
            box,
            tuple(float(p) for p in rec["probs"]),
            float(rec["confidence"]),
            float(rec["score"]),
        )
    except AnnotationParseError:
        raise
    except EIPHError as e:
        raise AnnotationParseError(f"{e}, line {lineno}", lineno)
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationParseError(f"invalid detection ({e}), line {lineno}", lineno)


def load_detections(path) -> Tuple[Optional[SlideMeta], List[Detection]]:
    return _read_jsonl(path, _parse_detection)


def dump_detections(slide: SlideMeta, detections, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(_slide_header(slide)) + "\n")
        for i, d in enumerate(detections):
            b = d.box
            rec = {
                "id": i,
                "x": int(round(b.x)),
                "y": int(round(b.y)),
                "w": int(round(b.w)),
                "h": int(round(b.h)),
                "grade": d.grade,
                "probs": list(d.class_probs),
                "score": d.score,
                "confidence": d.confidence,
            }
            f.write(json.dumps(rec) + "\n")


##########################################
# PPM (P6, maxval 255) codec
##########################################
def _ppm_tokens(buf: bytes, count):
    """
    reads `count` whitespace separated header tokens, skipping # comments
    Returns:
      the tokens and the offset of the single whitespace byte ending the header
    """
    tokens, pos, n = [], 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise EIPHError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    tokens, pos = _ppm_tokens(buf, 4)
    if tokens[0] != b"P6":
        raise EIPHError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise EIPHError("malformed PPM header")
    if maxval != 255:
        raise EIPHError(f"unsupported PPM maxval {maxval}")
    data = buf[pos + 1 :]
    expected = width * height * 3
    if len(data) < expected:
        raise EIPHError(f"truncated PPM raster ({len(data)} < {expected} bytes)")
    return np.frombuffer(data[:expected], dtype=np.uint8).reshape(height, width, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read())


def write_ppm(path, pixels: np.ndarray):
    with open(path, "wb") as f:
        f.write(encode_ppm(pixels))


def read_tile_file(path, fmt: TileFormat) -> np.ndarray:
    try:
        if fmt == TileFormat.PPM:
            return read_ppm(path)
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except EIPHError as e:
        raise EIPHError(f"undecodable tile {path}: {e}")
    except OSError as e:
        raise EIPHError(f"undecodable tile {path}: {e}")


def write_tile_file(path, pixels: np.ndarray, fmt: TileFormat):
    if fmt == TileFormat.PPM:
        write_ppm(path, pixels)
    else:
        Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(
            path, format="PNG", optimize=False
        )


##########################################
# pixel accounting
##########################################
class PixelLedger:
    """
    accounting of live pixel buffers handed out by read_region
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0
        self.max_alloc = 0
        self.allocations = 0

    def acquire(self, nbytes):
        with self._lock:
            self.current += nbytes
            self.allocations += 1
            self.peak = max(self.peak, self.current)
            self.max_alloc = max(self.max_alloc, nbytes)

    def release(self, nbytes):
        with self._lock:
            self.current -= nbytes

    def reset(self):
        with self._lock:
            self.current = self.peak = self.max_alloc = self.allocations = 0

    def reset_peak(self):
        """starts a new measurement window over the buffers still live"""
        with self._lock:
            self.peak = self.current

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


@dataclass
class Patch:
    """
    RGB raster cut from a slide, `pixels` has shape (height, width, 3)
    """

    origin: Tuple[int, int]
    pixels: np.ndarray
    ledger: Optional[PixelLedger] = field(default=None, repr=False, compare=False)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def nbytes(self):
        return self.pixels.nbytes

    def close(self):
        if self.ledger is not None:
            self.ledger.release(self.nbytes)
            self.ledger = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


##########################################
# tiled slides
##########################################
class SlideSource:
    """
    a single-level tiled slide; read-only after open, safe to share
    between threads (the tile cache is locked) and picklable for workers
    """

    def __init__(
        self,
        manifest_path,
        meta: SlideMeta,
        tile_size: int,
        tile_format: TileFormat,
        tile_pattern: str,
        cache_tiles: int = EIPH_TILE_CACHE,
    ):
        if tile_size <= 0:
            raise EIPHError(f"tile_size must be positive, got {tile_size}")
        self.manifest_path = Path(manifest_path)
        self.meta = meta
        self.tile_size = tile_size
        self.tile_format = tile_format
        self.tile_pattern = tile_pattern
        self.cache_tiles = cache_tiles
        self.ledger = PixelLedger()
        self._cache = OrderedDict()
        self._lock = threading.Lock()

    @property
    def tile_dir(self) -> Path:
        return self.manifest_path.parent

    @property
    def grid(self) -> Tuple[int, int]:
        ts = self.tile_size
        return -(-self.meta.width // ts), -(-self.meta.height // ts)

    def tile_path(self, col, row) -> Path:
        return self.tile_dir / self.tile_pattern.format(col=col, row=row)

    @property
    def cache_capacity_bytes(self) -> int:
        """
        upper bound of the decoded tiles held by the cache; these stay outside
        the ledger, which only sees the patches handed out by read_region
        """
        return max(self.cache_tiles, 0) * self.tile_size * self.tile_size * 3

    @property
    def cached_bytes(self) -> int:
        with self._lock:
            return sum(t.nbytes for t in self._cache.values() if t is not None)

    def tile_shape(self, col, row) -> Tuple[int, int]:
        ts = self.tile_size
        return (
            min(ts, self.meta.height - row * ts),
            min(ts, self.meta.width - col * ts),
        )

    def _load_tile(self, col, row) -> Optional[np.ndarray]:
        path = self.tile_path(col, row)
        if not path.exists():
            return None
        tile = read_tile_file(path, self.tile_format)
        if tile.shape[:2] != self.tile_shape(col, row):
            raise EIPHError(
                f"undecodable tile {path}: expected {self.tile_shape(col, row)}, got {tile.shape[:2]}"
            )
        tile = tile.copy()
        tile.setflags(write=False)
        return tile

    def get_tile(self, col, row) -> Optional[np.ndarray]:
        """
        the stored raster of a tile, None for an absent (white) tile
        """
        key = (col, row)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        tile = self._load_tile(col, row)
        if self.cache_tiles > 0:
            with self._lock:
                self._cache[key] = tile
                self._cache.move_to_end(key)
                while len(self._cache) > self.cache_tiles:
                    self._cache.popitem(last=False)
        return tile

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        state["_cache"] = OrderedDict()
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


def write_manifest(
    out_dir, meta: SlideMeta, tile_size: int, tile_format: TileFormat
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "tiles").mkdir(exist_ok=True)
    manifest = {
        "magic": TILE_MAGIC,
        "width": meta.width,
        "height": meta.height,
        "tile_size": tile_size,
        "mpp": meta.resolution,
        "staining": meta.staining.value,
        "format": tile_format.suffix,
        "tile_pattern": "tiles/{col}_{row}." + tile_format.suffix,
    }
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return path


def open_slide(manifest_path, slide_id=None) -> SlideSource:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            m = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise EIPHError(f"cannot read manifest {manifest_path}: {e}")
    if m.get("magic") != TILE_MAGIC:
        raise EIPHError(f"{manifest_path}: bad magic {m.get('magic')!r}")
    try:
        meta = SlideMeta(
            id=slide_id or manifest_path.parent.name,
            width=int(m["width"]),
            height=int(m["height"]),
            staining=Staining.parse(m.get("staining", "prussian")),
            resolution=float(m.get("mpp", REFERENCE_MPP)),
        )
        return SlideSource(
            manifest_path,
            meta,
            int(m["tile_size"]),
            TileFormat.parse(m.get("format", "ppm")),
            str(m["tile_pattern"]),
        )
    except KeyError as e:
        raise EIPHError(f"{manifest_path}: missing field {e}")


def _as_rect(rect: BoundingBox) -> Tuple[int, int, int, int]:
    x, y = int(np.floor(rect.x)), int(np.floor(rect.y))
    return x, y, int(np.ceil(rect.x2)) - x, int(np.ceil(rect.y2)) - y


@eiph_timer
def read_region(slide: SlideSource, rect: BoundingBox) -> Patch:
    """
    assembles the pixels of `rect` from the covering tiles
    Returns:
      a Patch; area outside the slide or on absent tiles is white
    """
    if not rect.intersects(slide.meta.bounds):
        raise EIPHError(f"region {rect} lies outside slide {slide.meta.id}")
    x, y, w, h = _as_rect(rect)
    nbytes = w * h * 3
    slide.ledger.acquire(nbytes)
    try:
        out = np.full((h, w, 3), WHITE, dtype=np.uint8)
        ts = slide.tile_size
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, slide.meta.width), min(y + h, slide.meta.height)
        for row in range(y0 // ts, (y1 - 1) // ts + 1):
            for col in range(x0 // ts, (x1 - 1) // ts + 1):
                tile = slide.get_tile(col, row)
                if tile is None:
                    continue
                tx0, ty0 = col * ts, row * ts
                sx0, sy0 = max(x0, tx0), max(y0, ty0)
                sx1 = min(x1, tx0 + tile.shape[1])
                sy1 = min(y1, ty0 + tile.shape[0])
                out[sy0 - y : sy1 - y, sx0 - x : sx1 - x] = tile[
                    sy0 - ty0 : sy1 - ty0, sx0 - tx0 : sx1 - tx0
                ]
    except BaseException:
        slide.ledger.release(nbytes)
        raise
    return Patch((x, y), out, slide.ledger)


##########################################
# ratings
##########################################
@dataclass(frozen=True)
class Rating:
    cell_id: str
    rater_id: str
    session: int
    grade: int


@dataclass(frozen=True)
class RatingTable:
    records: Tuple[Rating, ...]
    reference: Dict[str, int]

    def __post_init__(self):
        seen = set()
        for r in self.records:
            key = (r.cell_id, r.rater_id, r.session)
            if key in seen:
                raise EIPHError(f"duplicate rating {key}")
            seen.add(key)
            if r.cell_id not in self.reference:
                raise EIPHError(f"rating for unknown cell {r.cell_id!r}")

    @property
    def raters(self) -> List[str]:
        return sorted({r.rater_id for r in self.records})

    @property
    def sessions(self) -> List[int]:
        return sorted({r.session for r in self.records})

    def gradings(self, rater, session) -> Dict[str, int]:
        out = {
            r.cell_id: r.grade
            for r in self.records
            if r.rater_id == rater and r.session == session
        }
        if not out:
            raise EIPHError(f"no ratings for rater {rater!r} in session {session}")
        return out

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.cell_id, r.rater_id, r.session, r.grade) for r in self.records],
            columns=["cell_id", "rater_id", "session", "grade"],
        )


def _read_csv(path, columns):
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise EIPHError(f"cannot read {path}: {e}")
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise EIPHError(f"{path}: missing columns {missing}")
    return df


def _csv_int(value, what, path, lineno):
    try:
        return int(str(value).strip())
    except ValueError:
        raise EIPHError(f"{path}: invalid {what} {value!r}, line {lineno}")


def load_ratings(path, reference_path) -> RatingTable:
    """
    Args:
      path: CSV with header cell_id,rater_id,session,grade
      reference_path: CSV with header cell_id,grade
    """
    ref = _read_csv(reference_path, ["cell_id", "grade"])
    reference = {}
    for i, (cid, g) in enumerate(zip(ref["cell_id"], ref["grade"]), start=2):
        g = _csv_int(g, "grade", reference_path, i)
        if g not in GRADES:
            raise EIPHError(f"{reference_path}: grade out of range, line {i}")
        reference[cid.strip()] = g
    df = _read_csv(path, ["cell_id", "rater_id", "session", "grade"])
    records = []
    for i, row in enumerate(df.itertuples(index=False), start=2):
        session = _csv_int(row.session, "session", path, i)
        if session not in (0, 1):
            raise EIPHError(f"{path}: session must be 0 or 1, line {i}")
        grade = _csv_int(row.grade, "grade", path, i)
        if grade not in GRADES:
            raise EIPHError(f"{path}: grade out of range, line {i}")
        records.append(Rating(row.cell_id.strip(), row.rater_id.strip(), session, grade))
    return RatingTable(tuple(records), reference)


def dump_ratings(table: RatingTable, path, reference_path):
    table.to_frame().to_csv(path, index=False)
    pd.DataFrame(
        sorted(table.reference.items()), columns=["cell_id", "grade"]
    ).to_csv(reference_path, index=False)
