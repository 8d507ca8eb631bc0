import json
import pickle

import numpy as np
import pytest

from pyeiph.annot_io import *
from pyeiph.core_model import *


def _write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


HEADER = {"slide": {"id": "s1", "width": 1000, "height": 800, "staining": "prussian", "mpp": 0.25}}


def test_load_three_cells(tmp_path):
    path = _write_lines(
        tmp_path / "a.jsonl",
        [
            HEADER,
            {"id": 1, "x": 10, "y": 10, "w": 20, "h": 20, "grade": 0},
            {"id": 2, "x": 50, "y": 10, "w": 20, "h": 20, "grade": 3},
            {"id": 3, "x": 90, "y": 10, "w": 20, "h": 20, "grade": 4},
        ],
    )
    s = load_annotations(path)
    assert len(s) == 3
    assert s.slide == SlideMeta("s1", 1000, 800, Staining.Prussian, 0.25)
    assert [c.grade for c in s] == [0, 3, 4]


def test_grade_out_of_range_names_line(tmp_path):
    path = _write_lines(tmp_path / "a.jsonl", [HEADER, {"id": 1, "x": 0, "y": 0, "w": 5, "h": 5, "grade": 5}])
    with pytest.raises(AnnotationParseError, match="grade out of range, line 2") as e:
        load_annotations(path)
    assert e.value.line == 2


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    s = load_annotations(path)
    assert len(s) == 0
    assert s.slide is None


def test_missing_header(tmp_path):
    path = _write_lines(tmp_path / "a.jsonl", [{"id": 1, "x": 0, "y": 0, "w": 5, "h": 5, "grade": 1}])
    with pytest.raises(AnnotationParseError, match="missing slide header, line 1"):
        parse_annotations(path)


@pytest.mark.parametrize("field,value", [("width", "abc"), ("height", None), ("mpp", "x")])
def test_malformed_header_number_names_line(tmp_path, field, value):
    slide = dict(HEADER["slide"], **{field: value})
    path = _write_lines(tmp_path / "a.jsonl", [{"slide": slide}])
    with pytest.raises(AnnotationParseError, match="line 1") as e:
        load_annotations(path)
    assert e.value.line == 1


@pytest.mark.parametrize(
    "rec",
    [
        {"x": 0, "y": 0, "w": 5, "h": 5, "grade": 2, "confidence": "high"},
        {"x": 0, "y": 0, "w": 5, "h": 5, "probs": [0, "a", 0, 1, 0], "score": 3.0, "confidence": 0.9},
        {"x": 0, "y": 0, "w": 5, "h": 5, "probs": [0, 0, 0, 1, 0], "score": "3", "confidence": "?"},
    ],
)
def test_malformed_detection_number_names_line(tmp_path, rec):
    path = _write_lines(tmp_path / "d.jsonl", [HEADER, rec])
    with pytest.raises(AnnotationParseError, match="line 2") as e:
        load_detections(path)
    assert e.value.line == 2


def test_negative_origin_names_line(tmp_path):
    path = _write_lines(tmp_path / "a.jsonl", [HEADER, {"id": 8, "x": -1, "y": 10, "w": 10, "h": 10, "grade": 0}])
    with pytest.raises(AnnotationParseError, match="negative box origin, line 2") as e:
        parse_annotations(path)
    assert e.value.line == 2


def test_invariant_violation_reported_by_load(tmp_path):
    path = _write_lines(
        tmp_path / "a.jsonl",
        [
            HEADER,
            {"id": 7, "x": 990, "y": 0, "w": 20, "h": 20, "grade": 1},
        ],
    )
    assert len(parse_annotations(path)) == 1
    with pytest.raises(EIPHError, match="cell 7: box out of bounds"):
        load_annotations(path)


def test_annotation_round_trip(tmp_path, make_set):
    s = make_set([(0, 0, 10, 12, 1), (100, 40, 33, 20, 4)], width=500, height=300)
    dump_annotations(s, tmp_path / "a.jsonl")
    assert load_annotations(tmp_path / "a.jsonl") == s


def test_detections_accept_plain_cells(tmp_path):
    path = _write_lines(
        tmp_path / "d.jsonl",
        [
            HEADER,
            {"id": 0, "x": 0, "y": 0, "w": 5, "h": 5, "grade": 2},
            {"x": 10, "y": 0, "w": 5, "h": 5, "probs": [0, 0.1, 0.2, 0.6, 0], "score": 2.8, "confidence": 0.6},
        ],
    )
    slide, dets = load_detections(path)
    assert slide.id == "s1"
    assert dets[0] == Detection.certain(BoundingBox(0, 0, 5, 5), 2)
    assert dets[1].grade == 3
    assert dets[1].confidence == 0.6


##########################################
# rasters
##########################################
def test_ppm_codec_with_comments():
    px = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    raw = b"P6\n# made by hand\n3 2\n255\n" + px.tobytes()
    assert np.array_equal(decode_ppm(raw), px)
    assert np.array_equal(decode_ppm(encode_ppm(px)), px)
    with pytest.raises(EIPHError):
        decode_ppm(b"P6\n3 2\n255\n" + px.tobytes()[:-1])
    with pytest.raises(EIPHError):
        decode_ppm(b"P3\n1 1\n255\n0 0 0")


def test_ppm_file(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", px)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), px)


def _random_slide(tmp_path, fmt=TileFormat.PPM, width=250, height=170, tile=64, skip=((1, 1),)):
    """
    a slide with random tiles except the `skip` grid positions
    Returns:
      the slide and its full raster, absent tiles white
    """
    meta = SlideMeta("r", width, height)
    manifest = write_manifest(tmp_path / "r", meta, tile, fmt)
    rng = np.random.default_rng(5)
    full = np.full((height, width, 3), 255, dtype=np.uint8)
    for row in range(-(-height // tile)):
        for col in range(-(-width // tile)):
            if (col, row) in skip:
                continue
            h = min(tile, height - row * tile)
            w = min(tile, width - col * tile)
            px = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
            write_tile_file(manifest.parent / f"tiles/{col}_{row}.{fmt.suffix}", px, fmt)
            full[row * tile : row * tile + h, col * tile : col * tile + w] = px
    return open_slide(manifest), full


def _stitch_oracle(full, x, y, w, h):
    out = np.full((h, w, 3), 255, dtype=np.uint8)
    for j in range(h):
        for i in range(w):
            sx, sy = x + i, y + j
            if 0 <= sx < full.shape[1] and 0 <= sy < full.shape[0]:
                out[j, i] = full[sy, sx]
    return out


@pytest.mark.parametrize("fmt", [TileFormat.PPM, TileFormat.PNG])
def test_read_region_matches_pixel_oracle(tmp_path, fmt):
    slide, full = _random_slide(tmp_path, fmt)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, y = int(rng.integers(-30, 240)), int(rng.integers(-30, 160))
        w, h = int(rng.integers(1, 140)), int(rng.integers(1, 140))
        rect = BoundingBox(x, y, w, h)
        if not rect.intersects(slide.meta.bounds):
            continue
        with read_region(slide, rect) as patch:
            assert patch.origin == (x, y)
            assert np.array_equal(patch.pixels, _stitch_oracle(full, x, y, w, h))
    assert slide.ledger.current == 0


def test_read_region_single_tile_crop_and_absent_tile(tmp_path):
    slide, full = _random_slide(tmp_path)
    with read_region(slide, BoundingBox(3, 5, 40, 50)) as p:
        assert np.array_equal(p.pixels, slide.get_tile(0, 0)[5:55, 3:43])
    with read_region(slide, BoundingBox(64, 64, 64, 64)) as p:
        assert (p.pixels == 255).all()


def test_read_region_outside_slide(tmp_path):
    slide, _ = _random_slide(tmp_path)
    with pytest.raises(EIPHError, match="outside"):
        read_region(slide, BoundingBox(250, 0, 10, 10))


def test_bad_tile_reports_path(tmp_path):
    slide, _ = _random_slide(tmp_path)
    slide.tile_path(0, 0).write_bytes(b"P6\n64 64\n255\n\x00")
    slide = open_slide(slide.manifest_path)
    with pytest.raises(EIPHError, match="undecodable tile"):
        read_region(slide, BoundingBox(0, 0, 10, 10))


def test_ledger_tracks_peak(tmp_path):
    slide, _ = _random_slide(tmp_path)
    a = read_region(slide, BoundingBox(0, 0, 10, 10))
    b = read_region(slide, BoundingBox(0, 0, 20, 10))
    assert slide.ledger.current == 900
    a.close()
    b.close()
    a.close()
    assert slide.ledger.current == 0
    assert slide.ledger.peak == 900
    assert slide.ledger.max_alloc == 600
    slide.ledger.reset_peak()
    assert slide.ledger.peak == 0


def test_slide_source_pickles(tmp_path):
    slide, _ = _random_slide(tmp_path)
    slide.get_tile(0, 0)
    clone = pickle.loads(pickle.dumps(slide))
    with read_region(clone, BoundingBox(0, 0, 8, 8)) as p:
        assert np.array_equal(p.pixels, slide.get_tile(0, 0)[:8, :8])


def test_open_slide_rejects_bad_magic(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"magic": "nope"}))
    with pytest.raises(EIPHError, match="bad magic"):
        open_slide(tmp_path)


##########################################
# ratings
##########################################
def _write_ratings(tmp_path, rows, ref):
    (tmp_path / "r.csv").write_text(
        "cell_id,rater_id,session,grade\n" + "".join(",".join(map(str, r)) + "\n" for r in rows)
    )
    (tmp_path / "ref.csv").write_text(
        "cell_id,grade\n" + "".join(f"{c},{g}\n" for c, g in ref.items())
    )
    return tmp_path / "r.csv", tmp_path / "ref.csv"


def test_load_ratings(tmp_path):
    paths = _write_ratings(
        tmp_path,
        [("c1", "r1", 0, 1), ("c2", "r1", 0, 2), ("c1", "r2", 0, 1), ("c2", "r2", 0, 3)],
        {"c1": 1, "c2": 2},
    )
    table = load_ratings(*paths)
    assert len(table.records) == 4
    assert table.raters == ["r1", "r2"]
    assert table.gradings("r2", 0) == {"c1": 1, "c2": 3}


def test_duplicate_rating_named(tmp_path):
    paths = _write_ratings(tmp_path, [("c1", "r1", 0, 1), ("c1", "r1", 0, 2)], {"c1": 1})
    with pytest.raises(EIPHError, match=r"duplicate rating \('c1', 'r1', 0\)"):
        load_ratings(*paths)


def test_rating_for_unknown_cell(tmp_path):
    paths = _write_ratings(tmp_path, [("c9", "r1", 0, 1)], {"c1": 1})
    with pytest.raises(EIPHError, match="unknown cell"):
        load_ratings(*paths)


def test_balanced_rating_round_trip(tmp_path):
    from pyeiph.synth import simulate_ratings

    table = simulate_ratings([0.8], np.random.default_rng(0), n_per_grade=200, sessions=(0,))
    assert np.bincount(list(table.reference.values())).tolist() == [200] * 5
    dump_ratings(table, tmp_path / "r.csv", tmp_path / "ref.csv")
    again = load_ratings(tmp_path / "r.csv", tmp_path / "ref.csv")
    assert again.reference == table.reference
    assert sorted(again.records, key=lambda r: r.cell_id) == sorted(table.records, key=lambda r: r.cell_id)
