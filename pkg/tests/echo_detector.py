"""
stand-in detector process for the pipeline tests: answers each tile request
with the annotated cells overlapping the tile, clipped, in tile coordinates

    echo_detector.py ANNOTATIONS.jsonl [--bad-id | --die | --sleep SECONDS]
"""
import json
import sys
import time


def load_cells(path):
    cells = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            if "slide" not in rec:
                cells.append(rec)
    return cells


def ppm_size(path):
    with open(path, "rb") as f:
        tokens = f.read(64).split()
    return int(tokens[1]), int(tokens[2])


def answer(cells, req):
    x0, y0, w, h = req["x"], req["y"], req["w"], req["h"]
    if req["patch_ppm_path"] and ppm_size(req["patch_ppm_path"]) != (w, h):
        return {"id": -1, "detections": []}
    out = []
    for c in cells:
        lx, ly = max(c["x"], x0), max(c["y"], y0)
        hx, hy = min(c["x"] + c["w"], x0 + w), min(c["y"] + c["h"], y0 + h)
        if hx <= lx or hy <= ly:
            continue
        probs = [0.0] * 5
        probs[c["grade"]] = 1.0
        out.append(
            {
                "x": lx - x0,
                "y": ly - y0,
                "w": hx - lx,
                "h": hy - ly,
                "probs": probs,
                "score": float(c["grade"]),
                "confidence": 0.9,
            }
        )
    return {"id": req["id"], "detections": out}


def main(argv):
    cells = load_cells(argv[0])
    mode = argv[1] if len(argv) > 1 else None
    for line in sys.stdin:
        req = json.loads(line)
        if mode == "--die":
            return 3
        if mode == "--sleep":
            time.sleep(float(argv[2]))
        resp = answer(cells, req)
        if mode == "--bad-id":
            resp["id"] = req["id"] + 1000
        sys.stdout.write(json.dumps(resp) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
