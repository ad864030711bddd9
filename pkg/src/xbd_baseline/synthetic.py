"""Synthetic xBD-style tiles for tests, demos and sanity runs.

Buildings are axis-aligned rectangles. In the pre image every building has
the same roof colour; in the post image the colour encodes the damage class,
so a model can learn the mapping from a handful of tiles.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .ingest import DISJOINT_SPLIT_COUNTS, ImagePair, PairRecord, rasterize

ROOF = (190, 190, 190)
POST_COLOURS = {
    1: (190, 190, 190),
    2: (230, 200, 60),
    3: (150, 80, 30),
    4: (35, 35, 35),
}
SUBTYPE_NAMES = {1: "no-damage", 2: "minor-damage", 3: "major-damage", 4: "destroyed", 255: "un-classified"}


def random_buildings(rng, size: int, per_class: int = 3, min_side: int = 20, max_side: int = 44,
                     classes=(1, 2, 3, 4)):
    """Non-overlapping integer rectangles ``(x0, y0, x1, y1, cls)``."""
    taken = np.zeros((size, size), dtype=bool)
    boxes = []
    for cls in classes:
        placed = 0
        for _ in range(200):
            if placed == per_class:
                break
            w, h = rng.integers(min_side, max_side + 1, size=2)
            x0 = int(rng.integers(2, size - w - 2))
            y0 = int(rng.integers(2, size - h - 2))
            x1, y1 = x0 + int(w), y0 + int(h)
            if taken[max(y0 - 3, 0):y1 + 3, max(x0 - 3, 0):x1 + 3].any():
                continue
            taken[y0:y1, x0:x1] = True
            boxes.append((x0, y0, x1, y1, cls))
            placed += 1
    return boxes


def box_polygon(box) -> np.ndarray:
    x0, y0, x1, y1 = box[:4]
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def render_tile(rng, size: int = 256, per_class: int = 3, tile_id: str = "synthetic_00000000",
                event: str = "synthetic"):
    """Return ``(ImagePair, label, boxes)`` for one synthetic tile."""
    ground = np.empty((size, size, 3), dtype=np.float64)
    ground[:] = (70, 120, 60)
    ground += rng.normal(0, 12, size=(size, size, 3))
    pre = ground.copy()
    post = ground + rng.normal(0, 4, size=(size, size, 3))
    boxes = random_buildings(rng, size, per_class)
    for x0, y0, x1, y1, cls in boxes:
        pre[y0:y1, x0:x1] = ROOF
        post[y0:y1, x0:x1] = POST_COLOURS[cls]
    pre = np.clip(pre, 0, 255).astype(np.uint8)
    post = np.clip(post, 0, 255).astype(np.uint8)
    label = rasterize([(box_polygon(b), b[4]) for b in boxes], size, size)
    return ImagePair(pre, post, tile_id, event), label, boxes


def label_document(boxes, size: int, phase: str = "post") -> dict:
    feats = []
    for i, box in enumerate(boxes):
        x0, y0, x1, y1, cls = box
        wkt = f"POLYGON (({x0} {y0}, {x1} {y0}, {x1} {y1}, {x0} {y1}, {x0} {y0}))"
        props = {"feature_type": "building", "uid": f"b{i}"}
        if phase == "post":
            props["subtype"] = SUBTYPE_NAMES[cls]
        feats.append({"properties": props, "wkt": wkt})
    return {"features": {"lng_lat": [], "xy": feats},
            "metadata": {"width": size, "height": size, "disaster": "synthetic"}}


def write_tile(root, subset: str, pair: ImagePair, boxes, size: int) -> PairRecord:
    rec = PairRecord(pair.tile_id, pair.event_name, subset)
    img_dir = Path(root) / subset / "images"
    lab_dir = Path(root) / subset / "labels"
    img_dir.mkdir(parents=True, exist_ok=True)
    lab_dir.mkdir(parents=True, exist_ok=True)
    for phase, img in (("pre", pair.pre), ("post", pair.post)):
        cv2.imwrite(str(rec.image_path(root, phase)), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        rec.label_path(root, phase).write_text(json.dumps(label_document(boxes, size, phase)))
    return rec


def write_dataset(root, n_tiles: int = 4, size: int = 256, seed: int = 0, subset: str = "train",
                  events=("synthetic",), per_class: int = 3) -> list[PairRecord]:
    """Write ``n_tiles`` tiles per event under ``root`` in the xBD layout."""
    rng = np.random.default_rng(seed)
    recs = []
    for event in events:
        for i in range(n_tiles):
            pair, _, boxes = render_tile(rng, size, per_class, f"{event}_{i:08d}", event)
            recs.append(write_tile(root, subset, pair, boxes, size))
    return recs


def disjoint_manifest() -> list[PairRecord]:
    """Pair records whose per-event counts match the event-disjoint split table."""
    recs = []
    for counts in DISJOINT_SPLIT_COUNTS.values():
        for event, n in counts.items():
            recs.extend(PairRecord(f"{event}_{i:08d}", event, "train") for i in range(n))
    return recs


def original_manifest(counts=None) -> list[PairRecord]:
    """Pair records with the xBD subset sizes (train 2799, tier3 6369, test 933, holdout 933)."""
    counts = counts or {"train": 2799, "tier3": 6369, "test": 933, "holdout": 933}
    events = sorted(DISJOINT_SPLIT_COUNTS["train"]) + sorted(DISJOINT_SPLIT_COUNTS["test"])
    recs = []
    for subset, n in counts.items():
        recs.extend(PairRecord(f"{events[i % len(events)]}_{subset}{i:07d}", events[i % len(events)], subset)
                    for i in range(n))
    return recs
