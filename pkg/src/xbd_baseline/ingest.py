"""xBD dataset ingestion: label parsing, rasterization, class statistics and splits.

On-disk layout follows the public xBD release::

    <root>/{train,tier3,test,holdout}/images/<event>_<tile>_{pre,post}_disaster.png
    <root>/{train,tier3,test,holdout}/labels/<event>_<tile>_{pre,post}_disaster.json

Label documents carry building footprints as WKT polygons in pixel
coordinates under ``features.xy``; post-disaster documents additionally carry
a damage ``subtype`` per building.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import shapely.wkt
from shapely.errors import ShapelyError

log = logging.getLogger(__name__)

IGNORE = 255
NUM_DAMAGE_CLASSES = 4
FREQUENCY_FLOOR = 1e-6

DAMAGE_SUBTYPES = {
    "no-damage": 1,
    "minor-damage": 2,
    "major-damage": 3,
    "destroyed": 4,
    "un-classified": IGNORE,
}

SUBSETS = ("train", "tier3", "test", "holdout")

DISASTER_TYPES = (
    "wildfire", "hurricane", "tornado", "flood",
    "earthquake", "tsunami", "volcano", "bushfire",
)

XBD_EVENT_TYPES = {
    "guatemala-volcano": "volcano",
    "hurricane-florence": "hurricane",
    "hurricane-harvey": "hurricane",
    "hurricane-matthew": "hurricane",
    "hurricane-michael": "hurricane",
    "joplin-tornado": "tornado",
    "lower-puna-volcano": "volcano",
    "mexico-earthquake": "earthquake",
    "midwest-flooding": "flood",
    "moore-tornado": "tornado",
    "nepal-flooding": "flood",
    "palu-tsunami": "tsunami",
    "pinery-bushfire": "bushfire",
    "portugal-wildfire": "wildfire",
    "santa-rosa-wildfire": "wildfire",
    "socal-fire": "wildfire",
    "sunda-tsunami": "tsunami",
    "tuscaloosa-tornado": "tornado",
    "woolsey-fire": "wildfire",
}

# Events whose imagery overlaps or lies close together on the ground.
PROXIMITY_GROUPS = {
    "socal-fire": "los-angeles-2018",
    "woolsey-fire": "los-angeles-2018",
    "midwest-flooding": "oklahoma",
    "moore-tornado": "oklahoma",
    "joplin-tornado": "oklahoma",
}

DISJOINT_TEST_EVENTS = (
    "tuscaloosa-tornado",
    "guatemala-volcano",
    "sunda-tsunami",
    "santa-rosa-wildfire",
    "hurricane-matthew",
)

# Pair counts of the event-disjoint split, usable as a manifest fixture when
# the imagery itself is not available.
DISJOINT_SPLIT_COUNTS = {
    "train": {
        "lower-puna-volcano": 291,
        "palu-tsunami": 155,
        "mexico-earthquake": 159,
        "socal-fire": 1130,
        "woolsey-fire": 878,
        "portugal-wildfire": 1869,
        "pinery-bushfire": 1845,
        "nepal-flooding": 619,
        "midwest-flooding": 359,
        "moore-tornado": 277,
        "joplin-tornado": 149,
        "hurricane-florence": 427,
        "hurricane-harvey": 427,
        "hurricane-michael": 441,
    },
    "test": {
        "tuscaloosa-tornado": 343,
        "guatemala-volcano": 23,
        "sunda-tsunami": 138,
        "santa-rosa-wildfire": 300,
        "hurricane-matthew": 311,
    },
}

_IMAGE_NAME = re.compile(r"^(?P<event>.+?)_(?P<tile>\d+)_(?P<phase>pre|post)_disaster\.(?P<ext>\w+)$")


class LabelParseError(ValueError):
    pass


class SplitError(ValueError):
    pass


class ZeroFrequencyError(ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    event_name: str
    disaster_type: str
    proximity_group: str | None = None
    pair_count: int = 0

    def __post_init__(self):
        if self.disaster_type not in DISASTER_TYPES:
            raise ValueError(f"unknown disaster type {self.disaster_type!r}")
        if self.pair_count < 0:
            raise ValueError("pair_count must be non-negative")


@dataclass(frozen=True)
class PairRecord:
    """One (pre, post, label) triple on disk, addressed relative to the data root."""

    tile_id: str
    event_name: str
    subset: str | None = None

    def image_path(self, root: str | os.PathLike, phase: str, ext: str = "png") -> Path:
        return Path(root) / (self.subset or "") / "images" / f"{self.tile_id}_{phase}_disaster.{ext}"

    def label_path(self, root: str | os.PathLike, phase: str = "post") -> Path:
        return Path(root) / (self.subset or "") / "labels" / f"{self.tile_id}_{phase}_disaster.json"


@dataclass
class ImagePair:
    pre: np.ndarray
    post: np.ndarray
    tile_id: str = ""
    event_name: str = ""

    def __post_init__(self):
        if self.pre.shape != self.post.shape:
            raise ValueError(f"pre {self.pre.shape} and post {self.post.shape} differ in shape")
        if self.pre.ndim != 3 or self.pre.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 rasters, got {self.pre.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pre.shape[:2]


@dataclass
class DatasetSplit:
    mode: str
    train_events: list[str]
    val_events: list[str]
    test_events: list[str]
    # subset name -> pairs; empty when the split was built from event counts only
    pairs: dict[str, list[PairRecord]] = field(default_factory=dict)
    event_counts: dict[str, int] = field(default_factory=dict)

    def subset_events(self, subset: str) -> list[str]:
        return {"train": self.train_events, "val": self.val_events, "test": self.test_events}[subset]

    def count(self, subset: str) -> int:
        if self.pairs.get(subset):
            return len(self.pairs[subset])
        return sum(self.event_counts.get(e, 0) for e in self.subset_events(subset))


def event_record(name: str, pair_count: int = 0) -> EventRecord:
    if name not in XBD_EVENT_TYPES:
        raise SplitError(f"no disaster type known for event {name!r}")
    return EventRecord(name, XBD_EVENT_TYPES[name], PROXIMITY_GROUPS.get(name), pair_count)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

def _wkt_rings(text: str, path) -> list[np.ndarray]:
    try:
        geom = shapely.wkt.loads(text)
    except (ShapelyError, TypeError) as exc:
        raise LabelParseError(f"{path}: bad WKT geometry {text[:40]!r}") from exc
    parts = getattr(geom, "geoms", [geom])
    rings = []
    for part in parts:
        if part.geom_type != "Polygon" or part.is_empty:
            continue
        verts = np.asarray(part.exterior.coords, dtype=np.float64)
        if len(verts) > 1 and np.array_equal(verts[0], verts[-1]):
            verts = verts[:-1]
        if len(verts) >= 3:
            rings.append(verts)
    return rings


def parse_label_document(doc: Mapping, path="<document>") -> list[tuple[np.ndarray, int]]:
    try:
        features = doc["features"]["xy"]
    except (KeyError, TypeError) as exc:
        raise LabelParseError(f"{path}: missing features.xy") from exc

    polygons = []
    for feat in features:
        try:
            props = feat.get("properties", {})
            text = feat["wkt"]
        except (AttributeError, KeyError) as exc:
            raise LabelParseError(f"{path}: malformed feature {feat!r:.60}") from exc
        if props.get("feature_type", "building") != "building":
            continue
        subtype = props.get("subtype")
        if subtype is None:
            cls = 1  # pre-disaster footprints carry no damage level
        elif subtype in DAMAGE_SUBTYPES:
            cls = DAMAGE_SUBTYPES[subtype]
        else:
            raise LabelParseError(f"{path}: unknown damage subtype {subtype!r}")
        polygons.extend((ring, cls) for ring in _wkt_rings(text, path))
    return polygons


def parse_label_file(path: str | os.PathLike) -> list[tuple[np.ndarray, int]]:
    """Read an xBD label document into ``(vertices, damage_class)`` pairs.

    Vertices are an ``(n, 2)`` array of ``(x, y)`` pixel coordinates with
    ``n >= 3``. Pre-disaster documents have no damage subtype, so all of their
    buildings map to class 1. ``un-classified`` buildings map to ``IGNORE``.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise LabelParseError(f"{path}: not a JSON document ({exc})") from exc
    return parse_label_document(doc, path)


def label_size(path: str | os.PathLike, default: tuple[int, int] = (1024, 1024)) -> tuple[int, int]:
    """(W, H) recorded in a label document's metadata."""
    with open(path) as fh:
        meta = json.load(fh).get("metadata", {})
    return int(meta.get("width", default[0])), int(meta.get("height", default[1]))


# Overlapping polygons resolve to the highest damage class; IGNORE only wins
# over background.
_PRIORITY = np.zeros(256, dtype=np.int16)
_PRIORITY[1:5] = np.arange(2, 6)
_PRIORITY[IGNORE] = 1


def _polygon_coverage(verts: np.ndarray, W: int, H: int):
    """Pixels whose centers fall inside the polygon, by the even-odd rule.

    Scanline over pixel centers with half-open edge tests, so a center lying
    exactly on a left or top edge is inside and on a right or bottom edge is
    outside. Returns ``(row_offset, col_offset, mask)`` over the bounding box.
    """
    x, y = verts[:, 0], verts[:, 1]
    r0 = max(int(math.floor(y.min() - 0.5)), 0)
    r1 = min(int(math.ceil(y.max() - 0.5)) + 1, H)
    c0 = max(int(math.floor(x.min() - 0.5)), 0)
    c1 = min(int(math.ceil(x.max() - 0.5)) + 1, W)
    if r1 <= r0 or c1 <= c0:
        return None

    yc = np.arange(r0, r1) + 0.5
    xa, ya = x, y
    xb, yb = np.roll(x, -1), np.roll(y, -1)
    lo, hi = np.minimum(ya, yb), np.maximum(ya, yb)
    crosses = (lo[None, :] <= yc[:, None]) & (yc[:, None] < hi[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = xa[None, :] + (yc[:, None] - ya[None, :]) * (xb - xa)[None, :] / (yb - ya)[None, :]
    xi = np.where(crosses, xi, np.inf)
    xi.sort(axis=1)

    ncols = c1 - c0
    diff = np.zeros((r1 - r0, ncols + 1), dtype=np.int32)
    rows = np.arange(r1 - r0)
    for k in range(0, xi.shape[1] - 1, 2):
        left, right = xi[:, k], xi[:, k + 1]
        ok = np.isfinite(right)
        # first column with center >= left, first column with center >= right
        a = np.clip(np.ceil(left[ok] - 0.5).astype(np.int64) - c0, 0, ncols)
        b = np.clip(np.ceil(right[ok] - 0.5).astype(np.int64) - c0, 0, ncols)
        np.add.at(diff, (rows[ok], a), 1)
        np.add.at(diff, (rows[ok], b), -1)
    mask = np.cumsum(diff[:, :-1], axis=1) > 0
    return r0, c0, mask


def rasterize(polygons: Iterable[tuple[np.ndarray, int]], W: int, H: int) -> np.ndarray:
    """Burn ``(vertices, class)`` polygons into an ``H x W`` uint8 label raster."""
    if W <= 0 or H <= 0:
        raise ValueError("raster dimensions must be positive")
    out = np.zeros((H, W), dtype=np.uint8)
    for verts, cls in polygons:
        verts = np.asarray(verts, dtype=np.float64)
        if len(verts) < 3:
            continue
        cov = _polygon_coverage(verts, W, H)
        if cov is None:
            continue
        r0, c0, mask = cov
        view = out[r0:r0 + mask.shape[0], c0:c0 + mask.shape[1]]
        wins = mask & (_PRIORITY[cls] > _PRIORITY[view])
        view[wins] = cls
    return out


def load_label_raster(path: str | os.PathLike, size: tuple[int, int] | None = None) -> np.ndarray:
    W, H = size if size is not None else label_size(path)
    return rasterize(parse_label_file(path), W, H)


# ---------------------------------------------------------------------------
# class statistics
# ---------------------------------------------------------------------------

def class_pixel_counts(labels: Iterable[np.ndarray]) -> np.ndarray:
    """Pixel counts for classes 0..4 over non-IGNORE pixels."""
    counts = np.zeros(NUM_DAMAGE_CLASSES + 1, dtype=np.int64)
    for lab in labels:
        hist = np.bincount(np.asarray(lab, dtype=np.uint8).ravel(), minlength=256)
        counts += hist[:NUM_DAMAGE_CLASSES + 1]
    return counts


def frequencies_from_counts(counts: np.ndarray, floor: bool = False) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    total = counts.sum()
    if total == 0:
        raise ZeroFrequencyError("no labelled pixels to count")
    f = np.empty(NUM_DAMAGE_CLASSES + 1)
    f[:4] = counts[1:] / total
    f[4] = counts[1:].sum() / total
    zero = [c + 1 for c in range(5) if f[c] == 0]
    if zero:
        if not floor:
            raise ZeroFrequencyError(
                f"output channels {zero} have no pixels in the training set; "
                f"enable the frequency floor ({FREQUENCY_FLOOR:g}) explicitly"
            )
        f = np.maximum(f, FREQUENCY_FLOOR)
    return f


def compute_class_frequencies(labels: Iterable[np.ndarray], floor: bool = False) -> np.ndarray:
    """Relative frequency per output channel over the given training rasters.

    Entries 0..3 are the damage classes 1..4; entry 4 is building presence.
    All are fractions of non-IGNORE pixels.
    """
    return frequencies_from_counts(class_pixel_counts(labels), floor=floor)


def save_frequencies(path, f) -> None:
    Path(path).write_text(" ".join(repr(float(v)) for v in f) + "\n")


def load_frequencies(path) -> np.ndarray:
    f = np.array([float(v) for v in Path(path).read_text().split()])
    if f.shape != (5,):
        raise ValueError(f"{path}: expected 5 frequencies, found {f.size}")
    return f


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def discover_pairs(root: str | os.PathLike, subsets: Sequence[str] = SUBSETS) -> list[PairRecord]:
    """Scan ``root`` for complete (pre image, post image, post label) triples."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data root {root} does not exist")
    pairs = []
    for subset in subsets:
        img_dir = root / subset / "images"
        if not img_dir.is_dir():
            continue
        found: dict[str, set] = defaultdict(set)
        events = {}
        for name in os.listdir(img_dir):
            m = _IMAGE_NAME.match(name)
            if m is None:
                continue
            tile_id = f"{m['event']}_{m['tile']}"
            found[tile_id].add(m["phase"])
            events[tile_id] = m["event"]
        for tile_id in sorted(found):
            rec = PairRecord(tile_id, events[tile_id], subset)
            if found[tile_id] == {"pre", "post"} and rec.label_path(root).is_file():
                pairs.append(rec)
            else:
                log.warning("skipping incomplete tile %s/%s", subset, tile_id)
    return pairs


def write_pair_manifest(path, pairs: Iterable[PairRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["subset", "event", "tile_id"])
        for p in pairs:
            w.writerow([p.subset or "", p.event_name, p.tile_id])


def read_pair_manifest(path) -> list[PairRecord]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
    if not rows or rows[0] != ["subset", "event", "tile_id"]:
        raise ValueError(f"{path}: not a pair manifest")
    return [PairRecord(tile, event, subset or None) for subset, event, tile in rows[1:]]


def load_manifest(root, cache=None) -> list[PairRecord]:
    """Pairs under ``root``; reuses ``cache`` if it exists, otherwise writes it."""
    if cache is not None and Path(cache).is_file():
        return read_pair_manifest(cache)
    pairs = discover_pairs(root)
    if cache is not None:
        write_pair_manifest(cache, pairs)
    return pairs


def events_from_pairs(pairs: Iterable[PairRecord], subsets=("train", "tier3", "test")) -> list[EventRecord]:
    counts: dict[str, int] = defaultdict(int)
    for p in pairs:
        if p.subset is None or p.subset in subsets:
            counts[p.event_name] += 1
    return [event_record(name, n) for name, n in sorted(counts.items())]


def write_split(path, split: DatasetSplit) -> None:
    """Plain-text split manifest: one ``subset  event  tile_id`` line per pair."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# mode={split.mode}\n")
        for subset in ("train", "val", "test"):
            fh.write(f"# {subset}_events={','.join(split.subset_events(subset))}\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["subset", "event", "tile_id", "source"])
        for subset in ("train", "val", "test"):
            for p in split.pairs.get(subset, []):
                w.writerow([subset, p.event_name, p.tile_id, p.subset or ""])


def read_split(path) -> DatasetSplit:
    header: dict[str, str] = {}
    pairs: dict[str, list[PairRecord]] = {"train": [], "val": [], "test": []}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key] = value
        elif line:
            body.append(line.split("\t"))
    if "mode" not in header or not body or body[0][:3] != ["subset", "event", "tile_id"]:
        raise ValueError(f"{path}: not a split manifest")
    for row in body[1:]:
        subset, event, tile = row[:3]
        source = row[3] if len(row) > 3 and row[3] else None
        pairs[subset].append(PairRecord(tile, event, source))
    events = {s: [e for e in header.get(f"{s}_events", "").split(",") if e] for s in pairs}
    counts: dict[str, int] = defaultdict(int)
    for ps in pairs.values():
        for p in ps:
            counts[p.event_name] += 1
    return DatasetSplit(header["mode"], events["train"], events["val"], events["test"], pairs, dict(counts))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def make_disjoint_split(manifest: Sequence[EventRecord], pairs: Sequence[PairRecord] | None = None) -> DatasetSplit:
    """Event-disjoint train/test split with spatially close events kept together.

    The test events are fixed. Every proximity group containing a training
    event is kept wholly in training. Events not in the known xBD table go to
    training. If ``pairs`` is given, the split also carries the pair lists
    (holdout pairs excluded).
    """
    names = {e.event_name for e in manifest}
    if len(names) != len(manifest):
        raise SplitError("duplicate event names in manifest")
    required = set(XBD_EVENT_TYPES)
    missing = sorted(required - names)
    if missing:
        raise SplitError(f"events missing from manifest: {', '.join(missing)}")

    test = [e.event_name for e in manifest if e.event_name in DISJOINT_TEST_EVENTS]
    test.sort(key=DISJOINT_TEST_EVENTS.index)
    train = sorted(names - set(test))

    groups: dict[str, set] = defaultdict(set)
    for e in manifest:
        if e.proximity_group:
            groups[e.proximity_group].add(e.event_name)
    for g, members in groups.items():
        if members & set(test) and members & set(train):
            raise SplitError(f"proximity group {g} would straddle train and test")

    unknown = sorted(names - required)
    if unknown:
        log.warning("events outside the xBD table assigned to train: %s", ", ".join(unknown))

    split = DatasetSplit("disjoint", train, [], test, event_counts={e.event_name: e.pair_count for e in manifest})
    if pairs is not None:
        pool = [p for p in pairs if p.subset != "holdout"]
        split.pairs = {
            "train": [p for p in pool if p.event_name in set(train)],
            "val": [],
            "test": [p for p in pool if p.event_name in set(test)],
        }
    return split


def make_original_split(pairs: Sequence[PairRecord]) -> DatasetSplit:
    """Competition split: train and tier3 pooled for training, test held out."""
    if any(p.subset not in SUBSETS for p in pairs):
        bad = sorted({str(p.subset) for p in pairs if p.subset not in SUBSETS})
        raise SplitError(f"pairs without a valid subset tag: {bad}")
    train = [p for p in pairs if p.subset in ("train", "tier3")]
    test = [p for p in pairs if p.subset == "test"]
    if not train:
        raise SplitError("no train/tier3 pairs in manifest")
    counts: dict[str, int] = defaultdict(int)
    for p in train + test:
        counts[p.event_name] += 1
    return DatasetSplit(
        "original",
        sorted({p.event_name for p in train}),
        [],
        sorted({p.event_name for p in test}),
        {"train": train, "val": [], "test": test},
        dict(counts),
    )


def stratified_val_split(train_pairs: Sequence[PairRecord], fraction: float = 0.1, seed: int = 0):
    """Move ``round(fraction * n)`` random pairs of each event into validation.

    Events with fewer than two pairs stay entirely in training, and every
    event keeps at least one training pair. The result depends only on the
    set of pairs, the fraction and the seed, not on input order.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    by_event: dict[str, list[PairRecord]] = defaultdict(list)
    for p in train_pairs:
        by_event[p.event_name].append(p)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for event in sorted(by_event):
        members = sorted(by_event[event], key=lambda p: (p.tile_id, p.subset or ""))
        n = len(members)
        n_val = 0 if n < 2 else min(int(math.floor(fraction * n + 0.5)), n - 1)
        order = rng.permutation(n)
        chosen = set(order[:n_val].tolist())
        for i, p in enumerate(members):
            (val if i in chosen else train).append(p)
    return train, val


def with_validation(split: DatasetSplit, fraction: float = 0.1, seed: int = 0) -> DatasetSplit:
    train, val = stratified_val_split(split.pairs.get("train", []), fraction, seed)
    pairs = dict(split.pairs, train=train, val=val)
    val_events = sorted({p.event_name for p in val})
    return DatasetSplit(split.mode, split.train_events, val_events, split.test_events, pairs, split.event_counts)


# ---------------------------------------------------------------------------
# per-event distributions
# ---------------------------------------------------------------------------

@dataclass
class EventDistribution:
    event: str
    damage_shares: np.ndarray  # classes 1..4 as fractions of building pixels
    building_share: float
    empty: bool = False


def analyze_distributions(labels_by_event: Mapping[str, Iterable[np.ndarray]]) -> list[EventDistribution]:
    rows = []
    for event in sorted(labels_by_event):
        counts = class_pixel_counts(labels_by_event[event])
        building = counts[1:].sum()
        total = counts.sum()
        if building == 0:
            log.warning("event %s has no building pixels", event)
            rows.append(EventDistribution(event, np.zeros(4), 0.0, empty=True))
            continue
        rows.append(EventDistribution(event, counts[1:] / building, float(building / total)))
    return rows


def write_distribution_table(path, rows: Sequence[EventDistribution]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["event", "f_1", "f_2", "f_3", "f_4", "building_share", "empty"])
        for r in rows:
            w.writerow([r.event, *(f"{v:.6f}" for v in r.damage_shares), f"{r.building_share:.6f}", int(r.empty)])
