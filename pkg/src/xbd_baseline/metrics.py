"""Pixel-level F1 scores and the xView2 competition score."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from itertools import zip_longest
from typing import Callable, Iterable

import numpy as np

from .ingest import IGNORE

DAMAGE_NAMES = ("no-damage", "minor-damage", "major-damage", "destroyed")


class TileMismatchError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    """Global pixel counts; ``tp``/``fp``/``fn`` are indexed by damage class 1..4 at 0..3."""

    tp: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))
    tp_loc: int = 0
    fp_loc: int = 0
    fn_loc: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.tp_loc + other.tp_loc, self.fp_loc + other.fp_loc,
                               self.fn_loc + other.fn_loc)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return (np.array_equal(self.tp, other.tp) and np.array_equal(self.fp, other.fp)
                and np.array_equal(self.fn, other.fn)
                and (self.tp_loc, self.fp_loc, self.fn_loc) == (other.tp_loc, other.fp_loc, other.fn_loc))


def accumulate(pred, label, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    """Add one tile's pixels to ``counts`` (a new object is returned).

    Localization compares building vs background over all non-IGNORE pixels.
    Damage classes are compared only where the ground truth has a building; a
    predicted 0 there is a miss for the true class and no false positive.
    """
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} does not match label {label.shape}")
    if pred.size and (pred.min() < 0 or pred.max() > 4):
        raise ValueError("predictions must lie in 0..4")
    counts = ConfusionCounts() if counts is None else counts

    valid = label != IGNORE
    p = pred[valid].astype(np.int64)
    y = label[valid].astype(np.int64)
    if y.size and y.max() > 4:
        raise ValueError("labels must lie in 0..4 or IGNORE")
    pb, yb = p >= 1, y >= 1
    tp_loc = int(np.count_nonzero(pb & yb))
    fp_loc = int(np.count_nonzero(pb & ~yb))
    fn_loc = int(np.count_nonzero(~pb & yb))

    # confusion over GT building pixels: rows true class 1..4, columns predicted 0..4
    cm = np.bincount((y[yb] - 1) * 5 + p[yb], minlength=20).reshape(4, 5)
    tp = np.diag(cm[:, 1:]).copy()
    fn = cm.sum(axis=1) - tp
    fp = cm[:, 1:].sum(axis=0) - tp
    return counts + ConfusionCounts(tp, fp, fn, tp_loc, fp_loc, fn_loc)


def f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else float(2 * tp / denom)


def harmonic_mean(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    if np.any(xs <= 0):
        return 0.0
    return float(len(xs) / np.sum(1.0 / xs))


def competition_score(f1_loc: float, f1_dmg: float) -> float:
    return 0.3 * f1_loc + 0.7 * f1_dmg


@dataclass
class ScoreReport:
    f1_loc: float
    f1_per_class: tuple
    f1_dmg: float
    competition: float
    counts: ConfusionCounts | None = None
    per_event: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: ConfusionCounts) -> "ScoreReport":
        loc = f1(counts.tp_loc, counts.fp_loc, counts.fn_loc)
        per_class = tuple(f1(counts.tp[c], counts.fp[c], counts.fn[c]) for c in range(4))
        dmg = harmonic_mean(per_class)
        return cls(loc, per_class, dmg, competition_score(loc, dmg), counts)

    CSV_HEADER = "score,f1_loc,f1_dmg,f1_no_damage,f1_minor,f1_major,f1_destroyed"

    def csv_row(self) -> str:
        vals = (self.competition, self.f1_loc, self.f1_dmg, *self.f1_per_class)
        return ",".join(f"{v:.6f}" for v in vals)

    def text(self) -> str:
        lines = [
            f"competition score  {self.competition:.4f}",
            f"localization F1    {self.f1_loc:.4f}",
            f"damage F1 (harm.)  {self.f1_dmg:.4f}",
        ]
        lines += [f"  {name:<16} {v:.4f}" for name, v in zip(DAMAGE_NAMES, self.f1_per_class)]
        if self.per_event:
            lines.append("")
            lines.append("event," + self.CSV_HEADER)
            lines += [f"{ev},{rep.csv_row()}" for ev, rep in sorted(self.per_event.items())]
        return "\n".join(lines)


def evaluate_dataset(predictions: Iterable, labels: Iterable,
                     event_of: Callable[[str], str] | None = None) -> ScoreReport:
    """Score aligned ``(tile_id, mask)`` and ``(tile_id, label)`` streams.

    Counts are accumulated over all pixels of all tiles before any F1 is
    computed. With ``event_of``, a per-event breakdown is attached as well.
    """
    total = ConfusionCounts()
    by_event: dict[str, ConfusionCounts] = defaultdict(ConfusionCounts)
    mismatched = []
    for pred_item, label_item in zip_longest(predictions, labels):
        if pred_item is None or label_item is None or pred_item[0] != label_item[0]:
            mismatched.append((pred_item[0] if pred_item else None, label_item[0] if label_item else None))
            continue
        tile, pred = pred_item
        tile_counts = accumulate(pred, label_item[1])
        total = total + tile_counts
        if event_of is not None:
            ev = event_of(tile)
            by_event[ev] = by_event[ev] + tile_counts
    if mismatched:
        shown = ", ".join(f"{a} != {b}" for a, b in mismatched[:20])
        raise TileMismatchError(f"{len(mismatched)} misaligned tiles: {shown}")
    report = ScoreReport.from_counts(total)
    report.per_event = {ev: ScoreReport.from_counts(c) for ev, c in by_event.items()}
    return report
