"""Paired geometric augmentation and class-biased crop sampling."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .ingest import IGNORE, ImagePair

CROP_SIDE_RANGE = (529, 715)
CROP_OUT_SIDE = 608
MAX_ANGLE = 10.0
SCALE_RANGE = (0.9, 1.1)


@dataclass(frozen=True)
class GeoTransform:
    hflip: bool = False
    rot90_k: int = 0
    angle: float = 0.0
    scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return not self.hflip and self.rot90_k % 4 == 0 and self.angle == 0 and self.scale == 1


@dataclass(frozen=True)
class CropSpec:
    x0: int
    y0: int
    side: int
    out_side: int = CROP_OUT_SIDE


def sample_transform(rng: np.random.Generator, max_angle: float = MAX_ANGLE,
                     scale_range: tuple[float, float] = SCALE_RANGE) -> GeoTransform:
    return GeoTransform(
        hflip=bool(rng.random() < 0.5),
        rot90_k=int(rng.integers(0, 4)),
        angle=float(rng.uniform(-max_angle, max_angle)),
        scale=float(rng.uniform(*scale_range)),
    )


def _geometric(arr: np.ndarray, t: GeoTransform, interp: int) -> np.ndarray:
    if t.hflip:
        arr = arr[:, ::-1]
    if t.rot90_k % 4:
        arr = np.rot90(arr, t.rot90_k)  # counter-clockwise, axes (0, 1)
    if t.angle != 0 or t.scale != 1:
        h, w = arr.shape[:2]
        m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), t.angle, t.scale)
        arr = cv2.warpAffine(np.ascontiguousarray(arr), m, (w, h), flags=interp,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return np.ascontiguousarray(arr)


def apply_transform(pair: ImagePair, label: np.ndarray, t: GeoTransform) -> tuple[ImagePair, np.ndarray]:
    """Apply ``t`` identically to both images and the label.

    Order: horizontal flip, 90 degree rotation, then rotation by ``angle`` and
    scaling about the image center. Images are resampled bilinearly, labels
    by nearest neighbour; uncovered regions become 0.
    """
    if label.shape != pair.shape:
        raise ValueError(f"label {label.shape} does not match images {pair.shape}")
    if t.is_identity:
        return pair, label
    pre = _geometric(pair.pre, t, cv2.INTER_LINEAR)
    post = _geometric(pair.post, t, cv2.INTER_LINEAR)
    lab = _geometric(label, t, cv2.INTER_NEAREST)
    return ImagePair(pre, post, pair.tile_id, pair.event_name), lab


def crop_side_range(image_side: int, side_range=CROP_SIDE_RANGE) -> tuple[int, int]:
    return min(side_range[0], image_side), min(side_range[1], image_side)


def sample_crop(label: np.ndarray, freqs, rng: np.random.Generator, n_candidates: int = 10,
                side_range=CROP_SIDE_RANGE, out_side: int = CROP_OUT_SIDE) -> CropSpec:
    """Pick the candidate window with the largest inverse-frequency score.

    Each of ``n_candidates`` windows has a uniform side in ``side_range``
    (clipped to the image) and a uniform in-bounds position. Its score is the
    sum over damage classes of ``count_c / f_c``. Ties go to the first drawn.
    """
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    h, w = label.shape
    lo, hi = crop_side_range(min(h, w), side_range)

    weights = np.zeros(256)
    weights[1:5] = 1.0 / np.asarray(freqs, dtype=np.float64)[:4]
    weights[IGNORE] = 0.0
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = weights[label].cumsum(0).cumsum(1)

    best, best_score = None, -np.inf
    for _ in range(n_candidates):
        side = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, w - side + 1))
        y0 = int(rng.integers(0, h - side + 1))
        x1, y1 = x0 + side, y0 + side
        score = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
        if score > best_score:
            best, best_score = CropSpec(x0, y0, side, out_side), score
    return best


def crop_and_resize(pair: ImagePair, label: np.ndarray, spec: CropSpec) -> tuple[ImagePair, np.ndarray]:
    h, w = pair.shape
    if spec.x0 < 0 or spec.y0 < 0 or spec.x0 + spec.side > w or spec.y0 + spec.side > h or spec.side < 1:
        raise ValueError(f"crop {spec} does not fit a {w}x{h} image")
    ys = slice(spec.y0, spec.y0 + spec.side)
    xs = slice(spec.x0, spec.x0 + spec.side)
    pre, post, lab = pair.pre[ys, xs], pair.post[ys, xs], label[ys, xs]
    if spec.side != spec.out_side:
        size = (spec.out_side, spec.out_side)
        pre = cv2.resize(pre, size, interpolation=cv2.INTER_LINEAR)
        post = cv2.resize(post, size, interpolation=cv2.INTER_LINEAR)
        lab = cv2.resize(lab, size, interpolation=cv2.INTER_NEAREST)
    return ImagePair(np.ascontiguousarray(pre), np.ascontiguousarray(post), pair.tile_id, pair.event_name), \
        np.ascontiguousarray(lab)


def augment_sample(pair: ImagePair, label: np.ndarray, freqs, rng: np.random.Generator,
                   n_candidates: int = 10, side_range=CROP_SIDE_RANGE,
                   out_side: int = CROP_OUT_SIDE) -> tuple[ImagePair, np.ndarray]:
    """Full training-time pipeline: random transform, then biased crop and resize."""
    t = sample_transform(rng)
    pair, label = apply_transform(pair, label, t)
    spec = sample_crop(label, freqs, rng, n_candidates, side_range, out_side)
    return crop_and_resize(pair, label, spec)
