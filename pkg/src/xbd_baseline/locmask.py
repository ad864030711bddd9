"""Localization masks and the final damage segmentation mask.

Probability maps are ``H x W x 5`` arrays: channels 0..3 hold damage classes
1..4 and channel 4 holds building presence.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

LOC_STRATEGIES = ("channel", "otsu", "external")


class OtsuResult(NamedTuple):
    threshold: float
    degenerate: bool


def _check_probs(P):
    P = np.asarray(P)
    if P.ndim != 3 or P.shape[2] != 5:
        raise ValueError(f"expected H x W x 5 probabilities, got {P.shape}")
    return P


def loc_from_channel(P, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (_check_probs(P)[..., 4] >= threshold).astype(np.uint8)


def between_class_variance(counts: np.ndarray, sums: np.ndarray) -> np.ndarray:
    """``w0 * w1 * (mu0 - mu1)**2`` for a split before each histogram edge.

    Entry ``k`` splits bins ``[0, k)`` from ``[k, bins)``, for ``k = 0..bins``.
    Uses per-bin value sums, so class means are exact rather than bin-center
    approximations.
    """
    n = np.concatenate([[0.0], np.cumsum(counts, dtype=np.float64)])
    s = np.concatenate([[0.0], np.cumsum(sums, dtype=np.float64)])
    total_n, total_s = n[-1], s[-1]
    n1, s1 = total_n - n, total_s - s
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s / n
        mu1 = s1 / n1
        var = (n / total_n) * (n1 / total_n) * (mu0 - mu1) ** 2
    return np.where((n > 0) & (n1 > 0), var, 0.0)


def otsu_threshold(values, bins: int = 256) -> OtsuResult:
    """Histogram edge on ``[0, 1]`` that maximizes between-class variance.

    Values ``>= threshold`` form the upper class. Ties go to the lower edge.
    If no edge separates the values (all in one bin), returns their mean with
    ``degenerate=True``.
    """
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, 1.0)
    if v.size == 0:
        raise ValueError("need at least one value")
    if bins < 2:
        raise ValueError("need at least two bins")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    if np.count_nonzero(counts) < 2:
        return OtsuResult(float(v.mean()), True)
    sums = np.bincount(idx, weights=v, minlength=bins)
    var = between_class_variance(counts, sums)
    return OtsuResult(float(edges[int(np.argmax(var))]), False)


def loc_from_otsu(P, bins: int = 256) -> np.ndarray:
    """OR of per-damage-channel Otsu binarizations."""
    P = _check_probs(P)
    L = np.zeros(P.shape[:2], dtype=bool)
    for c in range(4):
        res = otsu_threshold(P[..., c], bins)
        if res.degenerate:
            log.debug("damage channel %d is constant; contributes no buildings", c + 1)
            continue
        L |= P[..., c] >= res.threshold
    return L.astype(np.uint8)


def compose_mask(P, L) -> np.ndarray:
    """``(1 + argmax over damage channels)`` where ``L`` is set, else 0.

    ``np.argmax`` returns the first maximum, so ties resolve to the lowest
    damage class.
    """
    P = _check_probs(P)
    L = np.asarray(L)
    if L.shape != P.shape[:2]:
        raise ValueError(f"mask {L.shape} does not match probabilities {P.shape[:2]}")
    M = 1 + np.argmax(P[..., :4], axis=-1)
    return np.where(L.astype(bool), M, 0).astype(np.uint8)


def localization_mask(P, strategy: str = "channel", threshold: float = 0.5, external=None) -> np.ndarray:
    if strategy == "channel":
        return loc_from_channel(P, threshold)
    if strategy == "otsu":
        return loc_from_otsu(P)
    if strategy == "external":
        if external is None:
            raise ValueError("external localization requires a mask")
        ext = np.asarray(external)
        if ext.shape != np.shape(P)[:2]:
            raise ValueError(f"external mask {ext.shape} does not match {np.shape(P)[:2]}")
        return (ext > 0).astype(np.uint8)
    raise ValueError(f"unknown localization strategy {strategy!r}; choose from {LOC_STRATEGIES}")
