"""Shared numeric helpers: exact window operations and 8-bit rounding."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def round_half_away(x) -> np.ndarray:
    """Round to the nearest integer, halves away from zero (unlike np.round)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_uint8(x) -> np.ndarray:
    """Round half-away-from-zero and clamp into the 8-bit range."""
    return np.clip(round_half_away(x), 0.0, 255.0).astype(np.uint8)


def window_sum(values, size: int) -> np.ndarray:
    """Sum over size x size windows centred on each cell, zeros outside the image."""
    r = size // 2
    padded = np.pad(np.asarray(values, dtype=np.float64), r)
    return sliding_window_view(padded, (size, size)).sum(axis=(-1, -2))


def box3_sum(values) -> np.ndarray:
    return window_sum(values, 3)


def box_blur5(values) -> np.ndarray:
    """5x5 box blur with zero padding."""
    return window_sum(values, 5) / 25.0


def dilate3(mask) -> np.ndarray:
    """3x3 morphological dilation, clipped at the image borders."""
    padded = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    return sliding_window_view(padded, (3, 3)).any(axis=(-1, -2))


def erode3(mask) -> np.ndarray:
    """3x3 morphological erosion; cells outside the image count as unset."""
    padded = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    return sliding_window_view(padded, (3, 3)).all(axis=(-1, -2))
