"""Weakly-supervised window classification loss.

For a source pixel ``i`` the candidates are the transformed target
descriptors ``D^t(T_j)`` for ``j`` in a window around ``i``; the centre is
the single positive, everything else is a negative, and the loss is the
cross-entropy of a softmax over the candidate similarities.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import AffineField
from .matching import WindowSpec, window_similarity
from .tensor import L2_EPS, Tensor, log_softmax, mean, softmax, sqrt, tsum

TargetFn = Callable[[AffineField], Tensor]


@dataclass(frozen=True)
class LossConfig:
    radius: int = 2
    samples: int | None = 256          # None: every valid pixel
    per_iteration: bool = False
    normalized: bool = False           # use window-renormalized similarities as logits

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"loss window radius must be >= 0, got {self.radius}")
        if self.samples is not None and self.samples < 1:
            raise ValueError(f"loss sample count must be >= 1, got {self.samples}")

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.radius, 1)


def valid_pixels(h: int, w: int, radius: int) -> np.ndarray:
    """Flat indices of pixels whose whole stride-1 window lies on the grid."""
    ys, xs = np.mgrid[radius:h - radius, radius:w - radius]
    return (ys * w + xs).ravel()


def sample_pixels(h: int, w: int, radius: int, count: int | None,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    pool = valid_pixels(h, w, radius)
    if pool.size == 0:
        raise ValueError(f"no pixel of a {h}x{w} grid has a full {2 * radius + 1}-wide window")
    if count is None or count >= pool.size:
        return pool
    rng = rng or np.random.default_rng(0)
    return np.sort(rng.choice(pool, size=count, replace=False))


def _logits(source: Tensor, target_t: Tensor, window: WindowSpec, pixels: np.ndarray,
            normalized: bool) -> Tensor:
    raw = window_similarity(source, target_t, window, pixels=pixels)
    if normalized:
        raw = raw / sqrt(tsum(raw * raw, axis=1, keepdims=True) + L2_EPS)
    return raw


def match_probability(source: Tensor, target_fn: TargetFn, field: AffineField, i,
                      window: WindowSpec, normalized: bool = False) -> Tensor:
    """Softmax over the window candidates of pixel ``i = (x, y)``."""
    w = source.shape[1]
    pixel = np.array([int(i[1]) * w + int(i[0])])
    logits = _logits(source, target_fn(field), window, pixel, normalized)
    return softmax(logits, axis=1)[0]


def classification_loss(source: Tensor, target_fn: TargetFn, field: AffineField, cfg: LossConfig,
                        pixels: np.ndarray) -> Tensor:
    """Mean of ``-log p(centre)`` over the given flat pixel indices."""
    pixels = np.asarray(pixels, dtype=np.intp).ravel()
    if pixels.size == 0:
        raise ValueError("classification_loss needs at least one pixel")
    window = cfg.window
    logp = log_softmax(_logits(source, target_fn(field), window, pixels, cfg.normalized), axis=1)
    return -mean(logp[:, window.center])
