"""Recurrent geometric matching: windowed correlation, residual estimator, recurrence."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .features import FeatureNetParams, extract, init_kernel, penultimate, transform_features
from .geometry import AffineField, add_residual, identity_field
from .tensor import (L2_EPS, Tensor, ShapeError, concat, conv2d, gather_rows, relu, reshape, sqrt,
                     tsum)


@dataclass(frozen=True)
class WindowSpec:
    radius: int = 2
    dilation: int = 1

    def __post_init__(self):
        if self.radius < 0 or self.dilation < 1:
            raise ValueError(f"bad window radius={self.radius} dilation={self.dilation}")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1

    @property
    def size(self) -> int:
        return self.side ** 2

    @property
    def center(self) -> int:
        return self.size // 2

    def offsets(self) -> np.ndarray:
        """``size x 2`` integer (ox, oy) offsets, row-major over (oy, ox), already dilated."""
        r = self.radius
        oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
        return self.dilation * np.stack([ox.ravel(), oy.ravel()], axis=1)


def window_indices(h: int, w: int, window: WindowSpec) -> np.ndarray:
    """Flat indices of ``j = i + s*o`` for every pixel and offset; shape ``(h*w) x |N|``.

    Candidates falling off the grid are clamped to the nearest edge pixel.
    """
    ys, xs = np.mgrid[0:h, 0:w]
    offs = window.offsets()
    jx = np.clip(xs.reshape(-1, 1) + offs[:, 0], 0, w - 1)
    jy = np.clip(ys.reshape(-1, 1) + offs[:, 1], 0, h - 1)
    return jy * w + jx


def window_similarity(source: Tensor, target_t: Tensor, window: WindowSpec,
                      pixels: np.ndarray | None = None) -> Tensor:
    """Raw inner products ``<D^s_i, D^t(T_j)>`` over each pixel's window.

    Returns ``h x w x |N|``, or ``m x |N|`` when flat ``pixels`` are given.
    """
    if source.shape != target_t.shape:
        raise ShapeError(f"source features {source.shape} vs transformed target {target_t.shape}")
    h, w, d = source.shape
    idx = window_indices(h, w, window)
    src = reshape(source, (h * w, d))
    tgt = reshape(target_t, (h * w, d))
    if pixels is not None:
        idx = idx[pixels]
        src = gather_rows(src, pixels)
    cand = gather_rows(tgt, idx)                       # m x |N| x d
    m = idx.shape[0]
    raw = tsum(cand * reshape(src, (m, 1, d)), axis=2)
    return raw if pixels is not None else reshape(raw, (h, w, window.size))


def correlation(source: Tensor, target_t: Tensor, window: WindowSpec, eps: float = L2_EPS) -> Tensor:
    """Window-normalized cosine similarity volume, ``h x w x |N|``.

    Each pixel's window vector of raw similarities is divided by the root
    of its sum of squares (``eps`` inside the root).
    """
    raw = window_similarity(source, target_t, window)
    return raw / sqrt(tsum(raw * raw, axis=2, keepdims=True) + eps)


@dataclass
class MatcherParams:
    """Encoder-decoder weights mapping a correlation volume to a 6-channel residual."""

    kernels: list[Tensor]
    biases: list[Tensor]

    NAMES = ("enc1", "enc2", "dec1", "dec0", "out")

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int = 25, enc=(64, 128), dec=(64, 32),
             zero_final: bool = True) -> MatcherParams:
        e1, e2 = enc
        d1, d0 = dec
        shapes = [(in_channels, e1), (e1, e2), (e2 + e1, d1), (d1 + in_channels, d0), (d0, 6)]
        kernels = [Tensor(init_kernel(rng, 3, a, b), requires_grad=True) for a, b in shapes]
        biases = [Tensor(np.zeros(b), requires_grad=True) for _, b in shapes]
        if zero_final:
            kernels[-1].data[...] = 0.0
        return cls(kernels, biases)

    @property
    def in_channels(self) -> int:
        return self.kernels[0].shape[2]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, k, b in zip(self.NAMES, self.kernels, self.biases):
            out += [(f"match.{name}.kernel", k), (f"match.{name}.bias", b)]
        return out


def upsample_nearest(x: Tensor, h: int, w: int) -> Tensor:
    """Nearest-neighbour x2 upsampling cropped to ``h x w``."""
    hs, ws, c = x.shape
    ys, xs = np.mgrid[0:h, 0:w]
    idx = np.minimum(ys // 2, hs - 1) * ws + np.minimum(xs // 2, ws - 1)
    return gather_rows(reshape(x, (hs * ws, c)), idx)


def estimate_residual(volume: Tensor, params: MatcherParams) -> AffineField:
    """Per-pixel affine residual from a correlation volume (any h x w)."""
    if volume.ndim != 3 or volume.shape[2] != params.in_channels:
        raise ShapeError(f"volume has {volume.shape[-1]} channels, matcher expects {params.in_channels}")
    h, w, _ = volume.shape
    k, b = params.kernels, params.biases
    e1 = relu(conv2d(volume, k[0], stride=2, padding=1) + b[0])
    e2 = relu(conv2d(e1, k[1], stride=2, padding=1) + b[1])
    d1 = relu(conv2d(concat([upsample_nearest(e2, *e1.shape[:2]), e1], axis=2), k[2], padding=1) + b[2])
    d0 = relu(conv2d(concat([upsample_nearest(d1, h, w), volume], axis=2), k[3], padding=1) + b[3])
    out = conv2d(d0, k[4], padding=1) + b[4]
    return AffineField(out)


@dataclass(frozen=True)
class RecurrenceConfig:
    k_max: int = 4
    dilation_schedule: tuple[int, ...] = (4, 2, 1, 1)
    radius: int = 2

    def __post_init__(self):
        sched = tuple(int(s) for s in self.dilation_schedule)
        object.__setattr__(self, "dilation_schedule", sched)
        if self.k_max < 1 or self.radius < 0:
            raise ValueError(f"bad recurrence config k_max={self.k_max} radius={self.radius}")
        if len(sched) != self.k_max:
            raise ValueError(f"dilation schedule has {len(sched)} entries, k_max is {self.k_max}")
        if any(s < 1 for s in sched) or any(a < b for a, b in zip(sched, sched[1:])):
            raise ValueError(f"dilation schedule must be positive and non-increasing: {sched}")

    def window(self, k: int) -> WindowSpec:
        return WindowSpec(self.radius, self.dilation_schedule[k])

    def with_iterations(self, k_max: int) -> RecurrenceConfig:
        """Same schedule truncated, or extended with its last stride."""
        sched = list(self.dilation_schedule[:k_max])
        sched += [sched[-1]] * (k_max - len(sched))
        return RecurrenceConfig(k_max, tuple(sched), self.radius)


class RecurrenceResult(NamedTuple):
    final: AffineField
    trajectory: list[AffineField]      # T^1 .. T^K
    volumes: list[Tensor]              # correlation volume consumed at each iteration
    source_features: Tensor
    target_penultimate: Tensor


def run_recurrence(source_img, target_img, feat: FeatureNetParams, match: MatcherParams,
                   cfg: RecurrenceConfig) -> RecurrenceResult:
    """Refine ``T^0 = identity`` by ``cfg.k_max`` residual steps.

    The field lives on the source feature grid and maps source pixel ``i``
    to ``i + f_i`` in the target.  The whole chain stays differentiable.
    """
    if np.shape(source_img) != np.shape(target_img):
        raise ShapeError(f"images differ in size: {np.shape(source_img)} vs {np.shape(target_img)}")
    ds = extract(source_img, feat)
    pen_t = penultimate(target_img, feat)
    h, w = ds.shape[:2]
    t = identity_field(h, w)
    trajectory, volumes = [], []
    for k in range(cfg.k_max):
        dt = transform_features(pen_t, t, feat)
        vol = correlation(ds, dt, cfg.window(k))
        t = add_residual(t, estimate_residual(vol, match))
        trajectory.append(t)
        volumes.append(vol)
    return RecurrenceResult(t, trajectory, volumes, ds, pen_t)
