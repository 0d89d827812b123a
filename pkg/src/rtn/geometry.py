"""Locally-varying affine transformation fields and the warps they induce.

A field stores, for every pixel ``i`` of an ``h x w`` grid, the six numbers
``[a11, a12, a21, a22, u, v]``: the 2x2 matrix ``A_i`` acting on local
receptive offsets and the displacement ``f_i = (u, v)`` sending ``i`` to
``i + f_i``.  Coordinates are ``x`` rightward, ``y`` downward, with the
origin at the centre of the top-left pixel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, add, bilinear_sample, getitem

IDENTITY_PARAMS = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])


@dataclass
class AffineField:
    params: Tensor  # h x w x 6

    def __post_init__(self):
        if not isinstance(self.params, Tensor):
            self.params = Tensor(self.params)
        if self.params.ndim != 3 or self.params.shape[2] != 6:
            raise ShapeError(f"affine field params must be h x w x 6, got {self.params.shape}")

    @property
    def height(self) -> int:
        return self.params.shape[0]

    @property
    def width(self) -> int:
        return self.params.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.params.shape[:2]

    def numpy(self) -> np.ndarray:
        return self.params.data

    def linear(self) -> np.ndarray:
        """Per-pixel 2x2 matrices, shape ``h x w x 2 x 2``."""
        return self.params.data[..., :4].reshape(self.height, self.width, 2, 2)

    def detach(self) -> AffineField:
        return AffineField(Tensor(self.params.data.copy()))


def identity_field(h: int, w: int) -> AffineField:
    if h < 1 or w < 1:
        raise ShapeError(f"identity_field: grid must be at least 1x1, got {h}x{w}")
    return AffineField(Tensor(np.tile(IDENTITY_PARAMS, (h, w, 1))))


def zero_field(h: int, w: int) -> AffineField:
    return AffineField(Tensor(np.zeros((h, w, 6))))


def add_residual(base: AffineField, residual: AffineField) -> AffineField:
    if base.shape != residual.shape:
        raise ShapeError(f"add_residual: base grid {base.shape} vs residual grid {residual.shape}")
    return AffineField(add(base.params, residual.params))


def flow_of(field: AffineField) -> Tensor:
    """Displacement part ``f_i`` as an ``h x w x 2`` tensor."""
    return getitem(field.params, (slice(None), slice(None), slice(4, 6)))


def transform_offset(field: AffineField, i, delta=(0.0, 0.0)) -> np.ndarray:
    """Location ``i + f_i + A_i @ delta`` for an on-grid pixel ``i = (x, y)``."""
    x, y = int(i[0]), int(i[1])
    p = field.params.data[y, x]
    a = p[:4].reshape(2, 2)
    return np.array([x, y], dtype=float) + p[4:6] + a @ np.asarray(delta, dtype=float)


def pixel_grid(h: int, w: int) -> np.ndarray:
    """``h x w x 2`` array of (x, y) lattice coordinates."""
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([xs, ys], axis=-1)


def warp_image(source: np.ndarray, flow: np.ndarray, padding: str = "border") -> np.ndarray:
    """Inverse warp: output pixel ``i`` takes ``source`` sampled at ``i + flow_i``.

    ``flow`` must live on the image grid (see :func:`upsample_field`).
    """
    source = np.asarray(source, dtype=float)
    flow = np.asarray(flow.data if isinstance(flow, Tensor) else flow, dtype=float)
    h, w = source.shape[:2]
    if flow.shape != (h, w, 2):
        raise ShapeError(f"warp_image: flow {flow.shape} does not cover image grid {h}x{w}")
    squeeze = source.ndim == 2
    grid = source[..., None] if squeeze else source
    locs = (pixel_grid(h, w) + flow).reshape(-1, 2)
    out = bilinear_sample(Tensor(grid), Tensor(locs), padding=padding).data.reshape(grid.shape)
    return out[..., 0] if squeeze else out


def upsample_field(field: AffineField, target_h: int, target_w: int) -> AffineField:
    """Resample a field onto a ``target_h x target_w`` grid.

    Target pixel ``X`` reads the field bilinearly at ``X * w / target_w``
    (border clamped).  Displacements are multiplied by the grid-size ratio
    and the linear part is conjugated by the (possibly anisotropic) scaling,
    so the same call also downsamples.
    """
    h, w = field.shape
    rx, ry = target_w / w, target_h / h
    locs = pixel_grid(target_h, target_w) / np.array([rx, ry])
    p = bilinear_sample(Tensor(field.params.data), Tensor(locs.reshape(-1, 2))).data
    p = p.reshape(target_h, target_w, 6).copy()
    p[..., 1] *= rx / ry
    p[..., 2] *= ry / rx
    p[..., 4] *= rx
    p[..., 5] *= ry
    return AffineField(Tensor(p))


def image_flow(field: AffineField, image_h: int, image_w: int) -> np.ndarray:
    """Displacement field on the image grid, in image pixels."""
    if field.shape == (image_h, image_w):
        return field.params.data[..., 4:6].copy()
    return upsample_field(field, image_h, image_w).params.data[..., 4:6]
