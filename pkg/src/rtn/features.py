"""Shared-weight fully-convolutional descriptor network.

The network is applied to both images with the same parameters.  For the
target image the last convolution can instead be evaluated on activations
gathered at affinely transformed receptive offsets, which yields the
geometry-aligned descriptors used during matching without re-running the
whole network per pixel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import AffineField, pixel_grid
from .tensor import (Tensor, ShapeError, bilinear_sample, concat, conv2d, l2_normalize, matmul,
                     pad, relu, reshape)

# He-uniform bound: U(-sqrt(INIT_GAIN / fan_in), +sqrt(INIT_GAIN / fan_in))
INIT_GAIN = 6.0


def init_kernel(rng: np.random.Generator, k: int, cin: int, cout: int) -> np.ndarray:
    bound = np.sqrt(INIT_GAIN / (k * k * cin))
    return rng.uniform(-bound, bound, size=(k, k, cin, cout))


@dataclass
class FeatureNetParams:
    kernels: list[Tensor]
    biases: list[Tensor]
    strides: list[int] = field(default_factory=lambda: [1, 2, 2, 1])

    @classmethod
    def init(cls, rng: np.random.Generator, channels=(3, 16, 32, 32), dim: int = 32,
             strides=(1, 2, 2)) -> FeatureNetParams:
        sizes = list(channels) + [dim]
        kernels, biases = [], []
        for cin, cout in zip(sizes[:-1], sizes[1:]):
            kernels.append(Tensor(init_kernel(rng, 3, cin, cout), requires_grad=True))
            biases.append(Tensor(np.zeros(cout), requires_grad=True))
        return cls(kernels, biases, list(strides) + [1])

    @property
    def dim(self) -> int:
        return self.kernels[-1].shape[3]

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for n, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out += [(f"feat.conv{n}.kernel", k), (f"feat.conv{n}.bias", b)]
        return out


def _as_image(image) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=float))
    if t.ndim != 3:
        raise ShapeError(f"expected an h x w x c image, got shape {t.shape}")
    return t


def penultimate(image, params: FeatureNetParams) -> Tensor:
    """Activations feeding the last convolution (on the output grid)."""
    x = _as_image(image)
    if x.shape[2] != params.kernels[0].shape[2]:
        raise ShapeError(f"image has {x.shape[2]} channels, network expects {params.kernels[0].shape[2]}")
    s = params.total_stride
    if x.shape[0] % s or x.shape[1] % s:
        raise ShapeError(f"image dims {x.shape[:2]} must be multiples of the total stride {s}")
    for k, b, st in zip(params.kernels[:-1], params.biases[:-1], params.strides[:-1]):
        x = relu(conv2d(x, k, stride=st, padding=1) + b)
    return x


def _final(cols: Tensor, h: int, w: int, params: FeatureNetParams) -> Tensor:
    k = params.kernels[-1]
    k2 = reshape(k, (-1, k.shape[3]))
    out = matmul(cols, k2) + params.biases[-1]
    return l2_normalize(reshape(out, (h, w, k.shape[3])))


def head(pen: Tensor, params: FeatureNetParams) -> Tensor:
    """Last convolution (edge-replicated border) plus L2 normalization."""
    h, w, c = pen.shape
    k = params.kernels[-1]
    r = k.shape[0] // 2
    raw = conv2d(pad(pen, r, mode="edge"), k, stride=1, padding=0)
    return l2_normalize(raw + params.biases[-1])


def extract(image, params: FeatureNetParams) -> Tensor:
    """Unit-norm ``h x w x d`` descriptors on the downsampled grid."""
    return head(penultimate(image, params), params)


def receptive_offsets(k: int = 3) -> np.ndarray:
    """Integer (dx, dy) lattice of the last layer, row-major in (dy, dx)."""
    r = k // 2
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    return np.stack([dx.ravel(), dy.ravel()], axis=1).astype(float)


def sample_locations(field: AffineField, k: int = 3) -> Tensor:
    """``(h*w*k*k) x 2`` points ``i + f_i + A_i @ delta`` for every pixel and offset."""
    h, w = field.shape
    n = h * w
    p = reshape(field.params, (n, 6))
    offs_t = Tensor(receptive_offsets(k).T)                     # 2 x kk
    base = Tensor(pixel_grid(h, w).reshape(n, 2))
    lx = matmul(p[:, 0:2], offs_t) + (base[:, 0:1] + p[:, 4:5])
    ly = matmul(p[:, 2:4], offs_t) + (base[:, 1:2] + p[:, 5:6])
    kk = k * k
    locs = concat([reshape(lx, (n, kk, 1)), reshape(ly, (n, kk, 1))], axis=2)
    return reshape(locs, (n * kk, 2))


def transform_features(pen: Tensor, field: AffineField, params: FeatureNetParams,
                       padding: str = "border") -> Tensor:
    """Descriptors ``D(T_i)`` from precomputed penultimate activations.

    The last layer's receptive offsets are moved by the field and the
    activations there are bilinearly gathered before the final convolution.
    """
    h, w, c = pen.shape
    if field.shape != (h, w):
        raise ShapeError(f"field grid {field.shape} does not match penultimate grid {(h, w)}")
    k = params.kernels[-1].shape[0]
    gathered = bilinear_sample(pen, sample_locations(field, k), padding=padding)
    return _final(reshape(gathered, (h * w, k * k * c)), h, w, params)


def extract_transformed(image, field: AffineField, params: FeatureNetParams) -> Tensor:
    return transform_features(penultimate(image, params), field, params)
