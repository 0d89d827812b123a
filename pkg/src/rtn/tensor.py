"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array.  Operations on tensors that require
gradients record a node holding references to their inputs and a local
backward rule; :meth:`Tensor.backward` walks that record in reverse
topological order and accumulates gradients into the leaf tensors.

Layout is row-major and channels-last: images and feature maps are
``(y, x, c)`` arrays.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
L2_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (non-scalar backward, freed graph)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self.name = name

    # ----------------------------------------------------------- basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------- autodiff
    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar tensor, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node._parents:
                    raise GraphError("graph already consumed by a backward pass; use retain_graph=True")
                if node.requires_grad:
                    node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if node._parents:
                    node._backward = None

    # ------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def scatter_rows(n: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """``out[idx[k]] += vals[k]`` for an ``n x ...`` output (duplicates accumulate)."""
    rest = vals.shape[1:]
    d = int(np.prod(rest)) if rest else 1
    flat_idx = (idx.reshape(-1, 1) * d + np.arange(d)).ravel()
    out = np.bincount(flat_idx, weights=vals.reshape(-1), minlength=n * d)
    return out.reshape((n,) + rest)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# -------------------------------------------------------------- reductions
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------------------ shape
def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Index the leading axis of ``a`` with an integer array of any shape."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        return (scatter_rows(a.shape[0], idx.ravel(), g.reshape((idx.size,) + a.shape[1:])),)

    return _make(a.data[idx], (a,), backward, "gather_rows")


def pad(a: Tensor, width: int, mode: str = "constant") -> Tensor:
    """Pad the two leading (spatial) axes by ``width`` on each side."""
    if width == 0:
        return a
    spec = [(width, width), (width, width)] + [(0, 0)] * (a.ndim - 2)
    out = np.pad(a.data, spec, mode=mode)
    h, w = a.shape[:2]

    def backward(g):
        if mode == "constant":
            return (g[width:width + h, width:width + w].copy(),)
        # edge replication: fold the border bands back onto the edge rows/cols
        g = g.copy()
        g[width, :] += g[:width, :].sum(axis=0)
        g[width + h - 1, :] += g[width + h:, :].sum(axis=0)
        g[:, width] += g[:, :width].sum(axis=1)
        g[:, width + w - 1] += g[:, width + w:].sum(axis=1)
        return (g[width:width + h, width:width + w],)

    return _make(out, (a,), backward, f"pad_{mode}")


# ---------------------------------------------------------------- linalg
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, lhs {a.shape} rhs {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of an ``h x w x c_in`` map.

    ``kernel`` is ``k x k x c_in x c_out``.  Output spatial size follows
    ``floor((h + 2*padding - k) / stride) + 1``.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected input rank 3 and kernel rank 4, got {x.shape} and {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kin, cout = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel axes 0,1 must be equal and odd, got {kh}x{kw}")
    if kin != cin:
        raise ShapeError(f"conv2d: input channel axis 2 has {cin}, kernel axis 2 has {kin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride {stride} / padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input axes 0,1 ({h}x{w}) too small for kernel {kh} with padding {padding}")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride][:ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * cin)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols @ k2).reshape(ho, wo, cout)

    def backward(g):
        g2 = g.reshape(ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ k2.T).reshape(ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += gcols[:, :, a, b]
            gx = gxp[padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _make(out, (x, kernel), backward, "conv2d")


# ------------------------------------------------------------ normalizers
def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Scale vectors along the last axis to unit length; zero maps to zero."""
    if x.shape[-1] < 1:
        raise ShapeError("l2_normalize: last axis is empty")
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), backward, "l2_normalize")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


# --------------------------------------------------------------- sampling
def bilinear_sample(grid: Tensor, locations: Tensor, padding: str = "border") -> Tensor:
    """Bilinearly interpolate an ``h x w x d`` grid at ``m x 2`` (x, y) points.

    ``padding="border"`` clamps coordinates to the grid (edge replication);
    ``padding="zeros"`` treats everything outside the grid as 0.
    Differentiable with respect to both the grid values and the locations.
    """
    if grid.ndim != 3 or locations.ndim != 2 or locations.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: grid {grid.shape}, locations {locations.shape}")
    h, w, d = grid.shape
    if not np.isfinite(locations.data).all():
        raise FloatingPointError("bilinear_sample: non-finite sampling locations")
    x = locations.data[:, 0]
    y = locations.data[:, 1]
    flat = grid.data.reshape(h * w, d)

    if padding == "border":
        xc = np.clip(x, 0.0, w - 1.0)
        yc = np.clip(y, 0.0, h - 1.0)
        x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.intp)
        y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.intp)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = xc - x0
        fy = yc - y0
        # clamped coordinates carry no gradient
        dx_ok = ((x >= 0) & (x <= w - 1)).astype(DTYPE)
        dy_ok = ((y >= 0) & (y <= h - 1)).astype(DTYPE)
        ones = np.ones_like(x)
        valid = (ones, ones, ones, ones)
    elif padding == "zeros":
        x0 = np.floor(x).astype(np.intp)
        y0 = np.floor(y).astype(np.intp)
        x1, y1 = x0 + 1, y0 + 1
        fx = x - x0
        fy = y - y0
        dx_ok = dy_ok = np.ones_like(x)
        inx0, inx1 = (x0 >= 0) & (x0 < w), (x1 >= 0) & (x1 < w)
        iny0, iny1 = (y0 >= 0) & (y0 < h), (y1 >= 0) & (y1 < h)
        valid = tuple((a & b).astype(DTYPE) for a, b in
                      ((iny0, inx0), (iny0, inx1), (iny1, inx0), (iny1, inx1)))
        x0, x1 = np.clip(x0, 0, w - 1), np.clip(x1, 0, w - 1)
        y0, y1 = np.clip(y0, 0, h - 1), np.clip(y1, 0, h - 1)
    else:
        raise ValueError(f"unknown padding {padding!r}")

    idx = (y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1)
    v = tuple(flat[i] * m[:, None] for i, m in zip(idx, valid))
    wts = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    out = v[0] * wts[0][:, None] + v[1] * wts[1][:, None] + v[2] * wts[2][:, None] + v[3] * wts[3][:, None]

    def backward(g):
        gg = gl = None
        if grid.requires_grad:
            rows = np.concatenate(idx)
            vals = np.concatenate([g * (wt * m)[:, None] for wt, m in zip(wts, valid)])
            gg = scatter_rows(h * w, rows, vals).reshape(grid.shape)
        if locations.requires_grad:
            ddx = (1 - fy)[:, None] * (v[1] - v[0]) + fy[:, None] * (v[3] - v[2])
            ddy = (1 - fx)[:, None] * (v[2] - v[0]) + fx[:, None] * (v[3] - v[1])
            gl = np.stack([(g * ddx).sum(axis=1) * dx_ok, (g * ddy).sum(axis=1) * dy_ok], axis=1)
        return gg, gl

    return _make(out, (grid, locations), backward, "bilinear_sample")


# ---------------------------------------------------------- verification
def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               samples: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-8) -> float:
    """Largest relative error between backprop and central differences.

    ``f(*inputs)`` must return a scalar.  When ``samples`` is given, only that
    many randomly chosen (input, element) coordinates are probed.  The
    relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    f(*inputs).backward()
    analytic = [t.grad.copy() for t in inputs]

    coords = [(k, j) for k, t in enumerate(inputs) for j in range(t.size)]
    if samples is not None and samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[p] for p in sorted(pick)]

    worst = 0.0
    for k, j in coords:
        flat = inputs[k].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        fp = f(*inputs).item()
        flat[j] = orig - eps
        fm = f(*inputs).item()
        flat[j] = orig
        num = (fp - fm) / (2 * eps)
        ana = analytic[k].reshape(-1)[j]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst
