"""Synthetic image pairs with known deformation, plus PPM and keypoint I/O.

Pairs are rendered from a continuous procedural scene, so the target is
evaluated directly at the deformed coordinates rather than resampled from
the source raster; warping the source with the ground-truth flow then
reproduces the target only up to interpolation error, which makes the
round trip a real consistency check.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import AffineField, pixel_grid
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    size: int = 64
    scale_range: tuple[float, float] = (0.9, 1.1)
    rot_range: float = 15.0            # degrees, symmetric
    trans_range: float = 8.0           # pixels, bound on the translation vector length
    local_warp_amp: float = 2.0        # pixels, bound on the local displacement length
    local_warp_smoothness: float = 24.0  # shortest wavelength of the local warp, pixels
    texture: str = "mixed"             # mixed | blobs | checker | noise

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not (0.5 <= lo <= hi <= 2.0):
            raise ConfigError(f"scale_range must satisfy 0.5 <= lo <= hi <= 2, got {self.scale_range}")
        if not 0.0 <= self.rot_range <= 45.0:
            raise ConfigError(f"rot_range must be in [0, 45] degrees, got {self.rot_range}")
        if self.trans_range < 0 or self.local_warp_amp < 0:
            raise ConfigError("trans_range and local_warp_amp must be non-negative")
        if self.local_warp_smoothness <= 0:
            raise ConfigError("local_warp_smoothness must be positive")
        if self.size < 8:
            raise ConfigError(f"size must be at least 8, got {self.size}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"unknown texture {self.texture!r}; choose from {sorted(TEXTURES)}")


@dataclass
class SyntheticPair:
    source: np.ndarray
    target: np.ndarray
    gt_field: AffineField          # image grid; maps target pixel i to source location i + f_i
    gt_flow: np.ndarray            # h x w x 2
    fg_mask: np.ndarray            # h x w bool, in the target frame
    seed: int
    local_flow: np.ndarray | None = None   # smooth local part of gt_flow


# ------------------------------------------------------------------ scene
class _Scene:
    """Continuous RGB function of (x, y): textured object over a background."""

    def __init__(self, rng: np.random.Generator, size: int, texture: str):
        s = float(size)
        self.centre = rng.uniform(0.4, 0.6, 2) * s
        self.radius = rng.uniform(0.28, 0.36) * s
        self.harm = [(k, rng.uniform(0, 0.18 / k), rng.uniform(0, 2 * math.pi)) for k in (2, 3, 4, 5)]
        self.fg = _Texture(rng, s, texture, contrast=1.0)
        self.bg = _Texture(rng, s, "noise", contrast=0.3)
        self.fg_tint = rng.uniform(0.2, 0.8, 3)
        self.bg_tint = rng.uniform(0.2, 0.8, 3)

    def mask(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.centre[0], y - self.centre[1]
        theta = np.arctan2(dy, dx)
        r = self.radius * (1 + sum(a * np.cos(k * theta + p) for k, a, p in self.harm))
        return 1.0 / (1.0 + np.exp(-(r - np.hypot(dx, dy)) / 0.75))

    def __call__(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.mask(x, y)[..., None]
        fg = np.clip(self.fg_tint + 0.35 * self.fg(x, y), 0.0, 1.0)
        bg = np.clip(self.bg_tint + 0.5 * self.bg(x, y), 0.0, 1.0)
        return m * fg + (1 - m) * bg, m[..., 0]


class _Texture:
    """Band-limited procedural texture; shortest period is a few pixels."""

    def __init__(self, rng: np.random.Generator, size: float, kind: str, contrast: float):
        self.kind = kind
        n = 24
        freq = rng.uniform(1.0 / size, 1.0 / 7.0, n)
        ang = rng.uniform(0, 2 * math.pi, n)
        self.wave = np.stack([freq * np.cos(ang), freq * np.sin(ang)], axis=1) * 2 * math.pi
        self.phase = rng.uniform(0, 2 * math.pi, n)
        self.wave_amp = rng.normal(0, 1, (n, 3)) * contrast / math.sqrt(n) * (1.0 / (1 + 6 * freq))[:, None] * 2.5
        nb = 14
        self.blob_c = rng.uniform(0, size, (nb, 2))
        self.blob_s = rng.uniform(2.5, 7.0, nb)
        self.blob_col = rng.uniform(-1, 1, (nb, 3)) * contrast * 0.8
        self.check_p = rng.uniform(9, 16)
        self.check_a = rng.uniform(0, math.pi)
        self.check_col = rng.uniform(-1, 1, 3) * contrast * 0.5

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape + (3,))
        if self.kind in ("noise", "mixed"):
            ph = x[..., None] * self.wave[:, 0] + y[..., None] * self.wave[:, 1] + self.phase
            out += np.cos(ph) @ self.wave_amp
        if self.kind in ("blobs", "mixed"):
            d2 = (x[..., None] - self.blob_c[:, 0]) ** 2 + (y[..., None] - self.blob_c[:, 1]) ** 2
            out += np.exp(-d2 / (2 * self.blob_s ** 2)) @ self.blob_col
        if self.kind in ("checker", "mixed"):
            ca, sa = math.cos(self.check_a), math.sin(self.check_a)
            u = (ca * x + sa * y) * math.pi / self.check_p
            v = (-sa * x + ca * y) * math.pi / self.check_p
            out += np.tanh(2.0 * np.sin(u) * np.sin(v))[..., None] * self.check_col
        return out


TEXTURES = ("mixed", "blobs", "checker", "noise")


# -------------------------------------------------------------- deformation
def _local_warp(rng: np.random.Generator, amp: float, smooth: float, n: int = 3):
    """Sum of low-frequency sinusoids per displacement component; |disp| <= amp."""
    comps = []
    for _ in range(2):
        freq = rng.uniform(0.3, 1.0, n) / smooth
        ang = rng.uniform(0, 2 * math.pi, n)
        wave = np.stack([freq * np.cos(ang), freq * np.sin(ang)], axis=1) * 2 * math.pi
        weights = rng.dirichlet(np.ones(n))
        scale = amp / math.sqrt(2.0) * rng.uniform(0.5, 1.0)
        comps.append((wave, rng.uniform(0, 2 * math.pi, n), weights * scale))
    return comps


def _eval_local(comps, x: np.ndarray, y: np.ndarray):
    disp, jac = [], []
    for wave, phase, amp in comps:
        ph = x[..., None] * wave[:, 0] + y[..., None] * wave[:, 1] + phase
        disp.append(np.sin(ph) @ amp)
        c = np.cos(ph) * amp
        jac.append(np.stack([c @ wave[:, 0], c @ wave[:, 1]], axis=-1))
    return np.stack(disp, axis=-1), np.stack(jac, axis=-2)      # h x w x 2, h x w x 2 x 2


def gen_pair(seed: int, cfg: SyntheticConfig = SyntheticConfig(),
             motion: tuple[float, float, tuple[float, float]] | None = None) -> SyntheticPair:
    """Render a source image and a target deformed by a known affine field.

    ``target(i) = scene(i + f_i)`` with ``f`` a global similarity about the
    image centre plus a smooth local displacement.  ``A_i`` of the
    ground-truth field is the Jacobian of ``i -> i + f_i``.

    ``motion = (scale, rotation_deg, (tx, ty))`` fixes the global part
    instead of sampling it from the config ranges.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.size
    scene = _Scene(rng, size, cfg.texture)
    scale = rng.uniform(*cfg.scale_range)
    rot = math.radians(rng.uniform(-cfg.rot_range, cfg.rot_range))
    t_len = cfg.trans_range * math.sqrt(rng.uniform())
    t_ang = rng.uniform(0, 2 * math.pi)
    trans = np.array([t_len * math.cos(t_ang), t_len * math.sin(t_ang)])
    local = _local_warp(rng, cfg.local_warp_amp, cfg.local_warp_smoothness)
    if motion is not None:
        scale, rot, trans = motion[0], math.radians(motion[1]), np.asarray(motion[2], dtype=float)

    m = scale * np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]])
    pts = pixel_grid(size, size)
    c = (size - 1) / 2.0
    ld, lj = _eval_local(local, pts[..., 0], pts[..., 1])
    flow = (pts - c) @ (m - np.eye(2)).T + trans + ld
    jac = m + lj

    src, _ = scene(pts[..., 0], pts[..., 1])
    q = pts + flow
    tgt, tmask = scene(q[..., 0], q[..., 1])
    inside = (q[..., 0] >= 0) & (q[..., 0] <= size - 1) & (q[..., 1] >= 0) & (q[..., 1] <= size - 1)
    params = np.concatenate([jac.reshape(size, size, 4), flow], axis=-1)
    return SyntheticPair(
        source=np.clip(src, 0.0, 1.0),
        target=np.clip(tgt, 0.0, 1.0),
        gt_field=AffineField(Tensor(params)),
        gt_flow=flow,
        fg_mask=(tmask > 0.5) & inside,
        seed=seed,
        local_flow=ld,
    )


# ------------------------------------------------------------------- PPM
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def save_image(img: np.ndarray, path) -> None:
    """Write binary PPM (P6, maxval 255); values are rounded to the 8-bit lattice."""
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"save_image expects h x w x 3, got {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())


def load_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise ParseError(f"{path}: truncated PPM header at byte offset {pos}")
        fields.append((m.group(1), m.start(1)))
        pos = m.end(1)
    (magic, _), *nums = fields
    if magic != b"P6":
        raise ParseError(f"{path}: bad magic {magic!r} at byte offset 0, expected P6")
    vals = []
    for tok, off in nums:
        if not tok.isdigit():
            raise ParseError(f"{path}: non-numeric header field {tok!r} at byte offset {off}")
        vals.append(int(tok))
    w, h, maxval = vals
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval} at byte offset {nums[2][1]}")
    if w < 1 or h < 1:
        raise ParseError(f"{path}: empty image {w}x{h}")
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise ParseError(f"{path}: missing whitespace after header at byte offset {pos}")
    pos += 1
    need = w * h * 3
    if len(raw) - pos < need:
        raise ParseError(f"{path}: pixel data ends at byte offset {len(raw)}, expected {pos + need}")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, 3).astype(float) / 255.0


# -------------------------------------------------------------- keypoints
@dataclass
class KeypointSet:
    points: dict[int, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def from_items(cls, items) -> KeypointSet:
        pts: dict[int, tuple[float, float]] = {}
        for kid, x, y in items:
            if kid in pts:
                raise ValueError(f"duplicate keypoint id {kid}")
            pts[int(kid)] = (float(x), float(y))
        return cls(pts)

    def ids(self) -> list[int]:
        return list(self.points)

    def array(self, ids=None) -> np.ndarray:
        ids = self.ids() if ids is None else ids
        return np.array([self.points[i] for i in ids], dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)


def load_keypoints(path) -> KeypointSet:
    """Parse ``id x y`` lines; blank lines and ``#`` comments are skipped."""
    pts: dict[int, tuple[float, float]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").split("\n"), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 3:
            raise ParseError(f"{path}:{lineno}: expected 'id x y', got {line!r}")
        try:
            kid, x, y = int(parts[0]), float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError(f"{path}:{lineno}: non-finite coordinate")
        if kid in pts:
            raise ParseError(f"{path}:{lineno}: duplicate keypoint id {kid}")
        pts[kid] = (x, y)
    return KeypointSet(pts)


def save_keypoints(kps: KeypointSet, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for kid, (x, y) in kps.points.items():
            fh.write(f"{kid} {x!r} {y!r}\n")
