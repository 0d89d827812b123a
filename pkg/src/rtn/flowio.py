"""Middlebury ``.flo`` flow files and binary PGM masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import ParseError, _TOKEN

FLO_MAGIC = 202021.25


def write_flo(flow: np.ndarray, path) -> None:
    flow = np.asarray(flow, dtype="<f4")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(flow.tobytes())


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or np.frombuffer(raw, "<f4", 1)[0] != np.float32(FLO_MAGIC):
        raise ParseError(f"{path}: bad .flo magic at byte offset 0")
    w, h = (int(v) for v in np.frombuffer(raw, "<i4", 2, offset=4))
    if w < 1 or h < 1 or len(raw) != 12 + 8 * w * h:
        raise ParseError(f"{path}: .flo size mismatch for {w}x{h} at byte offset 4")
    return np.frombuffer(raw, "<f4", offset=12).reshape(h, w, 2).astype(float)


def save_mask(mask: np.ndarray, path) -> None:
    m = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(m.tobytes())


def load_mask(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos, vals = 0, []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise ParseError(f"{path}: truncated PGM header at byte offset {pos}")
        vals.append(m.group(1))
        pos = m.end(1)
    if vals[0] != b"P5" or not all(v.isdigit() for v in vals[1:]):
        raise ParseError(f"{path}: expected a binary PGM (P5) header")
    w, h, maxval = (int(v) for v in vals[1:])
    pos += 1
    if maxval != 255 or len(raw) - pos < w * h:
        raise ParseError(f"{path}: unsupported maxval or truncated data at byte offset {pos}")
    return np.frombuffer(raw, np.uint8, w * h, offset=pos).reshape(h, w) > 127
