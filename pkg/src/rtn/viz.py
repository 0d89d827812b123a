"""Flow visualisation as an RGB image (hue = direction, saturation = magnitude)."""
from __future__ import annotations

import numpy as np


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    flow = np.asarray(flow, dtype=float)
    mag = np.linalg.norm(flow, axis=-1)
    scale = max_mag if max_mag else max(float(mag.max()), 1e-9)
    hue = (np.arctan2(flow[..., 1], flow[..., 0]) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / scale, 0.0, 1.0)
    return _hsv_to_rgb(hue, sat, np.ones_like(hue))


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        out[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return out
