"""Flow endpoint accuracy and PCK."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import KeypointSet
from .tensor import Tensor, bilinear_sample


class MetricError(ValueError):
    """Metric is undefined for the given inputs (empty mask, mismatched ids)."""


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 5.0
    norm_dim: float = 100.0
    alphas: tuple[float, ...] = (0.05, 0.1, 0.15)

    def __post_init__(self):
        if self.threshold <= 0 or self.norm_dim <= 0:
            raise ValueError("threshold and norm_dim must be positive")
        if not all(0 < a < 1 for a in self.alphas):
            raise ValueError(f"PCK alphas must lie in (0, 1), got {self.alphas}")


def endpoint_errors(flow: np.ndarray, gt_flow: np.ndarray) -> np.ndarray:
    flow, gt_flow = np.asarray(flow, dtype=float), np.asarray(gt_flow, dtype=float)
    if flow.shape != gt_flow.shape:
        raise MetricError(f"flow grid {flow.shape} differs from ground truth {gt_flow.shape}")
    return np.linalg.norm(flow - gt_flow, axis=-1)


def endpoint_accuracy(flow, gt_flow, mask, cfg: EvalConfig = EvalConfig()) -> float:
    """Fraction of masked pixels whose rescaled endpoint error is below the threshold.

    Errors are scaled by ``norm_dim / max(h, w)`` first, i.e. measured as if
    the image had been resized so its larger side is ``norm_dim`` pixels.
    The comparison is strict.
    """
    err = endpoint_errors(flow, gt_flow)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != err.shape:
        raise MetricError(f"mask {mask.shape} does not match flow grid {err.shape}")
    n = int(mask.sum())
    if n == 0:
        raise MetricError("endpoint accuracy is undefined on an empty mask")
    sigma = cfg.norm_dim / max(err.shape)
    return int((sigma * err[mask] < cfg.threshold).sum()) / n


def mean_endpoint_error(flow, gt_flow, mask) -> float:
    err = endpoint_errors(flow, gt_flow)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("mean endpoint error is undefined on an empty mask")
    return float(err[mask].mean())


def pck(pred_points: KeypointSet, gt_points: KeypointSet, ref_dim: float, alpha: float) -> float:
    """Fraction of keypoints within ``alpha * ref_dim`` (inclusive) of ground truth."""
    ids = pred_points.ids()
    if not ids or set(ids) != set(gt_points.ids()):
        raise MetricError(f"keypoint ids differ: predicted {sorted(ids)} vs ground truth {sorted(gt_points.ids())}")
    d = np.linalg.norm(pred_points.array(ids) - gt_points.array(ids), axis=1)
    return int((d <= alpha * ref_dim).sum()) / len(ids)


def transport_keypoints(points: KeypointSet, flow: np.ndarray) -> KeypointSet:
    """Move each point ``p`` to ``p + flow(p)``, interpolating the flow bilinearly."""
    ids = points.ids()
    if not ids:
        return KeypointSet()
    locs = points.array(ids)
    f = bilinear_sample(Tensor(np.asarray(flow, dtype=float)), Tensor(locs)).data
    moved = locs + f
    return KeypointSet({k: (float(x), float(y)) for k, (x, y) in zip(ids, moved)})


def write_report(rows, path) -> None:
    """CSV with columns pair_id, metric, value."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["pair_id", "metric", "value"])
        for pair_id, metric, value in rows:
            out.writerow([pair_id, metric, repr(float(value))])


def read_report(path) -> list[tuple[str, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["pair_id", "metric", "value"]:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(p, m, float(v)) for p, m, v in reader]


def summarize(rows) -> dict[str, float]:
    """Mean of each metric over pairs, accumulated in row order."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for _, metric, value in rows:
        sums[metric] = sums.get(metric, 0.0) + float(value)
        counts[metric] = counts.get(metric, 0) + 1
    return {m: sums[m] / counts[m] for m in sums}
