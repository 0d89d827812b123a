"""Weakly-supervised training loop, checkpoints, and held-out evaluation."""
from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from .data import SyntheticConfig, SyntheticPair, gen_pair
from .evaluation import EvalConfig, endpoint_accuracy, mean_endpoint_error
from .features import FeatureNetParams, transform_features
from .geometry import image_flow
from .loss import LossConfig, classification_loss, sample_pixels
from .matching import MatcherParams, RecurrenceConfig, RecurrenceResult, run_recurrence
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"RTNCKPT\x00"
VERSION = 1


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-2
    momentum: float = 0.9
    clip_norm: float = 5.0
    seed: int = 0
    checkpoint_interval: int = 500
    recurrence: RecurrenceConfig = RecurrenceConfig()
    loss: LossConfig = LossConfig()
    data: SyntheticConfig = SyntheticConfig()

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.checkpoint_interval < 1:
            raise ValueError("steps must be >= 0, batch_size and checkpoint_interval >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.clip_norm <= 0:
            raise ValueError(f"bad optimizer settings lr={self.lr} momentum={self.momentum} clip={self.clip_norm}")


@dataclass
class Model:
    feat: FeatureNetParams
    match: MatcherParams

    @classmethod
    def init(cls, seed: int, radius: int = 2) -> Model:
        rng = np.random.default_rng(seed)
        feat = FeatureNetParams.init(rng)
        match = MatcherParams.init(rng, in_channels=(2 * radius + 1) ** 2)
        return cls(feat, match)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.feat.named_parameters() + self.match.named_parameters()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        st = {name: p.data.copy() for name, p in self.named_parameters()}
        st["feat.strides"] = np.array(self.feat.strides, dtype=float)
        return st

    @classmethod
    def from_state(cls, st: dict[str, np.ndarray]) -> Model:
        nf = sum(1 for k in st if k.startswith("feat.conv") and k.endswith(".kernel"))
        feat = FeatureNetParams(
            [Tensor(st[f"feat.conv{n}.kernel"].copy(), requires_grad=True) for n in range(nf)],
            [Tensor(st[f"feat.conv{n}.bias"].copy(), requires_grad=True) for n in range(nf)],
            [int(s) for s in st["feat.strides"]],
        )
        match = MatcherParams(
            [Tensor(st[f"match.{n}.kernel"].copy(), requires_grad=True) for n in MatcherParams.NAMES],
            [Tensor(st[f"match.{n}.bias"].copy(), requires_grad=True) for n in MatcherParams.NAMES],
        )
        return cls(feat, match)


# ------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int = 0
    config_text: str = ""
    version: int = VERSION

    @classmethod
    def of(cls, model: Model, step: int, config_text: str = "") -> Checkpoint:
        return cls(model.state(), step, config_text)

    def model(self) -> Model:
        return Model.from_state(self.tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Flat little-endian binary.

    Header ``magic, u32 version, u32 tensor count``; per tensor ``u32 name
    length, name bytes, u32 rank, u64 dims..., f64 values``; trailer ``u64
    step, u32 config length, config text``.
    """
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    cfg = ckpt.config_text.encode("utf-8")
    parts += [struct.pack("<QI", ckpt.step, len(cfg)), cfg]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    from .data import ParseError

    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ParseError(f"{path}: checkpoint truncated at byte offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic at byte offset 0)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    step, clen = struct.unpack("<QI", take(12))
    cfg = take(clen).decode("utf-8")
    if pos != len(raw):
        raise ParseError(f"{path}: {len(raw) - pos} trailing bytes at offset {pos}")
    return Checkpoint(tensors, step, cfg, version)


# --------------------------------------------------------------- forward
def infer(model: Model, reference: np.ndarray, moving: np.ndarray, cfg: RecurrenceConfig) -> RecurrenceResult:
    """Field on ``reference``'s grid pointing into ``moving``.

    ``warp_image(moving, flow)`` with the resulting image-grid flow lines
    ``moving`` up with ``reference``.
    """
    return run_recurrence(reference, moving, model.feat, model.match, cfg)


def pair_loss(model: Model, pair: SyntheticPair, cfg: TrainConfig, rng: np.random.Generator) -> Tensor:
    res = infer(model, pair.target, pair.source, cfg.recurrence)
    h, w = res.source_features.shape[:2]
    pixels = sample_pixels(h, w, cfg.loss.radius, cfg.loss.samples, rng)
    target_fn = partial(transform_features, res.target_penultimate, params=model.feat)
    fields = res.trajectory if cfg.loss.per_iteration else [res.final]
    total = None
    for t in fields:
        term = classification_loss(res.source_features, target_fn, t, cfg.loss, pixels)
        total = term if total is None else total + term
    return total * (1.0 / len(fields))


@dataclass
class TrainResult:
    model: Model
    losses: list[float]
    step: int
    elapsed: float = 0.0


def _global_norm(grads) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads))


def train(cfg: TrainConfig, model: Model | None = None,
          on_checkpoint: Callable[[Model, int, list[float]], None] | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Momentum SGD with global-norm clipping on all feature and matcher weights."""
    cfg.data.validate()
    model = model or Model.init(cfg.seed, cfg.recurrence.radius)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        for p in params:
            p.zero_grad()
        seeds = [int(s) for s in rng.integers(0, 2 ** 31, size=cfg.batch_size)]
        step_loss = 0.0
        try:
            for s in seeds:
                loss = pair_loss(model, gen_pair(s, cfg.data), cfg, rng) * (1.0 / cfg.batch_size)
                loss.backward()
                step_loss += loss.item()
        except FloatingPointError as exc:
            norms = {n: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
                     for n, p in model.named_parameters()}
            raise NumericalError(f"non-finite forward pass at step {step}: {exc}; pair_seeds={seeds} "
                                 f"grad_norms={norms}") from None
        grads = [p.grad for p in params]
        gnorm = _global_norm(grads)
        if not (math.isfinite(step_loss) and math.isfinite(gnorm)):
            norms = {n: float(np.linalg.norm(p.grad)) for n, p in model.named_parameters()}
            raise NumericalError(f"non-finite loss at step {step}: loss={step_loss} grad_norm={gnorm} "
                                 f"pair_seeds={seeds} grad_norms={norms}")
        scale = min(1.0, cfg.clip_norm / gnorm) if gnorm > 0 else 1.0
        if cfg.lr > 0:
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v += scale * g
                p.data -= cfg.lr * v
        losses.append(step_loss)
        if on_step:
            on_step(step, step_loss)
        if step % 50 == 0:
            log.info("step %d loss %.4f grad_norm %.3f", step, step_loss, gnorm)
        if on_checkpoint and (step % cfg.checkpoint_interval == 0 or step == cfg.steps):
            on_checkpoint(model, step, losses)
    return TrainResult(model, losses, cfg.steps, time.perf_counter() - t0)


def write_loss_curve(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["step", "loss"])
        for i, v in enumerate(losses, 1):
            out.writerow([i, repr(float(v))])


# -------------------------------------------------------------- evaluation
def eval_pairs(count: int, size: int, seed: int, data: SyntheticConfig = SyntheticConfig()) -> list[SyntheticPair]:
    from dataclasses import replace
    cfg = replace(data, size=size)
    return [gen_pair(seed + n, cfg) for n in range(count)]


def evaluate(model: Model, pairs, eval_cfg: EvalConfig = EvalConfig(),
             rec_cfg: RecurrenceConfig = RecurrenceConfig(),
             per_iteration: bool = True) -> list[tuple[str, str, float]]:
    """Metric rows ``(pair_id, metric, value)`` for every pair.

    Metrics: ``endpoint_accuracy`` and ``epe`` of the final field,
    ``baseline_accuracy`` of the zero flow, and with ``per_iteration`` the
    accuracy / error after each refinement step (``*_k1`` ...).
    """
    rows = []
    for pair in pairs:
        pid = f"seed{pair.seed}"
        h, w = pair.target.shape[:2]
        res = infer(model, pair.target, pair.source, rec_cfg)
        fields = list(enumerate(res.trajectory, 1)) if per_iteration else []
        flow = image_flow(res.final, h, w)
        rows.append((pid, "endpoint_accuracy", endpoint_accuracy(flow, pair.gt_flow, pair.fg_mask, eval_cfg)))
        rows.append((pid, "epe", mean_endpoint_error(flow, pair.gt_flow, pair.fg_mask)))
        rows.append((pid, "baseline_accuracy",
                     endpoint_accuracy(np.zeros_like(pair.gt_flow), pair.gt_flow, pair.fg_mask, eval_cfg)))
        for k, t in fields:
            fk = image_flow(t, h, w)
            rows.append((pid, f"endpoint_accuracy_k{k}", endpoint_accuracy(fk, pair.gt_flow, pair.fg_mask, eval_cfg)))
            rows.append((pid, f"epe_k{k}", mean_endpoint_error(fk, pair.gt_flow, pair.fg_mask)))
    return rows
