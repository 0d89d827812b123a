"""Implementations behind the ``rtn`` subcommands."""
from __future__ import annotations

import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from .data import ParseError, SyntheticConfig, gen_pair, load_image, save_image
from .evaluation import endpoint_accuracy, summarize, write_report
from .flowio import load_mask, read_flo, save_mask, write_flo
from .geometry import image_flow, warp_image
from .train import (Checkpoint, Model, TrainConfig, evaluate, eval_pairs, infer, load_checkpoint,
                    save_checkpoint, train, write_loss_curve)
from .viz import flow_to_color

log = logging.getLogger(__name__)


def _config(path) -> config_mod.RunConfig:
    return config_mod.load(path) if path else config_mod.RunConfig()


def _model_and_config(args):
    ckpt = load_checkpoint(args.checkpoint)
    if getattr(args, "config", None):
        cfg = _config(args.config)
    elif ckpt.config_text:
        cfg = config_mod.parse(ckpt.config_text)
    else:
        cfg = config_mod.RunConfig()
    return ckpt.model(), cfg


def cmd_train(args) -> int:
    cfg = _config(args.config)
    tc = cfg.train
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    cfg = replace(cfg, train=tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = config_mod.serialize(cfg)
    (out / "config.txt").write_text(text)

    def on_checkpoint(model, step, losses):
        save_checkpoint(Checkpoint.of(model, step, text), out / f"checkpoint_{step:06d}.bin")
        write_loss_curve(losses, out / "loss_curve.csv")

    result = train(tc, on_checkpoint=on_checkpoint)
    save_checkpoint(Checkpoint.of(result.model, result.step, text), out / "checkpoint.bin")
    write_loss_curve(result.losses, out / "loss_curve.csv")
    tail = result.losses[-100:]
    print(f"steps={result.step} final_loss_mean100={np.mean(tail) if tail else float('nan'):.6f} "
          f"elapsed_s={result.elapsed:.1f}")
    return 0


def _load_set(directory):
    """Pairs written by :func:`cmd_gen`: one sub-directory per pair."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"pair set {root} is not a directory")
    pairs = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        src, tgt = load_image(d / "source.ppm"), load_image(d / "target.ppm")
        flow = read_flo(d / "flow.flo")
        mask = load_mask(d / "mask.pgm") if (d / "mask.pgm").exists() else np.ones(flow.shape[:2], bool)
        pairs.append((d.name, src, tgt, flow, mask))
    if not pairs:
        raise ParseError(f"{root}: no pair directories found")
    return pairs


def cmd_eval(args) -> int:
    model, cfg = _model_and_config(args)
    rec = cfg.train.recurrence
    if args.synthetic is not None:
        if args.synthetic < 1:
            from .cli import UsageError
            raise UsageError("--synthetic needs a positive count")
        pairs = eval_pairs(args.synthetic, cfg.heldout.size, cfg.heldout.seed, cfg.train.data)
        rows = evaluate(model, pairs, cfg.eval, rec)
    else:
        rows = []
        for name, src, tgt, flow, mask in _load_set(args.set):
            res = infer(model, tgt, src, rec)
            pred = image_flow(res.final, *tgt.shape[:2])
            rows.append((name, "endpoint_accuracy", endpoint_accuracy(pred, flow, mask, cfg.eval)))
            rows.append((name, "baseline_accuracy",
                         endpoint_accuracy(np.zeros_like(flow), flow, mask, cfg.eval)))
    write_report(rows, args.report)
    for metric, value in summarize(rows).items():
        print(f"{metric}={value!r}")
    return 0


def cmd_warp(args) -> int:
    model, cfg = _model_and_config(args)
    src, tgt = load_image(args.source), load_image(args.target)
    if src.shape != tgt.shape:
        raise ParseError(f"source {src.shape} and target {tgt.shape} differ in size")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = tgt.shape[:2]
    res = infer(model, tgt, src, cfg.train.recurrence)
    flow = image_flow(res.final, h, w)
    save_image(warp_image(src, flow), out / "warped.ppm")
    save_image(flow_to_color(flow), out / "flow.ppm")
    write_flo(flow, out / "flow.flo")
    panels = [src, tgt]
    for k, t in enumerate(res.trajectory, 1):
        wk = warp_image(src, image_flow(t, h, w))
        save_image(wk, out / f"warped_iter{k}.ppm")
        panels.append(wk)
    save_image(np.concatenate(panels, axis=1), out / "panels.ppm")
    print(f"wrote {out}")
    return 0


def cmd_gen(args) -> int:
    cfg = _config(args.config)
    data = cfg.train.data if args.size is None else replace(cfg.train.data, size=args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n in range(args.count):
        seed = args.seed + n
        pair = gen_pair(seed, data)
        d = out / f"pair_{seed:06d}"
        d.mkdir(exist_ok=True)
        save_image(pair.source, d / "source.ppm")
        save_image(pair.target, d / "target.ppm")
        write_flo(pair.gt_flow, d / "flow.flo")
        save_mask(pair.fg_mask, d / "mask.pgm")
        save_image(flow_to_color(pair.gt_flow), d / "flow_vis.ppm")
    print(f"wrote {args.count} pairs to {out}")
    return 0


def gradcheck_full_loss(seed: int, samples: int = 20, size: int = 16) -> float:
    """Max relative error of backprop vs central differences on the full loss.

    Runs on a ``size x size`` synthetic pair with random weights everywhere,
    the last matcher layer included so the refined field is generic rather
    than sitting on the sampling lattice.  A 3x3 window keeps some pixels
    valid on the tiny feature grid.
    """
    from .tensor import grad_check
    from .train import pair_loss

    rng = np.random.default_rng(seed)
    model = Model.init(seed, radius=1)
    model.match.kernels[-1].data[...] = rng.normal(0, 0.05, model.match.kernels[-1].shape)
    model.match.biases[-1].data[...] = rng.normal(0, 0.05, model.match.biases[-1].shape)
    pair = gen_pair(seed, SyntheticConfig(size=size))
    base = TrainConfig()
    tc = replace(base, loss=replace(base.loss, radius=1, samples=None),
                 recurrence=replace(base.recurrence, radius=1))
    return grad_check(lambda *_: pair_loss(model, pair, tc, np.random.default_rng(0)), model.parameters(),
                      eps=1e-6, samples=samples, rng=rng)


def cmd_gradcheck(args) -> int:
    from .train import NumericalError
    err = gradcheck_full_loss(args.seed, args.samples, args.size)
    ok = err < 1e-4
    print(f"max_relative_error={err:.3e} tolerance=1e-04 {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise NumericalError(f"gradient check failed: max relative error {err:.3e}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    given = {}
    for spec in args.checkpoint:
        side, _, path = spec.partition("=")
        given[int(side)] = path
    n_pairs = args.pairs or cfg.heldout.pairs
    pairs = eval_pairs(n_pairs, cfg.heldout.size, cfg.heldout.seed, cfg.train.data)
    rows = []
    for side in args.windows:
        if side < 1 or side % 2 == 0:
            from .cli import UsageError
            raise UsageError(f"window side must be odd and positive, got {side}")
        radius = side // 2
        tc = replace(cfg.train, recurrence=replace(cfg.train.recurrence, radius=radius),
                     loss=replace(cfg.train.loss, radius=radius))
        if args.steps is not None:
            tc = replace(tc, steps=args.steps)
        if side in given:
            model = load_checkpoint(given[side]).model()
        else:
            model = train(tc).model
            save_checkpoint(Checkpoint.of(model, tc.steps, config_mod.serialize(replace(cfg, train=tc))),
                            out / f"checkpoint_w{side}.bin")
        for k in args.iterations:
            if k < 1:
                from .cli import UsageError
                raise UsageError(f"iteration counts must be positive, got {k}")
            rec = tc.recurrence.with_iterations(k)
            s = summarize(evaluate(model, pairs, cfg.eval, rec, per_iteration=False))
            rows.append((side, k, s["endpoint_accuracy"], s["epe"]))
            print(f"window={side}x{side} iterations={k} accuracy={s['endpoint_accuracy']:.4f} epe={s['epe']:.4f}")
    with open(out / "ablation.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["window", "iterations", "accuracy", "epe"])
        for side, k, acc, epe in rows:
            wr.writerow([f"{side}x{side}", k, repr(acc), repr(epe)])
    return 0
