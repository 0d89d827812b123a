import math
from dataclasses import replace

import numpy as np
import pytest

from rtn.data import SyntheticConfig, gen_pair
from rtn.evaluation import EvalConfig, summarize
from rtn.loss import LossConfig
from rtn.train import (Checkpoint, Model, NumericalError, TrainConfig, evaluate, eval_pairs, infer,
                       load_checkpoint, pair_loss, save_checkpoint, train, write_loss_curve)

STILL = SyntheticConfig(size=32, scale_range=(1.0, 1.0), rot_range=0.0, trans_range=0.0, local_warp_amp=0.0)
SMALL = TrainConfig(steps=3, batch_size=2, loss=LossConfig(samples=32), data=SyntheticConfig(size=32))


def probe(model):
    pair = gen_pair(123, SyntheticConfig(size=32))
    return infer(model, pair.target, pair.source, SMALL.recurrence).final.numpy()


def test_zero_lr_leaves_parameters_unchanged():
    model = Model.init(0)
    before = {k: v.copy() for k, v in model.state().items()}
    train(replace(SMALL, lr=0.0), model=model)
    after = model.state()
    assert before.keys() == after.keys() and all(np.array_equal(before[k], after[k]) for k in before)


def test_training_changes_parameters_and_loss_is_finite():
    model = Model.init(0)
    before = {k: v.copy() for k, v in model.state().items()}
    res = train(SMALL, model=model)
    assert len(res.losses) == 3 and all(math.isfinite(v) for v in res.losses)
    assert not np.array_equal(before["match.out.kernel"], model.state()["match.out.kernel"])


def test_fixed_seed_is_bit_reproducible():
    a, b = train(SMALL), train(SMALL)
    assert a.losses == b.losses
    sa, sb = a.model.state(), b.model.state()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_different_seeds_differ():
    assert train(SMALL).losses != train(replace(SMALL, seed=1)).losses


def test_checkpoint_callback_schedule():
    steps = []
    train(replace(SMALL, steps=5, checkpoint_interval=2), on_checkpoint=lambda m, s, l: steps.append(s))
    assert steps == [2, 4, 5]


def test_non_finite_loss_aborts_with_diagnostics():
    model = Model.init(0)
    model.feat.kernels[0].data[...] = np.nan
    with pytest.raises(NumericalError, match="pair_seeds"):
        train(SMALL, model=model)


def test_initial_loss_near_uniform():
    # zero-final matcher and random features: the centre is barely preferred
    model = Model.init(0)
    loss = pair_loss(model, gen_pair(0, SyntheticConfig(size=32)), SMALL, np.random.default_rng(0)).item()
    assert 2.0 < loss < math.log(25) + 1e-9 + 1.0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = train(SMALL).model
        save_checkpoint(Checkpoint.of(model, 3, "[train]\nsteps = 3\n"), tmp_path / "c.bin")
        back = load_checkpoint(tmp_path / "c.bin")
        assert back.step == 3 and back.config_text == "[train]\nsteps = 3\n"
        assert np.array_equal(probe(back.model()), probe(model))
        st, bt = model.state(), back.model().state()
        assert st.keys() == bt.keys() and all(np.array_equal(st[k], bt[k]) for k in st)

    def test_save_is_deterministic(self, tmp_path):
        model = Model.init(4)
        save_checkpoint(Checkpoint.of(model, 0), tmp_path / "a.bin")
        save_checkpoint(Checkpoint.of(model, 0), tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_header(self, tmp_path):
        save_checkpoint(Checkpoint.of(Model.init(0), 0), tmp_path / "a.bin")
        raw = (tmp_path / "a.bin").read_bytes()
        assert raw[:8] == b"RTNCKPT\0" and int.from_bytes(raw[8:12], "little") == 1

    @pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-20], lambda b: b[:30]])
    def test_corrupt_rejected(self, tmp_path, mutate):
        from rtn.data import ParseError
        save_checkpoint(Checkpoint.of(Model.init(0), 0), tmp_path / "a.bin")
        path = tmp_path / "a.bin"
        path.write_bytes(mutate(path.read_bytes()))
        with pytest.raises(ParseError):
            load_checkpoint(path)


class TestEvaluate:
    def test_untrained_on_identity_pairs(self):
        pairs = [gen_pair(s, STILL) for s in range(3)]
        s = summarize(evaluate(Model.init(0), pairs, rec_cfg=SMALL.recurrence))
        assert s["endpoint_accuracy"] == 1.0 and s["epe"] == 0.0

    def test_untrained_equals_zero_flow_baseline(self):
        pairs = eval_pairs(4, 48, 1000)
        cfg = EvalConfig()
        rows = evaluate(Model.init(0), pairs, cfg, SMALL.recurrence)
        direct = []
        for p in pairs:
            sigma = cfg.norm_dim / 48
            err = np.linalg.norm(p.gt_flow, axis=-1)[p.fg_mask]
            direct.append(float(np.mean(sigma * err < cfg.threshold)))
        acc = [v for _, m, v in rows if m == "endpoint_accuracy"]
        base = [v for _, m, v in rows if m == "baseline_accuracy"]
        np.testing.assert_allclose(acc, direct, rtol=0, atol=1e-15)
        assert acc == base

    def test_per_iteration_rows(self):
        rows = evaluate(Model.init(0), eval_pairs(1, 32, 0), rec_cfg=SMALL.recurrence)
        metrics = [m for _, m, _ in rows]
        assert all(f"endpoint_accuracy_k{k}" in metrics and f"epe_k{k}" in metrics for k in range(1, 5))

    def test_held_out_seeds_disjoint_from_training(self):
        assert [p.seed for p in eval_pairs(3, 32, 2 ** 31)] == [2 ** 31, 2 ** 31 + 1, 2 ** 31 + 2]


def test_loss_curve_csv(tmp_path):
    write_loss_curve([3.0, 2.5], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text() == "step,loss\n1,3.0\n2,2.5\n"


def test_bad_config():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
