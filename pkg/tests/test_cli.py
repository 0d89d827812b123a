import json

import numpy as np
import pytest

from rtn.cli import main
from rtn.data import gen_pair, load_image, save_image, SyntheticConfig
from rtn.evaluation import read_report, summarize
from rtn.flowio import read_flo
from rtn.train import Checkpoint, Model, save_checkpoint

SMALL_CFG = """\
[train]
steps = 2
batch_size = 1
[loss]
samples = 16
[data]
size = 32
[heldout]
size = 32
pairs = 2
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cfg.txt").write_text(SMALL_CFG)
    save_checkpoint(Checkpoint.of(Model.init(0), 0), tmp_path / "zero.bin")
    return tmp_path


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


def test_gradcheck_seed_7(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    err = float(out.split("max_relative_error=")[1].split()[0])
    assert err < 1e-4 and "PASS" in out


def test_warp_with_zero_model_is_identity(workdir):
    pair = gen_pair(0, SyntheticConfig(size=32))
    save_image(pair.source, workdir / "s.ppm")
    save_image(pair.target, workdir / "t.ppm")
    assert main(["warp", "--checkpoint", str(workdir / "zero.bin"), "--source", str(workdir / "s.ppm"),
                 "--target", str(workdir / "t.ppm"), "--out", str(workdir / "w")]) == 0
    src = load_image(workdir / "s.ppm")
    assert np.array_equal(load_image(workdir / "w" / "warped.ppm"), src)
    assert np.all(read_flo(workdir / "w" / "flow.flo") == 0)
    for k in range(1, 5):
        assert np.array_equal(load_image(workdir / "w" / f"warped_iter{k}.ppm"), src)
    assert load_image(workdir / "w" / "panels.ppm").shape == (32, 6 * 32, 3)


def test_eval_report_aggregates_to_summary(workdir, capsys):
    report = workdir / "r.csv"
    assert main(["eval", "--checkpoint", str(workdir / "zero.bin"), "--config", str(workdir / "cfg.txt"),
                 "--synthetic", "3", "--report", str(report)]) == 0
    printed = dict(line.split("=", 1) for line in capsys.readouterr().out.split())
    summary = summarize(read_report(report))
    assert summary.keys() == printed.keys()
    assert all(float(printed[k]) == v for k, v in summary.items())
    assert summary["endpoint_accuracy"] == summary["baseline_accuracy"]


def test_gen_then_eval_set(workdir, capsys):
    assert main(["gen", "--config", str(workdir / "cfg.txt"), "--out", str(workdir / "set"), "--count", "2"]) == 0
    assert sorted(p.name for p in (workdir / "set").iterdir()) == ["pair_000000", "pair_000001"]
    flow = read_flo(workdir / "set" / "pair_000001" / "flow.flo")
    np.testing.assert_array_equal(flow, gen_pair(1, SyntheticConfig(size=32)).gt_flow.astype(np.float32))
    assert main(["eval", "--checkpoint", str(workdir / "zero.bin"), "--set", str(workdir / "set"),
                 "--report", str(workdir / "r.csv")]) == 0
    rows = read_report(workdir / "r.csv")
    assert {p for p, _, _ in rows} == {"pair_000000", "pair_000001"}


def test_train_writes_artifacts(workdir, capsys):
    out = workdir / "run"
    assert main(["train", "--config", str(workdir / "cfg.txt"), "--out", str(out), "--seed", "3"]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"config.txt", "checkpoint.bin", "checkpoint_000002.bin", "loss_curve.csv"} <= names
    assert len((out / "loss_curve.csv").read_text().splitlines()) == 3


def test_ablate_writes_csv(workdir, capsys):
    out = workdir / "abl"
    assert main(["ablate", "--config", str(workdir / "cfg.txt"), "--out", str(out), "--iterations", "1,2",
                 "--windows", "3", "--steps", "1", "--pairs", "1"]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "window,iterations,accuracy,epe" and len(lines) == 3
    assert lines[1].startswith("3x3,1,") and lines[2].startswith("3x3,2,")


class TestExitCodes:
    def test_usage_missing_argument(self, capsys):
        assert main(["warp", "--checkpoint", "x"]) == 1
        assert error_line(capsys)["error"] == "usage"

    def test_usage_no_command(self, capsys):
        assert main([]) == 1

    def test_usage_bad_window(self, workdir, capsys):
        assert main(["ablate", "--out", str(workdir / "a"), "--windows", "4",
                     "--checkpoint", f"4={workdir / 'zero.bin'}", "--config", str(workdir / "cfg.txt")]) == 1

    def test_missing_checkpoint_is_data_error(self, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(tmp_path / "nope.bin"), "--synthetic", "1",
                     "--report", str(tmp_path / "r.csv")]) == 2
        assert error_line(capsys)["error"] == "data"

    def test_bad_config_is_data_error(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("[train]\nbogus = 1\n")
        assert main(["train", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "o")]) == 2
        assert "bogus" in error_line(capsys)["reason"]

    def test_malformed_image_is_data_error(self, workdir, capsys):
        (workdir / "bad.ppm").write_bytes(b"P5\n1 1\n255\n\0")
        assert main(["warp", "--checkpoint", str(workdir / "zero.bin"), "--source", str(workdir / "bad.ppm"),
                     "--target", str(workdir / "bad.ppm"), "--out", str(workdir / "w")]) == 2

    def test_non_finite_weights_are_numerical_error(self, workdir, capsys):
        model = Model.init(0)
        model.feat.kernels[0].data[...] = np.nan
        save_checkpoint(Checkpoint.of(model, 0), workdir / "nan.bin")
        (workdir / "c.txt").write_text("[train]\nsteps = 1\nbatch_size = 1\n[data]\nsize = 32\n")
        assert main(["eval", "--checkpoint", str(workdir / "nan.bin"), "--config", str(workdir / "c.txt"),
                     "--synthetic", "1", "--report", str(workdir / "r.csv")]) == 3
        assert error_line(capsys)["error"] == "numerical"
