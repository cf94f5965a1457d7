import json

import numpy as np
import pytest

from xtra.cli import load_config, main
from xtra.data import load_xid
from xtra.generation import read_ppm
from xtra.masking import BlockLayout, build_block_causal_mask


def test_no_args_prints_usage(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert main(["dataset"]) == 1


def test_cost(capsys):
    assert main(["cost", "--params", "632e6", "--samples", "14e6", "--epochs", "100",
                 "--views", "1", "--tokens", "256"]) == 0
    assert capsys.readouterr().out.strip() == "5.8"


def test_cost_bad_value(capsys):
    assert main(["cost", "--params", "0", "--samples", "1", "--epochs", "1", "--views", "1", "--tokens", "1"]) == 2


def _oracle(n, k):
    side = int(np.sqrt(n))
    def blk(t):
        r, c = divmod(t, side)
        return (r // k) * (side // k) + c // k
    return np.array([[blk(j) <= blk(i) for j in range(n)] for i in range(n)])


def test_mask_ascii(capsys):
    assert main(["mask", "--grid", "4x4", "--block", "2", "--format", "ascii"]) == 0
    rows = capsys.readouterr().out.split()
    grid = np.array([[ch == "1" for ch in row] for row in rows])
    assert grid.shape == (16, 16)
    np.testing.assert_array_equal(grid, _oracle(16, 2))


def test_mask_pbm_file(tmp_path):
    out = tmp_path / "m.pbm"
    assert main(["mask", "--grid", "4x4", "--block", "2", "--pattern", "random", "--seed", "3",
                 "--format", "pbm", "--out", str(out)]) == 0
    assert out.read_text().startswith("P1")
    expected = build_block_causal_mask(BlockLayout(4, 4, 1, 1, 2, "random", 3)).to_pbm()
    assert out.read_text() == expected


def test_mask_bad_grid(capsys):
    assert main(["mask", "--grid", "4by4", "--block", "2"]) == 2
    assert main(["mask", "--grid", "4x4", "--block", "3"]) == 2


def test_load_config_overrides(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('image_size = 8\npatch_size = 2\nblock_size = 2\nenc_width = 16\nenc_heads = 2\n'
                   'dec_width = 8\ndec_heads = 2\nepochs = 3\npattern = "random"\n')
    model, train = load_config(cfg, ["enc_depth=1", "peak_lr=5e-4", "warmup_epochs=0"])
    assert model.layout.pattern == "random" and model.enc_depth == 1
    assert train.total_epochs == 3 and train.peak_lr == 5e-4


def test_pipeline_end_to_end(tmp_path, capsys):
    data, test = tmp_path / "train.xid", tmp_path / "test.xid"
    assert main(["dataset", "synth", "--classes", "2", "--count", "16", "--size", "8", "--seed", "0",
                 "--out", str(data)]) == 0
    assert main(["dataset", "synth", "--classes", "2", "--count", "8", "--size", "8", "--seed", "1",
                 "--out", str(test)]) == 0
    assert len(load_xid(data)) == 16
    cfg = tmp_path / "c.toml"
    cfg.write_text("image_size = 8\npatch_size = 2\nblock_size = 2\nenc_width = 16\nenc_depth = 1\n"
                   "enc_heads = 2\ndec_width = 8\ndec_depth = 1\ndec_heads = 2\nbatch_size = 8\n"
                   "total_epochs = 2\nwarmup_epochs = 1\n")
    run = tmp_path / "run"
    assert main(["pretrain", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    ckpt = run / "last.xckp"
    assert ckpt.exists() and len(json.loads((run / "log.json").read_text())["epoch_losses"]) == 2

    assert main(["pretrain", "--config", str(cfg), "--data", str(data), "--out", str(run),
                 "--resume", str(ckpt), "--set", "total_epochs=3"]) == 0

    report = tmp_path / "probe.json"
    assert main(["probe", "--mode", "linear", "--checkpoint", str(ckpt), "--data", str(data),
                 "--test-data", str(test), "--out", str(report), "--lr-grid", "1e-3", "--epochs", "2"]) == 0
    doc = json.loads(report.read_text())
    assert set(doc) == {"mode", "lr_grid", "best_lr", "accuracy"} and doc["mode"] == "linear"
    assert main(["probe", "--mode", "attentive", "--checkpoint", str(ckpt), "--data", str(data),
                 "--out", str(report), "--lr-grid", "1e-3", "--epochs", "1"]) == 0

    grid = tmp_path / "g.ppm"
    assert main(["generate", "--checkpoint", str(ckpt), "--data", str(data), "--count", "3",
                 "--out", str(grid)]) == 0
    assert read_ppm(grid).shape == (24, 16, 3)


def test_pretrain_missing_file(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("image_size = 8\npatch_size = 2\nblock_size = 2\n")
    assert main(["pretrain", "--config", str(cfg), "--data", str(tmp_path / "nope.xid"),
                 "--out", str(tmp_path / "r")]) == 2


@pytest.mark.parametrize("body", ["enc_width = 8\n", "image_size = 8\n"])
def test_incomplete_config_is_usage_error(tmp_path, capsys, body):
    cfg = tmp_path / "c.toml"
    cfg.write_text(body)
    assert main(["pretrain", "--config", str(cfg), "--data", "x", "--out", str(tmp_path)]) == 1
