import math
import struct

import numpy as np
import pytest

from xtra.data import synth_dataset
from xtra.model import init_parameters
from xtra.trainer import (Checkpoint, CheckpointError, OptimizerState, TrainConfig, TrainingDiverged,
                          adamw_step, check_against_config, clip_gradients, load_checkpoint, lr_at,
                          pretrain, read_run_config, save_checkpoint)

from conftest import tiny_config


class TestSchedule:
    cfg = TrainConfig(peak_lr=1e-3, min_lr=1e-6, warmup_epochs=2, total_epochs=10)

    def test_endpoints(self):
        assert lr_at(0, 5, self.cfg) == 0.0
        assert lr_at(10, 5, self.cfg) == 1e-3
        assert abs(lr_at(50, 5, self.cfg) - 1e-6) < 1e-9

    def test_warmup_linear(self):
        np.testing.assert_allclose([lr_at(s, 5, self.cfg) for s in range(11)], np.linspace(0, 1e-3, 11))

    def test_monotone_after_warmup(self):
        lrs = [lr_at(s, 5, self.cfg) for s in range(10, 51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_continuous_at_boundary(self):
        assert abs(lr_at(9, 5, self.cfg) - lr_at(10, 5, self.cfg)) <= 1e-3 / 10 + 1e-12
        assert abs(lr_at(11, 5, self.cfg) - lr_at(10, 5, self.cfg)) < 1e-5

    def test_halfway_cosine(self):
        assert math.isclose(lr_at(30, 5, self.cfg), 1e-6 + (1e-3 - 1e-6) / 2)

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            TrainConfig(min_lr=0)
        with pytest.raises(ValueError):
            TrainConfig(peak_lr=1e-4, min_lr=1e-3)
        with pytest.raises(ValueError):
            TrainConfig(warmup_epochs=5, total_epochs=5)


class TestAdamW:
    def test_zero_grads_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = adamw_step(p, {"w": np.zeros(2)}, OptimizerState(), 1e-3, TrainConfig(weight_decay=0))
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_first_step_size(self):
        cfg = TrainConfig(weight_decay=0)
        new, _ = adamw_step({"w": np.array([0.5])}, {"w": np.array([1.0])}, OptimizerState(), 1e-3, cfg)
        assert math.isclose(new["w"][0] - 0.5, -1e-3 / (1 + 1e-8), rel_tol=1e-12)

    def test_decoupled_decay(self):
        cfg = TrainConfig(weight_decay=0.05)
        p = {"w": np.array([2.0, -4.0]), "x.b": np.array([3.0]), "ln.g": np.array([1.5])}
        g = {k: np.zeros_like(v) for k, v in p.items()}
        new, _ = adamw_step(p, g, OptimizerState(), 1e-2, cfg)
        np.testing.assert_allclose(new["w"], p["w"] * (1 - 1e-2 * 0.05), rtol=1e-15)
        assert new["x.b"][0] == 3.0 and new["ln.g"][0] == 1.5

    def test_second_moment_nonnegative_and_shapes(self, rng):
        p = {"w": rng.normal(size=(3, 4))}
        state = OptimizerState()
        for _ in range(3):
            p, state = adamw_step(p, {"w": rng.normal(size=(3, 4))}, state, 1e-3, TrainConfig())
        assert state.m["w"].shape == state.v["w"].shape == (3, 4) and (state.v["w"] >= 0).all()

    def test_quadratic_decreases(self, rng):
        p = {"w": rng.normal(size=10)}
        before = float(np.sum(p["w"] ** 2))
        new, _ = adamw_step(p, {"w": 2 * p["w"]}, OptimizerState(), 1e-3, TrainConfig(weight_decay=0))
        assert float(np.sum(new["w"] ** 2)) < before

    def test_non_finite_gradient(self):
        with pytest.raises(TrainingDiverged, match="'w'"):
            adamw_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0])}, OptimizerState(), 1e-3, TrainConfig())


class TestClip:
    def test_below_threshold(self):
        g = {"a": np.array([0.3, 0.4])}
        out, norm = clip_gradients(g, 1.0)
        assert out["a"] is g["a"] and math.isclose(norm, 0.5)

    def test_scaled(self):
        g = {"a": np.array([6.0, 0.0]), "b": np.array([[8.0]])}
        out, norm = clip_gradients(g, 1.0)
        assert norm == 10.0
        new = math.sqrt(sum(float((v ** 2).sum()) for v in out.values()))
        assert abs(new - 1.0) < 1e-6
        np.testing.assert_allclose(out["a"], [0.6, 0.0])

    def test_zero(self):
        out, norm = clip_gradients({"a": np.zeros(3)}, 1.0)
        assert norm == 0.0 and not out["a"].any()


def _random_state(rng):
    params = {"w": rng.normal(size=(3, 2)).astype(np.float32), "x.b": rng.normal(size=4)}
    opt = OptimizerState(7, {k: v * 0.1 for k, v in params.items()}, {k: v * v for k, v in params.items()})
    return params, opt


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        params, opt = _random_state(rng)
        gen = np.random.default_rng(5)
        gen.random(3)
        save_checkpoint(tmp_path / "c.xckp", params, opt, gen, 42)
        ck = load_checkpoint(tmp_path / "c.xckp")
        assert ck.step == 42 and ck.rng_state == gen.bit_generator.state
        for k in params:
            assert ck.params()[k].dtype == params[k].dtype
            assert ck.params()[k].tobytes() == params[k].tobytes()
            assert ck.optimizer().m[k].tobytes() == opt.m[k].tobytes()
            assert ck.optimizer().v[k].tobytes() == opt.v[k].tobytes()
        again = np.random.default_rng()
        again.bit_generator.state = ck.rng_state
        assert again.random() == gen.random()

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "c.xckp", {"w": np.ones((2, 3), np.float32)},
                        OptimizerState(1, {}, {}), np.random.default_rng(0), 9)
        raw = (tmp_path / "c.xckp").read_bytes()
        assert raw[:4] == b"XCKP"
        assert struct.unpack_from("<IQI", raw, 4) == (1, 9, 1)
        off = 4 + 4 + 8 + 4 + 32
        assert struct.unpack_from("<I", raw, off)[0] == 1
        off += 4
        (n,) = struct.unpack_from("<H", raw, off)
        assert raw[off + 2:off + 2 + n] == b"param/w"
        off += 2 + n
        assert struct.unpack_from("<BBQQ", raw, off) == (0, 2, 2, 3)
        assert len(raw) == off + 2 + 16 + 24

    def test_truncated(self, tmp_path, rng):
        params, opt = _random_state(rng)
        path = tmp_path / "c.xckp"
        save_checkpoint(path, params, opt, np.random.default_rng(0), 1)
        raw = path.read_bytes()
        for cut in (3, 30, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(path)

    def test_bad_magic_version(self, tmp_path, rng):
        params, opt = _random_state(rng)
        path = tmp_path / "c.xckp"
        save_checkpoint(path, params, opt, np.random.default_rng(0), 1)
        raw = bytearray(path.read_bytes())
        path.write_bytes(b"ZZZZ" + raw[4:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
        raw[4] = 2
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_shape_mismatch(self):
        cfg = tiny_config()
        params = init_parameters(cfg)
        params["pos"] = params["pos"][:3]
        with pytest.raises(ValueError, match="pos"):
            check_against_config(params, cfg)


@pytest.fixture(scope="module")
def small_data():
    return synth_dataset(2, 16, size=8, seed=0)


def test_smoke(tmp_path, small_data):
    cfg = tiny_config()
    log = pretrain(cfg, TrainConfig(batch_size=8, warmup_epochs=0, total_epochs=1), small_data.subset(range(8)),
                   checkpoint_dir=tmp_path)
    assert len(log.epoch_losses) == 1 and math.isfinite(log.epoch_losses[0])
    assert (tmp_path / "last.xckp").exists()
    assert read_run_config(tmp_path / "last.xckp").to_dict() == cfg.to_dict()


def test_same_seed_same_trace(small_data):
    cfg, tc = tiny_config(drop_path_rate=0.1), TrainConfig(batch_size=4, warmup_epochs=1, total_epochs=2)
    a = pretrain(cfg, tc, small_data).step_losses
    b = pretrain(cfg, tc, small_data).step_losses
    assert a == b
    c = pretrain(cfg, TrainConfig(batch_size=4, warmup_epochs=1, total_epochs=2, seed=1), small_data)
    assert c.step_losses != a


def test_resume_matches_uninterrupted(tmp_path, small_data):
    cfg, tc = tiny_config(drop_path_rate=0.1), TrainConfig(batch_size=4, warmup_epochs=1, total_epochs=3)
    full = pretrain(cfg, tc, small_data)
    first = pretrain(cfg, tc, small_data, checkpoint_dir=tmp_path, stop_after=6)
    rest = pretrain(cfg, tc, small_data, resume=tmp_path / "last.xckp")
    assert first.step_losses + rest.step_losses == full.step_losses
    for k in full.params:
        assert full.params[k].tobytes() == rest.params[k].tobytes()


def test_layout_mismatch(small_data):
    with pytest.raises(ValueError, match="do not match"):
        pretrain(tiny_config(), TrainConfig(), synth_dataset(2, 8, size=16))


def test_loss_decreases(small_data):
    log = pretrain(tiny_config(), TrainConfig(batch_size=4, warmup_epochs=1, total_epochs=6, augment=False),
                   small_data)
    assert log.epoch_losses[-1] < log.epoch_losses[0]
