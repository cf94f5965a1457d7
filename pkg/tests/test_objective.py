import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xtra import autograd as ag
from xtra.objective import BlockTargets, normalize_blocks, reconstruction_loss, slot_targets


def _targets(values):
    values = np.asarray(values, dtype=np.float64)
    return BlockTargets(values, np.zeros(values.shape[:2]), np.ones(values.shape[:2]))


class TestNormalize:
    def test_constant_block(self):
        out = normalize_blocks(np.full((1, 1, 8), 0.7))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_hand_example(self):
        out = normalize_blocks(np.array([[[0.0, 1, 2, 3]]]), eps=1e-12)
        assert out.mean[0, 0] == 1.5 and out.var[0, 0] == 1.25
        np.testing.assert_allclose(out.values[0, 0], [-1.342, -0.447, 0.447, 1.342], atol=1e-3)

    def test_moments(self, rng):
        out = normalize_blocks(rng.random((4, 6, 48)))
        np.testing.assert_allclose(out.values.mean(-1), 0, atol=1e-5)
        np.testing.assert_allclose(out.values.var(-1), 1, atol=1e-3)

    def test_idempotent(self, rng):
        once = normalize_blocks(rng.random((3, 5, 12))).values
        assert np.abs(normalize_blocks(once).values - once).max() < 1e-3


class TestLoss:
    def test_perfect_prediction(self, rng):
        t = normalize_blocks(rng.random((2, 4, 12)))
        pred = ag.Tensor(t.values[:, 1:, None, :].copy())
        assert float(reconstruction_loss(pred, t).data) == 0.0

    def test_hand_example(self):
        t = _targets([[[5.0, 5.0], [0.0, 1.0]]])
        pred = ag.Tensor(np.array([1.0, 0.0]).reshape(1, 1, 1, 2))
        assert float(reconstruction_loss(pred, t).data) == 2.0

    def test_zero_prediction_is_block_dim(self, rng):
        D = 48
        t = normalize_blocks(rng.normal(size=(8, 10, D)))
        loss = float(reconstruction_loss(ag.Tensor(np.zeros((8, 9, 1, D))), t).data)
        assert abs(loss - D) / D < 0.01

    def test_needs_two_blocks(self):
        t = _targets(np.zeros((1, 1, 4)))
        with pytest.raises(ValueError):
            reconstruction_loss(ag.Tensor(np.zeros((1, 0, 1, 4))), t)

    def test_unknown_norm(self, rng):
        t = normalize_blocks(rng.random((1, 3, 4)))
        with pytest.raises(ValueError):
            reconstruction_loss(ag.Tensor(np.zeros((1, 2, 1, 4))), t, norm="huber")

    @pytest.mark.parametrize("norm", ["l2", "l1"])
    @pytest.mark.parametrize("M", [1, 2])
    def test_gradient_identity(self, rng, norm, M):
        B, K, D = 3, 5, 6
        t = normalize_blocks(rng.random((B, K, D)))
        p = rng.normal(size=(B, K - 1, M, D))
        pred = ag.Tensor(p, requires_grad=True)
        grad = ag.backward(reconstruction_loss(pred, t, norm), {"p": pred})["p"]
        aligned, valid = slot_targets(t, M)
        scale = B * valid.sum()
        diff = p - aligned
        expect = (2 * diff if norm == "l2" else np.sign(diff)) / scale
        np.testing.assert_allclose(grad, expect * valid[None, :, :, None], rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("shift,scale", [(100.0, 1.0), (0.0, 5.0), (100.0, 5.0)])
    def test_shift_scale_invariance(self, rng, shift, scale):
        raw = rng.random((2, 5, 12))
        pred = ag.Tensor(rng.normal(size=(2, 4, 1, 12)))
        base = float(reconstruction_loss(pred, normalize_blocks(raw)).data)
        moved = raw.copy()
        moved[:, 2] = moved[:, 2] * scale + shift
        other = float(reconstruction_loss(pred, normalize_blocks(moved)).data)
        assert abs(other - base) / base < 1e-3


@settings(max_examples=40, deadline=None)
@given(K=st.integers(2, 12), M=st.integers(1, 4))
def test_rank_zero_never_a_target(K, M):
    M = min(M, K - 1)
    D = 3
    values = np.zeros((1, K, D))
    values[0, :, 0] = np.arange(K)  # tag each block with its rank
    values[0, 0, :] = np.nan  # rank 0 would poison the loss if ever used
    t = BlockTargets(values, np.zeros((1, K)), np.ones((1, K)))
    aligned, valid = slot_targets(_no_nan(t), M)
    for j, m in zip(*np.nonzero(valid)):
        assert aligned[0, j, m, 0] == j + 1 + m != 0
    loss = reconstruction_loss(ag.Tensor(np.zeros((1, K - 1, M, D))), t)
    assert np.isfinite(loss.data)
    assert valid.sum() == sum(min(M, K - 1 - j) for j in range(K - 1))


def _no_nan(t):
    return BlockTargets(np.nan_to_num(t.values, nan=-1.0), t.mean, t.var)
