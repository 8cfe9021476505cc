import math

import numpy as np
import pytest

from kwsmixer import numeric as nm
from kwsmixer.numeric import Tape, Tensor

from helpers import check_grads

RNG = np.random.default_rng(7)


def t(arr, rg=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


class TestAffine:
    def test_identity(self):
        y = nm.affine(t([[1.0, 2.0]]), t(np.eye(2)), t([0.0, 0.0]))
        np.testing.assert_allclose(y.data, [[1.0, 2.0]])

    def test_hand_matmul(self):
        y = nm.affine(t([[1.0, 1.0]]), t([[2.0, 0.0], [0.0, 3.0]]), t([1.0, 1.0]))
        np.testing.assert_allclose(y.data, [[3.0, 4.0]])

    def test_zero_weight_gives_bias(self):
        x = t(RNG.normal(size=(5, 3)))
        y = nm.affine(x, t(np.zeros((3, 4))), t([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_allclose(y.data, np.tile([1.0, 2.0, 3.0, 4.0], (5, 1)))

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(nm.ShapeError, match=r"\(3, 2\)"):
            nm.affine(t(np.zeros((1, 2))), t(np.zeros((3, 2))), None)
        # message carries the offending kernel shape
        with pytest.raises(nm.ShapeError):
            nm.affine(t(np.zeros((1, 3))), t(np.zeros((3, 2))), t(np.zeros(5)))


class TestLayerNorm:
    def test_constant_slice_zero(self):
        x = t(np.full((3, 4), 2.5))
        y = nm.layer_norm(x, t(np.ones(4)), t(np.zeros(4)), axis=1)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-12)

    def test_hand_case(self):
        y = nm.layer_norm(t([[1.0, 3.0]]), t(np.ones(2)), t(np.zeros(2)), axis=1)
        np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-2)

    def test_beta_shift(self):
        x = t(RNG.normal(size=(2, 6)))
        y0 = nm.layer_norm(x, t(np.ones(6)), t(np.zeros(6)), axis=1)
        y5 = nm.layer_norm(x, t(np.ones(6)), t(np.full(6, 5.0)), axis=1)
        np.testing.assert_allclose(y5.data - y0.data, 5.0, atol=1e-12)

    def test_axis_out_of_range(self):
        with pytest.raises(nm.ShapeError):
            nm.layer_norm(t(np.zeros((2, 3))), t(np.ones(3)), t(np.zeros(3)), axis=2)

    def test_moments_property(self):
        for _ in range(10):
            x = t(RNG.normal(scale=2.0, size=(4, 16)))
            y = nm.layer_norm(x, t(np.ones(16)), t(np.zeros(16)), axis=1)
            mean = y.data.mean(axis=1)
            var = y.data.var(axis=1)
            assert np.abs(mean).max() < 1e-6
            assert np.abs(var - 1).max() < 1e-4


class TestGelu:
    def test_zero(self):
        assert nm.gelu(t([0.0])).data[0] == 0.0

    def test_upper_asymptote(self):
        assert abs(nm.gelu(t([10.0])).data[0] - 10.0) < 1e-6

    def test_one(self):
        # x * Phi(x) at x=1, high-precision erf oracle
        expected = 1.0 * 0.5 * (1 + math.erf(1 / math.sqrt(2)))
        assert abs(nm.gelu(t([1.0])).data[0] - expected) < 1e-12
        assert abs(expected - 0.841345) < 1e-5


class TestConv:
    def test_identity_filters(self):
        x = t(RNG.normal(size=(1, 3, 5, 5)))
        delta = np.zeros((3, 3, 3))
        delta[:, 1, 1] = 1.0
        y = nm.depthwise_separable_conv(
            x, t(delta), t(np.eye(3).reshape(3, 3, 1, 1)), padding=(1, 1)
        )
        np.testing.assert_allclose(y.data, x.data, atol=1e-12)

    def test_matches_bruteforce(self):
        # factored filter evaluated directly with nested loops
        for trial in range(5):
            rng = np.random.default_rng(trial)
            x = rng.normal(size=(1, 2, 6, 7))
            dk = rng.normal(size=(2, 3, 3))
            pk = rng.normal(size=(4, 2, 1, 1))
            y = nm.depthwise_separable_conv(
                Tensor(x), Tensor(dk), Tensor(pk), padding=(1, 1)
            ).data
            xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
            mid = np.zeros((1, 2, 6, 7))
            for c in range(2):
                for i in range(6):
                    for j in range(7):
                        mid[0, c, i, j] = np.sum(xp[0, c, i : i + 3, j : j + 3] * dk[c])
            ref = np.einsum("oc,ncij->noij", pk[:, :, 0, 0], mid)
            np.testing.assert_allclose(y, ref, atol=1e-10)

    def test_stride_two_halves_extent(self):
        x = t(np.zeros((1, 1, 9, 9)))
        k = t(np.ones((1, 3, 3)))
        pk = t(np.ones((1, 1, 1, 1)))
        y = nm.depthwise_separable_conv(x, k, pk, stride=(2, 2), padding=(1, 1))
        # (9 + 2 - 3)//2 + 1 = 5 = ceil(9/2)
        assert y.data.shape == (1, 1, 5, 5)

    def test_kernel_too_large(self):
        with pytest.raises(nm.ShapeError):
            nm.conv2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 5, 5))))

    @pytest.mark.parametrize("trial", range(6))
    def test_small_instances_match_direct(self, trial):
        rng = np.random.default_rng(100 + trial)
        h, w = rng.integers(3, 9, size=2)
        x = rng.normal(size=(1, 1, h, w))
        k = rng.normal(size=(1, 1, 3, 3))
        y = nm.conv2d(Tensor(x), Tensor(k)).data
        ref = np.zeros((1, 1, h - 2, w - 2))
        for i in range(h - 2):
            for j in range(w - 2):
                ref[0, 0, i, j] = np.sum(x[0, 0, i : i + 3, j : j + 3] * k[0, 0])
        np.testing.assert_allclose(y, ref, atol=1e-10)


class TestBackward:
    def test_sum_grad_ones(self):
        x = t(RNG.normal(size=(3, 4)), rg=True)
        with Tape() as tape:
            loss = nm.reduce_sum(x)
        nm.backward(tape, loss)
        np.testing.assert_allclose(x.grad, np.ones((3, 4)))

    def test_non_scalar_loss_rejected(self):
        x = t(np.zeros(3), rg=True)
        with Tape() as tape:
            y = nm.scale(x, 2.0)
        with pytest.raises(nm.ContractError):
            nm.backward(tape, y)

    def test_detached_gets_zero_grad(self):
        x = t(RNG.normal(size=(2, 2)), rg=True)
        with Tape() as tape:
            loss = nm.reduce_sum(nm.mul(x.detach(), x.detach()))
        nm.backward(tape, loss, params=[x])
        np.testing.assert_allclose(x.grad, 0.0)

    def test_stacked_affine_gelu_fd(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(3, 4)))
        W1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b1 = Tensor(rng.normal(size=5), requires_grad=True)
        W2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        b2 = Tensor(rng.normal(size=2), requires_grad=True)

        def loss():
            h = nm.gelu(nm.affine(x, W1, b1))
            y = nm.gelu(nm.affine(h, W2, b2))
            return nm.reduce_sum(nm.mul(y, y))

        check_grads(loss, [W1, b1, W2, b2])

    def test_determinism(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        grads = []
        for _ in range(2):
            x.grad = None
            with Tape() as tape:
                loss = nm.reduce_sum(nm.gelu(nm.affine(x, Tensor(np.eye(4)), None)))
            nm.backward(tape, loss)
            grads.append(x.grad.copy())
        assert np.array_equal(grads[0], grads[1])


@pytest.mark.parametrize("trial", range(20))
def test_randomized_gradient_suite(trial):
    """Every differentiable primitive vs central finite differences."""
    rng = np.random.default_rng(1000 + trial)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    W = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    g = Tensor(np.abs(rng.normal(size=4)) + 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)

    def loss():
        h = nm.layer_norm(x, g, b, axis=-1)
        h = nm.affine(h, W, b)
        h = nm.gelu(h)
        h = nm.softmax(h, axis=-1)
        h = nm.clamp(h, 1e-6, 1 - 1e-6)
        h = nm.log(h)
        s = nm.reduce_mean(h, axis=(0, 1))
        s = nm.sqrt(nm.reduce_sum(nm.mul(s, s), keepdims=False) + Tensor(0.1))
        return s

    check_grads(loss, [x, W, g, b])


@pytest.mark.parametrize("trial", range(20))
def test_conv_gradient_suite(trial):
    rng = np.random.default_rng(2000 + trial)
    x = Tensor(rng.normal(size=(2, 2, 5, 6)), requires_grad=True)
    kd = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    kp = Tensor(rng.normal(size=(3, 2, 1, 1)), requires_grad=True)
    bp = Tensor(rng.normal(size=3), requires_grad=True)

    def loss():
        y = nm.depthwise_separable_conv(
            x, kd, kp, point_bias=bp, stride=(1, 2), padding=(1, 1)
        )
        return nm.reduce_sum(nm.mul(y, y))

    check_grads(loss, [x, kd, kp, bp])


def test_structural_ops_grads():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def loss():
        h = nm.concat([a, b], axis=1)
        h = nm.moveaxis(h, 0, 1)
        h = nm.reshape(h, (12,))
        h = nm.index_last(nm.reshape(h, (3, 4)), 2)
        return nm.reduce_sum(nm.mul(h, h))

    check_grads(loss, [a, b])
