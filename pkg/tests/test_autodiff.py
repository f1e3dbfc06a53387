"""Backward-pass semantics and finite-difference gradient checks (64-bit,
central differences, step 1e-4)."""

import numpy as np
import pytest

from esknet import tensor as T
from esknet.tensor import TapeError, Tensor
from esknet.verification import finite_difference, gradient_check


class TestBackwardSemantics:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
        T.reduce_sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_gradient_is_twice_input(self, rng):
        x = Tensor(rng.normal(size=(5,)), requires_grad=True, dtype=np.float64)
        T.reduce_sum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_gradients_accumulate_across_uses(self, rng):
        x = Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
        y = T.add(T.mul(x, 3.0), x)     # x used twice: d/dx = 4
        T.reduce_sum(y).backward()
        np.testing.assert_allclose(x.grad, 4.0)

    def test_gradients_accumulate_across_backwards(self, rng):
        x = Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
        T.reduce_sum(x).backward()
        T.reduce_sum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 1.0 + 2 * x.data)

    def test_second_backward_on_same_graph_raises(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True, dtype=np.float64)
        loss = T.reduce_sum(T.mul(x, x))
        loss.backward()
        with pytest.raises(TapeError, match="freed"):
            loss.backward()

    def test_backward_on_non_scalar_raises(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True, dtype=np.float64)
        with pytest.raises(TapeError, match="scalar"):
            T.mul(x, x).backward()

    def test_backward_on_untracked_tensor_raises(self):
        with pytest.raises(TapeError):
            Tensor(np.float64(1.0), requires_grad=True).backward()
        with T.no_grad():
            loss = T.reduce_sum(Tensor(np.ones(2), requires_grad=True))
        with pytest.raises(TapeError):
            loss.backward()

    def test_no_grad_builds_no_graph(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True, dtype=np.float64)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y._parents == ()

    def test_finite_on_finite_inputs(self, rng):
        # A representative chain of every op keeps values finite.
        x = Tensor(rng.uniform(0, 1, (1, 2, 8, 8)), requires_grad=True,
                   dtype=np.float64)
        p = T.ConvParams(Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True,
                                dtype=np.float64),
                         Tensor(np.zeros(2), requires_grad=True, dtype=np.float64))
        h = T.conv2d(x, p)
        h = T.max_pool2d(T.activation(h, "relu"), 2)
        h = T.upsample2d(h, 2)
        prob = T.activation(h, "sigmoid")
        loss = T.bce_loss(prob, (rng.random((1, 2, 8, 8)) > 0.5).astype(np.float64))
        loss.backward()
        assert np.isfinite(loss.item())
        assert np.all(np.isfinite(x.grad)) and np.all(np.isfinite(p.kernel.grad))


def _t(rng, shape):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=True, dtype=np.float64)


class TestFiniteDifferences:
    @pytest.mark.parametrize("seed", range(5))
    def test_conv2d_all_arguments(self, seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, (2, 5, 5))
        p = T.ConvParams(_t(rng, (3, 2, 3, 3)), _t(rng, (3,)), dilation=2)
        err = gradient_check(lambda: T.reduce_sum(T.mul(T.conv2d(x, p), T.conv2d(x, p))),
                             [x, p.kernel, p.bias])
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_strided_conv(self, seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, (1, 6, 6))
        p = T.ConvParams(_t(rng, (2, 1, 3, 3)), _t(rng, (2,)), stride=2, padding=1)
        err = gradient_check(lambda: T.reduce_sum(T.mul(T.conv2d(x, p), T.conv2d(x, p))),
                             [x, p.kernel, p.bias])
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_batch_norm_train_mode(self, seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, (5, 3))
        p = T.BatchNormParams(_t(rng, (3,)), _t(rng, (3,)),
                              Tensor(np.zeros(3), dtype=np.float64),
                              Tensor(np.ones(3), dtype=np.float64))
        err = gradient_check(lambda: T.reduce_sum(T.mul(T.batch_norm(x, p),
                                                        T.batch_norm(x, p))),
                             [x, p.scale, p.shift])
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_batch_norm_eval_mode(self, seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, (4, 2))
        p = T.BatchNormParams(_t(rng, (2,)), _t(rng, (2,)),
                              Tensor(rng.normal(size=2), dtype=np.float64),
                              Tensor(rng.uniform(0.5, 2, 2), dtype=np.float64),
                              mode="eval")
        err = gradient_check(lambda: T.reduce_sum(T.mul(T.batch_norm(x, p),
                                                        T.batch_norm(x, p))),
                             [x, p.scale, p.shift])
        assert err < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_sigmoid_tight_tolerance(self, seed):
        rng = np.random.default_rng(seed)
        x = _t(rng, (4, 6))
        err = gradient_check(
            lambda: T.reduce_sum(T.mul(T.activation(x, "sigmoid"), x)), [x])
        assert err < 1e-6   # smooth elementwise ops get the tight bound

    @pytest.mark.parametrize("seed", range(5))
    def test_broadcast_add_and_mul(self, seed):
        rng = np.random.default_rng(seed)
        channel = _t(rng, (3, 1, 1))
        spatial = _t(rng, (1, 4, 5))
        full = _t(rng, (3, 4, 5))
        err = gradient_check(
            lambda: T.reduce_sum(T.mul(T.add(full, channel), T.mul(full, spatial))),
            [channel, spatial, full])
        assert err < 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_bce_through_logits(self, seed):
        rng = np.random.default_rng(seed)
        logits = _t(rng, (3, 6))
        target = (rng.random((3, 6)) > 0.5).astype(np.float64)
        err = gradient_check(
            lambda: T.bce_loss(T.activation(logits, "sigmoid"), target), [logits])
        assert err < 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_concat_and_reshape(self, seed):
        rng = np.random.default_rng(seed)
        a = _t(rng, (2, 3, 4))
        b = _t(rng, (1, 3, 4))
        err = gradient_check(
            lambda: T.reduce_sum(T.mul(T.reshape(T.concat([a, b], axis=0), (36,)),
                                       T.reshape(T.concat([a, b], axis=0), (36,)))),
            [a, b])
        assert err < 1e-4

    def test_finite_difference_itself_on_a_closed_form(self):
        # d/dx sum(x^2) = 2x: the checker's own reference matches analytics.
        x = Tensor(np.array([0.5, -1.5, 2.0]), requires_grad=True, dtype=np.float64)
        fd = finite_difference(lambda: T.reduce_sum(T.mul(x, x)), x)
        np.testing.assert_allclose(fd, 2 * x.data, atol=1e-8)
