import math

import numpy as np
import numpy.testing as npt
import pytest

from mmfuse.nn import (AdamState, CheckpointError, DenseLayer, ParamStore,
                       StateError, cross_entropy, gradient_check,
                       load_checkpoint, restore_checkpoint, save_checkpoint)
from mmfuse.tensor import RngState, ShapeError, softmax_stable


def make_layer(in_dim, out_dim, act=None, W=None, b=None, rng=None):
    store = ParamStore()
    layer = DenseLayer(store, "fc", in_dim, out_dim, act, rng)
    if W is not None:
        layer.W[:] = W
    if b is not None:
        layer.b[:] = b
    return store, layer


class TestDenseForward:
    def test_identity(self):
        _, layer = make_layer(3, 3, W=np.eye(3))
        x = np.array([[1.0], [2.0], [-3.0]])
        npt.assert_array_equal(layer.forward(x), x)

    def test_zero_weights_bias_only(self):
        _, layer = make_layer(2, 2, b=np.array([[0.7], [-0.2]]))
        out = layer.forward(np.ones((2, 3)))
        npt.assert_allclose(out, np.array([[0.7], [-0.2]]) @ np.ones((1, 3)))

    def test_relu_clips_negative_preactivation(self):
        _, layer = make_layer(2, 1, act="relu", W=np.array([[1.0, 1.0]]),
                              b=np.array([[0.5]]))
        out = layer.forward(np.array([[-1.0], [-1.0]]))
        npt.assert_array_equal(out, [[0.0]])

    def test_shape_mismatch(self):
        _, layer = make_layer(3, 2)
        with pytest.raises(ShapeError):
            layer.forward(np.zeros((4, 1)))


class TestDenseBackward:
    def test_linear_jacobian_is_outer_product(self):
        store, layer = make_layer(3, 2, W=np.arange(6, dtype=float).reshape(2, 3))
        x = np.array([[1.0], [2.0], [3.0]])
        layer.forward(x)
        e1 = np.array([[1.0], [0.0]])
        layer.backward(e1)
        npt.assert_array_equal(store.grads["fc.W"], e1 @ x.T)
        npt.assert_array_equal(store.grads["fc.b"], e1)

    def test_dead_relu_zero_gradients(self):
        store, layer = make_layer(2, 2, act="relu", W=-np.eye(2))
        layer.forward(np.ones((2, 4)))
        grad_in = layer.backward(np.ones((2, 4)))
        npt.assert_array_equal(store.grads["fc.W"], np.zeros((2, 2)))
        npt.assert_array_equal(grad_in, np.zeros((2, 4)))

    def test_backward_before_forward(self):
        _, layer = make_layer(2, 2)
        with pytest.raises(StateError):
            layer.backward(np.zeros((2, 1)))

    @pytest.mark.parametrize("act", [None, "relu", "softplus", "sigmoid", "tanh"])
    def test_finite_difference(self, act):
        rng = RngState(13)
        for trial in range(20):
            store = ParamStore()
            layer = DenseLayer(store, "fc", 4, 3, act, rng)
            x = rng.gaussian(4, 2)
            target = rng.gaussian(3, 2)

            def loss():
                diff = layer.forward(x) - target
                return 0.5 * float((diff * diff).sum())

            store.zero_grads()
            diff = layer.forward(x) - target
            layer.backward(diff)
            assert gradient_check(loss, store) < 1e-4


class TestCrossEntropy:
    def test_perfect_prediction(self):
        probs = np.eye(3)[:, [0, 1, 2]]
        loss, _ = cross_entropy(probs, [0, 1, 2])
        assert loss == 0.0

    def test_uniform_two_class(self):
        probs = np.full((2, 4), 0.5)
        loss, _ = cross_entropy(probs, [0, 1, 0, 1])
        assert loss == pytest.approx(math.log(2.0), rel=1e-12)

    def test_direct_evaluation(self):
        probs = np.array([[0.9, 0.5], [0.1, 0.5]])
        loss, _ = cross_entropy(probs, [0, 0])
        assert loss == pytest.approx(-(math.log(0.9) + math.log(0.5)) / 2,
                                     rel=1e-12)

    def test_gradient_columns_sum_to_zero(self):
        rng = RngState(21)
        probs = softmax_stable(rng.gaussian(5, 8))
        _, grad = cross_entropy(probs, [0, 1, 2, 3, 4, 0, 1, 2])
        npt.assert_allclose(grad.sum(axis=0), 0.0, atol=1e-10)

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            cross_entropy(np.full((2, 1), 0.5), [2])


class TestAdam:
    def test_zero_gradient_is_noop(self):
        store = ParamStore()
        p = store.add("p", np.array([[1.0, -2.0]]))
        opt = AdamState(store)
        for _ in range(5):
            opt.step()
        npt.assert_array_equal(p, [[1.0, -2.0]])

    def test_first_step_magnitude_is_lr(self):
        # bias correction makes m_hat = g and sqrt(v_hat) = |g| at t=1
        store = ParamStore()
        p = store.add("p", np.zeros((1, 3)))
        store.grads["p"][:] = np.array([[5.0, -2.0, 0.5]])
        opt = AdamState(store, lr=0.001)
        opt.step()
        npt.assert_allclose(np.abs(p), 0.001, rtol=1e-6)
        npt.assert_array_equal(np.sign(p), [[-1.0, 1.0, -1.0]])

    def test_two_steps_on_quadratic_decrease(self):
        store = ParamStore()
        theta = store.add("theta", np.array([[1.0]]))
        opt = AdamState(store, lr=0.001)
        prev = abs(theta[0, 0])
        for _ in range(2):
            store.grads["theta"][:] = theta
            opt.step()
            assert abs(theta[0, 0]) < prev
            prev = abs(theta[0, 0])

    def test_never_increases_quadratic_loss(self):
        for seed in range(100):
            rng = RngState(seed)
            store = ParamStore()
            theta = store.add("theta", rng.gaussian(3, 1))
            opt = AdamState(store, lr=0.01)
            before = 0.5 * float((theta ** 2).sum())
            store.grads["theta"][:] = theta
            opt.step()
            after = 0.5 * float((theta ** 2).sum())
            assert after <= before

    def test_gradients_zeroed_after_step(self):
        store = ParamStore()
        store.add("p", np.ones((2, 2)))
        store.grads["p"][:] = 3.0
        AdamState(store).step()
        npt.assert_array_equal(store.grads["p"], np.zeros((2, 2)))


class TestGradientCheck:
    def test_linear_mse_near_exact(self):
        rng = RngState(31)
        store = ParamStore()
        layer = DenseLayer(store, "fc", 5, 4, None, rng)
        x = rng.gaussian(5, 3)
        target = rng.gaussian(4, 3)

        def loss():
            diff = layer.forward(x) - target
            return 0.5 * float((diff * diff).sum())

        diff = layer.forward(x) - target
        layer.backward(diff)
        assert gradient_check(loss, store) < 1e-8


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = RngState(77)
        store = ParamStore()
        DenseLayer(store, "a", 4, 3, "relu", rng)
        DenseLayer(store, "b", 3, 2, None, rng)
        path = tmp_path / "model.fvw"
        save_checkpoint(store, path)
        loaded = load_checkpoint(path)
        assert list(loaded) == store.names()
        for name in loaded:
            npt.assert_array_equal(loaded[name], store.params[name])
        # writing the restored parameters again reproduces identical bytes
        store2 = ParamStore()
        DenseLayer(store2, "a", 4, 3, "relu", rng)
        DenseLayer(store2, "b", 3, 2, None, rng)
        restore_checkpoint(store2, path)
        path2 = tmp_path / "model2.fvw"
        save_checkpoint(store2, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.fvw"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        rng = RngState(1)
        store = ParamStore()
        DenseLayer(store, "a", 4, 4, None, rng)
        path = tmp_path / "model.fvw"
        save_checkpoint(store, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_shape_mismatch_on_restore(self, tmp_path):
        rng = RngState(1)
        store = ParamStore()
        DenseLayer(store, "a", 4, 4, None, rng)
        path = tmp_path / "model.fvw"
        save_checkpoint(store, path)
        other = ParamStore()
        DenseLayer(other, "a", 4, 5, None, rng)
        with pytest.raises(CheckpointError):
            restore_checkpoint(other, path)
