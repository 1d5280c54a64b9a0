"""Engine tests: hand-computed layer examples, the central-difference
gradient oracle, and optimizer semantics."""

import numpy as np
import pytest

from splitfed.nn import (
    Conv2D,
    Flatten,
    FullyConnected,
    ReLU,
    SgdMomentum,
    backward_layers,
    collect_grads,
    collect_params,
    forward_layers,
    init_layers,
    set_params,
    softmax_cross_entropy,
)

F32 = np.float32
GRADCHECK_STEP = 1e-3
GRADCHECK_TOL = 1e-3
GRADCHECK_INSTANCES = 20


def rel_err(analytic, numeric):
    return abs(analytic - numeric) / max(1.0, abs(numeric))


class TestFullyConnectedForward:
    def test_hand_example(self):
        fc = FullyConnected(2, 1)
        fc.weights[...] = [[1.0, 2.0]]
        fc.bias[...] = [0.5]
        out = fc.forward(np.array([3.0, 4.0], dtype=F32))
        np.testing.assert_allclose(out, [11.5])

    def test_rejects_wrong_input_shape(self):
        fc = FullyConnected(3, 2)
        with pytest.raises(ValueError, match="expects input shape"):
            fc.forward(np.zeros(4, dtype=F32))

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            FullyConnected(0, 5)


class TestFullyConnectedBackward:
    def test_hand_example(self):
        fc = FullyConnected(2, 1)
        fc.weights[...] = [[1.0, 2.0]]
        fc.forward(np.array([3.0, 4.0], dtype=F32))
        grad_in = fc.backward(np.array([1.0], dtype=F32))
        np.testing.assert_allclose(grad_in, [1.0, 2.0])
        np.testing.assert_allclose(fc.grad_weights, [[3.0, 4.0]])
        np.testing.assert_allclose(fc.grad_bias, [1.0])

    def test_backward_before_forward_fails(self):
        fc = FullyConnected(2, 2)
        with pytest.raises(ValueError, match="before forward"):
            fc.backward(np.zeros(2, dtype=F32))


class TestConv2DForward:
    def test_ones_kernel_sums_window(self):
        conv = Conv2D(1, 1, 3, 3)
        conv.weights[...] = 1.0
        out = conv.forward(np.ones((1, 3, 3), dtype=F32))
        assert out.shape == (1, 1, 1)
        np.testing.assert_allclose(out, [[[9.0]]])

    def test_output_shape_valid_stride1(self):
        conv = Conv2D(1, 12, 3, 3)
        out = conv.forward(np.zeros((1, 50, 13), dtype=F32))
        assert out.shape == (12, 48, 11)

    def test_kernel_must_fit(self):
        conv = Conv2D(1, 1, 3, 3)
        with pytest.raises(ValueError, match="does not fit"):
            conv.forward(np.zeros((1, 2, 5), dtype=F32))

    def test_channel_mismatch(self):
        conv = Conv2D(2, 1, 3, 3)
        with pytest.raises(ValueError, match="expects input"):
            conv.forward(np.zeros((1, 5, 5), dtype=F32))


class TestReLU:
    def test_forward(self):
        out = ReLU().forward(np.array([-1.0, 0.0, 2.0], dtype=F32))
        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])

    def test_backward_masks_nonpositive(self):
        relu = ReLU()
        relu.forward(np.array([-1.0, 2.0], dtype=F32))
        grad_in = relu.backward(np.array([5.0, 5.0], dtype=F32))
        np.testing.assert_array_equal(grad_in, [0.0, 5.0])


class TestFlatten:
    def test_round_trip(self):
        flat = Flatten()
        x = np.arange(24, dtype=F32).reshape(2, 3, 4)
        y = flat.forward(x)
        assert y.shape == (24,)
        assert flat.backward(y).shape == (2, 3, 4)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.zeros(7, dtype=F32), 3)
        assert loss == pytest.approx(np.log(7.0), abs=1e-6)

    def test_confident_correct_logit(self):
        loss, _ = softmax_cross_entropy(
            np.array([10.0, 0, 0, 0, 0, 0, 0], dtype=F32), 0
        )
        assert loss < 0.01

    def test_gradient_sums_to_zero(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            logits = rng.normal(0, 3, size=7).astype(F32)
            _, grad = softmax_cross_entropy(logits, int(rng.integers(0, 7)))
            assert abs(float(grad.sum())) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            softmax_cross_entropy(np.zeros(7, dtype=F32), 7)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            loss, _ = softmax_cross_entropy(rng.normal(size=7).astype(F32), 0)
            assert loss >= 0.0


class TestSgdMomentum:
    def test_plain_sgd(self):
        w = np.array([1.0], dtype=F32)
        opt = SgdMomentum([w], learning_rate=0.1, momentum=0.0)
        opt.step([np.array([2.0], dtype=F32)])
        np.testing.assert_allclose(w, [0.8], rtol=1e-6)

    def test_momentum_two_steps(self):
        # v1 = 1, w1 = -1; v2 = 0.6 + 1 = 1.6, w2 = -2.6
        w = np.array([0.0], dtype=F32)
        opt = SgdMomentum([w], learning_rate=1.0, momentum=0.6)
        g = np.array([1.0], dtype=F32)
        opt.step([g])
        opt.step([g])
        np.testing.assert_allclose(w, [-2.6], rtol=1e-6)

    def test_zero_gradient_is_noop(self):
        w = np.array([3.0, -1.0], dtype=F32)
        opt = SgdMomentum([w], learning_rate=0.5, momentum=0.9)
        opt.step([np.zeros(2, dtype=F32)])
        np.testing.assert_array_equal(w, [3.0, -1.0])

    def test_updates_in_place(self):
        w = np.array([1.0], dtype=F32)
        opt = SgdMomentum([w], learning_rate=0.1)
        before = id(w)
        opt.step([np.array([1.0], dtype=F32)])
        assert id(opt.params[0]) == before

    def test_validation(self):
        w = np.zeros(1, dtype=F32)
        with pytest.raises(ValueError):
            SgdMomentum([w], learning_rate=0.0)
        with pytest.raises(ValueError):
            SgdMomentum([w], learning_rate=0.1, momentum=1.0)
        opt = SgdMomentum([w], learning_rate=0.1)
        with pytest.raises(ValueError):
            opt.step([np.zeros(2, dtype=F32)])


class TestInit:
    def test_bounds_and_zero_bias(self):
        fc = FullyConnected(24, 10)
        init_layers([fc], np.random.default_rng(0))
        bound = np.sqrt(6.0 / 24)
        assert np.all(np.abs(fc.weights) <= bound)
        assert np.all(fc.bias == 0.0)
        assert fc.weights.std() > 0

    def test_deterministic(self):
        a, b = FullyConnected(8, 4), FullyConnected(8, 4)
        init_layers([a], np.random.default_rng(5))
        init_layers([b], np.random.default_rng(5))
        np.testing.assert_array_equal(a.weights, b.weights)


# ---------------------------------------------------------------------------
# the central-difference oracle


def numeric_param_grad(make_layer, weights, bias, x, projection, target, index):
    """d/d target[index] of sum(forward(x) * projection) by central difference."""
    outs = []
    for delta in (GRADCHECK_STEP, -GRADCHECK_STEP):
        layer = make_layer()
        w, b = weights.copy(), bias.copy()
        (w if target == "weights" else b)[index] += F32(delta)
        layer.weights[...] = w
        layer.bias[...] = b
        outs.append(float((layer.forward(x) * projection).sum(dtype=np.float64)))
    return (outs[0] - outs[1]) / (2.0 * GRADCHECK_STEP)


def numeric_input_grad(layer, x, projection, index):
    outs = []
    for delta in (GRADCHECK_STEP, -GRADCHECK_STEP):
        xp = x.copy()
        xp[index] += F32(delta)
        outs.append(float((layer.forward(xp) * projection).sum(dtype=np.float64)))
    return (outs[0] - outs[1]) / (2.0 * GRADCHECK_STEP)


def check_layer_instance(make_layer, x, rng):
    layer = make_layer()
    if layer.params():
        layer.weights[...] = rng.normal(0, 0.5, layer.weights.shape).astype(F32)
        layer.bias[...] = rng.normal(0, 0.5, layer.bias.shape).astype(F32)
    weights = layer.weights.copy() if layer.params() else None
    bias = layer.bias.copy() if layer.params() else None
    y = layer.forward(x)
    projection = rng.normal(0, 1, y.shape).astype(F32)
    grad_in = layer.backward(projection)
    assert grad_in.shape == x.shape  # shape round trip

    def fresh():
        out = make_layer()
        if out.params():
            out.weights[...] = weights
            out.bias[...] = bias
        return out

    flat_idx = rng.choice(x.size, size=min(6, x.size), replace=False)
    for fi in flat_idx:
        index = np.unravel_index(fi, x.shape)
        num = numeric_input_grad(fresh(), x, projection, index)
        assert rel_err(float(grad_in[index]), num) < GRADCHECK_TOL
    if layer.params():
        for target, ana in (("weights", layer.grad_weights), ("bias", layer.grad_bias)):
            ref = weights if target == "weights" else bias
            flat_idx = rng.choice(ref.size, size=min(6, ref.size), replace=False)
            for fi in flat_idx:
                index = np.unravel_index(fi, ref.shape)
                num = numeric_param_grad(make_layer, weights, bias, x, projection, target, index)
                assert rel_err(float(ana[index]), num) < GRADCHECK_TOL


class TestGradcheck:
    def test_fully_connected(self):
        rng = np.random.default_rng(10)
        for _ in range(GRADCHECK_INSTANCES):
            n_in, n_out = int(rng.integers(1, 9)), int(rng.integers(1, 7))
            x = rng.normal(0, 1, n_in).astype(F32)
            check_layer_instance(lambda: FullyConnected(n_in, n_out), x, rng)

    def test_conv2d(self):
        rng = np.random.default_rng(11)
        for _ in range(GRADCHECK_INSTANCES):
            cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            h, w = int(rng.integers(kh, kh + 4)), int(rng.integers(kw, kw + 4))
            x = rng.normal(0, 1, (cin, h, w)).astype(F32)
            check_layer_instance(lambda: Conv2D(cin, cout, kh, kw), x, rng)

    def test_relu(self):
        rng = np.random.default_rng(12)
        for _ in range(GRADCHECK_INSTANCES):
            shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
            # keep values away from the kink at 0 where the derivative jumps
            x = rng.normal(0, 1, shape).astype(F32)
            x[np.abs(x) < 0.05] += F32(0.1)
            check_layer_instance(ReLU, x, rng)

    def test_flatten(self):
        rng = np.random.default_rng(13)
        for _ in range(GRADCHECK_INSTANCES):
            shape = tuple(rng.integers(1, 5, size=3))
            x = rng.normal(0, 1, shape).astype(F32)
            check_layer_instance(Flatten, x, rng)

    def test_loss_gradient(self):
        rng = np.random.default_rng(14)
        for _ in range(GRADCHECK_INSTANCES):
            logits = rng.normal(0, 2, 7).astype(F32)
            label = int(rng.integers(0, 7))
            _, grad = softmax_cross_entropy(logits, label)
            for k in range(7):
                lp, lm = logits.copy(), logits.copy()
                lp[k] += F32(GRADCHECK_STEP)
                lm[k] -= F32(GRADCHECK_STEP)
                num = (
                    softmax_cross_entropy(lp, label)[0] - softmax_cross_entropy(lm, label)[0]
                ) / (2.0 * GRADCHECK_STEP)
                assert rel_err(float(grad[k]), num) < GRADCHECK_TOL


class TestLayerStacks:
    def test_forward_backward_chain(self):
        rng = np.random.default_rng(20)
        layers = [Conv2D(1, 2, 3, 3), ReLU(), Flatten(), FullyConnected(2 * 4 * 2, 5)]
        init_layers(layers, rng)
        x = rng.normal(0, 1, (1, 6, 4)).astype(F32)
        y = forward_layers(layers, x)
        assert y.shape == (5,)
        grad = backward_layers(layers, np.ones(5, dtype=F32))
        assert grad.shape == x.shape

    def test_collect_and_set_params_preserve_identity(self):
        layers = [FullyConnected(3, 2), ReLU(), FullyConnected(2, 2)]
        params = collect_params(layers)
        assert len(params) == 4
        replacement = [np.full_like(p, 0.5) for p in params]
        set_params(layers, replacement)
        for before, layer_param in zip(params, collect_params(layers)):
            assert before is layer_param
            assert np.all(layer_param == 0.5)

    def test_collect_grads_order_matches_params(self):
        rng = np.random.default_rng(21)
        layers = [FullyConnected(4, 3), ReLU(), FullyConnected(3, 2)]
        init_layers(layers, rng)
        forward_layers(layers, rng.normal(size=4).astype(F32))
        backward_layers(layers, np.ones(2, dtype=F32))
        grads = collect_grads(layers)
        for p, g in zip(collect_params(layers), grads):
            assert p.shape == g.shape
