import math

import numpy as np
import pytest

from mapfgnn.errors import NonFiniteGradient, ShapeMismatch
from mapfgnn.nn_core import (
    BatchNorm2d,
    Conv2d,
    GraphFilter,
    Linear,
    MaxPool2d,
    ParamStore,
    ReLU,
    cross_entropy,
    gradient_check,
    log_softmax,
    one_hot,
    softmax,
    uniform_init,
)


def safe_input(rng, shape, low=0.2, high=1.0):
    """Values bounded away from zero so relu kinks cannot bite."""
    mag = rng.uniform(low, high, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return mag * sign


class TestConv2d:
    def test_output_shape(self):
        rng = np.random.default_rng(0)
        conv = Conv2d(3, 32, rng)
        out = conv.forward(rng.normal(size=(2, 3, 9, 9)))
        assert out.shape == (2, 32, 9, 9)

    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(1)
        conv = Conv2d(2, 4, rng)
        conv.weight[...] = 0.0
        conv.bias[...] = 0.0
        out = conv.forward(rng.normal(size=(1, 2, 5, 5)))
        assert not out.any()

    def test_identity_kernel_reproduces_input(self):
        rng = np.random.default_rng(2)
        conv = Conv2d(1, 1, rng)
        conv.weight[...] = 0.0
        conv.weight[0, 0, 1, 1] = 1.0
        conv.bias[...] = 0.0
        x = rng.normal(size=(1, 1, 6, 6))
        assert np.allclose(conv.forward(x), x)

    def test_shape_mismatch_raises(self):
        conv = Conv2d(3, 4, np.random.default_rng(0))
        with pytest.raises(ShapeMismatch):
            conv.forward(np.zeros((1, 2, 9, 9)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            conv = Conv2d(2, 3, rng)
            x = rng.normal(size=(2, 2, 4, 4))
            coef = rng.normal(size=(2, 3, 4, 4))

            def run():
                conv.gweight[...] = 0.0
                conv.gbias[...] = 0.0
                out = conv.forward(x)
                gin = conv.backward(coef)
                return (out * coef).sum(), [
                    gin.copy(),
                    conv.gweight.copy(),
                    conv.gbias.copy(),
                ]

            err = gradient_check(run, [x, conv.weight, conv.bias])
            assert err < 1e-6


class TestBatchNorm2d:
    def test_constant_channel_maps_to_shift(self):
        bn = BatchNorm2d(2)
        bn.beta[...] = (0.7, -0.3)
        x = np.full((3, 2, 4, 4), 5.0)
        out = bn.forward(x, train=True)
        assert np.allclose(out[:, 0], 0.7)
        assert np.allclose(out[:, 1], -0.3)

    def test_eval_identity_with_unit_stats(self):
        bn = BatchNorm2d(3)
        x = np.random.default_rng(4).normal(size=(2, 3, 5, 5))
        out = bn.forward(x, train=False)
        assert np.allclose(out, x, atol=1e-4)

    def test_train_normalizes_batch(self):
        rng = np.random.default_rng(5)
        bn = BatchNorm2d(4)
        out = bn.forward(rng.normal(2.0, 3.0, size=(8, 4, 6, 6)), train=True)
        assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_stats_updated(self):
        rng = np.random.default_rng(6)
        bn = BatchNorm2d(1)
        x = rng.normal(10.0, 1.0, size=(4, 1, 3, 3))
        bn.forward(x, train=True)
        assert bn.running_mean[0] == pytest.approx(0.1 * x.mean(), rel=1e-12)
        bn2 = BatchNorm2d(1)
        bn2.forward(x, train=False)
        assert np.array_equal(bn2.running_mean, [0.0])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        for train in (True, False):
            bn = BatchNorm2d(3)
            bn.running_mean[...] = rng.normal(size=3)
            bn.running_var[...] = rng.uniform(0.5, 2.0, size=3)
            x = rng.normal(size=(3, 3, 2, 2))
            coef = rng.normal(size=x.shape)

            def run():
                bn.ggamma[...] = 0.0
                bn.gbeta[...] = 0.0
                out = bn.forward(x, train=train)
                gin = bn.backward(coef)
                return (out * coef).sum(), [
                    gin.copy(),
                    bn.ggamma.copy(),
                    bn.gbeta.copy(),
                ]

            err = gradient_check(run, [x, bn.gamma, bn.beta])
            assert err < 1e-5, f"train={train}"


class TestReluMaxpool:
    def test_relu_values(self):
        r = ReLU()
        assert np.array_equal(
            r.forward(np.array([[-1.0, 2.0]])), np.array([[0.0, 2.0]])
        )

    def test_relu_gradient_away_from_kink(self):
        rng = np.random.default_rng(8)
        r = ReLU()
        x = safe_input(rng, (4, 6))
        coef = rng.normal(size=x.shape)

        def run():
            out = r.forward(x)
            return (out * coef).sum(), [r.backward(coef).copy()]

        assert gradient_check(run, [x]) < 1e-6

    def test_maxpool_shape_9_to_4(self):
        mp = MaxPool2d()
        out = mp.forward(np.random.default_rng(9).normal(size=(1, 2, 9, 9)))
        assert out.shape == (1, 2, 4, 4)

    def test_maxpool_values(self):
        mp = MaxPool2d()
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        out = mp.forward(x)
        assert np.array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_maxpool_tie_routes_gradient_to_first_cell(self):
        mp = MaxPool2d()
        x = np.ones((1, 1, 2, 2))
        mp.forward(x)
        gin = mp.backward(np.array([[[[1.0]]]]))
        assert gin[0, 0, 0, 0] == 1.0
        assert gin.sum() == 1.0

    def test_maxpool_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        mp = MaxPool2d()
        # well-separated values keep the argmax stable under perturbation
        x = rng.permutation(np.arange(2 * 2 * 6 * 6, dtype=np.float64)).reshape(
            2, 2, 6, 6
        )
        coef = rng.normal(size=(2, 2, 3, 3))

        def run():
            out = mp.forward(x)
            return (out * coef).sum(), [mp.backward(coef).copy()]

        assert gradient_check(run, [x]) < 1e-6


class TestLinear:
    def test_affine_map(self):
        lin = Linear(3, 2, np.random.default_rng(11))
        lin.weight[...] = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]
        lin.bias[...] = [0.5, -0.5]
        out = lin.forward(np.array([[1.0, 1.0, 1.0]]))
        assert np.allclose(out, [[1.5, 1.5]])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        lin = Linear(5, 4, rng)
        x = rng.normal(size=(3, 5))
        coef = rng.normal(size=(3, 4))

        def run():
            lin.gweight[...] = 0.0
            lin.gbias[...] = 0.0
            out = lin.forward(x)
            gin = lin.backward(coef)
            return (out * coef).sum(), [
                gin.copy(),
                lin.gweight.copy(),
                lin.gbias.copy(),
            ]

        assert gradient_check(run, [x, lin.weight, lin.bias]) < 1e-6


class TestGraphFilter:
    def test_single_tap_ignores_shift(self):
        rng = np.random.default_rng(13)
        gf = GraphFilter(3, 2, 1, rng)
        x = rng.normal(size=(4, 3))
        s_dense = rng.normal(size=(4, 4))
        assert np.array_equal(
            gf.forward(x, s_dense), gf.forward(x, np.zeros((4, 4)))
        )
        assert np.allclose(gf.forward(x, s_dense), x @ gf.taps[0])

    def test_two_node_exchange_by_hand(self):
        gf = GraphFilter(1, 1, 2, np.random.default_rng(14))
        gf.taps[...] = 1.0
        s = np.array([[0.0, 1.0], [1.0, 0.0]])
        x = np.array([[1.0], [2.0]])
        assert np.allclose(gf.forward(x, s), [[3.0], [3.0]])

    def test_zero_shift_uses_only_first_tap(self):
        rng = np.random.default_rng(15)
        gf = GraphFilter(4, 4, 3, rng)
        x = rng.normal(size=(5, 4))
        out = gf.forward(x, np.zeros((5, 5)))
        assert np.allclose(out, x @ gf.taps[0])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(16)
        gf = GraphFilter(3, 2, 3, rng)
        x = rng.normal(size=(5, 3))
        s = (rng.uniform(size=(5, 5)) < 0.4).astype(np.float64)
        s = np.triu(s, 1)
        s = s + s.T
        coef = rng.normal(size=(5, 2))

        def run():
            gf.gtaps[...] = 0.0
            out = gf.forward(x, s)
            gin = gf.backward(coef)
            return (out * coef).sum(), [gin.copy(), gf.gtaps.copy()]

        assert gradient_check(run, [x, gf.taps]) < 1e-6

    def test_shape_mismatch_raises(self):
        gf = GraphFilter(3, 2, 2, np.random.default_rng(17))
        with pytest.raises(ShapeMismatch):
            gf.forward(np.zeros((4, 5)), np.zeros((4, 4)))
        with pytest.raises(ShapeMismatch):
            gf.forward(np.zeros((4, 3)), np.zeros((3, 3)))


class TestSoftmaxLoss:
    def test_log_softmax_rows_normalize(self):
        rng = np.random.default_rng(18)
        x = rng.normal(size=(6, 5)) * 10
        assert np.allclose(np.exp(log_softmax(x)).sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(softmax(x).sum(axis=1), 1.0, atol=1e-12)

    def test_log_softmax_stable_at_large_values(self):
        x = np.array([[1000.0, 0.0, -1000.0]])
        out = log_softmax(x)
        assert np.isfinite(out).all()

    def test_uniform_logits_loss_ln5(self):
        logits = np.zeros((4, 5))
        labels = one_hot(np.array([0, 1, 2, 3]), 5)
        loss, _ = cross_entropy(logits, labels)
        assert loss == pytest.approx(math.log(5), abs=1e-12)

    def test_huge_margin_drives_loss_to_zero(self):
        logits = np.full((2, 5), -100.0)
        logits[:, 3] = 100.0
        labels = one_hot(np.array([3, 3]), 5)
        loss, _ = cross_entropy(logits, labels)
        assert loss < 1e-12

    def test_gradient_formula(self):
        rng = np.random.default_rng(19)
        logits = rng.normal(size=(6, 5))
        labels = one_hot(rng.integers(0, 5, size=6), 5)
        _, grad = cross_entropy(logits, labels)
        assert np.allclose(grad, (softmax(logits) - labels) / 6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(20)
        logits = rng.normal(size=(4, 5))
        labels = one_hot(rng.integers(0, 5, size=4), 5)

        def run():
            loss, grad = cross_entropy(logits, labels)
            return loss, [grad.copy()]

        assert gradient_check(run, [logits]) < 1e-6

    def test_one_hot_layout(self):
        oh = one_hot(np.array([2, 0]), 5)
        assert oh.shape == (2, 5)
        assert oh[0, 2] == 1.0 and oh[1, 0] == 1.0
        assert oh.sum() == 2.0


class TestParamStore:
    def build(self):
        rng = np.random.default_rng(21)
        store = ParamStore()
        conv = Conv2d(2, 3, rng)
        bn = BatchNorm2d(3)
        store.add_layer("conv1", conv)
        store.add_layer("bn1", bn)
        return store, conv, bn

    def test_names_and_shapes(self):
        store, conv, _ = self.build()
        assert "conv1.weight" in store.params
        assert "bn1.running_mean" in store.state
        assert store.params["conv1.weight"] is conv.weight

    def test_zero_grads(self):
        store, conv, _ = self.build()
        conv.gweight[...] = 3.0
        store.zero_grads()
        assert not conv.gweight.any()

    def test_check_finite_raises(self):
        store, conv, _ = self.build()
        conv.gweight[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteGradient):
            store.check_finite()

    def test_json_round_trip_is_exact(self):
        store, conv, bn = self.build()
        bn.running_var[...] = (0.1, 0.2, 0.3)
        doc = store.to_jsonable()
        import json

        doc = json.loads(json.dumps(doc))
        store2, conv2, bn2 = self.build()
        conv2.weight[...] = 0.0
        store2.load_jsonable(doc)
        assert np.array_equal(conv2.weight, conv.weight)
        assert np.array_equal(bn2.running_var, bn.running_var)

    def test_load_rejects_bad_shape(self):
        store, _, _ = self.build()
        doc = store.to_jsonable()
        doc["conv1.bias"]["shape"] = [7]
        with pytest.raises(ShapeMismatch):
            store.load_jsonable(doc)

    def test_load_rejects_missing_names(self):
        store, _, _ = self.build()
        doc = store.to_jsonable()
        del doc["conv1.bias"]
        with pytest.raises(ShapeMismatch):
            store.load_jsonable(doc)


class TestInit:
    def test_uniform_bound(self):
        rng = np.random.default_rng(22)
        arr = uniform_init(rng, (1000,), 16)
        assert np.abs(arr).max() <= 0.25
        assert np.abs(arr).max() > 0.2
