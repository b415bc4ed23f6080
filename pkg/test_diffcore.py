#!/usr/bin/env python3
"""
Tests for the tensor engine: primitives, reverse pass, Adam and the gradient check
"""

import unittest

import numpy as np

from core import diffcore as dc
from core.errors import (
    ConfigError,
    EmptyTapeError,
    NonScalarLossError,
    NumericOverflowError,
    ShapeMismatchError,
)
from core.netlib import LayerSpec, NetworkSpec, build_network


def numeric_grad(f, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        plus = f(x)
        x[idx] = orig - h
        minus = f(x)
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def naive_conv1d(x, w, stride):
    batch, channels, length = x.shape
    out_channels, _, kernel = w.shape
    out_length = (length - kernel) // stride + 1
    out = np.zeros((batch, out_channels, out_length))
    for b in range(batch):
        for o in range(out_channels):
            for l in range(out_length):
                out[b, o, l] = np.sum(x[b, :, l * stride:l * stride + kernel] * w[o])
    return out


class TestPrimitives(unittest.TestCase):
    """Forward values and gradients of the primitives"""

    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_square_gradient(self):
        x = dc.parameter([1.0, -2.0, 3.0], "x")
        loss = dc.reduce_sum(dc.mul(x, x))
        grads = dc.backward(loss, {"x": x})
        np.testing.assert_allclose(grads["x"].data, [2.0, -4.0, 6.0])

    def test_matmul_gradient_matches_numeric(self):
        a = self.rng.standard_normal((3, 4))
        b = self.rng.standard_normal((4, 2))
        w = self.rng.standard_normal((3, 2))
        pa = dc.parameter(a, "a")
        loss = dc.reduce_sum(dc.mul(dc.matmul(pa, dc.constant(b)), dc.constant(w)))
        grads = dc.backward(loss, {"a": pa})
        expected = numeric_grad(lambda m: float(np.sum((m @ b) * w)), a.copy())
        np.testing.assert_allclose(grads["a"].data, expected, rtol=1e-6, atol=1e-8)

    def test_conv1d_matches_direct_sum(self):
        x = self.rng.standard_normal((2, 3, 9))
        w = self.rng.standard_normal((4, 3, 3))
        for stride in (1, 2):
            out = dc.conv1d(dc.constant(x), dc.constant(w), stride=stride)
            np.testing.assert_allclose(out.data, naive_conv1d(x, w, stride), atol=1e-12)

    def test_conv1d_transpose_is_adjoint_of_conv1d(self):
        x = self.rng.standard_normal((2, 3, 4))
        w = self.rng.standard_normal((3, 5, 3))
        stride = 2
        out_length = (4 - 1) * stride + 3
        y = self.rng.standard_normal((2, 5, out_length))
        lhs = np.sum(dc.conv1d_transpose(dc.constant(x), dc.constant(w), stride=stride).data * y)
        rhs = np.sum(x * dc.conv1d(dc.constant(y), dc.constant(w), stride=stride).data)
        self.assertAlmostEqual(lhs, rhs, places=10)

    def test_conv1d_weight_gradient(self):
        x = self.rng.standard_normal((2, 2, 6))
        w = self.rng.standard_normal((3, 2, 2))
        r = self.rng.standard_normal((2, 3, 5))
        pw = dc.parameter(w, "w")
        loss = dc.reduce_sum(dc.mul(dc.conv1d(dc.constant(x), pw), dc.constant(r)))
        grads = dc.backward(loss, {"w": pw})
        expected = numeric_grad(lambda m: float(np.sum(naive_conv1d(x, m, 1) * r)), w.copy())
        np.testing.assert_allclose(grads["w"].data, expected, rtol=1e-6, atol=1e-8)

    def test_batchnorm_train_normalizes_channels(self):
        x = self.rng.normal(3.0, 2.0, size=(16, 4, 5))
        stats = {}
        out = dc.batchnorm_train(dc.constant(x), dc.constant(np.ones(4)), dc.constant(np.zeros(4)), stats=stats)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=(0, 2)), 1.0, atol=1e-4)
        self.assertEqual(stats["count"], 80)

    def test_double_backward(self):
        x = dc.parameter([0.5, -1.5, 2.0], "x")
        loss = dc.reduce_sum(dc.power(x, 3.0))
        first = dc.backward(loss, {"x": x}, create_graph=True)["x"]
        np.testing.assert_allclose(first.data, 3 * x.data ** 2)
        second = dc.backward(dc.reduce_sum(first), {"x": x})["x"]
        np.testing.assert_allclose(second.data, 6 * x.data)

    def test_unreached_tensor_gets_zero_gradient(self):
        x = dc.parameter([1.0, 2.0], "x")
        y = dc.parameter([[3.0]], "y")
        grads = dc.backward(dc.reduce_sum(x), {"x": x, "y": y})
        np.testing.assert_array_equal(grads["y"].data, np.zeros((1, 1)))

    def test_apply_primitive_dispatch(self):
        out = dc.apply_primitive("relu", [np.array([-1.0, 2.0])])
        np.testing.assert_array_equal(out.data, [0.0, 2.0])
        with self.assertRaises(ConfigError):
            dc.apply_primitive("softmax", [np.array([1.0])])


def away_from(value, u, gap=0.05):
    """Shift samples at least ``gap`` away from a kink at ``value``"""
    return value + np.sign(u) * (gap + np.abs(u))


class TestGradientProperties(unittest.TestCase):
    """Analytic gradients of each primitive against central differences"""

    def setUp(self):
        self.rng = np.random.default_rng(40)

    def assert_gradients(self, fn, arrays):
        params = {str(i): dc.parameter(a, str(i)) for i, a in enumerate(arrays)}
        out = fn(*[params[str(i)] for i in range(len(arrays))])
        weights = self.rng.standard_normal(out.shape)
        grads = dc.backward(dc.reduce_sum(dc.mul(out, dc.constant(weights))), params)
        for i in range(len(arrays)):
            def objective(m, i=i):
                values = [m if j == i else arrays[j] for j in range(len(arrays))]
                with dc.no_grad():
                    return float(np.sum(fn(*[dc.constant(v) for v in values]).data * weights))

            expected = numeric_grad(objective, np.array(arrays[i], copy=True))
            np.testing.assert_allclose(grads[str(i)].data, expected, rtol=1e-4, atol=1e-6)

    def shape(self, low=1, high=4):
        return int(self.rng.integers(low, high))

    def test_conv1d(self):
        for _ in range(4):
            batch, channels, out_channels, kernel = (self.shape() for _ in range(4))
            stride = self.shape(1, 3)
            length = kernel + self.shape(0, 5)
            self.assert_gradients(
                lambda x, w, b: dc.conv1d(x, w, b, stride=stride),
                [self.rng.standard_normal((batch, channels, length)),
                 self.rng.standard_normal((out_channels, channels, kernel)),
                 self.rng.standard_normal(out_channels)])

    def test_conv1d_transpose(self):
        for _ in range(4):
            batch, channels, out_channels, kernel, length = (self.shape() for _ in range(5))
            stride = self.shape(1, 3)
            self.assert_gradients(
                lambda x, w, b: dc.conv1d_transpose(x, w, b, stride=stride),
                [self.rng.standard_normal((batch, channels, length)),
                 self.rng.standard_normal((channels, out_channels, kernel)),
                 self.rng.standard_normal(out_channels)])

    def test_min_const(self):
        for _ in range(3):
            u = self.rng.standard_normal((self.shape(), self.shape(2, 6)))
            self.assert_gradients(lambda x: dc.min_const(x, 0.3), [away_from(0.3, u)])

    def test_leaky_relu(self):
        for _ in range(3):
            u = self.rng.standard_normal((self.shape(), self.shape(2, 6)))
            self.assert_gradients(lambda x: dc.leaky_relu(x, 0.2), [away_from(0.0, u)])

    def test_norms(self):
        for _ in range(3):
            u = self.rng.standard_normal((self.shape(2, 5), self.shape(2, 5), self.shape()))
            self.assert_gradients(lambda x: dc.l1_norm(x, axes=1), [away_from(0.0, u)])
            self.assert_gradients(lambda x: dc.l2_norm(x, axes=(1, 2)), [u])
            self.assert_gradients(lambda x: dc.l2_norm(x, axes=1), [u])

    def test_concat(self):
        for axis in (0, 1):
            for _ in range(2):
                sizes = [self.shape() for _ in range(3)]
                other = self.shape(2, 4)
                arrays = [self.rng.standard_normal((n, other) if axis == 0 else (other, n)) for n in sizes]
                self.assert_gradients(lambda a, b, c: dc.concat([a, b, c], axis=axis), arrays)

    def test_linear_and_batchnorm(self):
        x = self.rng.standard_normal((6, 3))
        self.assert_gradients(lambda x, w, b: dc.linear(x, w, b),
                              [x, self.rng.standard_normal((2, 3)), self.rng.standard_normal(2)])
        self.assert_gradients(lambda x, g, b: dc.batchnorm_train(x, g, b),
                              [self.rng.standard_normal((5, 3, 4)), 1.0 + 0.1 * self.rng.standard_normal(3),
                               self.rng.standard_normal(3)])


class TestBackwardPass(unittest.TestCase):
    """Structural properties of the reverse pass"""

    def build(self, seed=7):
        rng = np.random.default_rng(seed)
        params = {
            "w": dc.parameter(rng.standard_normal((4, 3)), "w"),
            "b": dc.parameter(rng.standard_normal(4), "b"),
        }
        x = dc.constant(rng.standard_normal((5, 3)))
        hidden = dc.leaky_relu(dc.linear(x, params["w"], params["b"]))
        return params, hidden

    def test_gradient_is_linear_in_the_loss(self):
        params, hidden = self.build()
        first = dc.reduce_sum(dc.mul(hidden, hidden))
        second = dc.l1_norm(hidden)
        combined = dc.backward(dc.add(dc.scale(first, 2.0), dc.scale(second, -3.0)), params)
        a = dc.backward(first, params)
        b = dc.backward(second, params)
        for name in params:
            np.testing.assert_allclose(combined[name].data, 2.0 * a[name].data - 3.0 * b[name].data,
                                       rtol=0.0, atol=1e-12)

    def test_replay_is_bit_identical(self):
        params, hidden = self.build()
        loss = dc.reduce_sum(dc.mul(hidden, hidden))
        once = dc.backward(loss, params)
        again = dc.backward(loss, params)
        params2, hidden2 = self.build()
        rebuilt = dc.backward(dc.reduce_sum(dc.mul(hidden2, hidden2)), params2)
        for name in params:
            np.testing.assert_array_equal(once[name].data, again[name].data)
            np.testing.assert_array_equal(once[name].data, rebuilt[name].data)


class TestErrors(unittest.TestCase):
    """Failure modes of the engine"""

    def test_non_scalar_loss(self):
        x = dc.parameter([1.0, 2.0], "x")
        with self.assertRaises(NonScalarLossError):
            dc.backward(dc.scale(x, 2.0), {"x": x})

    def test_loss_without_tape(self):
        loss = dc.reduce_sum(dc.constant([1.0, 2.0]))
        with self.assertRaises(EmptyTapeError):
            dc.backward(loss, {})

    def test_overflow_names_the_operation(self):
        with self.assertRaises(NumericOverflowError) as ctx:
            dc.scale(dc.constant([1e308]), 10.0)
        self.assertIn("scale", str(ctx.exception))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            dc.add(dc.constant(np.ones(3)), dc.constant(np.ones(4)))

    def test_no_grad_records_nothing(self):
        x = dc.parameter([1.0], "x")
        with dc.no_grad():
            y = dc.mul(x, x)
        self.assertIsNone(y.node)


class TestAdam(unittest.TestCase):
    """Adam updates"""

    def test_step_reduces_quadratic(self):
        x = dc.parameter([3.0, -2.0], "x")
        state = dc.AdamState(lr=0.1)
        losses = []
        for _ in range(50):
            loss = dc.reduce_sum(dc.mul(x, x))
            losses.append(loss.item())
            dc.adam_step({"x": x}, dc.backward(loss, {"x": x}), state)
        self.assertLess(losses[-1], losses[0])
        self.assertEqual(state.step, 50)

    def test_first_step_moves_by_learning_rate(self):
        x = dc.parameter([1.0], "x")
        dc.adam_step({"x": x}, {"x": np.array([4.0])}, dc.AdamState(lr=0.01))
        np.testing.assert_allclose(x.data, [0.99], atol=1e-8)

    def test_zero_gradient_leaves_parameters(self):
        x = dc.parameter([1.5, -0.25, 3.0], "x")
        before = x.data.copy()
        state = dc.AdamState(lr=0.1)
        for _ in range(5):
            dc.adam_step({"x": x}, {"x": np.zeros(3)}, state)
        np.testing.assert_array_equal(x.data, before)
        self.assertEqual(state.step, 5)

    def test_constant_gradient_steps_by_learning_rate(self):
        x = dc.parameter([0.0, 0.0], "x")
        state = dc.AdamState(lr=0.01)
        gradient = np.array([0.5, -3.0])
        for _ in range(200):
            before = x.data.copy()
            dc.adam_step({"x": x}, {"x": gradient}, state)
        np.testing.assert_allclose(np.abs(x.data - before), 0.01, rtol=1e-6)
        np.testing.assert_array_equal(np.sign(x.data - before), -np.sign(gradient))

    def test_non_positive_learning_rate(self):
        x = dc.parameter([1.0], "x")
        with self.assertRaises(ConfigError):
            dc.adam_step({"x": x}, {"x": np.array([1.0])}, dc.AdamState(lr=0.0))

    def test_gradient_shape_must_match(self):
        x = dc.parameter([1.0, 2.0], "x")
        with self.assertRaises(ShapeMismatchError):
            dc.adam_step({"x": x}, {"x": np.ones(3)}, dc.AdamState())

    def test_clip_grad_norm(self):
        grads = {"a": dc.constant([3.0]), "b": dc.constant([4.0])}
        norm = dc.clip_grad_norm(grads, 1.0)
        self.assertAlmostEqual(norm, 5.0)
        total = np.sqrt(grads["a"].data[0] ** 2 + grads["b"].data[0] ** 2)
        self.assertAlmostEqual(total, 1.0, places=9)


class TestGradCheck(unittest.TestCase):
    """Finite-difference report on a small network"""

    def tiny_network(self, normalization="batch"):
        out_norm = "spectral" if normalization == "spectral" else "none"
        spec = NetworkSpec("tiny", (("x", (1, 7)),), (
            LayerSpec("c1", "conv1d", ("x",), (4, 5), 1, 4, 3, 1, normalization, "leaky_relu"),
            LayerSpec("out", "linear", ("c1",), (3, 1), 20, 3, 1, 1, out_norm),
        ), 0)
        return build_network(spec, seed=3)

    def test_small_network_passes(self):
        network = self.tiny_network()
        inputs = {"x": np.random.default_rng(1).standard_normal((4, 1, 7))}
        report = dc.finite_difference_check(network, inputs, seed=2)
        self.assertTrue(report.passed, report.failures)
        self.assertLess(report.max_relative_error, 1e-4)

    def test_every_entry_is_checked_by_default(self):
        network = self.tiny_network()
        inputs = {"x": np.random.default_rng(1).standard_normal((4, 1, 7))}
        report = dc.finite_difference_check(network, inputs, seed=2)
        total = sum(p.size for p in network.parameters.values())
        self.assertEqual(report.total, total)
        self.assertEqual(report.checked, total)
        self.assertTrue(report.complete)
        self.assertEqual(report.to_dict()["total"], total)

    def test_sampling_is_opt_in(self):
        network = self.tiny_network()
        inputs = {"x": np.random.default_rng(1).standard_normal((4, 1, 7))}
        report = dc.finite_difference_check(network, inputs, seed=2, max_entries=2)
        self.assertEqual(report.checked, 2 * len(network.parameters))
        self.assertFalse(report.complete)
        with self.assertRaises(ConfigError):
            dc.finite_difference_check(network, inputs, max_entries=0)

    def test_spectral_network_passes(self):
        network = self.tiny_network("spectral")
        self.assertEqual(sorted(network.spectral), ["c1", "out"])
        inputs = {"x": np.random.default_rng(4).standard_normal((4, 1, 7))}
        report = dc.finite_difference_check(network, inputs, seed=5)
        self.assertTrue(report.passed, report.failures)
        self.assertEqual(report.checked, report.total)
        self.assertLess(report.max_relative_error, 1e-4)

    def test_spectral_scale_gradient(self):
        network = self.tiny_network("spectral")
        inputs = {"x": np.random.default_rng(6).standard_normal((4, 1, 7))}
        weights = np.random.default_rng(7).standard_normal((4, 3, 1))
        p = network.parameters["out.weight"]
        loss = dc.reduce_sum(dc.mul(network(inputs), dc.constant(weights)))
        analytic = dc.backward(loss, {"w": p})["w"].data

        def objective(_):
            with dc.no_grad():
                return float(np.sum(network(inputs).data * weights))

        np.testing.assert_allclose(analytic, numeric_grad(objective, p.data), rtol=1e-4, atol=1e-7)

    def test_seeded_streams_are_reproducible(self):
        a = dc.philox_rng(5, 1).standard_normal(4)
        b = dc.philox_rng(5, 1).standard_normal(4)
        c = dc.philox_rng(5, 2).standard_normal(4)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))
        self.assertEqual(dc.derive_seed(5, 1), dc.derive_seed(5, 1))


if __name__ == '__main__':
    unittest.main()
