import numpy as np
import pytest

from surge.quantization import (
    ALPHA_FLOOR,
    BinarizedConv2d,
    BinarizedLinear,
    SurrogateRule,
    bireal_activation_backward,
    bireal_derivative,
    init_alphas,
    sign,
    ste_activation_backward,
    ste_weight_backward,
)
from surge.tensor import ShapeError, Tape, numeric_grad, sum_


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


class TestSign:
    def test_zero_maps_to_plus_one(self):
        np.testing.assert_array_equal(sign([0.5, -2.0, 0.0]), [1.0, -1.0, 1.0])

    def test_negative_zero(self):
        assert sign(-0.0) == 1.0

    def test_tiny_negative(self):
        np.testing.assert_array_equal(sign([-1e-12]), [-1.0])

    def test_idempotent(self):
        x = rng().standard_normal(100)
        np.testing.assert_array_equal(sign(sign(x)), sign(x))


class TestSteBackward:
    def test_in_range(self):
        assert ste_activation_backward(2.0, 0.5) == 2.0

    def test_clipped(self):
        assert ste_activation_backward(2.0, 1.5) == 0.0

    def test_boundary_is_inclusive(self):
        assert ste_activation_backward(3.0, -1.0) == 3.0
        assert ste_activation_backward(3.0, 1.0) == 3.0

    def test_custom_clip(self):
        np.testing.assert_array_equal(ste_activation_backward(np.ones(3), np.array([0.4, 0.5, 0.6]), 0.5),
                                      [1.0, 1.0, 0.0])

    def test_weight_rule_is_identity(self):
        g = rng(1).standard_normal((3, 4))
        np.testing.assert_array_equal(ste_weight_backward(g), g)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ste_activation_backward(np.ones(3), np.ones(4))


class TestBiReal:
    def test_values(self):
        np.testing.assert_allclose(bireal_derivative([-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, -2.0]),
                                   [0.0, 1.0, 2.0, 1.0, 0.0, 0.0, 0.0])

    def test_matches_derivative_of_the_polynomial(self):
        # antiderivative: 2x + x^2 on [-1,0), 2x - x^2 on [0,1], +-1 outside
        def F(x):
            return np.where(x < -1, -1.0, np.where(x < 0, 2 * x + x * x, np.where(x <= 1, 2 * x - x * x, 1.0)))
        x = rng(2).uniform(-1.5, 1.5, 200)
        x = x[np.min(np.abs(x[:, None] - np.array([-1.0, 0.0, 1.0])), axis=1) > 1e-3]
        fd = (F(x + 1e-6) - F(x - 1e-6)) / 2e-6
        np.testing.assert_allclose(bireal_derivative(x), fd, atol=1e-6)

    def test_zero_outside(self):
        np.testing.assert_array_equal(bireal_activation_backward(np.ones(2), np.array([1.01, -3.0])), [0.0, 0.0])

    def test_rule_validation(self):
        with pytest.raises(ValueError):
            SurrogateRule("tanh")
        with pytest.raises(ValueError):
            SurrogateRule("ste", clip_bound=0.0)


class TestScales:
    def test_init(self):
        aw, ax = init_alphas(np.array([[1.0, -3.0]]))
        assert (aw, ax) == (2.0, 1.0)

    def test_floor(self):
        aw, _ = init_alphas(np.zeros((2, 2)))
        assert aw == ALPHA_FLOOR

    def test_clamp(self):
        layer = BinarizedLinear(np.ones((2, 3)))
        layer.alpha_w.data[...] = -5.0
        layer.alpha_x.data[...] = 0.0
        layer.clamp_scales()
        assert layer.alpha_w.data == ALPHA_FLOOR and layer.alpha_x.data == ALPHA_FLOOR


class TestBinarizedLinear:
    def test_forward_on_lattice(self):
        r = rng(3)
        layer = BinarizedLinear(r.standard_normal((5, 7)))
        out = layer(Tape().leaf(r.standard_normal((10, 7)))).data
        s = layer.alpha_w.data * layer.alpha_x.data
        k = np.round(out / s)
        np.testing.assert_array_equal(out, s * k)
        assert np.all(np.abs(k) <= 7)

    def test_forward_matches_definition(self):
        r = rng(4)
        w, x = r.standard_normal((3, 4)), r.standard_normal((6, 4))
        layer = BinarizedLinear(w)
        expected = np.mean(np.abs(w)) * (sign(x) @ sign(w).T)
        np.testing.assert_allclose(layer(Tape().leaf(x)).data, expected, rtol=1e-15)

    def test_ste_gradients(self):
        r = rng(5)
        w = r.standard_normal((3, 4))
        x = np.array([[0.3, -1.5, 0.9, 2.0]])
        layer = BinarizedLinear(w)
        tape = Tape()
        xt = tape.leaf(x)
        grads = tape.backward(sum_(layer(xt)))
        a = float(layer.alpha_w.data)
        col = a * sign(w).sum(axis=0)
        np.testing.assert_allclose(grads[xt], (col * (np.abs(x) <= 1))[None, :].reshape(1, 4))
        np.testing.assert_allclose(grads[layer.weight], a * np.tile(sign(x), (3, 1)))
        raw = (sign(x) @ sign(w).T).sum()
        np.testing.assert_allclose(grads[layer.alpha_w], raw * float(layer.alpha_x.data))

    def test_alpha_gradient_vs_finite_differences(self):
        r = rng(6)
        w, x = r.standard_normal((3, 4)), r.standard_normal((2, 4))
        layer = BinarizedLinear(w)
        tape = Tape()
        grads = tape.backward(sum_(layer(tape.leaf(x))))

        def f(a):
            layer.alpha_x.data[...] = a
            return float(sum_(layer(Tape().leaf(x))).data)
        fd = numeric_grad(f, np.array(1.0))
        np.testing.assert_allclose(grads[layer.alpha_x], fd, rtol=1e-8)

    def test_shape_mismatch(self):
        layer = BinarizedLinear(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            layer(Tape().leaf(np.ones((4, 5))))

    def test_sign_nodes_recorded(self):
        tape = Tape()
        BinarizedLinear(np.ones((2, 3)))(tape.leaf(np.ones(3)))
        assert tape.count("sign") == 2


class TestBinarizedConv:
    def test_forward_matches_direct_loop(self):
        r = rng(7)
        w, x = r.standard_normal((2, 3, 3, 3)), r.standard_normal((1, 3, 4, 4))
        layer = BinarizedConv2d(w)
        out = layer(Tape().leaf(x)).data
        xb = np.pad(sign(x), ((0, 0), (0, 0), (1, 1), (1, 1)))
        wb = sign(w)
        ref = np.zeros((1, 2, 4, 4))
        for o in range(2):
            for i in range(4):
                for j in range(4):
                    ref[0, o, i, j] = np.sum(xb[0, :, i:i + 3, j:j + 3] * wb[o])
        np.testing.assert_allclose(out, np.mean(np.abs(w)) * ref, rtol=1e-14)

    def test_bireal_rule_used(self):
        r = rng(8)
        layer = BinarizedConv2d(r.standard_normal((1, 1, 1, 1)), rule=SurrogateRule("bireal"))
        x = np.array([[[[0.5, 1.0], [-0.25, 3.0]]]])
        tape = Tape()
        xt = tape.leaf(x)
        g = tape.backward(sum_(layer(xt)))[xt]
        scale = float(layer.alpha_w.data) * float(sign(layer.weight.data).ravel()[0])
        np.testing.assert_allclose(g, scale * bireal_derivative(x))
