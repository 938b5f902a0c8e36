import pickle

import numpy as np
import pytest

from surge.dpgc import (
    AGSState,
    DPGCLayer,
    ags_update,
    lambda_init,
    scope_mask,
    strip_auxiliary,
)
from surge.models import Model
from surge.quantization import BinarizedConv2d, BinarizedLinear, SurrogateRule, sign
from surge.tensor import ShapeError, Tape, mul, numeric_grad, sum_


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def run(layer, x, upstream):
    """Forward + backward of <upstream, layer(x)>; returns (out, grads, parts, x tensor)."""
    tape = Tape()
    xt = tape.leaf(x)
    out = layer(xt)
    grads = tape.backward(sum_(mul(out, tape.constant(upstream))))
    return out, grads, layer.backward_parts(grads), xt


def linear_layer(seed, out_f=4, in_f=6, **kw):
    r = rng(seed)
    main = BinarizedLinear(r.standard_normal((out_f, in_f)), rule=SurrogateRule(kw.pop("rule", "ste")))
    layer = DPGCLayer(main, aux_weight=r.standard_normal((out_f, in_f)), **kw)
    return layer, r


class TestLambdaInit:
    def test_value(self):
        assert lambda_init(16) == 0.25

    def test_default_uses_aux_size(self):
        layer, _ = linear_layer(0, 3, 12)
        assert layer.lam == pytest.approx(1 / 6)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            lambda_init(0)


class TestForward:
    def test_linear_matches_main(self):
        layer, r = linear_layer(1)
        x = r.standard_normal((50, 6)) * 2
        np.testing.assert_array_equal(layer(Tape().leaf(x)).data, layer.main(Tape().leaf(x)).data)

    @pytest.mark.parametrize("star", [False, True])
    def test_conv_matches_main(self, star):
        r = rng(2)
        main = BinarizedConv2d(r.standard_normal((3, 2, 3, 3)))
        layer = DPGCLayer(main, surge_star=star, lam=0.7)
        assert layer.aux_weight.shape == ((3, 2, 1, 1) if star else (3, 2, 3, 3))
        x = r.standard_normal((4, 2, 5, 5))
        np.testing.assert_array_equal(layer(Tape().leaf(x)).data, main(Tape().leaf(x)).data)

    def test_aux_defaults_to_copy_of_main(self):
        main = BinarizedLinear(rng(3).standard_normal((2, 3)))
        layer = DPGCLayer(main)
        np.testing.assert_array_equal(layer.aux_weight.data, main.weight.data)
        layer.aux_weight.data += 1
        assert not np.array_equal(layer.aux_weight.data, main.weight.data)

    def test_aux_shape_checked(self):
        main = BinarizedLinear(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            DPGCLayer(main, aux_weight=np.ones((3, 2)))

    def test_star_needs_conv(self):
        with pytest.raises(ValueError):
            DPGCLayer(BinarizedLinear(np.ones((2, 3))), surge_star=True)


class TestGradientDecomposition:
    @pytest.mark.parametrize("scope", ["all", "clipped_only", "in_range_only"])
    @pytest.mark.parametrize("rule", ["ste", "bireal"])
    def test_total_is_gb_plus_lambda_ga(self, scope, rule):
        layer, r = linear_layer(4, scope=scope, rule=rule, lam=0.37)
        x = r.standard_normal((8, 6)) * 1.5
        u = r.standard_normal((8, 4))
        _, grads, parts, xt = run(layer, x, u)
        # independent per-branch recomputation
        main = layer.main
        s = float(main.alpha_w.data * main.alpha_x.data)
        g_b = main.rule.activation_backward(s * u @ sign(main.weight.data), x)
        g_a = u @ layer.aux_weight.data
        if scope == "clipped_only":
            g_a = g_a * (np.abs(x) > 1)
        elif scope == "in_range_only":
            g_a = g_a * (np.abs(x) <= 1)
        np.testing.assert_allclose(parts.g_b, g_b, rtol=0, atol=1e-12)
        np.testing.assert_allclose(parts.g_a, g_a, rtol=0, atol=1e-12)
        np.testing.assert_allclose(grads[xt], g_b + 0.37 * g_a, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(parts.total, grads[xt])

    def test_weight_gradients(self):
        layer, r = linear_layer(5, lam=0.5)
        x, u = r.standard_normal((3, 6)), r.standard_normal((3, 4))
        _, grads, parts, _ = run(layer, x, u)
        # aux weight gradient carries lam; latent weight gradient follows the identity weight rule
        np.testing.assert_allclose(parts.g_wa, 0.5 * u.T @ x, atol=1e-12)
        s = float(layer.main.alpha_w.data * layer.main.alpha_x.data)
        np.testing.assert_allclose(parts.g_wb, s * u.T @ sign(x), atol=1e-12)

    def test_aux_gradients_vs_finite_differences(self):
        layer, r = linear_layer(6, lam=0.8)
        x, u = r.standard_normal((3, 6)), r.standard_normal((3, 4))
        _, _, parts, _ = run(layer, x, u)
        wa = layer.aux_weight.data.copy()

        def aux_out(w, xx):
            return 0.8 * np.sum(u * (xx @ w.T))
        fd_w = numeric_grad(lambda w: aux_out(w, x), wa)
        fd_x = numeric_grad(lambda xx: aux_out(wa, xx), x)
        assert np.max(np.abs(parts.g_wa - fd_w)) / np.max(np.abs(fd_w)) < 1e-6
        assert np.max(np.abs(0.8 * parts.g_a - fd_x)) / np.max(np.abs(fd_x)) < 1e-6

    def test_conv_decomposition(self):
        r = rng(7)
        layer = DPGCLayer(BinarizedConv2d(r.standard_normal((2, 3, 3, 3))), lam=0.25)
        x, u = r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 2, 4, 4))
        _, grads, parts, xt = run(layer, x, u)
        np.testing.assert_allclose(grads[xt], parts.g_b + 0.25 * parts.g_a, atol=1e-12)

        def aux(xx):
            t = Tape()
            from surge.tensor import conv2d
            return float(np.sum(u * conv2d(t.leaf(xx), t.leaf(layer.aux_weight.data)).data))
        fd = numeric_grad(aux, x)
        assert np.max(np.abs(parts.g_a - fd)) / np.max(np.abs(fd)) < 1e-6

    def test_backward_before_forward(self):
        layer, _ = linear_layer(8)
        tape = Tape()
        grads = tape.backward(sum_(tape.leaf([1.0])))
        with pytest.raises(RuntimeError):
            layer.backward_parts(grads)


class TestScopeMask:
    def test_partition(self):
        r = rng(9)
        g, x = r.standard_normal(100), r.standard_normal(100) * 2
        total = scope_mask(g, x, "clipped_only") + scope_mask(g, x, "in_range_only")
        np.testing.assert_array_equal(total, scope_mask(g, x, "all"))

    def test_boundary_belongs_to_in_range(self):
        np.testing.assert_array_equal(scope_mask([1.0, 1.0], [1.0, -1.0], "clipped_only"), [0.0, 0.0])

    def test_unknown_scope(self):
        with pytest.raises(ValueError):
            scope_mask([1.0], [1.0], "outer")
        with pytest.raises(ValueError):
            linear_layer(0, scope="outer")


class TestAGS:
    def test_rule(self):
        st = AGSState(eta=0.01)
        lam = ags_update(st, np.array([3.0, 4.0]), np.array([0.0, 2.0]))
        assert lam == pytest.approx(0.01 * 5 / (2 + 1e-8))
        assert st.history[-1][1:] == (5.0, 2.0, lam)

    def test_zero_aux_gradient_is_finite(self):
        st = AGSState(eta=0.01)
        assert np.isfinite(ags_update(st, np.ones(3), np.zeros(3)))

    def test_bound(self):
        st = AGSState(eta=0.05)
        g_b, g_a = rng(10).standard_normal((2, 20))
        lam = ags_update(st, g_b, g_a)
        assert np.linalg.norm(lam * g_a) <= 0.05 * np.linalg.norm(g_b)

    def test_fixed_lambda(self):
        layer, r = linear_layer(11, fixed_lambda=0.3)
        for _ in range(3):
            _, _, parts, _ = run(layer, r.standard_normal((2, 6)), r.standard_normal((2, 4)))
            assert layer.update_lambda(parts) == 0.3
        assert layer.lam == 0.3

    def test_lambda_is_consumed_one_step_late(self):
        layer, r = linear_layer(12, eta=0.1)
        lam0 = layer.lam
        _, _, parts, _ = run(layer, r.standard_normal((2, 6)), r.standard_normal((2, 4)))
        assert parts.lam == lam0
        new = layer.update_lambda(parts)
        _, _, parts2, _ = run(layer, r.standard_normal((2, 6)), r.standard_normal((2, 4)))
        assert parts2.lam == new
        assert new == pytest.approx(0.1 * np.linalg.norm(parts.g_b) / (np.linalg.norm(parts.g_a) + 1e-8))


class TestStrip:
    def test_strip_model(self):
        layer, r = linear_layer(13)
        model = Model([layer])
        stripped = strip_auxiliary(model)
        assert isinstance(stripped.layers[0], BinarizedLinear)
        assert isinstance(model.layers[0], DPGCLayer)
        x = r.standard_normal((20, 6))
        np.testing.assert_array_equal(stripped.predict(x), model.predict(x))

    def test_strip_single_layer_is_a_copy(self):
        layer, _ = linear_layer(14)
        main = strip_auxiliary(layer)
        main.weight.data[...] = 0
        assert np.any(layer.main.weight.data != 0)

    def test_pickle_drops_trace(self):
        layer, r = linear_layer(15)
        run(layer, r.standard_normal((2, 6)), r.standard_normal((2, 4)))
        clone = pickle.loads(pickle.dumps(layer))
        assert clone._trace is None
        np.testing.assert_array_equal(clone.aux_weight.data, layer.aux_weight.data)
