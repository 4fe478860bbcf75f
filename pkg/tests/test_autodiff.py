import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import faircda.autodiff as ad


def leaf(x):
    return ad.constant(np.asarray(x, dtype=np.float64))


class TestForwardOps:
    def test_matmul_hand(self):
        out = ad.forward_op("matmul", [leaf([[1, 2], [3, 4]]), leaf([[1], [1]])])
        assert np.array_equal(out.data, [[3], [7]])

    def test_relu_definition(self):
        out = ad.forward_op("relu", [leaf([-1.0, 0.0, 2.0])])
        assert np.array_equal(out.data, [0, 0, 2])

    def test_dot_orthogonal(self):
        out = ad.forward_op("dot", [leaf([1.0, 0.0]), leaf([0.0, 1.0])])
        assert out.item() == 0.0

    def test_shape_mismatch_raises(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(leaf([[1.0, 2.0]]), leaf([[1.0, 2.0]]))
        with pytest.raises(ad.ShapeError):
            ad.add(leaf([[1.0, 2.0]]), leaf([1.0, 2.0, 3.0]))
        with pytest.raises(ad.ShapeError):
            ad.bce(leaf([0.5, 0.5]), leaf([1.0]))

    def test_non_finite_output_raises(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            with pytest.raises(ad.NonFiniteError):
                ad.divide(leaf([1.0]), leaf([0.0]))
            with pytest.raises(ad.NonFiniteError):
                ad.log(leaf([-1.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.forward_op("conv2d", [leaf([1.0])])

    def test_scale_and_sub_and_square(self):
        x = leaf([1.0, -2.0])
        assert np.array_equal(ad.forward_op("scale", [x], c=3.0).data, [3, -6])
        assert np.array_equal(ad.forward_op("sub", [x, leaf([1.0, 1.0])]).data, [0, -3])
        assert np.array_equal(ad.forward_op("square", [x]).data, [1, 4])

    def test_l2norm(self):
        assert ad.forward_op("l2norm", [leaf([3.0, 4.0])]).item() == pytest.approx(5.0)

    def test_concat_and_slices(self):
        a, b = leaf([[1.0, 2.0]]), leaf([[3.0]])
        cat = ad.forward_op("concat", [a, b])
        assert np.array_equal(cat.data, [[1, 2, 3]])
        assert np.array_equal(ad.slice_cols(cat, 2, 3).data, [[3]])

    def test_bce_known_values(self):
        # prediction 0.5 -> ln 2; confident wrong 0.9 vs 0 -> -ln(0.1)
        assert ad.bce(leaf([0.5]), leaf([1.0])).data[0] == pytest.approx(np.log(2.0))
        assert ad.bce(leaf([0.9]), leaf([0.0])).data[0] == pytest.approx(-np.log(0.1))
        # clamped at the floor: -log(1 - 1e-7)
        val = ad.bce(leaf([1.0]), leaf([1.0])).data[0]
        assert val == pytest.approx(-np.log(1.0 - ad.BCE_CLAMP), rel=1e-6)


class TestBackward:
    def test_x_times_x(self):
        x = leaf(np.asarray(3.0))
        f = ad.mul(x, x)
        assert ad.backward(f).wrt(x).item() == 6.0

    def test_sigmoid_at_zero(self):
        z = leaf(np.asarray(0.0))
        s = ad.sigmoid(z)
        assert s.item() == 0.5
        assert ad.backward(s).wrt(z).item() == pytest.approx(0.25)

    def test_second_order_grad_norm(self):
        # f = 0.5||x||^2, g = ||grad f||^2 = ||x||^2, dg/dx = 2x
        x = leaf([1.0, 2.0])
        f = ad.scale(ad.dot(x, x), 0.5)
        gx = ad.grad_wrt(f, x)
        g = ad.dot(gx, gx)
        assert np.allclose(ad.backward(g).wrt(x).data, [2.0, 4.0])

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ad.NonScalarError):
            ad.backward(leaf([1.0, 2.0]))

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(0)
        x = leaf(rng.standard_normal(5))
        f1 = ad.sum_all(ad.square(x))
        f2 = ad.sum_all(ad.mul(x, leaf(rng.standard_normal(5))))
        g_sum = ad.backward(ad.add(f1, f2)).wrt(x).data
        g_parts = ad.backward(f1).wrt(x).data + ad.backward(f2).wrt(x).data
        assert np.allclose(g_sum, g_parts, atol=1e-12)

    def test_determinism_bit_identical(self):
        def build():
            rng = np.random.default_rng(42)
            x = leaf(rng.standard_normal((4, 3)))
            w = leaf(rng.standard_normal((3, 2)))
            out = ad.mean_all(ad.bce(ad.sigmoid(ad.matmul(x, w)),
                                     leaf(np.ones((4, 2)) * 0.5)))
            return out, ad.backward(out).wrt(w).data
        (o1, g1), (o2, g2) = build(), build()
        assert o1.data.tobytes() == o2.data.tobytes()
        assert g1.tobytes() == g2.tobytes()

    def test_gradient_accumulates_over_reuse(self):
        x = leaf([2.0])
        f = ad.sum_all(ad.add(ad.mul(x, x), ad.scale(x, 3.0)))  # x^2 + 3x
        assert ad.backward(f).wrt(x).data[0] == pytest.approx(7.0)


class TestGradWrt:
    def test_linear_map(self):
        z = leaf([1.0, 1.0, 1.0])
        s = ad.sum_all(ad.scale(z, 2.0))
        assert np.array_equal(ad.grad_wrt(s, z).data, [2, 2, 2])

    def test_unreachable_returns_zeros_and_warns(self):
        z = leaf([1.0, 2.0])
        other = leaf([3.0])
        s = ad.sum_all(ad.square(other))
        with pytest.warns(ad.UnreachableGradientWarning):
            g = ad.grad_wrt(s, z)
        assert np.array_equal(g.data, [0.0, 0.0])

    def test_norm_squared(self):
        z = leaf([1.0, -1.0])
        s = ad.dot(z, z)
        assert np.array_equal(ad.grad_wrt(s, z).data, [2.0, -2.0])

    def test_gradient_node_is_differentiable(self):
        # d/dx of sum(grad_x(sum(x^3))) = d/dx sum(3x^2) = 6x
        x = leaf([1.0, 2.0])
        cube = ad.sum_all(ad.mul(ad.square(x), x))
        g = ad.grad_wrt(cube, x)
        gg = ad.backward(ad.sum_all(g)).wrt(x).data
        assert np.allclose(gg, [6.0, 12.0])


class TestFiniteDiff:
    def test_quadratic_tight(self):
        p = leaf([1.0, -2.0, 3.0])
        err = ad.finite_diff_check(lambda ps: ad.sum_all(ad.square(ps[0])), [p])
        assert err <= 1e-6

    def test_constant_function_zero_grad(self):
        p = leaf([1.0, 2.0])
        err = ad.finite_diff_check(
            lambda ps: ad.sum_all(ad.square(ad.constant([5.0]))), [p])
        assert err == 0.0

    def test_eps_validation(self):
        p = leaf([1.0])
        with pytest.raises(ValueError):
            ad.finite_diff_check(lambda ps: ad.sum_all(ps[0]), [p], eps=0.5)

    def test_leaf_data_restored(self):
        p = leaf([1.0, 2.0])
        before = p.data.copy()
        ad.finite_diff_check(lambda ps: ad.sum_all(ad.square(ps[0])), [p])
        assert np.array_equal(p.data, before)


def _random_op_case(rng):
    """One (builder, leaves) pair over a random primitive and shapes."""
    n, m, k = rng.integers(1, 5, size=3)
    kind = rng.choice(["matmul", "add_bias", "mul", "divide", "sigmoid", "relu",
                       "square", "sqrt", "log", "concat", "rowdot", "sum", "abs",
                       "bce", "scale"])
    if kind == "matmul":
        a = leaf(rng.standard_normal((n, m)))
        b = leaf(rng.standard_normal((m, k)))
        return lambda ps: ad.mean_all(ad.matmul(ps[0], ps[1])), [a, b]
    if kind == "add_bias":
        a = leaf(rng.standard_normal((n, m)))
        b = leaf(rng.standard_normal(m))
        return lambda ps: ad.mean_all(ad.square(ad.add(ps[0], ps[1]))), [a, b]
    if kind in ("mul", "divide"):
        a = leaf(rng.standard_normal((n, m)))
        b = leaf(rng.uniform(0.5, 2.0, (n, m)) * np.where(rng.random((n, m)) < 0.5, -1, 1))
        op = ad.mul if kind == "mul" else ad.divide
        return lambda ps: ad.mean_all(op(ps[0], ps[1])), [a, b]
    if kind in ("sigmoid", "square"):
        a = leaf(rng.standard_normal((n, m)))
        op = getattr(ad, kind)
        return lambda ps: ad.mean_all(op(ps[0])), [a]
    if kind in ("relu", "abs"):
        vals = rng.standard_normal((n, m))
        vals = np.where(np.abs(vals) < 1e-3, 0.5, vals)  # stay off the kink
        a = leaf(vals)
        op = ad.relu if kind == "relu" else ad.absolute
        return lambda ps: ad.mean_all(op(ps[0])), [a]
    if kind in ("sqrt", "log"):
        a = leaf(rng.uniform(0.5, 3.0, (n, m)))
        op = getattr(ad, kind)
        return lambda ps: ad.mean_all(op(ps[0])), [a]
    if kind == "concat":
        a = leaf(rng.standard_normal((n, m)))
        b = leaf(rng.standard_normal((n, k)))
        return lambda ps: ad.mean_all(ad.square(ad.concat([ps[0], ps[1]]))), [a, b]
    if kind == "rowdot":
        a = leaf(rng.standard_normal((n, m)))
        b = leaf(rng.standard_normal((n, m)))
        return lambda ps: ad.mean_all(ad.rowdot(ps[0], ps[1])), [a, b]
    if kind == "sum":
        a = leaf(rng.standard_normal((n, m)))
        return lambda ps: ad.scale(ad.sum_all(ad.square(ps[0])), 0.3), [a]
    if kind == "bce":
        p = leaf(rng.uniform(0.05, 0.95, (n, 1)))
        t = leaf((rng.random((n, 1)) < 0.5).astype(float))
        return lambda ps: ad.mean_all(ad.bce(ps[0], ad.constant(t.data))), [p]
    a = leaf(rng.standard_normal((n, m)))
    return lambda ps: ad.mean_all(ad.scale(ps[0], -1.7)), [a]


def test_primitive_gradients_match_finite_differences():
    # spec invariant: >= 100 random shapes/values across the primitive set
    rng = np.random.default_rng(2024)
    for _ in range(120):
        f, leaves = _random_op_case(rng)
        assert ad.finite_diff_check(f, leaves) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_second_order_matches_closed_form_on_cubics(n, m, seed):
    # f(x) = sum(a*x^3 + b*x^2), g = ||grad f||^2; closed form for dg/dx
    rng = np.random.default_rng(seed)
    x_val = rng.uniform(0.3, 2.0, (n, m))
    a_val = rng.uniform(-2.0, 2.0, (n, m))
    b_val = rng.uniform(-2.0, 2.0, (n, m))
    x = leaf(x_val)
    a_c, b_c = ad.constant(a_val), ad.constant(b_val)
    f = ad.sum_all(ad.add(ad.mul(a_c, ad.mul(ad.square(x), x)),
                          ad.mul(b_c, ad.square(x))))
    gx = ad.grad_wrt(f, x)             # 3a x^2 + 2b x
    g = ad.sum_all(ad.square(gx))      # sum (3a x^2 + 2b x)^2
    got = ad.backward(g).wrt(x).data
    grad_f = 3 * a_val * x_val ** 2 + 2 * b_val * x_val
    want = 2 * grad_f * (6 * a_val * x_val + 2 * b_val)
    assert np.allclose(got, want, rtol=1e-9, atol=1e-9)
