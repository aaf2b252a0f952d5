import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import KINDS, random_leaf, random_tree
from gpframe import kernels as kern
from gpframe.errors import (
    ArityError,
    DimensionMismatch,
    KernelSyntaxError,
    LengthMismatch,
    NonFiniteInput,
    UnknownFeature,
    UnknownKernel,
)


def _fd_gradients(expr, A, step=1e-6):
    u = kern.pack_params(expr)
    out = []
    for i in range(u.size):
        up, um = u.copy(), u.copy()
        up[i] += step
        um[i] -= step
        Kp = kern.eval_kernel(kern.unpack_params(expr, up), A)
        Km = kern.eval_kernel(kern.unpack_params(expr, um), A)
        out.append((Kp - Km) / (2 * step))
    return out


def _max_rel(a, b, floor=1e-4):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


class TestHyperParam:
    def test_value_and_unconstrained_agree(self):
        p = kern.HyperParam("ell", 2.5)
        assert p.unconstrained == pytest.approx(math.log(2.5), abs=1e-15)
        p.unconstrained = -1.0
        assert p.value == pytest.approx(math.exp(-1.0), rel=1e-15)

    def test_bounds_projection(self):
        p = kern.HyperParam("ell", 5.0, bounds=(0.1, 2.0))
        p.project()
        assert p.value == 2.0
        p.value = 1e-3
        p.project()
        assert p.value == 0.1

    @pytest.mark.parametrize("bounds", [(0.0, 1.0), (2.0, 1.0), (-1.0, 1.0)])
    def test_invalid_bounds(self, bounds):
        with pytest.raises(ValueError):
            kern.HyperParam("ell", 1.0, bounds=bounds)

    def test_prior_stddev_must_be_positive(self):
        with pytest.raises(ValueError):
            kern.HyperParam("ell", 1.0, prior=(0.0, 0.0))

    def test_zero_only_when_fixed(self):
        with pytest.raises(ValueError):
            kern.HyperParam("noise", 0.0)
        p = kern.HyperParam("noise", 0.0, fixed=True)
        assert p.unconstrained == -math.inf

    def test_dict_round_trip(self):
        p = kern.HyperParam("ell", 0.7, prior=(0.1, 2.0), bounds=(0.01, 10.0), fixed=True)
        q = kern.HyperParam.from_dict(p.to_dict())
        assert (q.name, q.value, q.prior, q.bounds, q.fixed) == (p.name, p.value, p.prior, p.bounds, p.fixed)


class TestBaseKernelValues:
    def test_se_zero_distance_is_variance(self):
        k = kern.SE(["x"], variance=1.0, lengthscale=1.0)
        assert kern.eval_kernel(k, np.array([[0.3]]), np.array([[0.3]]))[0, 0] == 1.0

    def test_se_unit_distance(self):
        k = kern.SE(["x"])
        val = kern.eval_kernel(k, np.array([[0.0]]), np.array([[1.0]]))[0, 0]
        assert val == pytest.approx(math.exp(-0.5), abs=1e-15)
        assert val == pytest.approx(0.606531, abs=5e-7)

    def test_mat32_unit_distance(self):
        k = kern.Mat32(["x"])
        val = kern.eval_kernel(k, np.array([[0.0]]), np.array([[1.0]]))[0, 0]
        s3 = math.sqrt(3.0)
        assert val == pytest.approx((1 + s3) * math.exp(-s3), abs=1e-15)
        assert val == pytest.approx(0.4833577, abs=5e-8)

    def test_mat52_unit_distance(self):
        k = kern.Mat52(["x"], variance=2.0)
        val = kern.eval_kernel(k, np.array([[0.0]]), np.array([[1.0]]))[0, 0]
        s5 = math.sqrt(5.0)
        assert val == pytest.approx(2.0 * (1 + s5 + 5.0 / 3.0) * math.exp(-s5), abs=1e-15)

    def test_periodic_formula_and_period(self):
        k = kern.Periodic(["t"], variance=1.5, lengthscale=0.8, period=2.0)
        A = np.array([[0.0], [0.0], [0.0]])
        B = np.array([[0.5], [2.0], [4.5]])
        K = kern.eval_kernel(k, A, B)
        expect = 1.5 * math.exp(-2 * math.sin(math.pi * 0.5 / 2.0) ** 2 / 0.64)
        assert K[0, 0] == pytest.approx(expect, rel=1e-14)
        assert K[0, 1] == pytest.approx(1.5, rel=1e-14)
        assert K[0, 2] == pytest.approx(K[0, 0], rel=1e-12)

    def test_active_features_select_columns(self):
        k = kern.SE(["b"], dims=[1])
        A = np.array([[0.0, 0.0], [100.0, 1.0]])
        assert kern.eval_kernel(k, A)[0, 1] == pytest.approx(math.exp(-0.5), rel=1e-15)

    def test_ard_with_equal_lengthscales_matches_isotropic(self, rng):
        A = rng.normal(size=(15, 3))
        for kind in ("SE", "Mat32", "Mat52"):
            iso = kern.BaseKernel(kind, ["a", "b", "c"], lengthscale=0.7, variance=1.3)
            ard = kern.BaseKernel(kind, ["a", "b", "c"], ard=True, lengthscale=[0.7] * 3, variance=1.3)
            np.testing.assert_allclose(kern.eval_kernel(ard, A), kern.eval_kernel(iso, A), atol=1e-12)

    def test_lengthscale_counts(self):
        assert len(kern.Mat32(["a", "b", "c"], ard=True).lengthscales) == 3
        assert len(kern.Mat32(["a", "b", "c"]).lengthscales) == 1
        with pytest.raises(LengthMismatch):
            kern.Mat32(["a", "b"], ard=True, lengthscale=[1.0, 2.0, 3.0])

    def test_invalid_leaves(self):
        with pytest.raises(ArityError):
            kern.Periodic(["a", "b"])
        with pytest.raises(ValueError):
            kern.SE([])
        with pytest.raises(ValueError):
            kern.SE(["a", "a"])
        with pytest.raises(UnknownKernel):
            kern.BaseKernel("Linear", ["a"])

    def test_dimension_and_finiteness_errors(self):
        k = kern.SE(["a", "b"], dims=[0, 1])
        with pytest.raises(DimensionMismatch):
            kern.eval_kernel(k, np.zeros((3, 1)))
        with pytest.raises(NonFiniteInput):
            kern.eval_kernel(k, np.array([[0.0, np.nan]]))


class TestComposition:
    def test_sum_and_product_are_exact(self, rng):
        A = rng.normal(size=(12, 3))
        a = kern.SE(["x0"], dims=[0], variance=0.5)
        b = kern.Mat32(["x1", "x2"], dims=[1, 2], lengthscale=2.0)
        c = kern.Periodic(["x2"], dims=[2])
        Ka, Kb, Kc = (kern.eval_kernel(k, A) for k in (a, b, c))
        np.testing.assert_array_equal(kern.eval_kernel(a + b + c, A), Ka + Kb + Kc)
        np.testing.assert_array_equal(kern.eval_kernel(a * b * c, A), Ka * Kb * Kc)
        np.testing.assert_array_equal(kern.eval_kernel((a + b) * c, A), (Ka + Kb) * Kc)

    def test_operator_overloads_build_nodes(self):
        a, b = kern.SE(["x"]), kern.Mat32(["x"])
        assert isinstance(a + b, kern.Sum)
        assert isinstance(a * b, kern.Product)
        assert len((a + b + a).children) == 2

    @given(st.integers(0, 2**32 - 1))
    def test_psd_with_relative_jitter(self, seed):
        rng = np.random.default_rng(seed)
        expr = random_tree(rng)
        A = rng.normal(size=(int(rng.integers(2, 50)), 3))
        K = kern.eval_kernel(expr, A)
        np.testing.assert_allclose(K, K.T, atol=1e-14)
        w = np.linalg.eigvalsh(K + 1e-8 * np.diag(np.diag(K)))
        assert w.min() >= -1e-12 * max(1.0, w.max())

    @given(st.integers(0, 2**32 - 1))
    def test_call_matches_eval(self, seed):
        rng = np.random.default_rng(seed)
        expr = random_tree(rng)
        A, B = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        np.testing.assert_array_equal(expr(A, B), kern.eval_kernel(expr, A, B))


class TestGradients:
    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("ard", [False, True])
    def test_leaf_matches_finite_differences(self, kind, ard, rng):
        A = rng.normal(size=(20, 3))
        leaf = random_leaf(rng, kind, ard=ard)
        analytic = kern.kernel_gradients(leaf, A)
        numeric = _fd_gradients(leaf, A)
        assert len(analytic) == len(leaf.params())
        for a, b in zip(analytic, numeric):
            assert _max_rel(a, b) < 1e-5

    @pytest.mark.parametrize("node", [kern.Sum, kern.Product])
    def test_composites_match_finite_differences(self, node, rng):
        A = rng.normal(size=(20, 3))
        expr = node([random_leaf(rng, k) for k in KINDS])
        for a, b in zip(kern.kernel_gradients(expr, A), _fd_gradients(expr, A)):
            assert _max_rel(a, b) < 1e-5

    @given(st.integers(0, 2**32 - 1))
    def test_random_trees_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        expr = random_tree(rng)
        A = rng.normal(size=(8, 3))
        for a, b in zip(kern.kernel_gradients(expr, A), _fd_gradients(expr, A)):
            assert _max_rel(a, b) < 1e-5

    def test_se_variance_gradient_at_zero_distance(self):
        k = kern.SE(["x"], variance=2.7)
        dK = kern.kernel_gradients(k, np.array([[0.4]]))
        assert dK[0][0, 0] == pytest.approx(2.7, rel=1e-15)

    def test_sum_gradient_is_concatenation(self, rng):
        A = rng.normal(size=(6, 3))
        a, b = random_leaf(rng, "SE"), random_leaf(rng, "Periodic")
        g = kern.kernel_gradients(a + b, A)
        expect = kern.kernel_gradients(a, A) + kern.kernel_gradients(b, A)
        assert len(g) == len(expect)
        for x, y in zip(g, expect):
            np.testing.assert_array_equal(x, y)

    @given(st.integers(0, 2**32 - 1))
    def test_vjp_contracts_gradients(self, seed):
        rng = np.random.default_rng(seed)
        expr = random_tree(rng)
        A, B = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        G = rng.normal(size=(6, 5))
        expect = [np.sum(G * d) for d in kern.kernel_gradients(expr, A, B)]
        np.testing.assert_allclose(expr.vjp(A, B, G), expect, rtol=1e-12, atol=1e-12)
        g = rng.normal(size=6)
        diag_expect = [np.sum(g * np.diag(d)) for d in kern.kernel_gradients(expr, A)]
        np.testing.assert_allclose(expr.diag_vjp(A, g), diag_expect, rtol=1e-10, atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_input_vjp_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        expr = random_tree(rng)
        A, B = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        G = rng.normal(size=(4, 5))
        out = expr.input_vjp(A, B, G)
        h = 1e-6
        num = np.zeros_like(A)
        for i in range(A.shape[0]):
            for d in range(A.shape[1]):
                Ap, Am = A.copy(), A.copy()
                Ap[i, d] += h
                Am[i, d] -= h
                num[i, d] = np.sum(G * (expr.K(Ap, B) - expr.K(Am, B))) / (2 * h)
        np.testing.assert_allclose(out, num, rtol=1e-5, atol=1e-6)


class TestPacking:
    def test_composite_kernel_packs_four_parameters(self):
        expr = kern.parse_kernel_expr("Mat32(lat,lon,elev) + Mat32(ocean_dist)",
                                      ["lat", "lon", "elev", "ocean_dist"])
        expr.leaves()[0].variance.value = 2.0
        expr.leaves()[1].lengthscales[0].value = 3.0
        v = kern.pack_params(expr)
        np.testing.assert_allclose(v, [math.log(2.0), 0.0, 0.0, math.log(3.0)], atol=1e-15)
        assert kern.param_names(expr) == ["k0.variance", "k0.lengthscale", "k1.variance", "k1.lengthscale"]

    def test_ard_mat32_counts(self):
        assert kern.pack_params(kern.Mat32(["a", "b", "c"], ard=True)).size == 4
        assert kern.param_names(kern.Mat32(["a", "b"], ard=True)) == [
            "k0.variance", "k0.lengthscale.a", "k0.lengthscale.b"]

    @given(st.integers(0, 2**32 - 1))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        expr = random_tree(rng)
        v = rng.normal(size=kern.pack_params(expr).size)
        np.testing.assert_allclose(kern.pack_params(kern.unpack_params(expr, v)), v, rtol=1e-14, atol=1e-15)

    def test_unpack_does_not_mutate(self):
        expr = kern.SE(["x"])
        kern.unpack_params(expr, np.array([1.0, 1.0]))
        assert expr.variance.value == 1.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            kern.unpack_params(kern.SE(["x"]), np.zeros(3))


class TestLogPrior:
    def test_no_priors(self):
        assert kern.log_prior(kern.SE(["x"]) + kern.Mat32(["x"])) == 0.0

    def test_standard_normal_at_zero(self):
        k = kern.SE(["x"])
        k.variance.prior = (0.0, 1.0)
        assert kern.log_prior(k) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
        assert kern.log_prior(k) == pytest.approx(-0.918939, abs=5e-7)

    def test_standard_normal_at_one(self):
        k = kern.SE(["x"], variance=math.e)
        k.variance.prior = (0.0, 1.0)
        assert kern.log_prior(k) == pytest.approx(-1.418939, abs=5e-7)

    def test_prior_gradient(self):
        p = kern.HyperParam("v", 2.0, prior=(0.3, 0.5))
        h = 1e-6
        q1 = kern.HyperParam("v", math.exp(p.unconstrained + h), prior=(0.3, 0.5))
        q0 = kern.HyperParam("v", math.exp(p.unconstrained - h), prior=(0.3, 0.5))
        assert p.log_prior_grad() == pytest.approx((q1.log_prior() - q0.log_prior()) / (2 * h), rel=1e-7)


SCHEMA = ["x", "y", "t", "u", "lat", "lon", "elev", "ocean_dist"]


class TestParser:
    def test_composite_kernel(self):
        e = kern.parse_kernel_expr("Mat32(lat,lon,elev) + Mat32(ocean_dist)", SCHEMA)
        assert isinstance(e, kern.Sum)
        a, b = e.children
        assert (a.kind, a.active_features, a.dims) == ("Mat32", ("lat", "lon", "elev"), (4, 5, 6))
        assert (b.kind, b.active_features, b.dims) == ("Mat32", ("ocean_dist",), (7,))

    def test_single_leaf(self):
        e = kern.parse_kernel_expr("SE(x)", SCHEMA)
        assert isinstance(e, kern.BaseKernel)
        assert e.kind == "SE" and e.active_features == ("x",)

    def test_periodic_arity(self):
        with pytest.raises(ArityError):
            kern.parse_kernel_expr("SE(x) * Periodic(t,u)", SCHEMA)

    def test_precedence_and_grouping(self):
        e = kern.parse_kernel_expr("SE(x) + SE(y) * Mat52(t)", SCHEMA)
        assert isinstance(e, kern.Sum) and isinstance(e.children[1], kern.Product)
        e = kern.parse_kernel_expr("(SE(x) + SE(y)) * Mat52(t)", SCHEMA)
        assert isinstance(e, kern.Product) and isinstance(e.children[0], kern.Sum)

    def test_case_insensitive_names(self):
        e = kern.parse_kernel_expr("se(x) + MAT32(y) + periodic(t)", SCHEMA)
        assert [c.kind for c in e.children] == ["SE", "Mat32", "Periodic"]

    def test_unknown_names(self):
        with pytest.raises(UnknownKernel):
            kern.parse_kernel_expr("Linear(x)", SCHEMA)
        with pytest.raises(UnknownFeature):
            kern.parse_kernel_expr("SE(z)", SCHEMA)

    @pytest.mark.parametrize("text,pos", [("SE(x", 4), ("SE(x) +", 7), ("SE(x) $ SE(y)", 6),
                                          ("SE()", 3), ("SE(x))", 5)])
    def test_syntax_errors_carry_position(self, text, pos):
        with pytest.raises(KernelSyntaxError) as info:
            kern.parse_kernel_expr(text, SCHEMA)
        assert info.value.position == pos

    def test_empty_text(self):
        with pytest.raises(KernelSyntaxError):
            kern.parse_kernel_expr("   ", SCHEMA)

    def test_duplicate_schema(self):
        with pytest.raises(ValueError):
            kern.parse_kernel_expr("SE(x)", ["x", "x"])

    @given(st.integers(0, 2**32 - 1))
    def test_render_reparses_to_same_tree(self, seed):
        rng = np.random.default_rng(seed)
        expr = random_tree(rng)
        schema = ["x0", "x1", "x2"]
        text = kern.render(expr)
        again = kern.parse_kernel_expr(text, schema)
        assert kern.render(again) == text
        assert _shape(again) == _shape(expr)


def _shape(e):
    if isinstance(e, kern.BaseKernel):
        return (e.kind, e.active_features)
    return (type(e).__name__, tuple(_shape(c) for c in e.children))


class TestSerialization:
    @given(st.integers(0, 2**32 - 1))
    def test_dict_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        expr = random_tree(rng)
        back = kern.from_dict(kern.to_dict(expr))
        A = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(kern.eval_kernel(back, A), kern.eval_kernel(expr, A))
        np.testing.assert_array_equal(kern.pack_params(back), kern.pack_params(expr))
