import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcgrank.numkit import (DimensionError, EvaluationError, ParamStore, elementwise,
                            elementwise_backward, grad_check, load_params, matmul,
                            matmul_backward, read_records, relu, save_params, sigmoid,
                            softmax_xent, write_records)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def numeric_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + eps
        plus = f(x)
        x[idx] = old - eps
        minus = f(x)
        x[idx] = old
        g[idx] = (plus - minus) / (2 * eps)
    return g


def rel_err(a, n):
    return np.max(np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n))))


class TestMatmul:
    def test_identity(self):
        assert matmul(np.eye(2), np.array([[3.0], [4.0]])).tolist() == [[3.0], [4.0]]

    def test_row_times_column(self):
        assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        naive = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    naive[i, j] += a[i, k] * b[k, j]
        assert np.max(np.abs(matmul(a, b) - naive)) < 1e-12

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_identity_both_sides_exact(self, a):
        assert np.array_equal(matmul(np.eye(3), a), a)
        assert np.array_equal(matmul(a, np.eye(4)), a)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        da, db = matmul_backward(w, a, b)
        assert rel_err(da, numeric_grad(lambda x: float(np.sum(w * (x @ b))), a.copy())) < 1e-8
        assert rel_err(db, numeric_grad(lambda x: float(np.sum(w * (a @ x))), b.copy())) < 1e-8


class TestElementwise:
    def test_relu(self):
        assert elementwise("relu", np.array([[-1.0, 0.0, 2.0]])).tolist() == [[0.0, 0.0, 2.0]]

    def test_tanh_and_sigmoid_at_zero(self):
        assert elementwise("tanh", np.zeros((1, 1)))[0, 0] == 0.0
        assert elementwise("sigmoid", np.zeros((1, 1)))[0, 0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(np.array([[-1000.0, 1000.0]]))
        assert np.all(np.isfinite(out))
        assert out[0, 0] == 0.0 and out[0, 1] == 1.0

    def test_binary_shape_mismatch(self):
        with pytest.raises(DimensionError):
            elementwise("add", np.ones((1, 2)), np.ones((2, 1)))

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("exp", np.ones((1, 1)))

    @pytest.mark.parametrize("op", ["relu", "tanh", "sigmoid"])
    @settings(max_examples=25, deadline=None)
    @given(x=arrays(np.float64, (2, 3), elements=finite))
    def test_unary_gradient(self, op, x):
        # keep relu away from its kink
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        w = np.linspace(-1, 1, 6).reshape(2, 3)
        analytic = elementwise_backward(op, w, x)
        numeric = numeric_grad(lambda z: float(np.sum(w * elementwise(op, z))), x.copy())
        assert rel_err(analytic, numeric) < 1e-4

    @pytest.mark.parametrize("op", ["add", "mul"])
    @settings(max_examples=25, deadline=None)
    @given(x=arrays(np.float64, (2, 2), elements=finite), y=arrays(np.float64, (2, 2), elements=finite))
    def test_binary_gradient(self, op, x, y):
        w = np.array([[0.3, -1.2], [2.0, 0.7]])
        dx, dy = elementwise_backward(op, w, x, y)
        nx = numeric_grad(lambda z: float(np.sum(w * elementwise(op, z, y))), x.copy())
        ny = numeric_grad(lambda z: float(np.sum(w * elementwise(op, x, z))), y.copy())
        assert rel_err(dx, nx) < 1e-4 and rel_err(dy, ny) < 1e-4

    @given(arrays(np.float64, (3, 3), elements=st.floats(-1e6, 1e6)))
    def test_finite_in_finite_out(self, x):
        for op in ("relu", "tanh", "sigmoid"):
            assert np.all(np.isfinite(elementwise(op, x)))


class TestSoftmaxXent:
    def test_uniform(self):
        loss, _ = softmax_xent(np.zeros((1, 10)), 3)
        assert abs(loss - math.log(10)) < 1e-12
        assert abs(loss - 2.302585) < 1e-6

    def test_saturated_is_stable(self):
        loss, grad = softmax_xent(np.array([[1000.0, 0.0]]), 0)
        assert loss == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(grad))

    def test_matches_extended_precision_formula(self):
        rng = np.random.default_rng(2)
        z = rng.normal(scale=3.0, size=(1, 7))
        # exact rational sum of exponentials, then one log
        exps = [Fraction(math.exp(v)) for v in z[0]]
        expected = -math.log(exps[4] / sum(exps))
        loss, _ = softmax_xent(z, 4)
        assert abs(loss - expected) < 1e-12

    def test_gradient_is_softmax_minus_onehot(self):
        z = np.array([[0.5, -1.0, 2.0]])
        _, grad = softmax_xent(z, 1)
        p = np.exp(z) / np.exp(z).sum()
        p[0, 1] -= 1
        assert np.allclose(grad, p, atol=1e-15)
        numeric = numeric_grad(lambda x: softmax_xent(x, 1)[0], z.copy())
        assert rel_err(grad, numeric) < 1e-8

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_xent(np.zeros((1, 3)), 3)

    @given(arrays(np.float64, (1, 6), elements=finite), st.floats(-100, 100), st.integers(0, 5))
    def test_translation_invariance(self, z, c, t):
        assert abs(softmax_xent(z, t)[0] - softmax_xent(z + c, t)[0]) < 1e-10


class TestParamStore:
    def test_flat_order_is_lexicographic(self):
        p = ParamStore({"b": [[1.0, 2.0]], "a": [[3.0]]})
        assert p.names() == ["a", "b"]
        assert p.flat().tolist() == [3.0, 1.0, 2.0]

    def test_flat_roundtrip(self):
        rng = np.random.default_rng(0)
        p = ParamStore({"w": rng.normal(size=(2, 3)), "v": rng.normal(size=(1, 4))})
        flat = p.flat()
        q = p.zeros_like()
        q.set_flat(flat)
        assert q.allclose(p) and np.array_equal(q.flat(), flat)

    def test_gradient_buffers_match_shapes(self):
        p = ParamStore({"w": np.ones((2, 3))})
        assert p.grad("w").shape == (2, 3)

    def test_duplicate_name(self):
        p = ParamStore({"w": [[1.0]]})
        with pytest.raises(KeyError):
            p.add("w", [[2.0]])


class TestGradCheck:
    def _sum_squares(self):
        p = ParamStore({"w": [[1.0, -2.0], [0.5, 3.0]]})

        def f(params):
            params.grad("w")[...] += 2 * params["w"]
            return float(np.sum(params["w"] ** 2))
        return p, f

    def test_sum_of_squares(self):
        p, f = self._sum_squares()
        assert grad_check(f, p, 1e-5) < 1e-8

    def test_sign_flip_is_caught(self):
        p = ParamStore({"w": [[1.0, -2.0], [0.5, 3.0]]})

        def f(params):
            params.grad("w")[...] -= 2 * params["w"]
            return float(np.sum(params["w"] ** 2))
        assert grad_check(f, p, 1e-5) > 0.5

    def test_eps_range(self):
        p, f = self._sum_squares()
        with pytest.raises(ValueError):
            grad_check(f, p, 1e-2)

    def test_non_finite_loss(self):
        p = ParamStore({"w": [[1.0]]})
        with pytest.raises(EvaluationError):
            grad_check(lambda params: float("nan"), p)

    def test_restores_parameters(self):
        p, f = self._sum_squares()
        before = p.flat()
        grad_check(f, p)
        assert np.array_equal(p.flat(), before)

    def test_per_group(self):
        p = ParamStore({"a": [[1.0]], "b": [[2.0]]})

        def f(params):
            params.grad("a")[...] += 2 * params["a"]
            params.grad("b")[...] += 0.0  # wrong on purpose
            return float(params["a"][0, 0] ** 2 + params["b"][0, 0] ** 2)
        worst, groups = grad_check(f, p, per_group=True)
        assert groups["a"] < 1e-8 and groups["b"] > 0.5 and worst == groups["b"]


class TestRecords:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        p = ParamStore({"x": rng.normal(size=(3, 5)), "a.b": np.array([[np.pi, -0.0, 1e-310]])})
        save_params(tmp_path / "p.ckpt", p, {"note": "hi"})
        header, q = load_params(tmp_path / "p.ckpt")
        assert header == {"note": "hi"}
        for name in p.names():
            assert p[name].tobytes() == q[name].tobytes()

    def test_file_bytes_deterministic(self, tmp_path):
        recs = {"b": np.ones((2, 2)), "a": np.zeros((1, 3))}
        write_records(tmp_path / "1", recs, {"k": 1})
        write_records(tmp_path / "2", dict(reversed(list(recs.items()))), {"k": 1})
        assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            read_records(tmp_path / "x")

    def test_relu_helper(self):
        assert relu(np.array([[-2.0, 3.0]])).tolist() == [[0.0, 3.0]]
