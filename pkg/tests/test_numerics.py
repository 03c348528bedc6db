import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msgaf import numerics as nx
from msgaf.numerics import ShapeError, Tape, Tensor, grad_check


def test_matmul_identity_and_annihilator():
    M = np.array([[1.0, -2.0], [0.5, 4.0]])
    np.testing.assert_array_equal(nx.matmul(np.eye(2), M).value, M)
    np.testing.assert_array_equal(nx.matmul(np.zeros((2, 2)), M).value, np.zeros((2, 2)))


def test_matmul_manual():
    out = nx.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(out.value, [[3.0], [7.0]])


def test_matmul_rejects_mismatch_with_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_row_softmax_examples():
    np.testing.assert_allclose(nx.row_softmax([[0.0, 0.0]]).value, [[0.5, 0.5]])
    np.testing.assert_allclose(nx.row_softmax([[math.log(1), math.log(3)]]).value, [[0.25, 0.75]],
                               atol=1e-15)
    np.testing.assert_array_equal(nx.row_softmax([[1000.0, 1000.0]]).value, [[0.5, 0.5]])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-700, 700)))
def test_row_softmax_rows_sum_to_one(m):
    out = nx.row_softmax(m).value
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out >= 0) and np.all(out <= 1)


def test_masked_softmax_ignores_masked_entries():
    mask = np.array([[True, False, True]])
    out = nx.softmax([[0.0, 50.0, 0.0]], mask=mask).value
    np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]])


def test_matmul_adjoint_identities(rng):
    A, B, G = rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    tape = Tape()
    a, b = tape.variable(A), tape.variable(B)
    tape.backward(nx.sum(nx.matmul(a, b) * G))
    np.testing.assert_allclose(a.grad, G @ B.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, A.T @ G, rtol=1e-12)
    err = grad_check(lambda p: nx.sum(nx.matmul(p["A"], p["B"]) * G), {"A": A, "B": B})
    assert err <= 1e-8


def test_grad_check_polynomial():
    assert grad_check(lambda p: nx.sum(p["x"] * p["x"]), {"x": np.array([3.0])}) <= 1e-9
    tape = Tape()
    x = tape.variable([3.0])
    tape.backward(nx.sum(x * x))
    assert x.grad[0] == pytest.approx(6.0)


def test_grad_check_constant_softmax_sum(rng):
    params = {"x": rng.normal(size=(1, 5))}
    err = grad_check(lambda p: nx.sum(nx.row_softmax(p["x"])), params)
    assert err <= 1e-7


@pytest.mark.parametrize("op", [nx.relu, nx.leaky_relu, nx.elu, nx.exp, nx.transpose])
def test_elementwise_gradients(op, rng):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of kinks
    w = rng.normal(size=op(x).shape)
    assert grad_check(lambda p: nx.sum(op(p["x"]) * w), {"x": x}) <= 1e-7


def test_structural_op_gradients(rng):
    x, y = rng.normal(size=(2, 3)), rng.uniform(0.5, 2.0, size=(2, 3))

    def f(p):
        parts = nx.concat([p["x"], nx.log(p["y"])], axis=0)
        stacked = nx.stack([parts, parts * 2.0], axis=0)
        picked = nx.reshape(stacked[1, :, 1:], (4, 2))
        return nx.sum(nx.mean(picked / p["y"][0:1, 0:2], axis=0) * nx.sum(p["x"], axis=1, keepdims=True)[0])

    assert grad_check(f, {"x": x, "y": y}) <= 1e-7


def test_broadcast_gradient_reduces_to_parameter_shape(rng):
    X, b = rng.normal(size=(4, 3, 2)), rng.normal(size=(2,))
    tape = Tape()
    bt = tape.variable(b)
    tape.backward(nx.sum(Tensor(X) + bt))
    np.testing.assert_allclose(bt.grad, [12.0, 12.0])


def test_gradients_are_deterministic(rng):
    W, X = rng.normal(size=(4, 4)), rng.normal(size=(5, 4))

    def grads():
        tape = Tape()
        w = tape.variable(W)
        tape.backward(nx.sum(nx.elu(nx.row_softmax(Tensor(X) @ w))))
        return w.grad

    assert grads().tobytes() == grads().tobytes()


def test_non_finite_results_are_rejected():
    with pytest.raises(nx.NonFiniteError):
        nx.exp([[1000.0]])
    with pytest.raises(nx.NonFiniteError, match=r"x\[0\]"):
        grad_check(lambda p: nx.sum(nx.log(p["x"])), {"x": np.array([1e-7])}, eps=1e-6)


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda p: nx.sum(p["x"]), {"x": np.ones(1)}, eps=1e-2)
