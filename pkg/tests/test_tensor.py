import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from magcrn import tensor as T
from magcrn.errors import DetachedTensor, InvalidAxis, NotScalar, ShapeMismatch


def leaf(x):
    return T.Tensor(x, requires_grad=True)


def grad_of(f, x):
    x = leaf(x)
    with T.GradTape() as tape:
        loss = f(x)
    tape.backward(loss)
    return x.grad


# -- forward values ---------------------------------------------------------------


def test_unary_examples():
    np.testing.assert_array_equal(T.relu(T.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5
    assert T.tanh(T.Tensor([0.0])).data[0] == 0.0
    np.testing.assert_array_equal(T.elementwise_unary(T.Tensor([-3.0, 2.0]), "abs").data, [3.0, 2.0])
    np.testing.assert_array_equal(T.elementwise_unary(T.Tensor([-3.0, 2.0]), "neg").data, [3.0, -2.0])


def test_unknown_kinds_rejected():
    with pytest.raises(ValueError):
        T.elementwise_unary(T.Tensor([1.0]), "exp")
    with pytest.raises(ValueError):
        T.elementwise_binary(T.Tensor([1.0]), T.Tensor([1.0]), "div")


def test_binary_examples():
    np.testing.assert_array_equal(T.add(T.Tensor([1.0, 2.0]), T.Tensor([0.0, 0.0])).data, [1.0, 2.0])
    np.testing.assert_array_equal(T.mul(T.Tensor([3.0, 4.0]), T.Tensor(1.0)).data, [3.0, 4.0])
    np.testing.assert_array_equal(T.sub(T.Tensor([5.0, 5.0]), T.Tensor([2.0, 3.0])).data, [3.0, 2.0])


def test_broadcasting_restricted_to_scalar_and_trailing_suffix():
    a = T.Tensor(np.ones((2, 3)))
    assert T.add(a, T.Tensor(np.ones(3))).shape == (2, 3)
    assert T.add(a, 2.0).shape == (2, 3)
    with pytest.raises(ShapeMismatch):
        T.add(a, T.Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeMismatch):
        T.mul(a, T.Tensor(np.ones(2)))


def test_matmul_examples():
    M = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(3)), T.Tensor(M)).data, M)
    np.testing.assert_array_equal(T.matmul(T.Tensor([[2.0]]), T.Tensor([[3.0]])).data, [[6.0]])
    got = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[5.0, 6.0], [7.0, 8.0]])).data
    np.testing.assert_array_equal(got, [[19.0, 22.0], [43.0, 50.0]])
    batched = T.matmul(T.Tensor(np.ones((4, 2, 3))), T.Tensor(np.ones((3, 5))))
    assert batched.shape == (4, 2, 5)
    with pytest.raises(ShapeMismatch):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([[0.0, math.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-15)
    a = T.softmax_rows(T.Tensor([[7.5, 7.5 + 1.3]])).data
    b = T.softmax_rows(T.Tensor([[0.0, 1.3]])).data
    np.testing.assert_allclose(a, b, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        T.softmax_rows(T.Tensor([1.0, 2.0]))


def test_concat_examples():
    A = T.Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(T.concat([A], axis=0).data, A.data)
    assert T.concat([A, A], axis=1).shape == (2, 6)
    np.testing.assert_array_equal(T.concat([T.Tensor([[1.0]]), T.Tensor([[2.0]])], axis=0).data, [[1.0], [2.0]])
    with pytest.raises(InvalidAxis):
        T.concat([A, A], axis=2)
    with pytest.raises(ShapeMismatch):
        T.concat([A, T.Tensor(np.ones((3, 3)))], axis=1)


def test_reduce_examples():
    assert T.reduce(T.Tensor([1.0, 2.0, 3.0]), "sum").item() == 6.0
    assert T.reduce(T.Tensor(np.full((3, 4), 2.5)), "mean").item() == 2.5
    g = grad_of(lambda x: T.reduce(x, "mean"), [2.0, 4.0])
    np.testing.assert_array_equal(g, [0.5, 0.5])
    with pytest.raises(InvalidAxis):
        T.reduce(T.Tensor(np.ones((2, 2))), "sum", axes=3)


def test_einsum_rejects_unsupported_specs():
    a = T.Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        T.einsum("ij,jk->ik", a, T.Tensor(np.ones((4, 2))))
    with pytest.raises(ValueError):
        T.einsum("ii,ij->j", T.Tensor(np.ones((2, 2))), a)


# -- backward ---------------------------------------------------------------------


def test_backward_examples():
    np.testing.assert_array_equal(grad_of(lambda x: T.reduce(x * x, "sum"), [1.0, -2.0]), [2.0, -4.0])
    np.testing.assert_array_equal(grad_of(lambda x: T.reduce(T.relu(x), "sum"), [-1.0]), [0.0])


def test_relu_derivative_at_zero_is_zero():
    np.testing.assert_array_equal(grad_of(lambda x: T.reduce(T.relu(x), "sum"), [0.0, 1.0]), [0.0, 1.0])


def test_matmul_chain_matches_finite_differences():
    rng = np.random.default_rng(0)
    B, C = rng.uniform(-2, 2, (4, 3)), rng.uniform(-2, 2, (3, 2))
    f = lambda x: T.reduce(T.tanh(T.matmul(T.matmul(x, B), C)), "sum")  # noqa: E731
    assert T.finite_diff_check(f, T.Tensor(rng.uniform(-2, 2, (2, 4)))) < 1e-6


def test_finite_diff_check_examples():
    assert T.finite_diff_check(lambda x: T.reduce(x * x, "sum"), T.Tensor([1.0, 2.0, 3.0]), 1e-6) < 1e-8
    w = np.array([0.5, -1.5, 2.0])
    assert T.finite_diff_check(lambda x: T.reduce(x * w, "sum"), T.Tensor([1.0, 2.0, 3.0])) < 1e-10


def test_every_leaf_gets_gradient_of_its_shape():
    a, b = leaf(np.ones((2, 3))), leaf(np.ones(4))  # b never used
    with T.GradTape() as tape:
        loss = T.reduce(a * 2.0, "sum")
    tape.backward(loss)
    assert a.grad.shape == a.shape
    assert b.grad is None or b.grad.shape == b.shape


def test_independent_subgraphs_gradients_concatenate():
    rng = np.random.default_rng(3)
    xa, xb = rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 4)
    fa = lambda t: T.reduce(T.tanh(t) * t, "sum")  # noqa: E731
    fb = lambda t: T.reduce(T.sigmoid(t), "sum")  # noqa: E731
    a, b = leaf(xa), leaf(xb)
    with T.GradTape() as tape:
        loss = fa(a) + fb(b)
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, grad_of(fa, xa))
    np.testing.assert_array_equal(b.grad, grad_of(fb, xb))


def test_backward_requires_scalar_on_tape():
    x = leaf([1.0, 2.0])
    with T.GradTape() as tape:
        y = x * 2.0
    with pytest.raises(NotScalar):
        tape.backward(y)
    with T.no_grad():
        z = T.reduce(x * 2.0, "sum")
    with T.GradTape() as tape:
        pass
    with pytest.raises(DetachedTensor):
        tape.backward(z)


def test_tape_records_inputs_before_outputs():
    x = leaf([0.3, -0.7])
    with T.GradTape() as tape:
        T.reduce(T.tanh(x * x) + x, "sum")
    seen = set()
    for rec in tape.records:
        assert all(i is None or i in seen or i < rec.out_id for i in rec.in_ids)
        seen.add(rec.out_id)


# -- properties -------------------------------------------------------------------

finite = st.floats(-2.0, 2.0, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_rows_stochastic_and_shift_invariant(x, c):
    y = T.softmax_rows(T.Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert (y >= 0).all()
    np.testing.assert_allclose(T.softmax_rows(T.Tensor(x + c)).data, y, atol=1e-12)


OPS = {
    "relu": lambda t: T.relu(t),
    "sigmoid": lambda t: T.sigmoid(t),
    "tanh": lambda t: T.tanh(t),
    "abs": lambda t: T.absolute(t),
    "neg": lambda t: T.neg(t),
    "softmax_rows": lambda t: T.softmax_rows(t),
    "square": lambda t: t * t,
    "add_sub": lambda t: (t + 1.5) - t * 0.25,
    "matmul": lambda t: T.matmul(t, np.linspace(-1, 1, 12).reshape(4, 3)),
    "concat": lambda t: T.concat([t, t * 2.0], axis=1),
    "mean_axis": lambda t: T.reduce(t, "mean", axes=0),
}


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", sorted(OPS))
def test_ops_match_finite_differences_on_random_inputs(name, seed):
    x = np.random.default_rng(seed).uniform(-2.0, 2.0, (3, 4))
    if name in ("relu", "abs"):
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from the kink
    w = np.cos(np.arange(OPS[name](T.Tensor(x)).size, dtype=float) + 0.3)

    def f(t):
        y = OPS[name](t)
        return T.reduce(y * w.reshape(y.shape), "sum")

    assert T.finite_diff_check(f, T.Tensor(x)) < 1e-5


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 3), elements=finite))
def test_ops_do_not_mutate_inputs(a, b):
    ta, tb = leaf(a.copy()), leaf(b.copy())
    with T.GradTape() as tape:
        out = T.reduce(T.tanh(ta * tb) + T.softmax_rows(ta) - T.relu(tb), "sum")
    tape.backward(out)
    np.testing.assert_array_equal(ta.data, a)
    np.testing.assert_array_equal(tb.data, b)


def test_outputs_are_finite_float64():
    y = T.sigmoid(T.Tensor([-800.0, 0.0, 800.0]))
    assert y.data.dtype == np.float64
    assert np.isfinite(y.data).all()
    s = T.softmax_rows(T.Tensor([[1000.0, -1000.0]]))
    assert np.isfinite(s.data).all()
