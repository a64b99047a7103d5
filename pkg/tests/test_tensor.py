import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from molt import tensor as T
from molt.tensor import DeterminismError, NonFiniteError, Parameter, ShapeError, Tensor


def t(x):
    return Tensor(np.asarray(x, dtype=float))


# matmul ----------------------------------------------------------------------

@pytest.mark.parametrize("a, b, expected", [
    (np.eye(2), [[1, 2], [3, 4]], [[1, 2], [3, 4]]),
    ([[1, 0]], [[2], [5]], [[2]]),
    ([[1, 2], [3, 4]], [[5, 6], [7, 8]], [[19, 22], [43, 50]]),
])
def test_matmul_values(a, b, expected):
    np.testing.assert_array_equal((t(a) @ t(b)).data, expected)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


def test_matmul_shared_matrix_across_batch():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    np.testing.assert_allclose((t(x) @ t(w)).data, x @ w)
    with pytest.raises(ShapeError):
        T.matmul(t(np.ones((2, 3, 4))), t(np.ones((3, 4, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_associative(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (t(rng.normal(size=s)) for s in ((m, k), (k, n), (n, p)))
    np.testing.assert_allclose(((a @ b) @ c).data, (a @ (b @ c)).data, atol=1e-9)


# softmax / layer norm --------------------------------------------------------

@pytest.mark.parametrize("row, expected", [
    ([0, 0, 0], [1 / 3, 1 / 3, 1 / 3]),
    ([math.log(1), math.log(2)], [1 / 3, 2 / 3]),
    ([1000, 1000], [0.5, 0.5]),
])
def test_softmax_rows_examples(row, expected):
    np.testing.assert_allclose(T.softmax_rows(t([row])).data[0], expected, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)))
def test_softmax_rows_are_distributions(x):
    s = T.softmax_rows(t(x)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("row, bias, expected", [
    ([1, 1, 1], 0.0, [0, 0, 0]),
    ([1, -1], 0.0, [1, -1]),
    ([0, 0], 5.0, [5, 5]),
])
def test_layer_norm_examples(row, bias, expected):
    d = len(row)
    out = T.layer_norm(t([row]), t(np.ones(d)), t(np.full(d, bias)))
    np.testing.assert_allclose(out.data[0], expected, atol=1e-5)


# backward --------------------------------------------------------------------

def test_backward_square():
    x = Parameter(np.array(3.0), "x")
    g = T.backward(x * x, [x])
    assert g["x"] == pytest.approx(6.0)


def test_backward_constant_loss_gives_zero_gradients():
    p = Parameter(np.ones((2, 2)), "p")
    g = T.backward(t(4.0), [p])
    np.testing.assert_array_equal(g["p"], np.zeros((2, 2)))


def test_backward_elementwise_product_sum():
    rng = np.random.default_rng(1)
    a = Parameter(rng.normal(size=(3, 4)), "a")
    b = t(rng.normal(size=(3, 4)))
    g = T.backward(T.total(a * b), [a])
    np.testing.assert_array_equal(g["a"], b.data)


def test_backward_rejects_non_scalar():
    p = Parameter(np.ones(3), "p")
    with pytest.raises(ValueError, match="scalar"):
        T.backward(p * 2.0, [p])


def test_backward_frozen_and_unreachable():
    a = Parameter(np.ones(2), "a")
    b = Parameter(np.ones(2), "b")
    frozen = Parameter(np.ones(2), "f", frozen=True)
    g = T.backward(T.total(a * frozen), [a, b, frozen])
    np.testing.assert_array_equal(g["b"], 0.0)
    assert "f" not in g
    np.testing.assert_array_equal(g["a"], 1.0)


def test_shared_node_visited_once():
    x = Parameter(np.array([2.0]), "x")
    y = x * x
    z = T.total(y + y)
    assert T.backward(z, [x])["x"][0] == pytest.approx(8.0)


@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
def test_non_finite_is_raised():
    with pytest.raises(NonFiniteError):
        T.log(t([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        t(np.ones((2, 3))) + t(np.ones(3))
    assert (t(np.ones(3)) * 2.0).data.tolist() == [2.0, 2.0, 2.0]


def test_no_grad_builds_no_graph():
    p = Parameter(np.ones(2), "p")
    with T.no_grad():
        y = p * 3.0
    assert not y.requires_grad


# grad_check ------------------------------------------------------------------

def test_grad_check_quadratic():
    p = Parameter(np.array([1.7]), "p")
    rep = T.grad_check(lambda: T.total(p * p * 3.0), [p], eps=1e-4)
    assert rep.max_rel_error < 1e-8
    assert rep.n_checked == 1


def test_grad_check_empty():
    rep = T.grad_check(lambda: t(1.0), [])
    assert rep.empty and rep.n_checked == 0


def test_grad_check_detects_nondeterminism():
    p = Parameter(np.ones(1), "p")
    counter = iter(range(100))

    def loss():
        return T.total(p * float(next(counter)))

    with pytest.raises(DeterminismError):
        T.grad_check(loss, [p])


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.grad_check(lambda: t(1.0), [], eps=0.0)


OPS = {
    "tanh": lambda x, w: T.tanh(x @ w),
    "gelu": lambda x, w: T.gelu(x @ w),
    "relu": lambda x, w: T.relu(x @ w + 0.3),
    "softmax": lambda x, w: T.softmax(x @ w),
    "log_softmax": lambda x, w: T.log_softmax(x @ w),
    "layer_norm": lambda x, w: T.layer_norm(x @ w, t(np.full(3, 1.3)), t(np.full(3, 0.2))),
    "l2_normalize": lambda x, w: T.l2_normalize(x @ w),
    "exp_log": lambda x, w: T.log(T.exp(x @ w) + 1.0),
    "sqrt_div": lambda x, w: T.sqrt(T.square(x @ w) + 1.0) / (T.square(x @ w) + 2.0),
    "concat_select": lambda x, w: T.concat([T.select(x @ w, 0, axis=-1), T.select(x @ w, 2, axis=-1)], axis=-1),
    "expand_mean": lambda x, w: T.expand(T.mean(x @ w, axis=0), 0, 4),
    "transpose": lambda x, w: T.swap_last(x @ w) @ (x @ w),
    "stack": lambda x, w: T.stack([x @ w, T.tanh(x @ w)], axis=0),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(7)
    x = Parameter(rng.normal(size=(4, 5)), "x")
    w = Parameter(rng.normal(size=(5, 3)) * 0.5, "w")
    r = t(rng.normal(size=OPS[name](x, w).shape))
    rep = T.grad_check(lambda: T.total(OPS[name](x, w) * r), [x, w])
    assert rep.max_rel_error < 1e-5, rep.worst


def test_cross_entropy_gradient_and_value():
    logits = Parameter(np.array([[0.0, 0.0], [2.0, 0.0]]), "l")
    loss = T.cross_entropy(logits, np.array([0, 1]))
    expected = (math.log(2) + math.log(1 + math.e**2) - 0.0) / 2
    assert loss.item() == pytest.approx(expected)
    assert T.grad_check(lambda: T.cross_entropy(logits, np.array([0, 1])), [logits]).max_rel_error < 1e-7
    with pytest.raises(ValueError):
        T.cross_entropy(logits, np.array([0, 2]))
