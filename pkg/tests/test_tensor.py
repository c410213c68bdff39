import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atomic_fsl import tensor as T
from atomic_fsl.tensor import DeterminismError, Graph, ShapeError, Tensor, grad_check


def test_matmul_identity():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_hand_arithmetic():
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[2, 3\]"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)))
    err = grad_check(lambda: T.reduce_sum(T.mul(T.matmul(a, b), w)), [a, b])
    assert err < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_rows(Tensor([[np.log(3), 0.0]])).data, [[0.75, 0.25]], atol=1e-15)
    big = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    assert big[0, 0] == 1.0 and big[0, 1] < 1e-300


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_normalized_and_shift_invariant(x, c):
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, y, atol=1e-12)


def test_grad_check_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    err = grad_check(lambda: T.reduce_sum(T.square(x)), [x])
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert err < 1e-8


def test_grad_check_constant_function():
    x = Tensor([1.0, -3.0], requires_grad=True)
    err = grad_check(lambda: T.scale(T.reduce_sum(x), 0.0), [x])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    assert err == 0.0


def test_grad_check_detects_nondeterminism():
    x = Tensor([1.0], requires_grad=True)
    calls = iter(range(100))

    def f():
        return T.add(T.reduce_sum(x), Tensor(float(next(calls))))
    with pytest.raises(DeterminismError):
        grad_check(f, [x])


def test_grad_check_rejects_bad_eps():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: T.reduce_sum(x), [x], eps=1e-2)


def test_shared_input_accumulates():
    x = Tensor([1.5, -2.0, 0.5], requires_grad=True)
    T.backward(T.reduce_sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_graph_is_topological_and_visits_once():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = T.matmul(x, x)
    z = T.reduce_sum(T.add(y, y))
    g = Graph.from_output(z)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    assert len(pos) == len(g.nodes)
    for n in g.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.reduce_sum(T.square(x))
    assert not y.requires_grad and y._parents == ()


def test_only_scalar_broadcast_allowed():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    out = T.mul(Tensor(np.ones((2, 3))), Tensor(2.0))
    np.testing.assert_array_equal(out.data, 2 * np.ones((2, 3)))


def test_concat_incompatible_shapes():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


def test_normalize_rows_zero_guard():
    out = T.normalize_rows(Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 3)))


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 7, 3))
    w = rng.normal(size=(3, 4, 3))
    b = rng.normal(size=4)
    d = 2
    out = T.conv1d(Tensor(x), Tensor(w), Tensor(b), dilation=d).data
    ref = np.zeros((2, 7, 4)) + b
    for t in range(7):
        for j in range(3):
            src = t + (j - 1) * d
            if 0 <= src < 7:
                ref[:, t] += x[:, src] @ w[:, :, j]
    np.testing.assert_allclose(out, ref, atol=1e-12)


# --- finite-difference property over every differentiable op ---------------

def _away_from_zero(rng, shape):
    x = rng.uniform(0.2, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _cases(rng):
    a = Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)
    b = Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)
    m = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    v = Tensor(rng.normal(size=4), requires_grad=True)
    s = Tensor(rng.normal(), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    x3 = Tensor(rng.normal(size=(2, 6, 3)), requires_grad=True)
    w3 = Tensor(rng.normal(size=(3, 2, 3)), requires_grad=True)
    b3 = Tensor(rng.normal(size=2), requires_grad=True)
    return {
        "add": ((a, b), lambda: T.add(a, b)),
        "sub": ((a, b), lambda: T.sub(a, b)),
        "mul": ((a, b), lambda: T.mul(a, b)),
        "scale": ((a,), lambda: T.scale(a, -1.7)),
        "scalar_mul": ((a, s), lambda: T.mul(a, s)),
        "scalar_add": ((a, s), lambda: T.add(a, s)),
        "add_bias": ((a, v), lambda: T.add_bias(a, v)),
        "relu": ((a,), lambda: T.relu(a)),
        "sigmoid": ((a,), lambda: T.sigmoid(a)),
        "exp": ((a,), lambda: T.exp(a)),
        "log": ((pos,), lambda: T.log(pos)),
        "square": ((a,), lambda: T.square(a)),
        "sum_axis": ((a,), lambda: T.reduce_sum(a, axis=0)),
        "mean_axis": ((a,), lambda: T.mean(a, axis=1)),
        "max_axis": ((a,), lambda: T.reduce_max(a, axis=1)),
        "transpose": ((a,), lambda: T.transpose(a)),
        "reshape": ((a,), lambda: T.reshape(a, (4, 3))),
        "concat": ((a, b), lambda: T.concat([a, b], axis=1)),
        "take_rows": ((a,), lambda: T.take_rows(a, [2, 0, 2])),
        "repeat_row": ((v,), lambda: T.repeat_row(v, 3)),
        "matmul": ((a, m), lambda: T.matmul(a, m)),
        "rowdot": ((a, b), lambda: T.rowdot(a, b)),
        "softmax": ((a,), lambda: T.softmax_rows(a)),
        "log_softmax": ((a,), lambda: T.log_softmax_rows(a)),
        "normalize": ((a,), lambda: T.normalize_rows(a)),
        "conv1d": ((x3, w3, b3), lambda: T.conv1d(x3, w3, b3, dilation=2)),
    }


OPS = sorted(_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_match_finite_differences(op):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params, fn = _cases(rng)[op]
        probe = _away_from_zero(rng, fn().shape)
        worst = max(worst, grad_check(lambda: T.reduce_sum(T.mul(fn(), Tensor(probe))), list(params), eps=1e-5))
    assert worst < 1e-6, f"{op}: worst relative error {worst:.2e}"
