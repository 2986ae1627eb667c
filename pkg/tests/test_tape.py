import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rnp.checks import PRIMITIVE_TOL, primitive_suite
from rnp.tape import Op, Tape, Tensor, grad_check, no_tape, ops


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_square_forward():
    assert ops.square(Tensor([3.0])).data.tolist() == [9.0]


def test_elu_at_zero_is_c1():
    x = leaf([0.0])
    with Tape() as tape:
        y = ops.elu(x)
        loss = ops.sum(y)
    assert y.data.tolist() == [0.0]
    assert tape.backward(loss)[x].tolist() == [1.0]
    # left-hand slope exp(0^-) = 1 as well
    h = 1e-7
    left = (ops.elu(Tensor([0.0])).item() - ops.elu(Tensor([-h])).item()) / h
    assert left == pytest.approx(1.0, abs=1e-6)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), rtol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 4\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))


def test_add_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = ops.sum(ops.square(x))
    assert tape.backward(loss)[x].tolist() == [2.0, 4.0, 6.0]
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_sigmoid_at_zero():
    x = leaf([0.0])
    with Tape() as tape:
        loss = ops.sum(ops.sigmoid(x))
    assert tape.backward(loss)[x].tolist() == [0.25]


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ops.square(x)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_second_backward_is_rejected():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        loss = ops.sum(ops.square(x))
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_unreachable_leaf_gets_exact_zero():
    x, unused = leaf([1.0, 2.0]), leaf([5.0, 6.0, 7.0])
    with Tape() as tape:
        ops.sum(ops.square(unused))  # recorded but not on the loss path
        loss = ops.sum(ops.tanh(x))
    tape.backward(loss)
    assert np.array_equal(unused.grad, np.zeros(3))


def test_tape_order_is_forward_order():
    x = leaf([0.5])
    with Tape() as tape:
        ops.sum(ops.exp(ops.tanh(ops.square(x))))
    assert [n.op for n in tape.nodes] == [Op.SQUARE, Op.TANH, Op.EXP, Op.SUM]


def test_nothing_recorded_outside_a_tape():
    x = leaf([1.0])
    with Tape() as tape:
        with no_tape():
            ops.square(x)
    assert tape.nodes == []


def test_backward_wrt_intermediate():
    x = leaf([1.0, -2.0])
    with Tape() as tape:
        h = ops.mul(x, 3.0)
        loss = ops.sum(ops.square(h))
    g = tape.backward(loss, wrt=[h])[h]
    np.testing.assert_allclose(g, 2 * h.data)


def test_grad_check_tanh_vector():
    x = Tensor(np.random.default_rng(0).standard_normal(10))
    assert grad_check(lambda t: ops.sum(ops.tanh(t)), x, eps=1e-5) < 1e-6


def test_grad_check_constant_function():
    x = Tensor(np.random.default_rng(0).standard_normal(4))
    assert grad_check(lambda t: ops.sum(ops.mul(t, 0.0)), x) == 0.0


@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
def test_grad_check_reports_non_finite():
    with pytest.raises(FloatingPointError):
        grad_check(lambda t: ops.sum(ops.reciprocal(t)), Tensor(np.zeros(3)))


@pytest.mark.parametrize("result", primitive_suite(seed=0), ids=lambda r: r.name)
def test_primitive_gradients(result):
    assert result.error < PRIMITIVE_TOL


def test_every_op_is_covered_by_the_primitive_suite():
    names = {r.name.split("[")[0] for r in primitive_suite(seed=1)}
    assert {op.value for op in Op} <= names


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
       arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
def test_matmul_vjp_matches_definition(a, b):
    A, Bt = leaf(a), leaf(b)
    w = np.arange(6.0).reshape(3, 2)
    with Tape() as tape:
        loss = ops.sum(ops.mul(ops.matmul(A, Bt), w))
    g = tape.backward(loss)
    np.testing.assert_allclose(g[A], w @ b.T, atol=1e-12)
    np.testing.assert_allclose(g[Bt], a.T @ w, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-4, 4)))
def test_broadcast_add_gradient_sums_over_broadcast_axes(b):
    x = leaf(np.ones((3, 5)))
    bias = leaf(b)
    with Tape() as tape:
        loss = ops.sum(ops.square(ops.add(x, bias)))
    g = tape.backward(loss)
    np.testing.assert_allclose(g[bias], (2 * (1 + b))[None].repeat(3, 0).sum(0))


def test_float32_stays_float32():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with Tape() as tape:
        y = ops.sum(ops.elu(ops.mul(x, 2.0)))
    assert y.dtype == np.float32
    assert tape.backward(y)[x].dtype == np.float32
