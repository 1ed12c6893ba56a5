import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sslfewshot import tensor as T
from sslfewshot.tensor import DimensionError, GradientTape, Tensor, backward, constant, finite_diff_check


def grad_of(f, x):
    tape = GradientTape()
    xt = tape.watch(x)
    out = f(xt)
    return backward(tape, out)[xt.node]


# -- matmul --

def test_matmul_identity():
    out = T.matmul(np.eye(2), [[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(out.numpy(), [[3, 4], [5, 6]])


def test_matmul_zero():
    np.testing.assert_array_equal(T.matmul([[1.0, 2.0]], [[0.0], [0.0]]).numpy(), [[0.0]])


def test_matmul_hand_oracle():
    out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(out.numpy(), [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 2)))


# -- l2_normalize_rows --

def test_normalize_345():
    np.testing.assert_allclose(T.l2_normalize_rows([[3.0, 4.0]]).numpy(), [[0.6, 0.8]], atol=1e-15)


def test_normalize_zero_row_is_guarded():
    np.testing.assert_array_equal(T.l2_normalize_rows([[0.0, 0.0]]).numpy(), [[0.0, 0.0]])


def test_normalize_inv_sqrt3():
    np.testing.assert_allclose(T.l2_normalize_rows([[1.0, 1.0, 1.0]]).numpy(), [[0.57735] * 3], atol=5e-6)


@given(arrays(np.float64, (1, 5), elements=st.floats(-2, 2)).filter(lambda a: np.linalg.norm(a) > 1e-3),
       arrays(np.float64, (1, 5), elements=st.floats(-2, 2)))
def test_normalize_gradient_is_orthogonal_to_unit_row(row, weights):
    u = row / np.linalg.norm(row)
    g = grad_of(lambda x: T.sum(T.mul(T.l2_normalize_rows(x), weights)), u)
    assert abs((g @ u.T).item()) < 1e-10


# -- log_sum_exp_rows --

def test_lse_examples():
    np.testing.assert_allclose(T.log_sum_exp_rows([[0.0, 0.0]]).numpy(), [[math.log(2)]], rtol=1e-15)
    assert T.log_sum_exp_rows([[5.0]]).item() == 5.0
    np.testing.assert_allclose(T.log_sum_exp_rows([[1000.0, 1000.0]]).numpy(), [[1000 + math.log(2)]], rtol=1e-15)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-500, 500)))
def test_lse_bounds(x):
    out = T.log_sum_exp_rows(x).numpy()[:, 0]
    top = x.max(axis=1)
    assert np.all(np.isfinite(out))
    assert np.all(out >= top)
    assert np.all(out <= top + math.log(x.shape[1]) + 1e-12)


# -- backward --

def test_backward_sum():
    np.testing.assert_array_equal(grad_of(T.sum, np.array([[1.0, 2.0, 3.0]])), [[1, 1, 1]])


def test_backward_dot():
    g = grad_of(lambda x: T.sum(T.mul(x, x)), np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(g, [[2, 4]])


def test_backward_fan_out_accumulates():
    g = grad_of(lambda x: T.sum(T.add(T.mul(x, x), T.scale(x, 3.0))), np.array([[2.0]]))
    assert g[0, 0] == 7.0


def test_backward_root_seed_is_one():
    tape = GradientTape()
    x = tape.watch(np.array([[2.0]]))
    grads = backward(tape, x)
    assert grads[x.node][0, 0] == 1.0


def test_backward_rejects_non_scalar_root():
    tape = GradientTape()
    x = tape.watch(np.ones((2, 2)))
    with pytest.raises(ValueError):
        backward(tape, T.scale(x, 2.0))


def test_constants_are_not_on_tape():
    tape = GradientTape()
    x = tape.watch(np.ones((1, 2)))
    c = constant([[1.0, 2.0]])
    assert not c.on_tape
    assert T.add(x, c).on_tape


def test_stop_gradient_blocks():
    g = grad_of(lambda x: T.sum(T.mul(T.stop_gradient(x), x)), np.array([[3.0]]))
    assert g[0, 0] == 3.0


def test_absolute_subgradient_zero_at_zero():
    g = grad_of(lambda x: T.sum(T.absolute(x)), np.array([[0.0, -2.0, 2.0]]))
    np.testing.assert_array_equal(g, [[0, -1, 1]])


def test_tensor_data_is_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_gather_rows_out_of_range():
    with pytest.raises(IndexError):
        T.gather_rows(np.ones((2, 2)), [2])


def test_gather_rows_gradient_accumulates_repeats():
    g = grad_of(lambda x: T.sum(T.gather_rows(x, [0, 0, 1])), np.ones((3, 2)))
    np.testing.assert_array_equal(g, [[2, 2], [1, 1], [0, 0]])


# -- finite differences --

def test_fd_square():
    res = finite_diff_check(lambda x: T.sum(T.mul(x, x)), np.array([[3.0]]), h=1e-4)
    assert abs(res.numeric[0, 0] - 6.0) < 1e-6


def test_fd_sum_is_one():
    res = finite_diff_check(T.sum, np.random.default_rng(0).uniform(-2, 2, (2, 3)))
    np.testing.assert_allclose(res.numeric, 1.0, atol=1e-9)


def _row_col(rng, shape):
    return rng.uniform(-2, 2, shape)


# each op is checked on [-2, 2] inputs over 100 seeds; the reduction to a scalar
# goes through fixed random weights so every output element matters
UNARY_OPS = {
    "relu": T.relu,
    "exp": T.exp,
    "log": lambda x: T.log(T.add(T.mul(x, x), 0.5)),
    "sqrt": lambda x: T.sqrt(T.add(T.mul(x, x), 0.5)),
    "absolute": T.absolute,
    "scale": lambda x: T.scale(x, -1.7),
    "neg": T.neg,
    "transpose": lambda x: T.transpose(x),
    "mean_axis0": lambda x: T.mean(x, axis=0, keepdims=True),
    "sum_axis1": lambda x: T.sum(x, axis=1, keepdims=True),
    "normalize_rows": T.l2_normalize_rows,
    "normalize_cols": T.l2_normalize_cols,
    "lse_rows": T.log_sum_exp_rows,
    "gather_rows": lambda x: T.gather_rows(x, [2, 0, 2, 1]),
    "matmul_left": lambda x: T.matmul(x, np.linspace(-1, 1, 12).reshape(4, 3)),
    "mul_row": lambda x: T.mul(x, np.linspace(-1, 1, 4).reshape(1, 4)),
    "div_col": lambda x: T.div(np.linspace(-1, 1, 3).reshape(3, 1) + 2.5, T.add(T.mul(x, x), 1.0)),
    "sub_self": lambda x: T.sub(x, T.mean(x, axis=1, keepdims=True)),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_op_gradients_match_finite_differences(name):
    op = UNARY_OPS[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = _row_col(rng, (3, 4))
        if name in ("relu", "absolute"):
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep off the kink
        probe = rng.uniform(-1, 1, op(x).shape)
        res = finite_diff_check(lambda t: T.sum(T.mul(op(t), probe)), x)
        worst = max(worst, res.max_rel_error)
    assert worst < 1e-5


def test_binary_ops_gradients_for_both_inputs():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(0.5, 2, (3, 4))
        for op in (T.add, T.sub, T.mul, T.div):
            ra = finite_diff_check(lambda t: T.sum(op(t, b)), a)
            rb = finite_diff_check(lambda t: T.sum(op(a, t)), b)
            assert ra.max_rel_error < 1e-5 and rb.max_rel_error < 1e-5, (seed, op.__name__)
