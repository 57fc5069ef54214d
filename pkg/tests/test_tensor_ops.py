import numpy as np
import pytest

from fuseunet.errors import ConfigError, NumericError, ShapeError
from fuseunet.tensor import (
    Tape,
    Tensor,
    backward,
    clip,
    concat,
    conv2d,
    conv_transpose2d,
    div,
    exp,
    finite_diff_check,
    instance_norm,
    leaky_relu,
    log,
    matmul,
    maximum,
    mean,
    mul,
    narrow,
    no_grad,
    parameter,
    power,
    relu,
    reshape,
    softmax,
    sub,
    sum_,
    transpose,
)

from reference import conv2d_reference, conv_transpose2d_reference, softmax_reference


def rand_t(rng, shape, dtype=np.float64, requires_grad=True, lo=-1.0, hi=1.0):
    data = rng.uniform(lo, hi, size=shape).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_all_ones_single_window():
    x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    y = conv2d(x, w, stride=1, padding=0)
    assert y.shape == (1, 1, 1, 1)
    assert y.item() == pytest.approx(9.0)


def test_conv2d_output_size_formula():
    x = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((1, 1, 3, 3), dtype=np.float32))
    y = conv2d(x, w, stride=2, padding=1)
    assert y.shape == (1, 1, 2, 2)


def test_conv2d_dilated_matches_nested_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=2, dilation=2).data
    want = conv2d_reference(x, w, b, stride=1, padding=2, dilation=2)
    rel = np.abs(got - want).max() / np.abs(want).max()
    assert rel < 1e-5


@pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (3, 1, 1)])
def test_conv2d_random_configs_match_oracle(stride, padding, dilation):
    rng = np.random.default_rng(stride * 100 + padding * 10 + dilation)
    x = rng.standard_normal((2, 2, 9, 9)).astype(np.float64)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float64)
    got = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding, dilation=dilation).data
    want = conv2d_reference(x, w, None, stride=stride, padding=padding, dilation=dilation)
    assert np.abs(got - want).max() < 1e-9


def test_conv2d_channel_mismatch_rejected():
    x = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
    w = Tensor(np.zeros((1, 3, 3, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        conv2d(x, w)


def test_conv2d_window_must_fit():
    x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
    w = Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
    with pytest.raises(ConfigError):
        conv2d(x, w, padding=0)


# ---------------------------------------------------------------------------
# conv_transpose2d


def test_conv_transpose_disjoint_windows():
    x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    w_data = np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2)
    y = conv_transpose2d(x, Tensor(w_data), stride=2, padding=0)
    assert y.shape == (1, 1, 4, 4)
    for bh in range(2):
        for bw in range(2):
            block = y.data[0, 0, 2 * bh : 2 * bh + 2, 2 * bw : 2 * bw + 2]
            assert np.array_equal(block, w_data[0, 0])


def test_conv_transpose_matches_scatter_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float64)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float64)
    b = rng.standard_normal(2).astype(np.float64)
    got = conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    want = conv_transpose2d_reference(x, w, b, stride=2, padding=1)
    assert np.abs(got - want).max() < 1e-9


def test_conv_transpose_upsamples_half_grid_to_full():
    x = Tensor(np.zeros((1, 4, 16, 16), dtype=np.float32))
    w = Tensor(np.zeros((4, 4, 2, 2), dtype=np.float32))
    y = conv_transpose2d(x, w, stride=2, padding=0)
    assert y.shape == (1, 4, 32, 32)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-9)])
def test_conv_adjoint_identity(dtype, tol):
    # <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> with the same weight tensor
    rng = np.random.default_rng(3)
    # (stride, padding, k, H) chosen so (Ho-1)*stride - 2*padding + k == H
    for stride, padding, k, H in [(1, 0, 3, 8), (1, 1, 3, 8), (2, 1, 3, 7), (2, 0, 2, 8)]:
        x = rng.standard_normal((2, 3, H, H)).astype(dtype)
        w = rng.standard_normal((4, 3, k, k)).astype(dtype)
        fwd = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        y = rng.standard_normal(fwd.shape).astype(dtype)
        lhs = float((fwd.astype(np.float64) * y.astype(np.float64)).sum())
        adj = conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=padding).data
        rhs = float((x.astype(np.float64) * adj.astype(np.float64)).sum())
        assert abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1e-12) < tol


# ---------------------------------------------------------------------------
# elementwise


def test_elementwise_max_values():
    a = Tensor(np.array([1.0, 5.0, 3.0]))
    b = Tensor(np.array([4.0, 2.0, 3.0]))
    assert np.array_equal(maximum(a, b).data, [4.0, 5.0, 3.0])


def test_max_tie_routes_gradient_to_first_operand():
    data = np.array([1.0, -2.0, 0.5])
    a = parameter(data.copy())
    b = parameter(data.copy())
    with Tape():
        out = sum_(maximum(a, b))
        backward(out)
    assert np.array_equal(a.grad, np.ones(3))
    assert np.array_equal(b.grad, np.zeros(3))


def test_mul_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = parameter(rng.uniform(0.5, 1.5, size=(4,)), dtype=np.float64)
    y = Tensor(rng.uniform(0.5, 1.5, size=(4,)).astype(np.float64))
    err = finite_diff_check(lambda: sum_(mul(x, y)), [x], step=1e-4)
    assert err < 1e-8
    with Tape():
        loss = sum_(mul(x, y))
        backward(loss)
    assert np.allclose(x.grad, y.data)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        mul(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_scalar_broadcast_allowed():
    x = Tensor(np.ones((2, 2)))
    assert np.array_equal((x * 3.0).data, 3 * np.ones((2, 2)))
    assert np.array_equal((1.0 - x).data, np.zeros((2, 2)))


def test_log_of_nonpositive_rejected():
    with pytest.raises(NumericError):
        log(Tensor(np.array([1.0, 0.0])))


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_on_equal_inputs():
    y = softmax(Tensor(np.zeros(3)), axis=0)
    assert np.allclose(y.data, 1.0 / 3.0)


def test_softmax_extreme_inputs_stable():
    y = softmax(Tensor(np.array([1000.0, 0.0])), axis=0)
    assert y.data[0] == pytest.approx(1.0)
    assert y.data[1] == pytest.approx(0.0, abs=1e-12)


def test_softmax_matches_high_precision_oracle():
    rng = np.random.default_rng(13)
    v = rng.standard_normal(5).astype(np.float32)
    got = softmax(Tensor(v), axis=0).data
    want = softmax_reference(v)
    assert np.abs(got - want).max() < 1e-6


def test_softmax_rows_sum_to_one_and_permutation_equivariant():
    rng = np.random.default_rng(17)
    v = rng.standard_normal((6, 9))
    y = softmax(Tensor(v), axis=1).data
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-6)
    perm = rng.permutation(9)
    y_perm = softmax(Tensor(v[:, perm]), axis=1).data
    assert np.allclose(y_perm, y[:, perm], atol=1e-7)


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_of_sum_is_ones():
    x = parameter(np.arange(6, dtype=np.float64).reshape(2, 3))
    with Tape():
        backward(sum_(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_sum_of_squares():
    x = parameter(np.array([1.0, 2.0, 3.0]))
    with Tape():
        backward(sum_(mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_repeated_backward_accumulates():
    x = parameter(np.array([1.0, 2.0]))
    with Tape():
        loss = sum_(mul(x, x))
        backward(loss)
        backward(loss)
    assert np.allclose(x.grad, [4.0, 8.0])


def test_backward_off_tape_rejected():
    x = parameter(np.array([1.0]))
    with pytest.raises(ConfigError):
        backward(x)
    with Tape():
        y = sum_(mul(x, x))
    with Tape():
        with pytest.raises(ConfigError):
            backward(y)


def test_backward_requires_scalar():
    x = parameter(np.ones(3))
    with Tape():
        y = mul(x, x)
        with pytest.raises(ConfigError):
            backward(y)


def test_no_grad_suppresses_recording():
    x = parameter(np.ones(3))
    with Tape() as tape:
        with no_grad():
            y = mul(x, x)
        assert len(tape) == 0
        assert not y.requires_grad


def test_tape_replay_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = parameter(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        w = parameter(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        with Tape():
            y = relu(conv2d(x, w, stride=1, padding=1))
            backward(sum_(mul(y, y)))
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


# ---------------------------------------------------------------------------
# finite-difference oracle


def test_finite_diff_exact_for_quadratic():
    rng = np.random.default_rng(23)
    x = parameter(rng.standard_normal(5), dtype=np.float64)
    a = Tensor(rng.standard_normal(5).astype(np.float64))
    err = finite_diff_check(lambda: sum_(mul(mul(x, x), a)), [x], step=1e-5)
    assert err < 1e-8


def test_finite_diff_conv_relu_composite():
    rng = np.random.default_rng(29)
    x = parameter(rng.standard_normal((1, 2, 6, 6)) + 0.1, dtype=np.float64)
    w = parameter(0.3 * rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
    b = parameter(0.1 * rng.standard_normal(3), dtype=np.float64)
    proj = Tensor(rng.standard_normal((1, 3, 6, 6)).astype(np.float64))

    def f():
        return sum_(mul(relu(conv2d(x, w, b, stride=1, padding=1)), proj))

    assert finite_diff_check(f, [x, w, b], step=1e-5) < 1e-4


PRIMITIVE_CASES = [
    "add", "sub", "mul", "div", "maximum", "relu", "leaky_relu", "exp", "log",
    "power", "clip", "softmax", "sum", "mean", "reshape", "transpose",
    "concat", "narrow", "matmul2d", "matmul3d", "instance_norm",
    "conv2d", "conv_transpose2d",
]


@pytest.mark.parametrize("case", PRIMITIVE_CASES)
def test_primitive_backward_matches_finite_differences(case):
    rng = np.random.default_rng(hash(case) % 2**32)
    proj = lambda shape: Tensor(rng.standard_normal(shape).astype(np.float64))

    if case in ("add", "sub", "mul", "div", "maximum"):
        a = parameter(rng.uniform(0.5, 1.5, (3, 4)), dtype=np.float64)
        b = parameter(rng.uniform(1.6, 2.5, (3, 4)), dtype=np.float64)  # separated: no ties
        op = {"add": lambda: a + b, "sub": lambda: sub(a, b), "mul": lambda: a * b,
              "div": lambda: div(a, b), "maximum": lambda: maximum(a, b)}[case]
        p = proj((3, 4))
        f = lambda: sum_(op() * p)
        wrt = [a, b]
    elif case in ("relu", "leaky_relu", "exp", "log", "power", "clip"):
        x = parameter(rng.uniform(0.2, 1.2, (3, 4)), dtype=np.float64)
        op = {"relu": lambda: relu(x), "leaky_relu": lambda: leaky_relu(x, 0.2),
              "exp": lambda: exp(x), "log": lambda: log(x),
              "power": lambda: power(x, 1.7), "clip": lambda: clip(x, 0.0, 2.0)}[case]
        p = proj((3, 4))
        f = lambda: sum_(op() * p)
        wrt = [x]
    elif case == "softmax":
        x = parameter(rng.standard_normal((2, 5)), dtype=np.float64)
        p = proj((2, 5))
        f = lambda: sum_(softmax(x, axis=1) * p)
        wrt = [x]
    elif case in ("sum", "mean"):
        x = parameter(rng.standard_normal((2, 3, 4)), dtype=np.float64)
        red = sum_ if case == "sum" else mean
        p = proj((2, 4))
        f = lambda: sum_(red(x, axis=1) * p)
        wrt = [x]
    elif case == "reshape":
        x = parameter(rng.standard_normal((2, 6)), dtype=np.float64)
        p = proj((3, 4))
        f = lambda: sum_(reshape(x, (3, 4)) * p)
        wrt = [x]
    elif case == "transpose":
        x = parameter(rng.standard_normal((2, 3, 4)), dtype=np.float64)
        p = proj((4, 2, 3))
        f = lambda: sum_(transpose(x, (2, 0, 1)) * p)
        wrt = [x]
    elif case == "concat":
        a = parameter(rng.standard_normal((2, 3)), dtype=np.float64)
        b = parameter(rng.standard_normal((2, 2)), dtype=np.float64)
        p = proj((2, 5))
        f = lambda: sum_(concat([a, b], axis=1) * p)
        wrt = [a, b]
    elif case == "narrow":
        x = parameter(rng.standard_normal((2, 6)), dtype=np.float64)
        p = proj((2, 3))
        f = lambda: sum_(narrow(x, 1, 2, 3) * p)
        wrt = [x]
    elif case == "matmul2d":
        a = parameter(rng.standard_normal((3, 4)), dtype=np.float64)
        b = parameter(rng.standard_normal((4, 2)), dtype=np.float64)
        p = proj((3, 2))
        f = lambda: sum_(matmul(a, b) * p)
        wrt = [a, b]
    elif case == "matmul3d":
        a = parameter(rng.standard_normal((2, 3, 4)), dtype=np.float64)
        b = parameter(rng.standard_normal((2, 4, 2)), dtype=np.float64)
        p = proj((2, 3, 2))
        f = lambda: sum_(matmul(a, b) * p)
        wrt = [a, b]
    elif case == "instance_norm":
        x = parameter(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
        gamma = parameter(rng.uniform(0.5, 1.5, 3), dtype=np.float64)
        beta = parameter(rng.standard_normal(3), dtype=np.float64)
        p = proj((2, 3, 4, 4))
        f = lambda: sum_(instance_norm(x, gamma, beta) * p)
        wrt = [x, gamma, beta]
    elif case == "conv2d":
        x = parameter(rng.standard_normal((2, 2, 5, 5)), dtype=np.float64)
        w = parameter(0.4 * rng.standard_normal((3, 2, 3, 3)), dtype=np.float64)
        b = parameter(0.1 * rng.standard_normal(3), dtype=np.float64)
        p = proj((2, 3, 3, 3))
        f = lambda: sum_(conv2d(x, w, b, stride=2, padding=1, dilation=1) * p)
        wrt = [x, w, b]
    else:  # conv_transpose2d
        x = parameter(rng.standard_normal((2, 3, 4, 4)), dtype=np.float64)
        w = parameter(0.4 * rng.standard_normal((3, 2, 2, 2)), dtype=np.float64)
        b = parameter(0.1 * rng.standard_normal(2), dtype=np.float64)
        p = proj((2, 2, 8, 8))
        f = lambda: sum_(conv_transpose2d(x, w, b, stride=2, padding=0) * p)
        wrt = [x, w, b]

    assert finite_diff_check(f, wrt, step=1e-6) < 1e-6


def test_nonfinite_forward_rejected():
    x = Tensor(np.array([800.0, 0.0]))
    with pytest.raises(NumericError):
        exp(exp(x))
