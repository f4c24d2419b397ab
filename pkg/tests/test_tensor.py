import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gstuda.tensor import (NonFiniteError, Tensor, backward, clamp, concat_channels, conv2d, dropout, exp,
                           finite_diff_grad, nearest_upsample2x, relu, sgd_step, square, tsum)

f64 = np.float64


def leaf(a):
    return Tensor(np.asarray(a, dtype=f64), requires_grad=True)


def grad_of(build, x0):
    x = leaf(x0)
    loss = build(x)
    backward(loss)
    return x.grad


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((1, 5, 7))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_hand_sum():
    x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1)
    assert out.data.item() == 10.0


def test_conv_zero_kernel():
    x = Tensor(np.random.default_rng(1).random((3, 6, 6)))
    out = conv2d(x, Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros(2)), padding=1)
    assert not out.data.any()


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((3, 2, 4, 4))
    b = rng.standard_normal(3)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 4, 2 * j:2 * j + 4] * k[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ValueError):
        # 3x3 stride 2 pad 1 on 4x4 does not tile exactly
        conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)),
               stride=2, padding=1)


def test_conv_linearity():
    rng = np.random.default_rng(3)
    k, b0 = Tensor(rng.standard_normal((2, 1, 3, 3))), Tensor(np.zeros(2))
    x1, x2 = rng.standard_normal((1, 8, 8)), rng.standard_normal((1, 8, 8))
    lhs = conv2d(Tensor(2 * x1 + 3 * x2), k, b0, padding=1).data
    rhs = 2 * conv2d(Tensor(x1), k, b0, padding=1).data + 3 * conv2d(Tensor(x2), k, b0, padding=1).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-4, atol=1e-4)


# ---------------------------------------------------------------- pointwise ops

def test_relu_examples():
    np.testing.assert_array_equal(relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    assert not relu(Tensor(-np.ones(4))).data.any()
    x = np.arange(1.0, 5.0)
    np.testing.assert_array_equal(relu(Tensor(x)).data, x)


def test_relu_subgradient_at_zero():
    g = grad_of(lambda x: tsum(relu(x)), [0.0, 1.0, -1.0])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_dropout_identity_cases():
    x = Tensor(np.random.default_rng(0).random(50))
    assert dropout(x, 0.0, True, np.random.default_rng(1)) is x
    assert dropout(x, 0.5, False, None) is x
    with pytest.raises(ValueError):
        dropout(x, 1.0, True, np.random.default_rng(1))


def test_dropout_mean_law_of_large_numbers():
    out = dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(0)).data
    assert 0.98 <= out.mean() <= 1.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_seeded():
    x = Tensor(np.ones(1000))
    a = dropout(x, 0.3, True, np.random.default_rng(7)).data
    b = dropout(x, 0.3, True, np.random.default_rng(7)).data
    c = dropout(x, 0.3, True, np.random.default_rng(8)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_upsample_examples():
    np.testing.assert_array_equal(nearest_upsample2x(Tensor(np.full((1, 1, 1), 5.0))).data, np.full((1, 2, 2), 5.0))
    out = nearest_upsample2x(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))).data
    np.testing.assert_array_equal(out[0], np.kron([[1, 2], [3, 4]], np.ones((2, 2))))
    g = grad_of(lambda x: tsum(nearest_upsample2x(x)), np.zeros((2, 3, 3)))
    np.testing.assert_array_equal(g, np.full((2, 3, 3), 4.0))


def test_concat_examples():
    out = concat_channels(Tensor(np.ones((1, 1, 1))), Tensor(np.full((1, 1, 1), 2.0)))
    assert out.shape == (2, 1, 1)
    np.testing.assert_array_equal(out.data.ravel(), [1, 2])
    a = Tensor(np.random.default_rng(0).random((3, 2, 2)))
    np.testing.assert_array_equal(concat_channels(a, Tensor(np.zeros((0, 2, 2)))).data, a.data)


def test_concat_backward_split():
    a, b = leaf(np.zeros((1, 2, 2))), leaf(np.zeros((2, 2, 2)))
    w = np.arange(12.0).reshape(3, 2, 2)
    backward(tsum(concat_channels(a, b) * w))
    np.testing.assert_array_equal(a.grad, w[:1])
    np.testing.assert_array_equal(b.grad, w[1:])


# ---------------------------------------------------------------- backward

def test_backward_sum_and_square():
    np.testing.assert_array_equal(grad_of(tsum, [3.0, -1.0]), [1.0, 1.0])
    np.testing.assert_array_equal(grad_of(lambda p: tsum(square(p)), [1.0, -2.0]), [2.0, -4.0])


def test_backward_accumulates_two_uses():
    g = grad_of(lambda x: tsum(x * x + x), [1.5, -2.0])
    np.testing.assert_allclose(g, [4.0, -3.0])


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        backward(leaf([1.0, 2.0]) * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        exp(leaf([1000.0]))


def test_clamp_gradient_masked_outside():
    g = grad_of(lambda x: tsum(clamp(x, -1.0, 1.0)), [-2.0, 0.5, 3.0])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


# ---------------------------------------------------------------- finite differences

def test_finite_diff_examples():
    np.testing.assert_array_equal(finite_diff_grad(np.sum, np.zeros(4)), np.ones(4))
    assert abs(finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]))[0] - 6.0) < 1e-6
    assert abs(finite_diff_grad(lambda x: float(np.sin(x[0])), np.array([0.0]))[0] - 1.0) < 1e-8


def _check_primitive(build, shape, seed, positive=False):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0.1, 1.0, shape) if positive else rng.standard_normal(shape)
    weights = rng.standard_normal(build(Tensor(x0)).shape)

    def f(x):
        return tsum(build(Tensor(x)) * weights).item()

    analytic = grad_of(lambda x: tsum(build(x) * weights), x0)
    assert rel_err(analytic, finite_diff_grad(f, x0)) < 1e-3


PRIMITIVES = {
    "add": (lambda x: x + x * 0.3, (3, 4), False),
    "sub": (lambda x: 2.0 - x, (5,), False),
    "mul": (lambda x: x * x, (2, 3), False),
    "square": (square, (6,), False),
    "exp": (exp, (6,), False),
    "clamp": (lambda x: clamp(x * 3.0, -1.0, 1.0), (8,), False),
    "relu": (relu, (8,), False),
    "upsample": (nearest_upsample2x, (2, 3, 3), False),
    "concat": (lambda x: concat_channels(x, x * 2.0), (2, 2, 2), False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients(name, seed):
    build, shape, positive = PRIMITIVES[name]
    _check_primitive(build, shape, seed, positive)


@pytest.mark.parametrize("seed", range(20))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((2, 2, 6, 6))
    k0 = rng.standard_normal((3, 2, 4, 4))
    b0 = rng.standard_normal(3)
    w = rng.standard_normal((2, 3, 3, 3))

    def loss(x, k, b):
        return tsum(conv2d(x, k, b, stride=2, padding=1) * w)

    x, k, b = leaf(x0), leaf(k0), leaf(b0)
    backward(loss(x, k, b))
    assert rel_err(x.grad, finite_diff_grad(lambda v: loss(Tensor(v), Tensor(k0), Tensor(b0)).item(), x0)) < 1e-3
    assert rel_err(k.grad, finite_diff_grad(lambda v: loss(Tensor(x0), Tensor(v), Tensor(b0)).item(), k0)) < 1e-3
    assert rel_err(b.grad, finite_diff_grad(lambda v: loss(Tensor(x0), Tensor(k0), Tensor(v)).item(), b0)) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_dropout_gradient_fixed_mask(seed):
    x0 = np.random.default_rng(seed).standard_normal(30)

    def run(x):
        return tsum(dropout(x, 0.4, True, np.random.default_rng(seed)) * 1.7)

    analytic = grad_of(run, x0)
    assert rel_err(analytic, finite_diff_grad(lambda v: run(Tensor(v)).item(), x0)) < 1e-3


# ---------------------------------------------------------------- sgd

def test_sgd_examples():
    p = leaf([1.0])
    sgd_step({"p": p}, 0.1, {"p": np.array([1.0])})
    np.testing.assert_allclose(p.data, [0.9])
    q = leaf([1.0, 2.0])
    sgd_step({"q": q}, 0.1, {"q": np.zeros(2)})
    np.testing.assert_array_equal(q.data, [1.0, 2.0])


def test_sgd_two_steps_on_square():
    p = leaf([1.0])
    trace = [p.data.item()]
    for _ in range(2):
        p.grad = None
        backward(tsum(square(p)))
        sgd_step({"p": p}, 0.5)
        trace.append(p.data.item())
    assert trace == [1.0, 0.0, 0.0]


def test_sgd_rejects_non_finite_without_partial_update():
    a, b = leaf([1.0]), leaf([2.0])
    with pytest.raises(NonFiniteError):
        sgd_step({"a": a, "b": b}, 0.1, {"a": np.array([1.0]), "b": np.array([np.nan])})
    assert a.data.item() == 1.0 and b.data.item() == 2.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(1e-3, 1.0))
def test_sgd_is_plain_descent(values, lr):
    p = leaf(values)
    g = np.sin(np.arange(len(values), dtype=f64))
    sgd_step({"p": p}, lr, {"p": g})
    np.testing.assert_allclose(p.data, np.asarray(values) - lr * g)
