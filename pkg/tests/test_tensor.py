import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kgfusion import tensor as T
from kgfusion.tensor import GradientCheckError, grad_check


def _p(rng, *shape):
    return T.tensor(rng.normal(size=shape), requires_grad=True)


def test_softmax_examples():
    y = T.softmax(T.tensor([0.0, 0.0])).data
    assert np.allclose(y, [0.5, 0.5])
    y = T.softmax(T.tensor([1000.0, 0.0])).data
    assert np.isfinite(y).all() and y[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        T.softmax(T.tensor(np.zeros((2, 0))))
    assert np.allclose(T.softmax(T.tensor([100.0, 0.0, 0.0])).data, [1, 0, 0], atol=1e-6)
    x = np.array([0.3, -1.2, 2.0])
    assert np.allclose(T.softmax(T.tensor(x + 7.5)).data, T.softmax(T.tensor(x)).data)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(3, 5))
    assert np.allclose(T.log_softmax(T.tensor(x)).data, np.log(T.softmax(T.tensor(x)).data))


def test_layer_norm_constant_row_maps_to_beta():
    x = T.tensor(np.full((2, 4), 3.0))
    y = T.layer_norm(x, T.tensor(np.ones(4)), T.tensor(np.arange(4.0)))
    assert np.allclose(y.data, np.arange(4.0))
    with pytest.raises(ValueError):
        T.layer_norm(x, T.tensor(np.ones(3)), T.tensor(np.zeros(4)))


def test_layer_norm_moments(rng):
    y = T.layer_norm(T.tensor(rng.normal(3.0, 5.0, size=(4, 16))), T.tensor(np.ones(16)), T.tensor(np.zeros(16)))
    assert np.allclose(y.data.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(y.data.var(axis=-1), 1.0, atol=1e-4)
    zero = T.layer_norm(T.tensor(np.zeros((1, 4))), T.tensor(np.ones(4)), T.tensor(np.zeros(4)))
    assert np.isfinite(zero.data).all()


def test_cross_entropy_batch_mean(rng):
    row = rng.normal(size=(1, 5))
    single = T.cross_entropy_loss(T.tensor(row), [2]).item()
    assert T.cross_entropy_loss(T.tensor(np.repeat(row, 2, axis=0)), [2, 2]).item() == pytest.approx(single)
    losses = [T.cross_entropy_loss(T.tensor([[z, 0.0, 0.0]]), [0]).item() for z in (0.0, 2.0, 10.0, 40.0)]
    assert all(a > b for a, b in zip(losses, losses[1:])) and losses[-1] < 1e-15


def test_backward_of_sum_is_sum_of_backwards(rng):
    x = T.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = rng.normal(size=(3, 4))
    f = lambda: (T.tanh(x) * w).sum()
    g = lambda: (T.exp(x * 0.1)).sum()
    f().backward()
    gf = x.grad.copy()
    x.zero_grad()
    g().backward()
    gg = x.grad.copy()
    x.zero_grad()
    (f() + g()).backward()
    assert np.allclose(x.grad, gf + gg, atol=1e-12)


def test_cross_entropy_uniform_is_log_c():
    loss = T.cross_entropy_loss(T.tensor(np.zeros((4, 7))), [0, 1, 2, 6])
    assert loss.item() == pytest.approx(math.log(7))
    with pytest.raises(ValueError):
        T.cross_entropy_loss(T.tensor(np.zeros((2, 3))), [0, 3])


def test_bce_zero_logits_is_log_two():
    loss = T.bce_with_logits(T.tensor(np.zeros((2, 3))), np.ones((2, 3)))
    assert loss.item() == pytest.approx(math.log(2))


def test_square_sum_gradient():
    x = T.tensor([1.0, -2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, -4.0, 6.0])
    assert grad_check(lambda: (x * x).sum(), [x]) < 1e-8


def test_backward_twice_accumulates():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    y.backward()
    y.backward()
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_backward_requires_grad_and_scalar():
    with pytest.raises(RuntimeError):
        T.tensor([1.0]).sum().backward()
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(RuntimeError):
        (x * 2.0).backward()


def test_shared_subexpression_gradient():
    x = T.tensor([3.0], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    assert np.allclose(x.grad, [2 * 3.0 + 3 * 9.0])


def test_grad_check_flags_wrong_gradient():
    x = T.tensor([1.0, 2.0], requires_grad=True)

    def broken():
        # forward is x^3 but the recorded derivative is that of x^2
        return T.Tensor._make(x.data**3, (x,), lambda g: (g * 2 * x.data,)).sum()

    with pytest.raises(GradientCheckError):
        grad_check(broken, [x], tolerance=1e-4)


OPS = {
    "add_broadcast": lambda a, b: (a + b[0]).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "matmul": lambda a, b: (a @ T.transpose(b)).sum(),
    "relu": lambda a, b: (T.relu(a) * b).sum(),
    "gelu": lambda a, b: (T.gelu(a) * b).sum(),
    "tanh": lambda a, b: (T.tanh(a) * b).sum(),
    "exp": lambda a, b: (T.exp(a) * b).sum(),
    "log": lambda a, b: (T.log(a * a + 1.0) * b).sum(),
    "softmax": lambda a, b: (T.softmax(a, axis=-1) * b).sum(),
    "log_softmax": lambda a, b: (T.log_softmax(a, axis=0) * b).sum(),
    "layer_norm": lambda a, b: (T.layer_norm(a, b[0], b[1]) * a).sum(),
    "stack": lambda a, b: (T.stack([a, b], axis=1) * T.stack([b, a], axis=1)).sum(),
    "getitem": lambda a, b: (a[1:, ::2] * b[:2, ::2]).sum(),
    "reshape_mean": lambda a, b: (T.reshape(a, (12,)) * T.reshape(b, (12,))).mean(),
    "cross_entropy": lambda a, b: T.cross_entropy_loss(a * b, [0, 3, 1]),
    "bce": lambda a, b: T.bce_with_logits(a + b, np.eye(3, 4)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_operation_gradients(name, rng):
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    assert grad_check(lambda: OPS[name](a, b), [a, b]) < 1e-6


def test_embedding_gradient_repeats(rng):
    w = _p(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    assert grad_check(lambda: (T.embedding(w, ids) * T.embedding(w, ids)).sum(), [w]) < 1e-6


def test_batched_matmul_gradient(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    assert grad_check(lambda: T.tanh(a @ b).sum(), [a, b]) < 1e-6


@given(arrays(np.float64, (3,), elements=st.floats(-10, 10)),
       arrays(np.float64, (3,), elements=st.floats(-10, 10)),
       st.floats(-5, 5))
@settings(max_examples=50, deadline=None)
def test_gradient_is_linear_in_output_scale(x0, w, c):
    x = T.tensor(x0, requires_grad=True)
    (T.tanh(x) * w).sum().backward()
    g1 = x.grad.copy()
    x.zero_grad()
    (T.tanh(x) * w * c).sum().backward()
    assert np.allclose(x.grad, c * g1, atol=1e-12)


@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(T.tensor(x)).data
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert (y >= 0).all()


def test_dropout_modes(rng):
    x = T.tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.5, None, training=False) is x
    assert T.dropout(x, 0.0, None, training=True) is x
    with pytest.raises(ValueError):
        T.dropout(x, 0.5, None, training=True)
    y = T.dropout(x, 0.25, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs(y.mean() - 1.0) < 0.05
    y2 = T.dropout(x, 0.25, np.random.default_rng(0), training=True).data
    assert np.array_equal(y, y2)


def test_division_by_tensor_rejected():
    with pytest.raises(TypeError):
        T.tensor([1.0]) / T.tensor([2.0])
