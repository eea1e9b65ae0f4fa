import numpy as np
import pytest

from fedseg.tensor import (
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    concat,
    layernorm,
    linear,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    sub,
    sum_all,
    sum_axes,
    transpose,
)
from helpers import naive_matmul


def test_add_vectors():
    out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_mul_by_zero_scalar_and_grad():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with Tape():
        y = mul(x, 0.0)
        loss = sum_all(y)
        backward(loss)
    assert np.array_equal(y.data, [0.0, 0.0])
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_relu_negative_and_subgradient_at_zero():
    x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
    with Tape():
        loss = sum_all(relu(x))
        backward(loss)
    assert np.array_equal(relu(x).data, [0.0, 0.0, 3.0])
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_sub_backward_signs():
    a = Tensor([5.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = sum_all(sub(a, b))
        backward(loss)
    assert a.grad[0] == 1.0 and b.grad[0] == -1.0


def test_linear_identity_and_hand_case():
    x = Tensor([[1.0, 2.0]])
    w_id = Tensor(np.eye(2))
    assert np.array_equal(linear(x, w_id).data, [[1.0, 2.0]])
    out = linear(x, w_id, Tensor([1.0, 1.0]))
    assert np.array_equal(out.data, [[2.0, 3.0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((3, 5))
    b = rng.standard_normal((5, 4))
    got = matmul(Tensor(a), Tensor(b)).data
    assert np.allclose(got, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_softmax_uniform_and_overflow():
    assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=0).data, 0.25)
    y = softmax(Tensor([1000.0, 0.0]), axis=0).data
    assert np.isfinite(y).all()
    assert y[0] > 1 - 1e-12 and y[1] < 1e-12


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((6, 9)) * 10
    y = softmax(Tensor(x), axis=1).data
    assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12


def test_log_softmax_exp_consistency():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 7)) * 5
    ls = log_softmax(Tensor(x), axis=1).data
    sm = softmax(Tensor(x), axis=1).data
    assert np.abs(np.exp(ls) - sm).max() < 1e-10


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        softmax(Tensor([np.inf, 0.0]), axis=0)


def test_reshape_transpose_roundtrip():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    with Tape():
        y = transpose(reshape(x, (6, 4)), (1, 0))
        loss = sum_all(y)
        backward(loss)
    assert y.data.shape == (4, 6)
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_concat_backward_splits():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 5)), requires_grad=True)
    with Tape():
        y = concat([a, b], axis=1)
        loss = sum_all(mul(y, 2.0))
        backward(loss)
    assert y.data.shape == (2, 8)
    assert np.array_equal(a.grad, np.full((2, 3), 2.0))
    assert np.array_equal(b.grad, np.full((2, 5), 2.0))


def test_concat_incompatible():
    with pytest.raises(ValueError, match="incompatible"):
        concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_sum_axes_matches_numpy():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 4, 3, 3, 3))
    got = sum_axes(Tensor(x), (0, 2, 3, 4)).data
    assert np.allclose(got, x.sum(axis=(0, 2, 3, 4)), atol=0, rtol=0)


def test_add_bias_trailing_dims():
    x = Tensor(np.zeros((3, 2, 4)), requires_grad=True)
    b = Tensor(np.arange(8, dtype=float).reshape(2, 4), requires_grad=True)
    with Tape():
        y = add_bias(x, b)
        loss = sum_all(y)
        backward(loss)
    assert np.array_equal(y.data[1], b.data)
    assert np.array_equal(b.grad, np.full((2, 4), 3.0))
    with pytest.raises(ValueError, match="trailing"):
        add_bias(x, Tensor(np.zeros((4, 2))))


def test_layernorm_normalizes_last_axis():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 16)) * 3 + 1)
    g = Tensor(np.ones(16))
    b = Tensor(np.zeros(16))
    y = layernorm(x, g, b, eps=1e-10).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-9
    assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-6


def test_gradient_accumulates_when_tensor_reused():
    x = Tensor([2.0], requires_grad=True)
    with Tape():
        y = add(mul(x, 3.0), mul(x, 4.0))
        backward(sum_all(y))
    assert x.grad[0] == 7.0
