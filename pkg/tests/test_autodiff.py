"""Finite-difference checks for the autodiff primitives."""

import numpy as np
import pytest

from colonmm import autodiff as ad
from colonmm.autodiff import Tensor
from colonmm.errors import ShapeError


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check(op, *shapes, seed=0, scale=0.7):
    rng = np.random.default_rng(seed)
    tensors = [Tensor(rng.normal(0, scale, size=s), requires_grad=True) for s in shapes]
    out = op(*tensors)
    loss = ad.tsum(out * out)
    loss.backward()
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(lambda: float((op(*[Tensor(u.data) for u in tensors]).data ** 2).sum()),
                               t.data)
        np.testing.assert_allclose(analytic, numeric, atol=5e-6, rtol=1e-5)


def test_add_broadcast():
    check(lambda a, b: a + b, (4, 3), (3,))


def test_mul_broadcast():
    check(lambda a, b: a * b, (2, 4, 3), (4, 1))


def test_matmul_batched():
    check(lambda a, b: ad.matmul(a, b), (2, 3, 4), (4, 5))


def test_matmul_both_batched():
    check(lambda a, b: ad.matmul(a, b), (2, 3, 4), (2, 4, 5))


def test_gelu():
    check(ad.gelu, (5, 6))


def test_gelu_matches_erf_formula():
    from scipy.special import erf
    x = np.linspace(-4, 4, 101)
    out = ad.gelu(Tensor(x)).data
    np.testing.assert_allclose(out, 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-15)


def test_log_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(size=(4, 9)) * 5
    out = ad.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_grad():
    check(lambda a: ad.softmax(a, axis=-1), (3, 5))


def test_log_softmax_grad():
    check(lambda a: ad.log_softmax(a, axis=-1), (3, 5))


def test_sum_axis_keepdims():
    check(lambda a: ad.tsum(a, axis=1, keepdims=True), (3, 4, 2))


def test_mean_grad():
    check(lambda a: ad.tmean(a, axis=-1, keepdims=True), (4, 5))


def test_reshape_transpose():
    check(lambda a: ad.transpose(a.reshape((3, 4)), (1, 0)), (12,))


def test_transpose_axes():
    check(lambda a: a.transpose((2, 0, 1)), (2, 3, 4))


def test_getitem_slice():
    check(lambda a: a[1:3, :2], (4, 3))


def test_concat():
    check(lambda a, b: ad.concat([a, b], axis=0), (2, 3), (4, 3))


def test_stack():
    check(lambda a, b: ad.stack([a, b], axis=0), (3, 2), (3, 2))


def test_take_rows():
    idx = np.array([0, 2, 2, 1])
    check(lambda a: ad.take_rows(a, idx), (4, 3))


def test_take_along_last():
    idx = np.array([[0, 3, 2, 1], [4, 0, 1, 2]])
    check(lambda a: ad.take_along_last(a, idx), (2, 4, 5))


def test_power_and_div():
    check(lambda a, b: a / (b * b + 1.0), (3, 3), (3, 3))


def test_backward_requires_scalar():
    t = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (t * 2).backward()


def test_no_graph_without_requires_grad():
    a = Tensor(np.ones((2, 2)))
    out = ad.matmul(a, a) + a
    assert out._parents == ()
