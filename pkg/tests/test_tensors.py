"""Tensor primitives against independent naive-loop oracles (float64)."""

import numpy as np
import pytest

from causadv import tensors
from causadv.tensors import ShapeError


# ---------------------------------------------------------------------------
# Naive oracles: quadruple loops, float64, written independently of the
# production kernels.

def conv2d_oracle(x, kernels, bias, stride, padding):
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    c, h, w = x.shape
    k, _, kh, kw = kernels.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((k, ho, wo))
    for f in range(k):
        for i in range(ho):
            for j in range(wo):
                acc = float(bias[f])
                for ch in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            r = i * stride + a - padding
                            s = j * stride + b - padding
                            if 0 <= r < h and 0 <= s < w:
                                acc += x[ch, r, s] * kernels[f, ch, a, b]
                out[f, i, j] = acc
    return out


def maxpool_oracle(x, window, stride):
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((c, ho, wo))
    arg = np.zeros((c, ho, wo), dtype=np.int64)
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                best = None
                for a in range(window):
                    for b in range(window):
                        r, s = i * stride + a, j * stride + b
                        v = x[ch, r, s]
                        if best is None or v > best[0]:
                            best = (v, r * w + s)
                out[ch, i, j], arg[ch, i, j] = best
    return out, arg


@pytest.mark.parametrize("shape,k,kh,stride,padding", [
    ((1, 5, 5), 2, 3, 1, 0),
    ((3, 16, 16), 4, 3, 1, 1),
    ((2, 8, 8), 3, 2, 2, 0),
    ((3, 9, 9), 1, 3, 3, 0),
])
def test_conv2d_matches_naive_oracle(shape, k, kh, stride, padding):
    rng = np.random.default_rng(hash((shape, k, kh, stride, padding)) % 2**32)
    x = rng.normal(size=shape)
    kernels = rng.normal(size=(k, shape[0], kh, kh))
    bias = rng.normal(size=k)
    got = tensors.conv2d(x, kernels, bias, stride, padding)
    want = conv2d_oracle(x, kernels, bias, stride, padding)
    np.testing.assert_allclose(got, want, atol=1e-6)


@pytest.mark.parametrize("shape,window,stride", [
    ((1, 4, 4), 2, 2),
    ((3, 16, 16), 2, 2),
    ((2, 7, 7), 3, 2),
    ((2, 5, 5), 2, 1),
])
def test_maxpool_matches_naive_oracle(shape, window, stride):
    rng = np.random.default_rng(hash((shape, window, stride)) % 2**32)
    x = rng.normal(size=shape)
    got, got_arg = tensors.maxpool2d(x, window, stride)
    want, want_arg = maxpool_oracle(x, window, stride)
    np.testing.assert_allclose(got, want, atol=1e-6)
    np.testing.assert_array_equal(got_arg, want_arg)


def test_maxpool_ties_resolve_to_smallest_flat_index():
    x = np.ones((1, 2, 2))
    _, arg = tensors.maxpool2d(x, 2, 2)
    assert arg[0, 0, 0] == 0


def test_dense_matches_matmul():
    rng = np.random.default_rng(0)
    x = rng.normal(size=7)
    w = rng.normal(size=(3, 7))
    b = rng.normal(size=3)
    want = np.asarray(w, dtype=np.float64) @ x + b
    np.testing.assert_allclose(tensors.dense(x, w, b), want, atol=1e-6)


def test_conv2d_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 6, 6))
    kernels = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)
    grad_out = rng.normal(size=(2, 3, 6, 6))

    def loss_of_x(xv):
        return float((tensors.conv2d_batch(xv.reshape(x.shape), kernels, bias,
                                           1, 1) * grad_out).sum())

    gx, gw, gb = tensors.conv2d_batch_backward(x, kernels, 1, 1, grad_out)
    fd = tensors.finite_diff_grad(lambda v: loss_of_x(v), x, 1e-5)
    np.testing.assert_allclose(gx, fd, atol=1e-5)

    def loss_of_w(wv):
        return float((tensors.conv2d_batch(x, wv.reshape(kernels.shape), bias,
                                           1, 1) * grad_out).sum())

    fdw = tensors.finite_diff_grad(lambda v: loss_of_w(v), kernels, 1e-5)
    np.testing.assert_allclose(gw, fdw, atol=1e-5)
    np.testing.assert_allclose(gb, grad_out.sum(axis=(0, 2, 3)), atol=1e-9)


def test_maxpool_backward_scatters_to_argmax():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 1, 4, 4))
    out, arg = tensors.maxpool2d_batch(x, 2, 2)
    grad_out = np.ones_like(out)
    gx = tensors.maxpool2d_batch_backward(x.shape, arg, grad_out, overlapping=False)
    assert gx.sum() == pytest.approx(4.0)
    # gradient lands exactly on the max positions
    for ci in range(1):
        for i in range(2):
            for j in range(2):
                flat = arg[0, ci, i, j]
                assert gx[0, ci, flat // 4, flat % 4] == 1.0


def test_maxpool_backward_overlapping_accumulates():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 5.0  # the center wins every overlapping window
    out, arg = tensors.maxpool2d_batch(x, 2, 1)
    gx = tensors.maxpool2d_batch_backward(x.shape, arg, np.ones_like(out), overlapping=True)
    assert gx[0, 0, 1, 1] == 4.0


def test_softmax_sums_to_one_and_shift_invariant():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(8, 10)) * 20
    p = tensors.softmax(z)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    assert (p > 0).all()
    p2 = tensors.softmax(z + 123.0)
    np.testing.assert_array_equal(p.argmax(axis=-1), p2.argmax(axis=-1))


def test_softmax_extreme_logits_stable():
    p = tensors.softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.isfinite(p).all() and p.sum() == pytest.approx(1.0)


def test_cross_entropy_matches_negative_log():
    p = np.array([0.1, 0.7, 0.2])
    assert tensors.cross_entropy(p, 1) == pytest.approx(-np.log(0.7 + tensors.EPS_LOG))
    with pytest.raises(ShapeError):
        tensors.cross_entropy(p, 3)


def test_finite_diff_grad_analytic_example():
    # f(x) = sum(x^2) has gradient 2x
    got = tensors.finite_diff_grad(lambda v: float((v * v).sum()),
                                   np.array([1.0, 2.0]), 1e-3)
    np.testing.assert_allclose(got, [2.0, 4.0], atol=1e-4)
    with pytest.raises(ValueError):
        tensors.finite_diff_grad(lambda v: 0.0, np.zeros(2), 0.0)


@pytest.mark.parametrize("bad", [
    lambda: tensors.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1)),
    lambda: tensors.conv2d(np.zeros((1, 4, 4)), np.zeros((2, 1, 3, 3)), np.zeros(1)),
    lambda: tensors.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1)),
    lambda: tensors.conv2d(np.zeros((1, 5, 5)), np.zeros((1, 1, 2, 2)), np.zeros(1), 2),
    lambda: tensors.maxpool2d(np.zeros((1, 2, 2)), 3, 1),
    lambda: tensors.dense(np.zeros(3), np.zeros((2, 4)), np.zeros(2)),
    lambda: tensors.dense(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(2)),
])
def test_shape_errors(bad):
    with pytest.raises(ShapeError):
        bad()


def test_operations_do_not_mutate_inputs():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 6, 6))
    k = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=2)
    snap = (x.copy(), k.copy(), b.copy())
    tensors.conv2d_batch(x, k, b, 1, 1)
    tensors.maxpool2d_batch(x, 2, 2)
    tensors.relu(x)
    np.testing.assert_array_equal(x, snap[0])
    np.testing.assert_array_equal(k, snap[1])
    np.testing.assert_array_equal(b, snap[2])


def test_operations_are_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    a1 = tensors.conv2d_batch(x, k, b, 1, 1)
    a2 = tensors.conv2d_batch(x, k, b, 1, 1)
    assert a1.tobytes() == a2.tobytes()
