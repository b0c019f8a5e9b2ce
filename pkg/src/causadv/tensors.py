"""Dense tensor primitives for the small CNN engine.

Everything here is a plain function over numpy arrays. Inputs are
row-major float arrays (float32 in production, but the ops preserve
whatever float dtype they are given so test oracles can run them in
float64). All functions are pure: no hidden state, no in-place writes
to their arguments.
"""

import numpy as np

EPS_LOG = 1e-12


class ShapeError(ValueError):
    """Raised when tensor shapes do not compose for an operation."""


def _as_float(x):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    return x


def conv2d(x, kernels, bias, stride=1, padding=0):
    """2D convolution (cross-correlation) of a single [C,H,W] image.

    kernels: [K,C,kh,kw], bias: [K]. Out-of-range reads are zero-padded.
    Returns [K,H',W'] with H' = (H + 2*padding - kh)//stride + 1.
    """
    x = _as_float(x)
    out = conv2d_batch(x[None], kernels, bias, stride, padding)
    return out[0]


def conv2d_batch(x, kernels, bias, stride=1, padding=0):
    """Batched convolution over [N,C,H,W]; see conv2d."""
    x = _as_float(x)
    kernels = _as_float(kernels)
    bias = _as_float(bias)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got shape {x.shape}")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be [K,C,kh,kw], got shape {kernels.shape}")
    n, c, h, w = x.shape
    k, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernels expect {ck}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d bias must be [{k}], got shape {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    ho, rem_h = divmod(h + 2 * padding - kh, stride)
    wo, rem_w = divmod(w + 2 * padding - kw, stride)
    ho += 1
    wo += 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} too large for padded input {h + 2 * padding}x{w + 2 * padding}")
    if rem_h or rem_w:
        raise ShapeError(
            f"conv2d stride {stride} does not evenly cover input {h}x{w} with kernel {kh}x{kw}")

    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, k, ho * wo), dtype=x.dtype)
    # Direct convolution, one kernel offset at a time; matmul over the
    # channel axis does the multiply-accumulate for all output positions.
    for a in range(kh):
        for b in range(kw):
            patch = np.ascontiguousarray(
                x[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]).reshape(n, c, -1)
            out += np.matmul(kernels[:, :, a, b], patch)
    out += bias.reshape(1, k, 1)
    return out.reshape(n, k, ho, wo)


def conv2d_batch_backward(x, kernels, stride, padding, grad_out):
    """Gradients of conv2d_batch w.r.t. input, kernels and bias."""
    x = _as_float(x)
    n, c, h, w = x.shape
    k, _, kh, kw = kernels.shape
    _, _, ho, wo = grad_out.shape
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.zeros_like(kernels)
    grad_xp = np.zeros_like(xp)
    gout = np.ascontiguousarray(grad_out).reshape(n, k, ho * wo)
    for a in range(kh):
        for b in range(kw):
            patch = np.ascontiguousarray(
                xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]).reshape(n, c, -1)
            grad_w[:, :, a, b] = np.matmul(gout, patch.transpose(0, 2, 1)).sum(axis=0)
            gpatch = np.matmul(kernels[:, :, a, b].T, gout).reshape(n, c, ho, wo)
            grad_xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += gpatch
    if padding:
        grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w]
    else:
        grad_x = grad_xp
    return grad_x, grad_w, grad_b


def relu(x):
    """Elementwise max(0, v); shape preserved."""
    x = _as_float(x)
    return np.maximum(x, 0)


def maxpool2d(x, window, stride):
    """Max pooling over a single [C,H,W] image.

    Returns (pooled, argmax) where argmax holds, per output cell, the
    row-major flat index into that channel's HxW plane. Ties resolve to
    the smallest flat index.
    """
    out, arg = maxpool2d_batch(_as_float(x)[None], window, stride)
    return out[0], arg[0]


def maxpool2d_batch(x, window, stride):
    """Batched max pooling over [N,C,H,W]; see maxpool2d."""
    x = _as_float(x)
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool window {window} larger than input {h}x{w}")
    if stride < 1:
        raise ShapeError(f"maxpool stride must be >= 1, got {stride}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    best = None
    arg = None
    # Window offsets visited in row-major order so that on ties the
    # smallest flat index is kept (strict > below never replaces it).
    for a in range(window):
        rows = np.arange(ho) * stride + a
        for b in range(window):
            cols = np.arange(wo) * stride + b
            patch = x[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
            flat = (rows[:, None] * w + cols[None, :]).astype(np.int64)
            if best is None:
                best = patch.copy()
                arg = np.broadcast_to(flat, patch.shape).copy()
            else:
                better = patch > best
                best = np.where(better, patch, best)
                arg = np.where(better, flat, arg)
    return best, arg


def maxpool2d_batch_backward(x_shape, argmax, grad_out, overlapping=True):
    """Scatter grad_out back to the argmax positions of the input.

    With non-overlapping windows (stride >= window) the argmax indices are
    unique per plane, so a plain scatter assignment is enough.
    """
    n, c, h, w = x_shape
    plane = h * w
    base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * plane
    idx = (base + argmax).reshape(-1)
    grad_x = np.zeros(n * c * plane, dtype=grad_out.dtype)
    if overlapping:
        np.add.at(grad_x, idx, grad_out.reshape(-1))
    else:
        grad_x[idx] = grad_out.reshape(-1)
    return grad_x.reshape(n, c, h, w)


def dense(x, weights, bias):
    """Affine map: weights[m,n] @ x[n] + bias[m]."""
    x = _as_float(x)
    weights = _as_float(weights)
    bias = _as_float(bias)
    if x.ndim != 1:
        raise ShapeError(f"dense input must be a vector, got shape {x.shape}")
    m, nfeat = weights.shape
    if x.shape[0] != nfeat:
        raise ShapeError(f"dense expects input of length {nfeat}, got {x.shape[0]}")
    if bias.shape != (m,):
        raise ShapeError(f"dense bias must be [{m}], got shape {bias.shape}")
    return weights @ x + bias


def softmax(logits):
    """Numerically stable softmax; outputs positive and sum to 1."""
    z = _as_float(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label):
    """-log(probs[label] + eps); label must index into probs."""
    probs = _as_float(probs)
    m = probs.shape[-1]
    if not 0 <= label < m:
        raise ShapeError(f"label {label} out of range for {m} classes")
    p = probs[..., label] + np.asarray(EPS_LOG, dtype=probs.dtype)
    return -np.log(p)


def finite_diff_grad(f, x, h):
    """Central-difference gradient of scalar f at x: (f(x+h*e_i) - f(x-h*e_i)) / 2h."""
    if h <= 0:
        raise ValueError("finite_diff_grad requires h > 0")
    x = np.asarray(x)
    grad = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(x.size):
        orig = flat[i]
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] = orig + h
        xm[i] = orig - h
        grad[i] = (float(f(xp.reshape(x.shape))) - float(f(xm.reshape(x.shape)))) / (2.0 * h)
    return grad.reshape(x.shape)
