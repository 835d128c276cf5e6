"""Forward/backward kernels on plain numpy arrays (NCHW layout).

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache. Dtype follows the inputs, so the same
code runs in float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x, w, b, groups):
    if x.ndim != 4:
        raise ValueError(f"conv input must be NCHW, got shape {x.shape}")
    c_in = x.shape[1]
    c_out, c_per_group, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square and odd, got {kh}x{kw}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(f"channels in={c_in} out={c_out} not divisible by groups={groups}")
    if c_per_group != c_in // groups:
        raise ValueError(
            f"weight expects {c_per_group} input channels per group, "
            f"input has {c_in} channels / {groups} groups = {c_in // groups}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"bias shape {b.shape} != ({c_out},)")


def conv2d_forward(x, w, b=None, stride=1, padding=0, groups=1):
    """Grouped 2-D convolution (cross-correlation).

    Group ``i`` maps input channels ``[i*C_in/g, (i+1)*C_in/g)`` onto output
    channels ``[i*C_out/g, (i+1)*C_out/g)``.
    """
    _check_conv(x, w, b, groups)
    n, c_in, h, wd = x.shape
    c_out, cg, k, _ = w.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{wd} too small for kernel {k}, padding {padding}")
    if k == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        cols = xs.reshape(n, groups, cg, ho * wo)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win[:, :, :ho, :wo]
        # (N, C, Ho, Wo, k, k) -> (N, g, Cg*k*k, Ho*Wo)
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, groups, cg * k * k, ho * wo)
    wmat = w.reshape(groups, c_out // groups, cg * k * k)
    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo)
    if b is not None:
        out += b[None, :, None, None]
    cache = (x.shape, cols, w, stride, padding, groups, (ho, wo), b is not None)
    return out, cache


def conv2d_backward(dout, cache):
    """Returns ``(dx, dw, db)``; ``db`` is None for bias-free convolutions."""
    x_shape, cols, w, stride, padding, groups, (ho, wo), has_bias = cache
    n, c_in, h, wd = x_shape
    c_out, cg, k, _ = w.shape
    dout_g = dout.reshape(n, groups, c_out // groups, ho * wo)
    dw = np.matmul(dout_g, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    wmat = w.reshape(groups, c_out // groups, cg * k * k)
    dcols = np.matmul(wmat.transpose(0, 2, 1), dout_g)
    if k == 1 and padding == 0:
        dxs = dcols.reshape(n, c_in, ho, wo)
        if stride == 1:
            return dxs, dw, db
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, :, ::stride, ::stride][:, :, :ho, :wo] = dxs
        return dx, dw, db
    dcols = dcols.reshape(n, c_in, k, k, ho, wo)
    dxp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(dxp), dw, db


def _channel_sum(a):
    # per-channel sum over (N, H, W); a BLAS matvec is much faster than a strided reduce
    n, c = a.shape[:2]
    return np.matmul(a.reshape(n, c, -1), np.ones(a[0, 0].size, dtype=a.dtype)).sum(axis=0)


def _channel_dot(a, b):
    n, c = a.shape[:2]
    return np.einsum("ncx,ncx->c", a.reshape(n, c, -1), b.reshape(n, c, -1))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training,
                      momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (N, H, W).

    In training mode ``running_mean``/``running_var`` are updated in place
    (EMA with ``momentum``; the variance estimate is unbiased).
    """
    if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"batchnorm expects NCHW with C={gamma.shape[0]}, got {x.shape}")
    shape = (1, -1, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = _channel_sum(x) / m
        xc = x - mean.reshape(shape)
        var = _channel_dot(xc, xc) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        xc = x - running_mean.reshape(shape).astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.reshape(shape)
    out = xhat * gamma.reshape(shape)
    out += beta.reshape(shape)
    return out, (xhat, inv_std, gamma, training)


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, training = cache
    shape = (1, -1, 1, 1)
    dbeta = _channel_sum(dout)
    dgamma = _channel_dot(dout, xhat)
    scale = (gamma * inv_std).reshape(shape)
    if not training:
        return dout * scale, dgamma, dbeta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dx = xhat * (-scale * (dgamma / m).reshape(shape))
    dx += dout * scale
    dx -= scale * (dbeta / m).reshape(shape)
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    """Logistic function without overflow for large |x|."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_forward(x):
    s = sigmoid(x)
    return s, s


def sigmoid_backward(dout, s):
    return dout * s * (1 - s)


def swish_forward(x):
    s = sigmoid(x)
    return x * s, (x, s)


def swish_backward(dout, cache):
    x, s = cache
    return dout * (s + x * s * (1 - s))


def hswish_forward(x):
    """x * clamp((x + 3) / 6, 0, 1)."""
    gate = np.clip((x + 3) / 6, 0, 1)
    return x * gate, x


def hswish_backward(dout, x):
    grad = (x * (1 / 3) + 0.5).astype(dout.dtype, copy=False)  # (2x + 3) / 6 between the kinks
    grad[x <= -3] = 0
    grad[x >= 3] = 1
    grad *= dout
    return grad


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, shape):
    n, c, h, w = shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], shape).copy()


def linear_forward(x, w, b):
    """``x @ w.T + b`` with ``w`` shaped (out_features, in_features)."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear expects (N, {w.shape[1]}), got {x.shape}")
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def residual_add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"residual shapes differ: {a.shape} vs {b.shape}")
    return a + b


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / N``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be {n} integers in [0, {c})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n
