"""Forward and backward kernels for every layer kind, on NCHW arrays.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv2d_forward(x, w, b, padding=0):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    # gather patches channels-last so each copied run is contiguous
    xl = x.transpose(0, 2, 3, 1)
    if padding:
        xl = np.pad(xl, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = xl.shape[1] - kh + 1, xl.shape[2] - kw + 1
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xl).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xl, (kh, kw), axis=(1, 2))  # n, ho, wo, c, kh, kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = w.transpose(0, 2, 3, 1).reshape(f, -1)
    out = cols @ wmat.T
    out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    return out, (cols, (n, c, h, wd), w, padding)


def conv2d_backward(dout, cache):
    cols, (n, c, h, wd), w, p = cache
    f, _, kh, kw = w.shape
    d = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
    db = d.sum(axis=0)
    if kh == 1 and kw == 1:
        dx = (d @ w.reshape(f, c)).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dw, db
    # input gradient = full correlation of dout with the flipped, transposed kernel
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv2d_forward(dout, flipped, np.zeros(c, dtype=dout.dtype), kh - 1 - p)
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean=None, running_var=None, train=True,
                      track_stats=False):
    """Batch normalisation over (N, H, W) per channel.

    In train mode batch statistics are used; with ``track_stats`` the running
    estimates are updated in place (momentum 0.1, unbiased variance).
    """
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if track_stats and running_mean is not None:
            m = x.size // x.shape[1]
            running_mean *= 1 - BN_MOMENTUM
            running_mean += BN_MOMENTUM * mean
            running_var *= 1 - BN_MOMENTUM
            running_var += BN_MOMENTUM * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not train:
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    m = dout.size // dout.shape[1]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return np.where(mask, dout, 0)


def avgpool2_forward(x):
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return out, x.shape


def avgpool2_backward(dout, shape):
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) * 0.25


def gap_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dout, shape):
    n, c, h, w = shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], shape).copy()


def linear_forward(x, w, b):
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def concat_forward(parts):
    return np.concatenate(parts, axis=1), [p.shape[1] for p in parts]


def concat_backward(dout, widths):
    edges = np.cumsum(widths)[:-1]
    return np.split(dout, edges, axis=1)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    n = logits.shape[0]
    # non-finite logits give a non-finite loss, which the caller reports
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        loss = -log_p[np.arange(n), labels].mean()
        grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
