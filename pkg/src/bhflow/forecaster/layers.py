"""Network layers with explicit backward passes.

Activations use NHWC layout. Each ``*_forward`` returns ``(out, cache)`` and
the matching ``*_backward`` takes ``(dout, cache)``. Weight gradients are
returned, never accumulated in place, so callers control reduction order.
"""

from __future__ import annotations

import numpy as np

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


# 3x3 convolution, zero padding 1, no bias (always followed by batch norm)


def _im2col3(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, ky : ky + h, kx : kx + w, :] for ky in range(3) for kx in range(3)], axis=-1)
    return cols.reshape(n * h * w, 9 * c)


def conv3x3_forward(x, weight):
    """``weight`` has shape ``(3, 3, c_in, c_out)``."""
    n, h, w, _ = x.shape
    c_out = weight.shape[-1]
    cols = _im2col3(x)
    out = cols @ weight.reshape(-1, c_out)
    return out.reshape(n, h, w, c_out), (x.shape, cols, weight)


def conv3x3_backward(dout, cache):
    shape, cols, weight = cache
    n, h, w, c = shape
    c_out = weight.shape[-1]
    d2 = dout.reshape(-1, c_out)
    dweight = (cols.T @ d2).reshape(weight.shape)
    dcols = (d2 @ weight.reshape(-1, c_out).T).reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dout.dtype)
    k = 0
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + h, kx : kx + w, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :], dweight


# 1x1 convolution with bias (output head)


def conv1x1_forward(x, weight, bias):
    """``weight`` has shape ``(c_in, c_out)``."""
    return x @ weight + bias, (x, weight)


def conv1x1_backward(dout, cache):
    x, weight = cache
    c_in, c_out = weight.shape
    x2 = x.reshape(-1, c_in)
    d2 = dout.reshape(-1, c_out)
    return dout @ weight.T, x2.T @ d2, d2.sum(axis=0)


# batch normalisation over N, H, W


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """In train mode the running statistics are updated in place."""
    if train:
        axes = (0, 1, 2)
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        m = x.size // x.shape[-1]
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mu
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
        xc = x - mu
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, train = cache
    axes = (0, 1, 2)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    dx = inv * (dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes))
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


# 2x2 max pool, stride 2


def maxpool_forward(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool_backward(dout, cache):
    shape, idx = cache
    n, h, w, c = shape
    blocks = np.zeros((n, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


# 2x2 transposed convolution, stride 2, with bias


def upconv_forward(x, weight, bias):
    """``weight`` has shape ``(c_in, 2, 2, c_out)``; output pixel
    ``(2i + a, 2j + b)`` is ``x[i, j] @ weight[:, a, b]``."""
    n, h, w, c_in = x.shape
    c_out = weight.shape[-1]
    y = x.reshape(-1, c_in) @ weight.reshape(c_in, -1)
    y = y.reshape(n, h, w, 2, 2, c_out).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, c_out)
    return y + bias, (x, weight)


def upconv_backward(dout, cache):
    x, weight = cache
    n, h, w, c_in = x.shape
    c_out = weight.shape[-1]
    d = dout.reshape(n, h, 2, w, 2, c_out).transpose(0, 1, 3, 2, 4, 5).reshape(n * h * w, 4 * c_out)
    dx = (d @ weight.reshape(c_in, -1).T).reshape(x.shape)
    dweight = (x.reshape(-1, c_in).T @ d).reshape(weight.shape)
    return dx, dweight, dout.sum(axis=(0, 1, 2))


def concat_forward(a, b):
    return np.concatenate([a, b], axis=-1), a.shape[-1]


def concat_backward(dout, split):
    return dout[..., :split], dout[..., split:]
