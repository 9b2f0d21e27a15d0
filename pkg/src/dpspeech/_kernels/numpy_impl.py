"""Pure-numpy reference kernels (im2col + BLAS)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _patches(x, kh, kw):
    # (N, C, H, W) -> (N, H*W, C*kh*kw), zero 'same' padding
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, H, W, kh, kw
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, h * w, c * kh * kw)


def conv2d_forward(x, w):
    n, _, h, wd = x.shape
    co, ci, kh, kw = w.shape
    cols = _patches(x, kh, kw)
    y = cols @ w.reshape(co, ci * kh * kw).T  # N, HW, Co
    return np.ascontiguousarray(y.transpose(0, 2, 1)).reshape(n, co, h, wd)


def conv2d_backward_input(dy, w):
    n, co, h, wd = dy.shape
    _, ci, kh, kw = w.shape
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # Ci, Co, kh, kw
    cols = _patches(dy, kh, kw)
    dx = cols @ np.ascontiguousarray(wf).reshape(ci, co * kh * kw).T
    return np.ascontiguousarray(dx.transpose(0, 2, 1)).reshape(n, ci, h, wd)


def conv2d_backward_weight(x, dy, kh, kw):
    """Per-example kernel gradients, shape (N, Co, Ci, kh, kw)."""
    n, ci, h, wd = x.shape
    co = dy.shape[1]
    cols = _patches(x, kh, kw)  # N, HW, Ci*kh*kw
    dw = dy.reshape(n, co, h * wd) @ cols
    return dw.reshape(n, co, ci, kh, kw)


def group_norm_forward(x, groups, gamma, beta, eps):
    """Returns (y, xhat, inv_std) with inv_std of shape (N, groups)."""
    n, c, h, w = x.shape
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return y, xhat, inv[:, :, 0]


def group_norm_backward(dy, xhat, inv, groups, gamma):
    """Returns (dx, dgamma per example (N, C), dbeta per example (N, C))."""
    n, c, h, w = dy.shape
    dgamma = np.einsum("nchw,nchw->nc", dy, xhat)
    dbeta = dy.sum(axis=(2, 3))
    dxhat = (dy * gamma[None, :, None, None]).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    m = dxhat.shape[2]
    dx = inv[:, :, None] / m * (m * dxhat - dxhat.sum(axis=2, keepdims=True)
                                - xh * np.sum(dxhat * xh, axis=2, keepdims=True))
    return dx.reshape(n, c, h, w), dgamma, dbeta


def avg_pool2_forward(a):
    n, c, h, w = a.shape
    h2, w2 = h // 2, w // 2
    return a[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def avg_pool2_backward(dp, h, w):
    n, c, h2, w2 = dp.shape
    da = np.zeros((n, c, h, w))
    da[:, :, :2 * h2, :2 * w2] = np.repeat(np.repeat(dp, 2, axis=2), 2, axis=3) * 0.25
    return da
