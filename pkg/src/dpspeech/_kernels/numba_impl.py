"""Loop kernels compiled with numba; same contracts as numpy_impl.

Inputs are pre-padded once so the inner loops run over contiguous rows
without bounds checks, which lets LLVM vectorise them.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _pad(x, ph, pw):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + w] = x
    return xp


@njit(cache=True, fastmath=True)
def conv2d_forward(x, w):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = _pad(x, kh // 2, kw // 2)
    y = np.zeros((n, co, h, wd))
    for b in range(n):
        for o in range(co):
            for r in range(h):
                row = y[b, o, r]
                for c in range(ci):
                    for i in range(kh):
                        src = xp[b, c, r + i]
                        for j in range(kw):
                            k = w[o, c, i, j]
                            for s in range(wd):
                                row[s] += k * src[s + j]
    return y


@njit(cache=True, fastmath=True)
def conv2d_backward_input(dy, w):
    n, co, h, wd = dy.shape
    _, ci, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    # scatter into a padded buffer, then crop
    dxp = np.zeros((n, ci, h + 2 * ph, wd + 2 * pw))
    for b in range(n):
        for c in range(ci):
            for o in range(co):
                for r in range(h):
                    g = dy[b, o, r]
                    for i in range(kh):
                        dst = dxp[b, c, r + i]
                        for j in range(kw):
                            k = w[o, c, i, j]
                            for s in range(wd):
                                dst[s + j] += k * g[s]
    return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + wd])


@njit(cache=True, fastmath=True)
def conv2d_backward_weight(x, dy, kh, kw):
    n, ci, h, wd = x.shape
    co = dy.shape[1]
    xp = _pad(x, kh // 2, kw // 2)
    dw = np.zeros((n, co, ci, kh, kw))
    for b in range(n):
        for o in range(co):
            for c in range(ci):
                for i in range(kh):
                    for j in range(kw):
                        acc = 0.0
                        for r in range(h):
                            src = xp[b, c, r + i]
                            g = dy[b, o, r]
                            for s in range(wd):
                                acc += g[s] * src[s + j]
                        dw[b, o, c, i, j] = acc
    return dw


@njit(cache=True)
def group_norm_forward(x, groups, gamma, beta, eps):
    n, c, h, w = x.shape
    cpg = c // groups
    m = cpg * h * w
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty((n, groups))
    for b in range(n):
        for g in range(groups):
            s = 0.0
            for ch in range(g * cpg, (g + 1) * cpg):
                for r in range(h):
                    for q in range(w):
                        s += x[b, ch, r, q]
            mu = s / m
            ss = 0.0
            for ch in range(g * cpg, (g + 1) * cpg):
                for r in range(h):
                    for q in range(w):
                        d = x[b, ch, r, q] - mu
                        ss += d * d
            iv = 1.0 / np.sqrt(ss / m + eps)
            inv[b, g] = iv
            for ch in range(g * cpg, (g + 1) * cpg):
                ga = gamma[ch]
                be = beta[ch]
                for r in range(h):
                    for q in range(w):
                        xh = (x[b, ch, r, q] - mu) * iv
                        xhat[b, ch, r, q] = xh
                        y[b, ch, r, q] = ga * xh + be
    return y, xhat, inv


@njit(cache=True)
def group_norm_backward(dy, xhat, inv, groups, gamma):
    n, c, h, w = dy.shape
    cpg = c // groups
    m = cpg * h * w
    dx = np.empty_like(dy)
    dgamma = np.zeros((n, c))
    dbeta = np.zeros((n, c))
    for b in range(n):
        for g in range(groups):
            s1 = 0.0
            s2 = 0.0
            for ch in range(g * cpg, (g + 1) * cpg):
                ga = gamma[ch]
                dg = 0.0
                db = 0.0
                for r in range(h):
                    for q in range(w):
                        d = dy[b, ch, r, q]
                        xh = xhat[b, ch, r, q]
                        dg += d * xh
                        db += d
                        s1 += d * ga
                        s2 += d * ga * xh
                dgamma[b, ch] = dg
                dbeta[b, ch] = db
            k = inv[b, g] / m
            for ch in range(g * cpg, (g + 1) * cpg):
                ga = gamma[ch]
                for r in range(h):
                    for q in range(w):
                        dx[b, ch, r, q] = k * (m * dy[b, ch, r, q] * ga - s1 - xhat[b, ch, r, q] * s2)
    return dx, dgamma, dbeta


@njit(cache=True)
def avg_pool2_forward(a):
    n, c, h, w = a.shape
    h2, w2 = h // 2, w // 2
    out = np.empty((n, c, h2, w2))
    for b in range(n):
        for ch in range(c):
            for r in range(h2):
                top = a[b, ch, 2 * r]
                bot = a[b, ch, 2 * r + 1]
                for q in range(w2):
                    out[b, ch, r, q] = 0.25 * ((top[2 * q] + top[2 * q + 1]) + (bot[2 * q] + bot[2 * q + 1]))
    return out


@njit(cache=True)
def avg_pool2_backward(dp, h, w):
    n, c, h2, w2 = dp.shape
    da = np.zeros((n, c, h, w))
    for b in range(n):
        for ch in range(c):
            for r in range(h2):
                for q in range(w2):
                    v = 0.25 * dp[b, ch, r, q]
                    da[b, ch, 2 * r, 2 * q] = v
                    da[b, ch, 2 * r, 2 * q + 1] = v
                    da[b, ch, 2 * r + 1, 2 * q] = v
                    da[b, ch, 2 * r + 1, 2 * q + 1] = v
    return da
