"""Hot array kernels with optional numba acceleration.

The inner loops that dominate training time live here as plain-ndarray
functions: row softmax (forward/backward), layer norm (forward/backward),
the scatter-add used by embedding gradients, and the fused AdamW update.

Two interchangeable implementations exist for each kernel. When numba is
importable the jitted versions are installed at import time; setting the
environment variable ``ANCHORGEN_NO_NUMBA=1`` (or any value other than
``0``/empty) forces the pure-numpy path instead. ``benchmarks/bench_kernels.py``
compares the two.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "USING_NUMBA",
    "softmax_rows",
    "softmax_rows_grad",
    "layernorm_rows",
    "layernorm_rows_grad",
    "scatter_add_rows",
    "adamw_update",
]


def numba_disabled_by_env() -> bool:
    return os.environ.get("ANCHORGEN_NO_NUMBA", "0") not in ("", "0")


# ---------------------------------------------------------------------------
# pure-numpy reference implementations
# ---------------------------------------------------------------------------


def _softmax_rows_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_grad_np(y, gy):
    inner = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - inner)


def _layernorm_rows_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0].copy()


def _layernorm_rows_grad_np(xhat, inv_std, gain, gy):
    d = gy * gain
    d_mean = d.mean(axis=1, keepdims=True)
    dx_mean = (d * xhat).mean(axis=1, keepdims=True)
    gx = inv_std[:, None] * (d - d_mean - xhat * dx_mean)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx, ggain, gbias


def _scatter_add_rows_np(out, idx, src):
    np.add.at(out, idx, src)
    return out


def _adamw_update_np(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    mhat = m / bc1
    vhat = v / bc2
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

USING_NUMBA = False
if not numba_disabled_by_env():
    try:
        from numba import njit

        USING_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USING_NUMBA = False

if USING_NUMBA:

    @njit(cache=True)
    def softmax_rows(x):
        n, d = x.shape
        out = np.empty((n, d))
        for i in range(n):
            row_max = x[i, 0]
            for j in range(1, d):
                if x[i, j] > row_max:
                    row_max = x[i, j]
            total = 0.0
            for j in range(d):
                e = np.exp(x[i, j] - row_max)
                out[i, j] = e
                total += e
            for j in range(d):
                out[i, j] /= total
        return out

    @njit(cache=True)
    def softmax_rows_grad(y, gy):
        n, d = y.shape
        gx = np.empty((n, d))
        for i in range(n):
            inner = 0.0
            for j in range(d):
                inner += gy[i, j] * y[i, j]
            for j in range(d):
                gx[i, j] = y[i, j] * (gy[i, j] - inner)
        return gx

    @njit(cache=True)
    def layernorm_rows(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty((n, d))
        xhat = np.empty((n, d))
        inv_std = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - mu
                var += diff * diff
            var /= d
            istd = 1.0 / np.sqrt(var + eps)
            inv_std[i] = istd
            for j in range(d):
                xh = (x[i, j] - mu) * istd
                xhat[i, j] = xh
                y[i, j] = xh * gain[j] + bias[j]
        return y, xhat, inv_std

    @njit(cache=True)
    def layernorm_rows_grad(xhat, inv_std, gain, gy):
        n, d = xhat.shape
        gx = np.empty((n, d))
        ggain = np.zeros(d)
        gbias = np.zeros(d)
        for i in range(n):
            d_mean = 0.0
            dx_mean = 0.0
            for j in range(d):
                dj = gy[i, j] * gain[j]
                d_mean += dj
                dx_mean += dj * xhat[i, j]
            d_mean /= d
            dx_mean /= d
            for j in range(d):
                dj = gy[i, j] * gain[j]
                gx[i, j] = inv_std[i] * (dj - d_mean - xhat[i, j] * dx_mean)
                ggain[j] += gy[i, j] * xhat[i, j]
                gbias[j] += gy[i, j]
        return gx, ggain, gbias

    @njit(cache=True)
    def scatter_add_rows(out, idx, src):
        n = idx.shape[0]
        d = out.shape[1]
        for i in range(n):
            r = idx[i]
            for j in range(d):
                out[r, j] += src[i, j]
        return out

    @njit(cache=True)
    def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
        n = p.shape[0]
        bc1 = 1.0 - beta1**step
        bc2 = 1.0 - beta2**step
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            mhat = m[i] / bc1
            vhat = v[i] / bc2
            p[i] -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p[i])

else:
    softmax_rows = _softmax_rows_np
    softmax_rows_grad = _softmax_rows_grad_np
    layernorm_rows = _layernorm_rows_np
    layernorm_rows_grad = _layernorm_rows_grad_np
    scatter_add_rows = _scatter_add_rows_np
    adamw_update = _adamw_update_np
