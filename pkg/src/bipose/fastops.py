"""Fused elementwise kernels for the training hot path.

Each kernel has a numba version operating on contiguous ``(N, C, H, W)`` or
``(N, C)`` arrays and a numpy version with identical semantics; the numpy
version runs when numba is unavailable or disabled.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit


def _as3(x: np.ndarray) -> np.ndarray:
    n, c = x.shape[:2]
    return np.ascontiguousarray(x).reshape(n, c, -1)


@njit(cache=True)
def _bn_stats_numba(x):
    n, c, m = x.shape
    mean = np.zeros(c, dtype=np.float64)
    var = np.zeros(c, dtype=np.float64)
    cnt = n * m
    for ch in range(c):
        s = 0.0
        for b in range(n):
            for i in range(m):
                s += x[b, ch, i]
        mu = s / cnt
        s2 = 0.0
        for b in range(n):
            for i in range(m):
                d = x[b, ch, i] - mu
                s2 += d * d
        mean[ch] = mu
        var[ch] = s2 / cnt
    return mean, var


@njit(cache=True)
def _bn_apply_numba(x, mean, inv_std, gamma, beta):
    n, c, m = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for b in range(n):
        for ch in range(c):
            mu = mean[ch]
            s = inv_std[ch]
            g = gamma[ch]
            bt = beta[ch]
            for i in range(m):
                v = (x[b, ch, i] - mu) * s
                xhat[b, ch, i] = v
                out[b, ch, i] = g * v + bt
    return out, xhat


@njit(cache=True)
def _bn_backward_numba(g, xhat, gamma, inv_std, training):
    n, c, m = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(c, dtype=np.float64)
    dbeta = np.zeros(c, dtype=np.float64)
    cnt = n * m
    for ch in range(c):
        sg = 0.0
        sgx = 0.0
        for b in range(n):
            for i in range(m):
                gv = g[b, ch, i]
                sg += gv
                sgx += gv * xhat[b, ch, i]
        dgamma[ch] = sgx
        dbeta[ch] = sg
        k = gamma[ch] * inv_std[ch]
        if training:
            mg = sg / cnt
            mgx = sgx / cnt
            for b in range(n):
                for i in range(m):
                    dx[b, ch, i] = k * (g[b, ch, i] - mg - xhat[b, ch, i] * mgx)
        else:
            for b in range(n):
                for i in range(m):
                    dx[b, ch, i] = k * g[b, ch, i]
    return dx, dgamma, dbeta


def bn_stats(x: np.ndarray):
    """Per-channel biased mean and variance over all but axis 1."""
    if _accel.HAVE_NUMBA:
        mean, var = _bn_stats_numba(_as3(x))
        return mean.astype(x.dtype), var.astype(x.dtype)
    axes = (0,) if x.ndim == 2 else tuple(i for i in range(x.ndim) if i != 1)
    return x.mean(axis=axes), x.var(axis=axes)


def bn_apply(x, mean, inv_std, gamma, beta):
    """Return ``(gamma * xhat + beta, xhat)`` with ``xhat = (x - mean) * inv_std``."""
    if _accel.HAVE_NUMBA:
        out, xhat = _bn_apply_numba(_as3(x), mean.astype(x.dtype), inv_std.astype(x.dtype), gamma, beta)
        return out.reshape(x.shape), xhat.reshape(x.shape)
    view = (1, -1) + (1,) * (x.ndim - 2)
    xhat = (x - mean.reshape(view)) * inv_std.reshape(view).astype(x.dtype)
    return gamma.reshape(view) * xhat + beta.reshape(view), xhat


def bn_backward(g, xhat, gamma, inv_std, training: bool):
    """Gradients ``(dx, dgamma, dbeta)`` of batch norm given upstream ``g``."""
    if _accel.HAVE_NUMBA:
        dx, dgamma, dbeta = _bn_backward_numba(_as3(g), _as3(xhat), gamma, inv_std.astype(g.dtype), training)
        return dx.reshape(g.shape), dgamma.astype(g.dtype), dbeta.astype(g.dtype)
    axes = (0,) if g.ndim == 2 else tuple(i for i in range(g.ndim) if i != 1)
    view = (1, -1) + (1,) * (g.ndim - 2)
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    k = (gamma * inv_std).reshape(view).astype(g.dtype)
    if training:
        m = g.size // g.shape[1]
        dx = k * (g - (dbeta / m).reshape(view) - xhat * (dgamma / m).reshape(view))
    else:
        dx = k * g
    return dx, dgamma, dbeta


@njit(cache=True)
def _prelu_numba(x, a):
    n, c, m = x.shape
    out = np.empty_like(x)
    for b in range(n):
        for ch in range(c):
            s = a[ch]
            for i in range(m):
                v = x[b, ch, i]
                out[b, ch, i] = v if v > 0 else s * v
    return out


@njit(cache=True)
def _prelu_backward_numba(g, x, a):
    n, c, m = x.shape
    dx = np.empty_like(g)
    da = np.zeros(c, dtype=np.float64)
    for ch in range(c):
        s = a[ch]
        acc = 0.0
        for b in range(n):
            for i in range(m):
                v = x[b, ch, i]
                gv = g[b, ch, i]
                if v > 0:
                    dx[b, ch, i] = gv
                else:
                    dx[b, ch, i] = s * gv
                    acc += gv * v
        da[ch] = acc
    return dx, da


def prelu(x, a):
    if _accel.HAVE_NUMBA:
        return _prelu_numba(_as3(x), a).reshape(x.shape)
    view = (1, -1) + (1,) * (x.ndim - 2)
    return np.where(x > 0, x, a.reshape(view) * x)


def prelu_backward(g, x, a):
    if _accel.HAVE_NUMBA:
        dx, da = _prelu_backward_numba(_as3(g), _as3(x), a)
        return dx.reshape(g.shape), da.astype(g.dtype)
    axes = (0,) if g.ndim == 2 else tuple(i for i in range(g.ndim) if i != 1)
    view = (1, -1) + (1,) * (g.ndim - 2)
    pos = x > 0
    return np.where(pos, g, a.reshape(view) * g), (g * np.minimum(x, 0)).sum(axis=axes)


@njit(cache=True)
def _sign_numba(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        out[i] = 1.0 if flat[i] >= 0 else -1.0
    return out.reshape(x.shape)


@njit(cache=True)
def _sign_backward_numba(g, x):
    gf = g.ravel()
    xf = x.ravel()
    out = np.empty_like(gf)
    for i in range(gf.size):
        d = 2.0 - 2.0 * abs(xf[i])
        out[i] = gf[i] * d if d > 0 else 0.0
    return out.reshape(g.shape)


def sign(x):
    """Sign with 0 mapped to +1, keeping ``x``'s dtype."""
    if _accel.HAVE_NUMBA:
        return _sign_numba(np.ascontiguousarray(x))
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype)


def sign_backward(g, x):
    """Upstream gradient times the ApproxSign derivative ``max(0, 2 - 2|x|)``."""
    if _accel.HAVE_NUMBA:
        return _sign_backward_numba(np.ascontiguousarray(g), np.ascontiguousarray(x))
    return g * np.maximum(2 - 2 * np.abs(x), 0).astype(g.dtype)
