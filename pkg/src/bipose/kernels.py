"""Convolution engines and cost accounting.

``binary_conv2d`` works on packed bits: each output is
``alpha[o] * (n - 2 * popcount(w_o XOR patch))`` with ``n = k * k * c_in``.
Padded positions of a binary convolution hold +1 activations (there is no
zero in the ±1 domain).  ``real_conv2d`` is an im2col + GEMM cross-correlation
with zero padding, used for the real-valued key layers.  ``conv2d_reference``
is a deliberately naive direct loop used as the float baseline in benchmarks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _accel
from ._accel import njit, popcount64, prange
from .bitpack import WORD_BITS, BitTensor, as_float_tensor, pack_activations, pack_weights
from .errors import InvalidInputError

BINARY = "binary"
REAL = "real"


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    padding: int | None = None
    mode: str = REAL

    def __post_init__(self):
        if self.k not in (1, 3):
            raise InvalidInputError(f"kernel extent must be 1 or 3, got {self.k}")
        if self.stride not in (1, 2):
            raise InvalidInputError(f"stride must be 1 or 2, got {self.stride}")
        if self.mode not in (BINARY, REAL):
            raise InvalidInputError(f"unknown conv mode {self.mode!r}")
        if self.c_in < 1 or self.c_out < 1:
            raise InvalidInputError("channel counts must be positive")
        if self.padding is None:
            object.__setattr__(self, "padding", self.k // 2)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        p, k, s = self.padding, self.k, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


@dataclass(frozen=True)
class OpCount:
    """Binary and real multiply-accumulate counts."""

    bops: int = 0
    flops: int = 0

    @property
    def ops(self) -> float:
        return self.bops / 64 + self.flops

    def __add__(self, other: "OpCount") -> "OpCount":
        return OpCount(self.bops + other.bops, self.flops + other.flops)


def count_ops(spec: ConvSpec, out_h: int, out_w: int) -> OpCount:
    macs = spec.k * spec.k * spec.c_in * spec.c_out * out_h * out_w
    if spec.mode == BINARY:
        # one real multiply per output for the alpha scaling
        return OpCount(bops=macs, flops=spec.c_out * out_h * out_w)
    return OpCount(flops=macs)


# --------------------------------------------------------------------------
# im2col helpers shared with the autograd conv
# --------------------------------------------------------------------------


def pad_nchw(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


@njit(cache=True)
def _im2col_numba(x, k, stride, pad, pad_value, oh, ow):
    n, c, h, w = x.shape
    cols = np.empty((n * oh * ow, c * k * k), dtype=x.dtype)
    for b in range(n):
        for y in range(oh):
            for xo in range(ow):
                row = (b * oh + y) * ow + xo
                for ch in range(c):
                    for i in range(k):
                        yy = y * stride + i - pad
                        for j in range(k):
                            xx = xo * stride + j - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                cols[row, (ch * k + i) * k + j] = x[b, ch, yy, xx]
                            else:
                                cols[row, (ch * k + i) * k + j] = pad_value
    return cols


@njit(cache=True)
def _col2im_numba(d, n, c, h, w, k, stride, pad, oh, ow):
    dx = np.zeros((n, c, h, w), dtype=d.dtype)
    for b in range(n):
        for y in range(oh):
            for xo in range(ow):
                row = (b * oh + y) * ow + xo
                for ch in range(c):
                    for i in range(k):
                        yy = y * stride + i - pad
                        if yy < 0 or yy >= h:
                            continue
                        for j in range(k):
                            xx = xo * stride + j - pad
                            if 0 <= xx < w:
                                dx[b, ch, yy, xx] += d[row, (ch * k + i) * k + j]
    return dx


def im2col(x: np.ndarray, k: int, stride: int, pad: int, pad_value: float = 0.0):
    """Return ``(cols, (oh, ow))`` with cols shaped ``(N * oh * ow, C * k * k)``."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if k == 1:
        win = x[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
        return win.transpose(0, 2, 3, 1).reshape(n * oh * ow, c), (oh, ow)
    if _accel.HAVE_NUMBA:
        return _im2col_numba(np.ascontiguousarray(x), k, stride, pad, x.dtype.type(pad_value), oh, ow), (oh, ow)
    xp = pad_nchw(x, pad, pad_value)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return cols, (oh, ow)


def col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int, out_hw) -> np.ndarray:
    """Adjoint of :func:`im2col` (sums overlapping patch gradients)."""
    n, c, h, w = x_shape
    oh, ow = out_hw
    if k == 1:
        d = dcols.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
        if stride == 1:
            return np.ascontiguousarray(d)
        dx = np.zeros((n, c, h, w), dtype=dcols.dtype)
        dx[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride] = d
        return dx
    if _accel.HAVE_NUMBA:
        return _col2im_numba(np.ascontiguousarray(dcols), n, c, h, w, k, stride, pad, oh, ow)
    d = dcols.reshape(n, oh, ow, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[..., i, j].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv2d_nchw(x, w, stride: int, pad: int, pad_value: float = 0.0):
    """Batched cross-correlation; returns ``(out, cols, (oh, ow))``."""
    n = x.shape[0]
    o = w.shape[0]
    cols, (oh, ow) = im2col(x, w.shape[2], stride, pad, pad_value)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2), cols, (oh, ow)


def _batched(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise InvalidInputError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def real_conv2d(a, w, spec: ConvSpec, bias=None) -> np.ndarray:
    """Zero-padded cross-correlation of real tensors."""
    if spec.mode != REAL:
        raise InvalidInputError("real_conv2d needs a real-mode ConvSpec")
    a = as_float_tensor(a, name="a")
    w = as_float_tensor(w, name="w")
    x, single = _batched(a)
    if w.shape != (spec.c_out, spec.c_in, spec.k, spec.k):
        raise InvalidInputError(f"weight shape {w.shape} does not match {spec}")
    if x.shape[1] != spec.c_in:
        raise InvalidInputError(f"input has {x.shape[1]} channels, spec wants {spec.c_in}")
    out, _, _ = conv2d_nchw(x, w.astype(x.dtype, copy=False), spec.stride, spec.padding)
    if bias is not None:
        out = out + np.asarray(bias, dtype=out.dtype)[None, :, None, None]
    return out[0] if single else out


# --------------------------------------------------------------------------
# packed binary convolution
# --------------------------------------------------------------------------

_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


@njit(cache=True, parallel=True)
def _bconv_numba(apad, w, alpha, stride, oh, ow, n):
    c_out, k, _, nw = w.shape
    out = np.empty((c_out, oh, ow), dtype=np.float32)
    for o in prange(c_out):
        for y in range(oh):
            for x in range(ow):
                acc = 0
                for dy in range(k):
                    for dx in range(k):
                        for j in range(nw):
                            acc += popcount64(w[o, dy, dx, j] ^ apad[y * stride + dy, x * stride + dx, j])
                out[o, y, x] = np.float32(n - 2 * acc) * alpha[o]
    return out


def _bconv_numpy(apad, w, alpha, stride, oh, ow, n):
    c_out, k = w.shape[:2]
    nw = w.shape[3]
    win = sliding_window_view(apad, (k, k), axis=(0, 1))[::stride, ::stride][:oh, :ow]
    # win: (oh, ow, nw, k, k) -> (oh*ow, k*k*nw) matching w's (k, k, nw) order
    patches = win.transpose(0, 1, 3, 4, 2).reshape(oh * ow, k * k * nw)
    wf = w.reshape(c_out, k * k * nw)
    mism = np.bitwise_count(wf[:, None, :] ^ patches[None, :, :]).sum(axis=2, dtype=np.int64)
    dots = (n - 2 * mism).astype(np.float32)
    return (dots * alpha[:, None]).reshape(c_out, oh, ow)


def _binary_conv_single(a_words, w_words, alpha, spec, n):
    h, wd = a_words.shape[:2]
    p = spec.padding
    if p:
        apad = np.pad(a_words, ((p, p), (p, p), (0, 0)), constant_values=_ONES)
    else:
        apad = np.ascontiguousarray(a_words)
    oh, ow = spec.out_size(h, wd)
    if _accel.HAVE_NUMBA:
        return _bconv_numba(apad, w_words, alpha, spec.stride, oh, ow, n)
    return _bconv_numpy(apad, w_words, alpha, spec.stride, oh, ow, n)


def binary_conv2d(a: BitTensor, w: BitTensor, alpha, spec: ConvSpec) -> np.ndarray:
    """XOR/popcount convolution of packed operands.

    ``a`` comes from :func:`bitpack.pack_activations` with shape ``(H, W, C)``
    or ``(N, H, W, C)``; ``w`` from :func:`bitpack.pack_weights` with shape
    ``(c_out, k, k, c_in)``.  Returns a float32 ``(c_out, oh, ow)`` array, or
    ``(N, c_out, oh, ow)`` for batched input.
    """
    if spec.mode != BINARY:
        raise InvalidInputError("binary_conv2d needs a binary-mode ConvSpec")
    if not isinstance(a, BitTensor) or not isinstance(w, BitTensor):
        raise InvalidInputError("binary_conv2d operates on BitTensors")
    if w.shape != (spec.c_out, spec.k, spec.k, spec.c_in):
        raise InvalidInputError(f"packed weight shape {w.shape} does not match {spec}")
    if a.shape[-1] != spec.c_in or len(a.shape) not in (3, 4):
        raise InvalidInputError(f"packed activation shape {a.shape} does not match {spec}")
    alpha = np.asarray(alpha, dtype=np.float32).reshape(-1)
    if alpha.shape[0] != spec.c_out:
        raise InvalidInputError(f"{alpha.shape[0]} scale factors for {spec.c_out} filters")
    n = spec.k * spec.k * spec.c_in
    w_words = np.ascontiguousarray(w.words)
    if len(a.shape) == 3:
        return _binary_conv_single(a.words, w_words, alpha, spec, n)
    return np.stack([_binary_conv_single(a.words[i], w_words, alpha, spec, n) for i in range(a.shape[0])])


def binary_conv2d_dense(x, w, alpha, spec: ConvSpec) -> np.ndarray:
    """Convenience wrapper: pack real inputs/weights, then run ``binary_conv2d``."""
    return binary_conv2d(pack_activations(x), pack_weights(w), alpha, spec)


# --------------------------------------------------------------------------
# naive float reference (benchmark baseline)
# --------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _conv_naive_numba(xpad, w, stride, oh, ow):
    c_out, c_in, k, _ = w.shape
    out = np.zeros((c_out, oh, ow), dtype=np.float32)
    for o in prange(c_out):
        for y in range(oh):
            for x in range(ow):
                acc = np.float32(0.0)
                for c in range(c_in):
                    for dy in range(k):
                        for dx in range(k):
                            acc += w[o, c, dy, dx] * xpad[c, y * stride + dy, x * stride + dx]
                out[o, y, x] = acc
    return out


def _conv_naive_numpy(xpad, w, stride, oh, ow):
    c_out, c_in, k, _ = w.shape
    out = np.zeros((c_out, oh, ow), dtype=np.float32)
    for dy in range(k):
        for dx in range(k):
            sl = xpad[:, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride]
            out += np.tensordot(w[:, :, dy, dx], sl, axes=(1, 0))
    return out


def conv2d_reference(x, w, spec: ConvSpec, pad_value: float = 0.0) -> np.ndarray:
    """Direct-loop float convolution of a single ``(C, H, W)`` image."""
    x = np.asarray(x, dtype=np.float32)
    w = np.ascontiguousarray(w, dtype=np.float32)
    p = spec.padding
    xpad = np.pad(x, ((0, 0), (p, p), (p, p)), constant_values=pad_value) if p else np.ascontiguousarray(x)
    oh, ow = spec.out_size(x.shape[1], x.shape[2])
    if _accel.HAVE_NUMBA:
        return _conv_naive_numba(xpad, w, spec.stride, oh, ow)
    return _conv_naive_numpy(xpad, w, spec.stride, oh, ow)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def upsample_nearest(x, factor: int) -> np.ndarray:
    """Replicate each pixel ``factor x factor`` times over the last two axes."""
    if factor not in (1, 2, 4, 8):
        raise InvalidInputError(f"upsample factor must be a power of two up to 8, got {factor}")
    x = np.asarray(x)
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1)


def avg_pool(x, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` mean pooling over the last two axes."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise InvalidInputError(f"spatial dims {h}x{w} not divisible by {factor}")
    lead = x.shape[:-2]
    return x.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


__all__ = [
    "BINARY",
    "REAL",
    "ConvSpec",
    "OpCount",
    "WORD_BITS",
    "avg_pool",
    "binary_conv2d",
    "binary_conv2d_dense",
    "col2im",
    "conv2d_nchw",
    "conv2d_reference",
    "count_ops",
    "im2col",
    "real_conv2d",
    "upsample_nearest",
]
