"""Bit-packed {-1, +1} tensors, the sign quantizer and per-filter scaling.

Encoding: bit 1 means +1 and bit 0 means -1.  Packing always runs along the
last axis, 64 elements per little-endian ``uint64`` word, so a tensor of shape
``(..., n)`` packs into words of shape ``(..., ceil(n / 64))``.  Unused bits in
the final word of each row are set to 1 (the +1 encoding).  Two operands packed
this way XOR to zero in their padding, so padding never reaches a popcount.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, InvalidInputError

WORD_BITS = 64


def as_float_tensor(x, *, name: str = "x") -> np.ndarray:
    """Validate ``x`` as a finite real array and return it as an ndarray."""
    arr = np.asarray(x)
    if arr.dtype.kind not in "fiub":
        raise InvalidInputError(f"{name}: expected a real array, got dtype {arr.dtype}")
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: non-finite values are not admitted")
    return arr


def words_for(n: int) -> int:
    return -(-n // WORD_BITS)


@dataclass(frozen=True, eq=False)
class BitTensor:
    """A ±1 tensor stored one bit per element, packed along the last axis."""

    shape: tuple[int, ...]
    words: np.ndarray
    pad_bits: int

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if not shape or shape[-1] < 1:
            raise CorruptionError(f"shape {shape} has no packable last axis")
        if not isinstance(self.words, np.ndarray) or self.words.dtype != np.uint64:
            raise CorruptionError("words must be a uint64 ndarray")
        n_words = words_for(shape[-1])
        expected = shape[:-1] + (n_words,)
        if self.words.shape != expected:
            raise CorruptionError(f"word array shape {self.words.shape} does not match {expected}")
        if self.pad_bits != n_words * WORD_BITS - shape[-1]:
            raise CorruptionError(f"pad_bits={self.pad_bits} inconsistent with last extent {shape[-1]}")
        if self.pad_bits:
            mask = np.uint64(((1 << self.pad_bits) - 1) << (WORD_BITS - self.pad_bits))
            if np.any((self.words[..., -1] & mask) != mask):
                raise CorruptionError("pad bits must hold the +1 encoding")
        self.words.setflags(write=False)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nbytes(self) -> int:
        return int(self.words.nbytes)

    def count_positive(self) -> int:
        """Number of +1 elements (padding excluded)."""
        rows = int(np.prod(self.shape[:-1], dtype=np.int64))
        return int(np.bitwise_count(self.words).sum()) - rows * self.pad_bits


def pack(x) -> BitTensor:
    """Pack ``x`` along its last axis; elements >= 0 encode as +1."""
    arr = as_float_tensor(x)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    n = arr.shape[-1]
    if n == 0:
        raise InvalidInputError("cannot pack an empty last axis")
    n_words = words_for(n)
    pad = n_words * WORD_BITS - n
    bits = arr >= 0
    if pad:
        fill = np.ones(arr.shape[:-1] + (pad,), dtype=bool)
        bits = np.concatenate([bits, fill], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)
    return BitTensor(arr.shape, words, pad)


def unpack(b: BitTensor, dtype=np.float32) -> np.ndarray:
    """Expand a BitTensor back to a dense ±1 array of ``b.shape``."""
    if not isinstance(b, BitTensor):
        raise CorruptionError("unpack expects a BitTensor")
    raw = np.ascontiguousarray(b.words).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")[..., : b.shape[-1]]
    return (bits.astype(dtype) * 2 - 1).reshape(b.shape)


def sign(x) -> np.ndarray:
    """Elementwise sign with 0 mapped to +1."""
    x = np.asarray(x)
    return np.where(x >= 0, 1, -1).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def sign_quantize(x) -> BitTensor:
    """Binarize a finite real tensor: +1 where x >= 0, -1 elsewhere."""
    return pack(as_float_tensor(x))


def compute_scale(w, k: int | None = None, c_in: int | None = None) -> np.ndarray:
    """Per-output-filter scale: L1 norm of each filter over ``k * k * c_in``.

    ``w`` has shape ``(c_out, c_in, k, k)``.  An all-zero filter gets scale 0.
    """
    w = as_float_tensor(w, name="w")
    if w.ndim != 4:
        raise InvalidInputError(f"weights must be (c_out, c_in, k, k), got {w.shape}")
    c_out, ci, kh, kw = w.shape
    if kh != kw:
        raise InvalidInputError("only square kernels are supported")
    if k is not None and k != kh:
        raise InvalidInputError(f"kernel extent {k} does not match weights {kh}")
    if c_in is not None and c_in != ci:
        raise InvalidInputError(f"c_in {c_in} does not match weights {ci}")
    n = ci * kh * kw
    if n == 0 or c_out == 0:
        raise InvalidInputError("zero-sized filter")
    return np.abs(w).reshape(c_out, n).sum(axis=1) / n


def pack_activations(x) -> BitTensor:
    """Channel-last packing of ``(C, H, W)`` or ``(N, C, H, W)`` activations.

    The result has shape ``(..., H, W, C)`` so each pixel's channel vector is
    a contiguous run of words.
    """
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise InvalidInputError(f"activations must be (C,H,W) or (N,C,H,W), got {x.shape}")
    return pack(np.moveaxis(x, -3, -1))


def pack_weights(w) -> BitTensor:
    """Pack ``(c_out, c_in, k, k)`` weights as ``(c_out, k, k, c_in)`` rows."""
    w = np.asarray(w)
    if w.ndim != 4:
        raise InvalidInputError(f"weights must be (c_out, c_in, k, k), got {w.shape}")
    return pack(np.transpose(w, (0, 2, 3, 1)))
