"""Timing of the packed XOR/popcount convolution against the direct float loop."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import _accel
from .bitpack import compute_scale, pack_activations, pack_weights, sign
from .errors import InvalidInputError
from .kernels import BINARY, ConvSpec, binary_conv2d, conv2d_reference

# (c_in, c_out, k, out_h, out_w)
DEFAULT_SHAPES = [
    (64, 64, 3, 32, 32),
    (32, 32, 3, 32, 32),
    (128, 128, 3, 16, 16),
    (64, 64, 1, 32, 32),
]

HEADER = ["c_in", "c_out", "k", "out_h", "out_w", "binary_ns_per_op", "float_ns_per_op", "speedup", "identical"]


@dataclass
class BenchRow:
    c_in: int
    c_out: int
    k: int
    out_h: int
    out_w: int
    binary_ns_per_op: float
    float_ns_per_op: float
    speedup: float
    identical: bool

    def values(self) -> list:
        return [getattr(self, h) for h in HEADER]


def parse_shape(text: str) -> tuple[int, int, int, int, int]:
    """``"64x64x3x32x32"`` (c_in, c_out, k, out_h, out_w)."""
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise InvalidInputError(f"bad shape {text!r}") from None
    if len(parts) != 5 or min(parts) < 1:
        raise InvalidInputError(f"shape needs five positive fields c_in x c_out x k x oh x ow, got {text!r}")
    return parts


def _best_time(fn, repeats: int, min_time: float) -> float:
    """Smallest per-call wall time over ``repeats`` rounds of at least ``min_time`` seconds."""
    best = float("inf")
    for _ in range(repeats):
        calls = 0
        t0 = time.perf_counter()
        while True:
            fn()
            calls += 1
            elapsed = time.perf_counter() - t0
            if elapsed >= min_time:
                break
        best = min(best, elapsed / calls)
    return best


def bench_shape(c_in, c_out, k, oh, ow, seed=0, repeats=3, min_time=0.05) -> BenchRow:
    spec = ConvSpec(c_in, c_out, k, 1, mode=BINARY)
    rng = np.random.default_rng(seed)
    x = sign(rng.standard_normal((c_in, oh, ow)))
    w = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
    wb = sign(w)
    alpha = compute_scale(w)
    pw = pack_weights(wb)

    def run_binary():
        return binary_conv2d(pack_activations(x), pw, alpha, spec)

    def run_float():
        return conv2d_reference(x, wb, spec, pad_value=1.0)

    # correctness gate before any timing
    got = run_binary()
    want = run_float() * alpha[:, None, None]
    identical = bool(np.allclose(got, want, rtol=1e-6, atol=1e-6))
    if not identical:
        raise AssertionError(f"packed and reference convolutions disagree at shape {(c_in, c_out, k, oh, ow)}")

    macs = c_in * c_out * k * k * oh * ow
    tb = _best_time(run_binary, repeats, min_time)
    tf = _best_time(run_float, repeats, min_time)
    return BenchRow(c_in, c_out, k, oh, ow, tb * 1e9 / macs, tf * 1e9 / macs, tf / tb, identical)


def run(shapes=None, seed=0, repeats=3, min_time=0.05) -> list[BenchRow]:
    shapes = DEFAULT_SHAPES if shapes is None else shapes
    return [bench_shape(*s, seed=seed, repeats=repeats, min_time=min_time) for s in shapes]


def to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(HEADER)
    for r in rows:
        vals = r.values()
        out.writerow([*vals[:5], f"{vals[5]:.4f}", f"{vals[6]:.4f}", f"{vals[7]:.2f}", int(vals[8])])
    return buf.getvalue()


def backend() -> str:
    return _accel.backend()
