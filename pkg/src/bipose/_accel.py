"""Backend selection for the hot kernels.

Set ``BIPOSE_DISABLE_NUMBA=1`` to force the pure-numpy code paths even when
numba is importable.  ``BIPOSE_THREADS`` caps numba's thread pool.
"""

from __future__ import annotations

import os

_DISABLED = os.environ.get("BIPOSE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled via BIPOSE_DISABLE_NUMBA")
    import numba
    from numba import njit, prange, types
    from numba.extending import intrinsic

    HAVE_NUMBA = True
    # the bundled TBB is too old; workqueue is always available
    numba.config.THREADING_LAYER = "workqueue"
except ImportError:  # pragma: no cover - exercised with the env flag
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn

    prange = range


if HAVE_NUMBA:

    @intrinsic
    def popcount64(typingctx, x):
        """LLVM ``ctpop`` on a uint64; lowers to a single POPCNT on x86-64."""
        if x != types.uint64:
            return None
        sig = types.uint64(types.uint64)

        def codegen(context, builder, signature, args):
            return builder.ctpop(args[0])

        return sig, codegen

    _threads = os.environ.get("BIPOSE_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))

else:  # pragma: no cover

    def popcount64(x):
        return int(x).bit_count()


def backend() -> str:
    """Name of the active kernel backend: ``"numba"`` or ``"numpy"``."""
    return "numba" if HAVE_NUMBA else "numpy"
