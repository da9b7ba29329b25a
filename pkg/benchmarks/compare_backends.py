#!/usr/bin/env python3
"""Run the convolution benchmark under the numba kernels and the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time from BIPOSE_DISABLE_NUMBA.

    python3 benchmarks/compare_backends.py [SHAPE ...]

SHAPE is c_in x c_out x k x out_h x out_w, e.g. 64x64x3x32x32.
"""

import os
import subprocess
import sys

CHILD = """
import sys
from bipose import bench
shapes = [bench.parse_shape(s) for s in sys.argv[1:]] or None
print("# backend:", bench.backend())
print(bench.to_csv(bench.run(shapes)), end="")
"""


def main(argv):
    for flag in ("0", "1"):
        env = dict(os.environ, BIPOSE_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", CHILD, *argv], env=env, capture_output=True, text=True)
        if out.returncode:
            sys.stderr.write(out.stderr)
            return out.returncode
        sys.stdout.write(out.stdout + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
