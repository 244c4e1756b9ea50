"""Time the numba and numpy versions of each hot kernel and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 5]

With PSFCN_DISABLE_NUMBA=1 the loop kernels run as plain Python, so only
run that way with small inputs (``--small``).
"""

import argparse
import statistics
import time

import numpy as np

from psfcn import kernels
from psfcn._jit import HAVE_NUMBA
from psfcn.render import make_blobby


def _time(fn, repeat):
    fn()  # warm-up (triggers JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases(small):
    rng = np.random.default_rng(0)
    n, c, h = (2, 8, 16) if small else (32, 32, 32)
    x = rng.standard_normal((n, c, h, h)).astype(np.float32)
    w = rng.standard_normal((c, c, 3, 3)).astype(np.float32)
    cols = kernels.im2col_numpy(x, 3, 1, 1)
    shape = make_blobby(3, 4, 32 if small else 128)
    light = np.array([0.6, 0.3, 0.0])
    light[2] = np.sqrt(1 - light @ light)
    return [
        ("im2col", lambda: kernels.im2col_loops(x, 3, 1, 1), lambda: kernels.im2col_numpy(x, 3, 1, 1)),
        ("col2im", lambda: kernels.col2im_loops(cols, x.shape, 3, 1, 1), lambda: kernels.col2im_numpy(cols, x.shape, 3, 1, 1)),
        ("conv2d_direct", lambda: kernels.conv2d_direct_loops(x, w, 1, 1), lambda: kernels.conv2d_direct_numpy(x, w, 1, 1)),
        (
            "march_shadows",
            lambda: kernels.march_shadows_loops(shape.depth, shape.mask, light),
            lambda: kernels.march_shadows_numpy(shape.depth, shape.mask, light),
        ),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--small", action="store_true", help="tiny inputs (for runs without numba)")
    args = ap.parse_args(argv)
    label = "numba" if HAVE_NUMBA else "python loops (numba disabled)"
    print(f"loop path: {label}; dispatch backend: {kernels.BACKEND}")
    print(f"{'kernel':<15}{'loops [ms]':>12}{'numpy [ms]':>12}{'numpy/loops':>13}  max|diff|")
    for name, fast, ref in cases(args.small):
        a, b = fast(), ref()
        diff = float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))
        t_loop = _time(fast, args.repeat)
        t_np = _time(ref, args.repeat)
        print(f"{name:<15}{t_loop * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_loop:>13.2f}  {diff:.2e}")


if __name__ == "__main__":
    main()
