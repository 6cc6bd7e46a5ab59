"""Benchmark the numba kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_backends.py
The shapes mirror one real training step at the default desk scale.
"""

import time

import numpy as np

from bevsim.kernels import conv, numpy_impl

try:
    from bevsim.kernels import numba_impl
except ImportError:
    numba_impl = None

RNG = np.random.default_rng(0)
REPEAT = 20


def timeit(fn, *args):
    fn(*args)  # warm-up / JIT compile
    t0 = time.perf_counter()
    for _ in range(REPEAT):
        fn(*args)
    return (time.perf_counter() - t0) / REPEAT * 1e3  # ms


def bench_pair(name, args_fn):
    args = args_fn()
    t_np = timeit(getattr(numpy_impl, name), *args)
    if numba_impl is None:
        print(f"{name:<24} numpy {t_np:8.2f} ms   numba     n/a")
        return
    t_nb = timeit(getattr(numba_impl, name), *args)
    print(f"{name:<24} numpy {t_np:8.2f} ms   numba {t_nb:8.2f} ms   "
          f"speedup {t_np / t_nb:6.1f}x")


def main():
    print(f"{'kernel':<24} {'':>22}{'':>20}")

    # frustum pooling: 8 scenes x 4096 lifted points x 16 channels
    bench_pair("scatter_add_forward", lambda: (
        RNG.normal(size=(8, 4096, 16)), RNG.integers(0, 1600, size=4096), 1600))
    bench_pair("scatter_add_backward", lambda: (
        RNG.normal(size=(8, 1600, 16)), RNG.integers(0, 1600, size=4096)))

    # pillar reduction: one sweep of ~600 points
    bench_pair("segment_max_forward", lambda: (
        RNG.normal(size=(600, 16)), RNG.integers(0, 1600, size=600), 1600))

    # deformable attention sampling: 16 view-maps, 512 points each
    maps = RNG.normal(size=(16, 16, 8, 16))
    pts = RNG.uniform(0, 1, size=(16, 512, 2))
    bench_pair("bilinear_forward", lambda: (maps, pts))
    bench_pair("bilinear_backward", lambda: (maps, pts, RNG.normal(size=(16, 512, 16))))

    # rendering: one camera view of rays against 6 boxes
    origins = np.zeros((8192, 3))
    dirs = RNG.normal(size=(8192, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    boxes = RNG.uniform(0.5, 4.0, size=(6, 8))
    boxes[:, 6] = np.cos(boxes[:, 6])
    boxes[:, 7] = np.sin(boxes[:, 7])
    bench_pair("raycast_boxes", lambda: (origins, dirs, boxes, 50.0))

    bench_pair("suppress_local_max", lambda: (RNG.random((3, 40, 40)),))

    # the conv path is shared (im2col + BLAS); timed for context
    x = RNG.normal(size=(8, 32, 40, 40))
    w = RNG.normal(size=(16, 32, 3, 3))
    t = timeit(conv.conv2d_forward, x, w, 1, 1)
    flops = 2 * 8 * 16 * 40 * 40 * 32 * 9
    print(f"{'conv2d (shared BLAS)':<24} {t:8.2f} ms   {flops / t / 1e6:8.1f} GFLOP/s")


if __name__ == "__main__":
    main()
