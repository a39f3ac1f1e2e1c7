"""Time the numba kernels against their pure-numpy fallbacks.

Usage::

    python benchmarks/bench_kernels.py [--repeat N]

Each case runs once per backend to warm up (numba compiles on first call),
then reports the best of ``--repeat`` timings and the speed-up. Outputs of
the two backends are compared for equality as a sanity check.
"""

import argparse
import math
import time

import numpy as np

from obbseg import _jit
from obbseg.geometry import OrientedBox, iou_matrix, obb_to_corners
from obbseg.micronet import Conv
from obbseg.raster import (
    label_components,
    morphology,
    rasterize_polygon,
    trace_contours,
)


def _cases(rng):
    mask = np.zeros((256, 256), bool)
    for _ in range(40):
        b = OrientedBox(*rng.uniform(0, 256, 2), *rng.uniform(4, 40, 2), rng.uniform(-math.pi, math.pi))
        mask |= rasterize_polygon(obb_to_corners(b), 256, 256)
    noisy = mask ^ (rng.random(mask.shape) < 0.05)
    boxes = [OrientedBox(*rng.uniform(0, 200, 2), *rng.uniform(5, 40, 2), rng.uniform(-3, 3)) for _ in range(150)]
    poly = obb_to_corners(OrientedBox(250, 250, 300, 120, 0.4))

    conv = Conv(16, 16, 3, 1)
    conv.params()[0][...] = rng.standard_normal(conv.params()[0].shape)
    x = rng.standard_normal((4, 64, 64, 16))
    dy = rng.standard_normal((4, 64, 64, 16))

    def conv_fb():
        y = conv.forward(x)
        return y, conv.backward(dy)

    return {
        "im2col+col2im (conv 3x3, 4x64x64x16)": conv_fb,
        "morphology open 5x5 (256^2)": lambda: morphology(noisy, "open", 5),
        "label_components (256^2)": lambda: label_components(noisy),
        "trace_contours (256^2)": lambda: trace_contours(noisy),
        "iou_matrix (150x150)": lambda: iou_matrix(boxes, boxes),
        "rasterize_polygon (512^2)": lambda: rasterize_polygon(poly, 512, 512),
    }


def _best(fn, repeat):
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    if isinstance(a, list):
        return len(a) == len(b) and all(np.array_equal(u.pixels, v.pixels) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _jit.NUMBA_AVAILABLE:
        raise SystemExit(f"numba unavailable (or disabled via {_jit.ENV_FLAG}); nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'case':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}  equal")
    for name, fn in _cases(rng).items():
        with _jit.backend("numpy"):
            ref = fn()
            t_np = _best(fn, args.repeat)
        with _jit.backend("numba"):
            out = fn()
            t_nb = _best(fn, args.repeat)
        print(f"{name:40s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.1f}x  {_same(ref, out)}")


if __name__ == "__main__":
    main()
