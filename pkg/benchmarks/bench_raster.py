"""Forward and backward rasterization timings, compiled kernels vs numpy fallback.

    python benchmarks/bench_raster.py [--n 300] [--size 64] [--repeat 5]
"""
import argparse
import time

import numpy as np

from lumos3d.renderer import BACKEND, RenderOptions, render, render_backward
from lumos3d.synth import gen_scene


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=300)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    scene, cams, _ = gen_scene(0, args.n, n_views=4, width=args.size, height=args.size)
    cam = cams[0]
    g = np.random.default_rng(0).normal(size=(cam.height, cam.width, 3))
    backends = ["numpy"] + (["cython"] if BACKEND == "cython" else [])
    print(f"{args.n} primitives, {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'backend':8s} {'precision':9s} {'forward ms':>11s} {'backward ms':>12s}")
    ref = None
    for precision in ("float32", "float64"):
        for name in backends:
            opts = RenderOptions(precision=precision, backend=name)
            out = render(scene, cam, opts)
            fwd = best_of(lambda: render(scene, cam, opts), args.repeat)
            bwd = best_of(lambda: render_backward(scene, cam, opts, g, None, None, out), args.repeat)
            print(f"{name:8s} {precision:9s} {1e3 * fwd:11.2f} {1e3 * bwd:12.2f}")
            if precision == "float64":
                if ref is None:
                    ref = out.rgb
                else:
                    print(f"max |rgb difference| vs numpy: {np.abs(out.rgb - ref).max():.2e}")
    if BACKEND != "cython":
        print("compiled kernels unavailable; only the fallback was timed")


if __name__ == "__main__":
    main()
