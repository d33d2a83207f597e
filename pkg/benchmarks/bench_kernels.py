"""Time the compiled kernels against the numpy fallback on realistic sizes.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from crowdsim.kernels import _pykernels as py

try:
    from crowdsim.kernels import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def cases(rng):
    h, w = 270, 480
    n = 500
    xs, ys = rng.uniform(0, w, n), rng.uniform(0, h, n)
    t = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    vx = 240 + 200 * np.cos(t) * (1 + 0.2 * np.sin(3 * t))
    vy = 135 + 120 * np.sin(t)
    px, py_ = rng.uniform(0, w, 20000), rng.uniform(0, h, 20000)
    r = rng.uniform(1.5, 5.0, 300)
    hx, hy = rng.uniform(10, w - 10, 300), rng.uniform(10, h - 30, 300)
    glyphs = np.column_stack([hx, hy, r, hx, hy + 2.6 * r, 1.2 * r, 2.0 * r])
    colors = rng.random((300, 2, 3))
    return {
        "splat_gaussians (500 heads, 270x480)": (
            lambda m: m.splat_gaussians(xs, ys, np.full(n, 4.0), h, w, 4.0)),
        "points_in_polygon (20k points, 12 vertices)": (lambda m: m.points_in_polygon(px, py_, vx, vy)),
        "render_glyphs (300 persons, 270x480)": (lambda m: m.render_glyphs(glyphs, colors, h, w)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<46}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  max |diff|")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<46}{t_py:>10.2f}{'n/a':>11}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(np.asarray(fn(py), dtype=float) - np.asarray(fn(cy), dtype=float))))
        print(f"{name:<46}{t_py:>10.2f}{t_cy:>11.2f}{t_py / t_cy:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
