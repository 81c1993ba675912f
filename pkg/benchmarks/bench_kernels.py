"""Compare the compiled geometry kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Workloads match what one rendered frame asks of each kernel at the default
64 x 64 resolution. Both backends are checked for identical outputs first.
"""

import argparse
import timeit

import numpy as np

from latentdrive import kernels
from latentdrive.kernels import _pykernels
from latentdrive.worldsim.render import bev_grid, ray_dirs

try:
    from latentdrive.kernels import _ckernels
except ImportError:
    _ckernels = None


def random_boxes(rng, n, spread=30.0):
    h = rng.uniform(-np.pi, np.pi, n)
    return np.column_stack([
        rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
        np.cos(h), np.sin(h), rng.uniform(1.0, 20.0, n), rng.uniform(1.0, 4.0, n),
    ])


def workloads(rng):
    grid = np.ascontiguousarray(bev_grid(64, 32.0))
    boxes = random_boxes(rng, 40)
    segs = rng.uniform(-20, 20, size=(60, 4))
    dirs = ray_dirs(360)
    cars = random_boxes(rng, 9, spread=15.0)
    cars[:, 4:] = (2.25, 1.0)
    return {
        "points_in_boxes (4096 px, 40 boxes)": lambda impl: kernels.points_in_boxes(grid, boxes, impl=impl),
        "points_near_segments (4096 px, 60 segs)": lambda impl: kernels.points_near_segments(grid, segs, 0.25, impl=impl),
        "raycast_boxes (360 rays, 9 boxes)": lambda impl: kernels.raycast_boxes((0.0, 0.0), dirs, cars, 20.0, impl=impl),
        "boxes_overlap (1 vs 9)": lambda impl: kernels.boxes_overlap(cars[0], cars[1:], impl=impl),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<42}{'numpy (ms)':>12}{'cython (ms)':>13}{'speedup':>10}")
    for name, fn in workloads(rng).items():
        a, b = fn(_pykernels), fn(_ckernels)
        if not np.array_equal(np.asarray(a), np.asarray(b)):
            raise SystemExit(f"backends disagree on {name}")
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<42}{t_py:>12.3f}{t_c:>13.3f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
