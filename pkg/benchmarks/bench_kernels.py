"""Benchmark the compiled kernels against the pure NumPy fallback.

Run: python benchmarks/bench_kernels.py [--repeat N]

Prints per-kernel timings for both backends plus the speedup, and verifies
that the outputs agree bit for bit.
"""

import argparse
import time
import warnings

import numpy as np

from mvparse._kernels import _pure

try:
    from mvparse._kernels import _core
except ImportError:
    _core = None

from mvparse.synth import _camera_rays, generate_scene


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_render(repeat):
    scene = generate_scene(3, 2, 0.6, image_size=256, seed=5)
    calib = scene.calibrations[0]
    ro, dirs = _camera_rays(calib)
    caps = scene.capsules
    pa = np.ascontiguousarray([c.pa for c in caps])
    pb = np.ascontiguousarray([c.pb for c in caps])
    rad = np.array([c.radius for c in caps])
    inst = np.array([c.instance_id for c in caps], np.int32)
    part = np.array([c.part_id for c in caps], np.int32)
    args = (ro, dirs, pa, pb, rad, inst, part)
    label = f"render_capsules 256x256, {len(caps)} capsules"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t_pure, out_pure = timeit(lambda: _pure.render_capsules(*args), repeat)
        if _core is None:
            return label, t_pure, None, True
        t_core, out_core = timeit(lambda: _core.render_capsules(*args), repeat)
    same = all(np.array_equal(a, b) for a, b in zip(out_pure, out_core))
    return label, t_pure, t_core, same


def bench_region_grow(repeat):
    scene = generate_scene(3, 1, 0.6, image_size=256, seed=5)
    view = scene.views[0]
    seeds = np.argwhere(view.instance_mask == 1)[::50]
    allowed = np.ones(view.depth.shape, np.uint8)
    tau_c2 = 30.0 ** 2
    label = f"region_grow 256x256, {len(seeds)} seeds"
    t_pure, out_pure = timeit(
        lambda: _pure.region_grow(view.rgb, view.depth, seeds[:, 0], seeds[:, 1],
                                  allowed, tau_c2, 0.10), repeat)
    if _core is None:
        return label, t_pure, None, True
    rows = np.ascontiguousarray(seeds[:, 0])
    cols = np.ascontiguousarray(seeds[:, 1])
    t_core, out_core = timeit(
        lambda: _core.region_grow(view.rgb, view.depth, rows, cols,
                                  allowed, tau_c2, 0.10), repeat)
    return label, t_pure, t_core, np.array_equal(out_pure, out_core)


def bench_knn(repeat):
    rng = np.random.default_rng(0)
    pts = np.ascontiguousarray(rng.normal(size=(6000, 3)))
    label = f"knn_mean_dists n={len(pts)}, k=20"
    t_pure, out_pure = timeit(lambda: _pure.knn_mean_dists(pts, 20), repeat)
    if _core is None:
        return label, t_pure, None, True
    t_core, out_core = timeit(lambda: _core.knn_mean_dists(pts, 20), repeat)
    return label, t_pure, t_core, np.array_equal(out_pure, out_core)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _core is None:
        print("compiled backend not available; timing the fallback only\n")
    rows = [bench_render(args.repeat), bench_region_grow(args.repeat),
            bench_knn(args.repeat)]
    print(f"{'kernel':45s} {'pure':>10s} {'cython':>10s} {'speedup':>8s}  bitwise")
    for label, t_pure, t_core, same in rows:
        if t_core is None:
            print(f"{label:45s} {t_pure*1e3:9.2f}ms {'-':>10s} {'-':>8s}  -")
        else:
            print(f"{label:45s} {t_pure*1e3:9.2f}ms {t_core*1e3:9.2f}ms "
                  f"{t_pure/t_core:7.1f}x  {'equal' if same else 'DIFFER'}")


if __name__ == "__main__":
    main()
