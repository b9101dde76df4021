"""Kernel backend selection.

The compiled Cython extension is used when available; otherwise the pure
NumPy fallback. Set ``MVPARSE_PURE_KERNELS=1`` to force the fallback. Both
backends are kept bit-identical (see ``_pure.py``) and are compared by
``benchmarks/bench_kernels.py``.
"""

import os

import numpy as np

if os.environ.get("MVPARSE_PURE_KERNELS", "0") not in ("", "0"):
    from . import _pure as impl
else:
    try:
        from . import _core as impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _pure as impl

BACKEND: str = impl.BACKEND


def render_capsules(ro, dirs, pa, pb, rad, inst, part):
    ro = np.ascontiguousarray(ro, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    pa = np.ascontiguousarray(pa, dtype=np.float64).reshape(-1, 3)
    pb = np.ascontiguousarray(pb, dtype=np.float64).reshape(-1, 3)
    rad = np.ascontiguousarray(rad, dtype=np.float64)
    inst = np.ascontiguousarray(inst, dtype=np.int32)
    part = np.ascontiguousarray(part, dtype=np.int32)
    return impl.render_capsules(ro, dirs, pa, pb, rad, inst, part)


def region_grow(rgb, depth, seeds, allowed, tau_c, tau_d):
    """Grow from ``seeds`` (list of (row, col)); returns a uint8 mask."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1, 2)
    if allowed is None:
        allowed = np.ones(depth.shape, np.uint8)
    allowed = np.ascontiguousarray(allowed, dtype=np.uint8)
    tau_c2 = float(tau_c) * float(tau_c)
    if impl.BACKEND == "cython":
        return impl.region_grow(rgb, depth,
                                np.ascontiguousarray(seeds[:, 0]),
                                np.ascontiguousarray(seeds[:, 1]),
                                allowed, tau_c2, float(tau_d))
    return impl.region_grow(rgb, depth, seeds[:, 0], seeds[:, 1],
                            allowed, tau_c2, float(tau_d))


def knn_mean_dists(points, k):
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    return impl.knn_mean_dists(points, int(k))
