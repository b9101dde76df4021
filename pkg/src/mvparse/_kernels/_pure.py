"""Pure NumPy implementations of the hot kernels.

These are the reference semantics; ``_core.pyx`` mirrors every formula
(including operand grouping) so both backends produce bit-identical
results. When editing a formula here, edit the Cython twin as well.
"""

import numpy as np

BACKEND = "pure"

# Below this squared axis length a capsule is treated as a sphere.
_SPHERE_EPS = 1e-18
# Below this the ray is treated as parallel to the capsule axis.
_PARALLEL_EPS = 1e-14


def _sphere_candidate(ro, cx, cy, cz, rr, rx, ry, rz, rdrd):
    """Nearest positive ray-sphere hit; +inf where the sphere is missed.

    Directions need not be unit length: rdrd = |rd|^2.
    """
    ocx = ro[0] - cx
    ocy = ro[1] - cy
    ocz = ro[2] - cz
    b = (ocx * rx + ocy * ry) + ocz * rz
    c = ((ocx * ocx + ocy * ocy) + ocz * ocz) - rr
    h = b * b - rdrd * c
    sq = np.sqrt(np.where(h >= 0.0, h, 0.0))
    t = (-b - sq) / rdrd
    hit = (h >= 0.0) & (t > 0.0)
    return np.where(hit, t, np.inf)


def render_capsules(ro, dirs, pa, pb, rad, inst, part):
    """Ray-cast a set of capsules (nearest hit wins per pixel).

    ro: (3,) ray origin (world). dirs: (H,W,3) ray directions (world),
    scaled so the ray parameter equals camera-space depth. pa/pb: (M,3)
    capsule segment endpoints; rad: (M,) radii; inst/part: (M,) int32 ids.

    Returns (depth, inst_map, part_map, lambert): depth 0 and ids 0 where
    no capsule is hit; lambert is the clamped cosine between the surface
    normal and the reversed ray direction.
    """
    H, W = dirs.shape[:2]
    rx = dirs[..., 0]
    ry = dirs[..., 1]
    rz = dirs[..., 2]
    rdrd = (rx * rx + ry * ry) + rz * rz
    rd_norm = np.sqrt(rdrd)

    best = np.full((H, W), np.inf)
    inst_map = np.zeros((H, W), np.int32)
    part_map = np.zeros((H, W), np.int32)
    lam_map = np.zeros((H, W))

    n_caps = rad.shape[0]
    for m in range(n_caps):
        r = float(rad[m])
        rr = r * r
        ax, ay, az = (float(v) for v in pa[m])
        bx, by, bz = (float(v) for v in pb[m])
        bax = bx - ax
        bay = by - ay
        baz = bz - az
        baba = (bax * bax + bay * bay) + baz * baz
        oax = ro[0] - ax
        oay = ro[1] - ay
        oaz = ro[2] - az

        if baba < _SPHERE_EPS:
            t_cand = _sphere_candidate(ro, ax, ay, az, rr, rx, ry, rz, rdrd)
            hit = np.isfinite(t_cand)
            hx = ro[0] + t_cand * rx
            hy = ro[1] + t_cand * ry
            hz = ro[2] + t_cand * rz
            nx = (hx - ax) / r
            ny = (hy - ay) / r
            nz = (hz - az) / r
        else:
            bard = (bax * rx + bay * ry) + baz * rz
            baoa = (bax * oax + bay * oay) + baz * oaz
            rdoa = (oax * rx + oay * ry) + oaz * rz
            oaoa = (oax * oax + oay * oay) + oaz * oaz
            a = baba * rdrd - bard * bard
            b = baba * rdoa - baoa * bard
            c = (baba * oaoa - baoa * baoa) - rr * baba
            h = b * b - a * c

            nonpar = a > _PARALLEL_EPS
            root_ok = (h >= 0.0) & nonpar
            sq = np.sqrt(np.where(h >= 0.0, h, 0.0))
            a_safe = np.where(nonpar, a, 1.0)
            tb = (-b - sq) / a_safe
            y = baoa + tb * bard
            in_range = root_ok & (y > 0.0) & (y < baba)
            body_hit = in_range & (tb > 0.0)

            # End caps: tried only when the cylinder root falls outside the
            # segment; the cap at pa handles y <= 0, the one at pb the rest.
            cap_branch = root_ok & ~in_range
            use_pa = y <= 0.0
            ocx = np.where(use_pa, oax, ro[0] - bx)
            ocy = np.where(use_pa, oay, ro[1] - by)
            ocz = np.where(use_pa, oaz, ro[2] - bz)
            b2 = (ocx * rx + ocy * ry) + ocz * rz
            c2 = ((ocx * ocx + ocy * ocy) + ocz * ocz) - rr
            h2 = b2 * b2 - rdrd * c2
            t2 = (-b2 - np.sqrt(np.where(h2 >= 0.0, h2, 0.0))) / rdrd
            cap_hit = cap_branch & (h2 >= 0.0) & (t2 > 0.0)

            t_cand = np.where(body_hit, tb, np.inf)
            t_cand = np.where(cap_hit, t2, t_cand)

            if not np.all(nonpar):
                # Ray parallel to the axis: only the end-cap spheres matter.
                t_pa = _sphere_candidate(ro, ax, ay, az, rr, rx, ry, rz, rdrd)
                t_pb = _sphere_candidate(ro, bx, by, bz, rr, rx, ry, rz, rdrd)
                t_par = np.minimum(t_pa, t_pb)
                t_cand = np.where(nonpar, t_cand, t_par)

            hit = np.isfinite(t_cand)
            hx = ro[0] + t_cand * rx
            hy = ro[1] + t_cand * ry
            hz = ro[2] + t_cand * rz
            # Normal: against the clamped axis point (covers body and caps).
            yh = (bax * (hx - ax) + bay * (hy - ay)) + baz * (hz - az)
            s = yh / baba
            s = np.where(s < 0.0, 0.0, np.where(s > 1.0, 1.0, s))
            qx = ax + s * bax
            qy = ay + s * bay
            qz = az + s * baz
            nx = (hx - qx) / r
            ny = (hy - qy) / r
            nz = (hz - qz) / r

        upd = hit & (t_cand < best)
        if not np.any(upd):
            continue
        lam = -((nx * rx + ny * ry) + nz * rz) / rd_norm
        lam = np.where(lam > 0.0, lam, 0.0)
        best = np.where(upd, t_cand, best)
        inst_map = np.where(upd, np.int32(inst[m]), inst_map)
        part_map = np.where(upd, np.int32(part[m]), part_map)
        lam_map = np.where(upd, lam, lam_map)

    depth = np.where(np.isfinite(best), best, 0.0)
    return depth, inst_map, part_map, lam_map


def region_grow(rgb, depth, seed_rows, seed_cols, allowed, tau_c2, tau_d):
    """Multi-seed region growing over the 4-neighbor pixel graph.

    An edge joins two neighboring pixels when both have valid depth, both
    are allowed, their squared RGB distance is <= tau_c2 and their absolute
    depth difference is <= tau_d. The result is the set of pixels reachable
    from any seed, which is independent of traversal order.
    """
    H, W = depth.shape
    ok = (depth > 0.0) & (allowed != 0)
    rgbi = rgb.astype(np.int64)

    dh = rgbi[:, 1:, :] - rgbi[:, :-1, :]
    col_h = (dh[..., 0] ** 2 + dh[..., 1] ** 2 + dh[..., 2] ** 2) <= tau_c2
    dep_h = np.abs(depth[:, 1:] - depth[:, :-1]) <= tau_d
    edge_h = col_h & dep_h & ok[:, 1:] & ok[:, :-1]

    dv = rgbi[1:, :, :] - rgbi[:-1, :, :]
    col_v = (dv[..., 0] ** 2 + dv[..., 1] ** 2 + dv[..., 2] ** 2) <= tau_c2
    dep_v = np.abs(depth[1:, :] - depth[:-1, :]) <= tau_d
    edge_v = col_v & dep_v & ok[1:, :] & ok[:-1, :]

    mask = np.zeros((H, W), bool)
    for r, c in zip(seed_rows, seed_cols):
        if 0 <= r < H and 0 <= c < W and ok[r, c]:
            mask[r, c] = True

    while True:
        grow = mask.copy()
        grow[:, 1:] |= mask[:, :-1] & edge_h
        grow[:, :-1] |= mask[:, 1:] & edge_h
        grow[1:, :] |= mask[:-1, :] & edge_v
        grow[:-1, :] |= mask[1:, :] & edge_v
        if np.array_equal(grow, mask):
            break
        mask = grow
    return mask.astype(np.uint8)


def knn_mean_dists(points, k):
    """Mean Euclidean distance from each point to its k nearest neighbors.

    The k distances are summed in ascending order so the result matches the
    compiled kernel bit for bit.
    """
    n = points.shape[0]
    if n <= k:
        raise ValueError("need more than k points")
    out = np.empty(n)
    # Chunk rows of the full distance matrix to bound memory at ~32 MB.
    chunk = max(1, int(4_000_000 // n))
    for s in range(0, n, chunk):
        e = min(n, s + chunk)
        diff = points[s:e, None, :] - points[None, :, :]
        d2 = (diff[..., 0] ** 2 + diff[..., 1] ** 2) + diff[..., 2] ** 2
        d2[np.arange(e - s), np.arange(s, e)] = np.inf
        smallest = np.partition(d2, k - 1, axis=1)[:, :k]
        d = np.sqrt(np.sort(smallest, axis=1))
        out[s:e] = d.cumsum(axis=1)[:, -1] / k
    return out
