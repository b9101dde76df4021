# cython: language_level=3
"""Compiled hot kernels.

Every formula here mirrors ``_pure.py`` operand for operand (and the build
disables FP contraction), so the two backends return bit-identical arrays.
When editing a formula here, edit the NumPy twin as well.
"""

cimport cython
from libc.math cimport sqrt, fabs, INFINITY

import numpy as np

BACKEND = "cython"

cdef double _SPHERE_EPS = 1e-18
cdef double _PARALLEL_EPS = 1e-14


cdef inline double _sphere_t(double ox, double oy, double oz, double rr,
                             double rx, double ry, double rz, double rdrd) nogil:
    cdef double b = (ox * rx + oy * ry) + oz * rz
    cdef double c = ((ox * ox + oy * oy) + oz * oz) - rr
    cdef double h = b * b - rdrd * c
    cdef double t
    if h >= 0.0:
        t = (-b - sqrt(h)) / rdrd
        if t > 0.0:
            return t
    return INFINITY


@cython.boundscheck(False)
@cython.wraparound(False)
def render_capsules(const double[::1] ro, const double[:, :, ::1] dirs,
                    const double[:, ::1] pa, const double[:, ::1] pb,
                    const double[::1] rad,
                    const int[::1] inst, const int[::1] part):
    """See ``_pure.render_capsules``."""
    cdef Py_ssize_t H = dirs.shape[0]
    cdef Py_ssize_t W = dirs.shape[1]
    cdef Py_ssize_t M = rad.shape[0]

    depth = np.zeros((H, W))
    inst_map = np.zeros((H, W), np.int32)
    part_map = np.zeros((H, W), np.int32)
    lam_map = np.zeros((H, W))
    cdef double[:, ::1] depth_v = depth
    cdef int[:, ::1] inst_v = inst_map
    cdef int[:, ::1] part_v = part_map
    cdef double[:, ::1] lam_v = lam_map

    # Per-capsule scalars hoisted out of the pixel loop.
    caps = np.empty((M, 13))
    cdef double[:, ::1] cap = caps
    cdef Py_ssize_t m
    cdef double ax, ay, az, bx, by, bz, bax, bay, baz, baba, r, rr
    cdef double oax, oay, oaz, baoa, oaoa, ccyl
    for m in range(M):
        ax = pa[m, 0]; ay = pa[m, 1]; az = pa[m, 2]
        bx = pb[m, 0]; by = pb[m, 1]; bz = pb[m, 2]
        r = rad[m]
        rr = r * r
        bax = bx - ax
        bay = by - ay
        baz = bz - az
        baba = (bax * bax + bay * bay) + baz * baz
        oax = ro[0] - ax
        oay = ro[1] - ay
        oaz = ro[2] - az
        baoa = (bax * oax + bay * oay) + baz * oaz
        oaoa = (oax * oax + oay * oay) + oaz * oaz
        ccyl = (baba * oaoa - baoa * baoa) - rr * baba
        cap[m, 0] = bax; cap[m, 1] = bay; cap[m, 2] = baz
        cap[m, 3] = baba
        cap[m, 4] = oax; cap[m, 5] = oay; cap[m, 6] = oaz
        cap[m, 7] = baoa
        cap[m, 8] = ccyl
        cap[m, 9] = r
        cap[m, 10] = rr
        cap[m, 11] = oaoa
        cap[m, 12] = 0.0

    cdef double rox = ro[0], roy = ro[1], roz = ro[2]
    cdef Py_ssize_t i, j
    cdef double rx, ry, rz, rdrd, rdn
    cdef double best, bestlam, t_cand
    cdef int besti, bestp
    cdef double bard, rdoa, a, b, c, h, sq, tb, y
    cdef double ocx, ocy, ocz, b2, c2, h2, t2, tpa, tpb
    cdef double hx, hy, hz, yh, s, qx, qy, qz, nx, ny, nz, lam

    with nogil:
        for i in range(H):
            for j in range(W):
                rx = dirs[i, j, 0]
                ry = dirs[i, j, 1]
                rz = dirs[i, j, 2]
                rdrd = (rx * rx + ry * ry) + rz * rz
                rdn = sqrt(rdrd)
                best = INFINITY
                besti = 0
                bestp = 0
                bestlam = 0.0
                for m in range(M):
                    bax = cap[m, 0]; bay = cap[m, 1]; baz = cap[m, 2]
                    baba = cap[m, 3]
                    oax = cap[m, 4]; oay = cap[m, 5]; oaz = cap[m, 6]
                    baoa = cap[m, 7]
                    c = cap[m, 8]
                    r = cap[m, 9]
                    rr = cap[m, 10]
                    ax = pa[m, 0]; ay = pa[m, 1]; az = pa[m, 2]
                    bx = pb[m, 0]; by = pb[m, 1]; bz = pb[m, 2]

                    t_cand = INFINITY
                    if baba < _SPHERE_EPS:
                        t_cand = _sphere_t(oax, oay, oaz, rr, rx, ry, rz, rdrd)
                        if t_cand < best:
                            hx = rox + t_cand * rx
                            hy = roy + t_cand * ry
                            hz = roz + t_cand * rz
                            nx = (hx - ax) / r
                            ny = (hy - ay) / r
                            nz = (hz - az) / r
                            lam = -((nx * rx + ny * ry) + nz * rz) / rdn
                            if lam < 0.0:
                                lam = 0.0
                            best = t_cand
                            besti = inst[m]
                            bestp = part[m]
                            bestlam = lam
                        continue

                    bard = (bax * rx + bay * ry) + baz * rz
                    rdoa = (oax * rx + oay * ry) + oaz * rz
                    a = baba * rdrd - bard * bard
                    b = baba * rdoa - baoa * bard
                    h = b * b - a * c
                    if a > _PARALLEL_EPS:
                        if h >= 0.0:
                            sq = sqrt(h)
                            tb = (-b - sq) / a
                            y = baoa + tb * bard
                            if y > 0.0 and y < baba:
                                if tb > 0.0:
                                    t_cand = tb
                            else:
                                if y <= 0.0:
                                    ocx = oax; ocy = oay; ocz = oaz
                                else:
                                    ocx = rox - bx; ocy = roy - by; ocz = roz - bz
                                b2 = (ocx * rx + ocy * ry) + ocz * rz
                                c2 = ((ocx * ocx + ocy * ocy) + ocz * ocz) - rr
                                h2 = b2 * b2 - rdrd * c2
                                if h2 >= 0.0:
                                    t2 = (-b2 - sqrt(h2)) / rdrd
                                    if t2 > 0.0:
                                        t_cand = t2
                    else:
                        tpa = _sphere_t(oax, oay, oaz, rr, rx, ry, rz, rdrd)
                        tpb = _sphere_t(rox - bx, roy - by, roz - bz, rr, rx, ry, rz, rdrd)
                        t_cand = tpa if tpa < tpb else tpb

                    if t_cand < best:
                        hx = rox + t_cand * rx
                        hy = roy + t_cand * ry
                        hz = roz + t_cand * rz
                        yh = (bax * (hx - ax) + bay * (hy - ay)) + baz * (hz - az)
                        s = yh / baba
                        if s < 0.0:
                            s = 0.0
                        elif s > 1.0:
                            s = 1.0
                        qx = ax + s * bax
                        qy = ay + s * bay
                        qz = az + s * baz
                        nx = (hx - qx) / r
                        ny = (hy - qy) / r
                        nz = (hz - qz) / r
                        lam = -((nx * rx + ny * ry) + nz * rz) / rdn
                        if lam < 0.0:
                            lam = 0.0
                        best = t_cand
                        besti = inst[m]
                        bestp = part[m]
                        bestlam = lam

                if best < INFINITY:
                    depth_v[i, j] = best
                    inst_v[i, j] = besti
                    part_v[i, j] = bestp
                    lam_v[i, j] = bestlam

    return depth, inst_map, part_map, lam_map


@cython.boundscheck(False)
@cython.wraparound(False)
def region_grow(const unsigned char[:, :, ::1] rgb, const double[:, ::1] depth,
                const long[::1] seed_rows, const long[::1] seed_cols,
                const unsigned char[:, ::1] allowed, double tau_c2, double tau_d):
    """See ``_pure.region_grow``."""
    cdef Py_ssize_t H = depth.shape[0]
    cdef Py_ssize_t W = depth.shape[1]
    mask = np.zeros((H, W), np.uint8)
    cdef unsigned char[:, ::1] mask_v = mask
    stack_r = np.empty(H * W, np.intp)
    stack_c = np.empty(H * W, np.intp)
    cdef Py_ssize_t[::1] st_r = stack_r
    cdef Py_ssize_t[::1] st_c = stack_c
    cdef Py_ssize_t top = 0
    cdef Py_ssize_t i, r, c, nr, nc, d
    cdef long dr0, dg0, db0
    cdef double dd

    for i in range(seed_rows.shape[0]):
        r = seed_rows[i]
        c = seed_cols[i]
        if 0 <= r < H and 0 <= c < W and depth[r, c] > 0.0 and allowed[r, c] != 0:
            if mask_v[r, c] == 0:
                mask_v[r, c] = 1
                st_r[top] = r
                st_c[top] = c
                top += 1

    with nogil:
        while top > 0:
            top -= 1
            r = st_r[top]
            c = st_c[top]
            for d in range(4):
                if d == 0:
                    nr = r - 1; nc = c
                elif d == 1:
                    nr = r + 1; nc = c
                elif d == 2:
                    nr = r; nc = c - 1
                else:
                    nr = r; nc = c + 1
                if nr < 0 or nr >= H or nc < 0 or nc >= W:
                    continue
                if mask_v[nr, nc] != 0 or allowed[nr, nc] == 0:
                    continue
                if depth[nr, nc] <= 0.0:
                    continue
                dd = fabs(depth[nr, nc] - depth[r, c])
                if dd > tau_d:
                    continue
                dr0 = <long> rgb[nr, nc, 0] - <long> rgb[r, c, 0]
                dg0 = <long> rgb[nr, nc, 1] - <long> rgb[r, c, 1]
                db0 = <long> rgb[nr, nc, 2] - <long> rgb[r, c, 2]
                if (dr0 * dr0 + dg0 * dg0) + db0 * db0 > tau_c2:
                    continue
                mask_v[nr, nc] = 1
                st_r[top] = nr
                st_c[top] = nc
                top += 1

    return mask


@cython.boundscheck(False)
@cython.wraparound(False)
def knn_mean_dists(const double[:, ::1] points, Py_ssize_t k):
    """See ``_pure.knn_mean_dists``."""
    cdef Py_ssize_t n = points.shape[0]
    if n <= k:
        raise ValueError("need more than k points")
    out = np.empty(n)
    cdef double[::1] out_v = out
    buf_arr = np.empty(k)
    cdef double[::1] buf = buf_arr
    cdef Py_ssize_t i, j, q, cnt, pos
    cdef double dx, dy, dz, d2, worst, ssum

    with nogil:
        for i in range(n):
            cnt = 0
            worst = INFINITY
            for j in range(n):
                if j == i:
                    continue
                dx = points[i, 0] - points[j, 0]
                dy = points[i, 1] - points[j, 1]
                dz = points[i, 2] - points[j, 2]
                d2 = (dx * dx + dy * dy) + dz * dz
                if cnt < k:
                    pos = cnt
                    while pos > 0 and buf[pos - 1] > d2:
                        buf[pos] = buf[pos - 1]
                        pos -= 1
                    buf[pos] = d2
                    cnt += 1
                    worst = buf[cnt - 1]
                elif d2 < worst:
                    pos = k - 1
                    while pos > 0 and buf[pos - 1] > d2:
                        buf[pos] = buf[pos - 1]
                        pos -= 1
                    buf[pos] = d2
                    worst = buf[k - 1]
            ssum = 0.0
            for q in range(k):
                ssum = ssum + sqrt(buf[q])
            out_v[i] = ssum / k

    return out
