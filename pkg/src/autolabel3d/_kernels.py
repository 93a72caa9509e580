"""Compiled inner loops: point/triangle distances, yaw sweeps, ray casting.

Everything here works on plain float64 arrays. Triangles are packed as an
``(m, 3, 3)`` array of vertex coordinates in the template's canonical frame.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _closest_on_triangle(px, py, pz, t):
    # Region classification after Ericson, "Real-Time Collision Detection" 5.1.5.
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    bx, by, bz = t[1, 0], t[1, 1], t[1, 2]
    cx, cy, cz = t[2, 0], t[2, 1], t[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w)


@njit(cache=True)
def _lower_bound(px, py, pz, k, normals, plane_off, boxes):
    h = normals[k, 0] * px + normals[k, 1] * py + normals[k, 2] * pz - plane_off[k]
    lb = h * h
    e = 0.0
    d = boxes[k, 0] - px
    if d > 0.0:
        e += d * d
    d = px - boxes[k, 3]
    if d > 0.0:
        e += d * d
    d = boxes[k, 1] - py
    if d > 0.0:
        e += d * d
    d = py - boxes[k, 4]
    if d > 0.0:
        e += d * d
    d = boxes[k, 2] - pz
    if d > 0.0:
        e += d * d
    d = pz - boxes[k, 5]
    if d > 0.0:
        e += d * d
    return lb if lb > e else e


@njit(cache=True)
def _nearest(px, py, pz, tris, normals, plane_off, boxes, scratch):
    """Squared distance, closest point and triangle index for one query.

    Triangles are visited starting from the one with the smallest lower
    bound; the rest are skipped when their bound (max of plane distance and
    AABB distance) cannot beat the incumbent.
    """
    m = tris.shape[0]
    first = 0
    first_lb = np.inf
    for k in range(m):
        lb = _lower_bound(px, py, pz, k, normals, plane_off, boxes)
        scratch[k] = lb
        if lb < first_lb:
            first_lb = lb
            first = k
    qx, qy, qz = _closest_on_triangle(px, py, pz, tris[first])
    dx, dy, dz = px - qx, py - qy, pz - qz
    best = dx * dx + dy * dy + dz * dz
    bx, by, bz = qx, qy, qz
    bi = first
    for k in range(m):
        if k == first or scratch[k] >= best:
            continue
        qx, qy, qz = _closest_on_triangle(px, py, pz, tris[k])
        dx, dy, dz = px - qx, py - qy, pz - qz
        d = dx * dx + dy * dy + dz * dz
        if d < best or (d == best and k < bi):
            best = d
            bx, by, bz = qx, qy, qz
            bi = k
    return best, bx, by, bz, bi


@njit(cache=True)
def closest_points(points, tris, normals, plane_off, boxes):
    n = points.shape[0]
    sqd = np.empty(n)
    closest = np.empty((n, 3))
    idx = np.empty(n, dtype=np.int64)
    scratch = np.empty(tris.shape[0])
    for i in range(n):
        d, cx, cy, cz, k = _nearest(points[i, 0], points[i, 1], points[i, 2],
                                    tris, normals, plane_off, boxes, scratch)
        sqd[i] = d
        closest[i, 0] = cx
        closest[i, 1] = cy
        closest[i, 2] = cz
        idx[i] = k
    return sqd, closest, idx


@njit(cache=True)
def yaw_sweep(points, offsets, translations, cos_t, sin_t, weights, logvar,
              tris, normals, plane_off, boxes):
    """Per-instance, per-candidate-yaw weighted half-Chamfer values.

    ``points`` are concatenated instance clouds (instance b owns rows
    ``offsets[b]:offsets[b+1]``); each is mapped into the template frame by
    the inverse of the pose (candidate yaw, ``translations[b]``).
    """
    n_inst = offsets.shape[0] - 1
    n_bins = cos_t.shape[0]
    out = np.empty((n_inst, n_bins))
    scratch = np.empty(tris.shape[0])
    for b in range(n_inst):
        lo = offsets[b]
        hi = offsets[b + 1]
        tx, ty, tz = translations[b, 0], translations[b, 1], translations[b, 2]
        for j in range(n_bins):
            c = cos_t[j]
            s = sin_t[j]
            acc = 0.0
            for i in range(lo, hi):
                dx = points[i, 0] - tx
                dy = points[i, 1] - ty
                dz = points[i, 2] - tz
                qx = dx * c - dz * s
                qz = dx * s + dz * c
                d, _, _, _, _ = _nearest(qx, dy, qz, tris, normals, plane_off, boxes, scratch)
                acc += d * weights[i] + logvar[i]
            out[b, j] = acc / (hi - lo)
    return out


@njit(cache=True)
def canonical_closest(points, offsets, translations, yaws, tris, normals, plane_off, boxes):
    """Closest template points (canonical frame) at one pose per instance."""
    n = points.shape[0]
    sqd = np.empty(n)
    closest = np.empty((n, 3))
    scratch = np.empty(tris.shape[0])
    for b in range(offsets.shape[0] - 1):
        c = np.cos(yaws[b])
        s = np.sin(yaws[b])
        tx, ty, tz = translations[b, 0], translations[b, 1], translations[b, 2]
        for i in range(offsets[b], offsets[b + 1]):
            dx = points[i, 0] - tx
            dy = points[i, 1] - ty
            dz = points[i, 2] - tz
            qx = dx * c - dz * s
            qz = dx * s + dz * c
            d, cx, cy, cz, _ = _nearest(qx, dy, qz, tris, normals, plane_off, boxes, scratch)
            sqd[i] = d
            closest[i, 0] = cx
            closest[i, 1] = cy
            closest[i, 2] = cz
    return sqd, closest


@njit(cache=True)
def ray_hits(origin, targets, tris, rel_eps):
    """For each target, the smallest ray parameter in (0, 1 - rel_eps) at
    which the segment origin->target crosses a triangle, or inf."""
    n = targets.shape[0]
    out = np.full(n, np.inf)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for i in range(n):
        rx = targets[i, 0] - ox
        ry = targets[i, 1] - oy
        rz = targets[i, 2] - oz
        best = np.inf
        for k in range(tris.shape[0]):
            t = tris[k]
            e1x, e1y, e1z = t[1, 0] - t[0, 0], t[1, 1] - t[0, 1], t[1, 2] - t[0, 2]
            e2x, e2y, e2z = t[2, 0] - t[0, 0], t[2, 1] - t[0, 1], t[2, 2] - t[0, 2]
            hx = ry * e2z - rz * e2y
            hy = rz * e2x - rx * e2z
            hz = rx * e2y - ry * e2x
            a = e1x * hx + e1y * hy + e1z * hz
            if abs(a) < 1e-14:
                continue
            f = 1.0 / a
            sx, sy, sz = ox - t[0, 0], oy - t[0, 1], oz - t[0, 2]
            u = f * (sx * hx + sy * hy + sz * hz)
            if u < 0.0 or u > 1.0:
                continue
            qx = sy * e1z - sz * e1y
            qy = sz * e1x - sx * e1z
            qz = sx * e1y - sy * e1x
            v = f * (rx * qx + ry * qy + rz * qz)
            if v < 0.0 or u + v > 1.0:
                continue
            tt = f * (e2x * qx + e2y * qy + e2z * qz)
            if tt > 1e-12 and tt < 1.0 - rel_eps and tt < best:
                best = tt
        out[i] = best
    return out


def triangle_planes(tris):
    """Unit normals, plane offsets (n . a) and AABBs (min xyz, max xyz) for
    packed triangles."""
    tris = np.ascontiguousarray(tris, dtype=np.float64)
    normals = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    norm = np.linalg.norm(normals, axis=1)
    degenerate = norm < 1e-300
    norm[degenerate] = 1.0
    normals = normals / norm[:, None]
    # degenerate triangles get a zero normal so the lower bound is 0 (never prunes)
    normals[degenerate] = 0.0
    off = np.einsum("ij,ij->i", normals, tris[:, 0])
    boxes = np.concatenate([tris.min(axis=1), tris.max(axis=1)], axis=1)
    return np.ascontiguousarray(normals), np.ascontiguousarray(off), np.ascontiguousarray(boxes)
