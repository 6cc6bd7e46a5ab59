"""Numba-accelerated hot kernels (default backend).

Each kernel matches numpy_impl semantics exactly: accumulation runs in a
fixed order per output element, so results are bitwise reproducible across
runs regardless of thread count.
"""

import numpy as np
from numba import njit, prange

BACKEND_NAME = "numba"

_JIT = dict(cache=True, nogil=True)


@njit(parallel=True, **_JIT)
def scatter_add_forward(values, index, n_cells):
    b, p, c = values.shape
    out = np.zeros((b, n_cells, c))
    for i in prange(b):
        for j in range(p):
            cell = index[j]
            for k in range(c):
                out[i, cell, k] += values[i, j, k]
    return out


@njit(parallel=True, **_JIT)
def scatter_add_backward(grad_out, index):
    b, _, c = grad_out.shape
    p = index.shape[0]
    grad = np.empty((b, p, c))
    for i in prange(b):
        for j in range(p):
            cell = index[j]
            for k in range(c):
                grad[i, j, k] = grad_out[i, cell, k]
    return grad


@njit(**_JIT)
def segment_max_forward(values, index, n_cells):
    p, c = values.shape
    out = np.zeros((n_cells, c))
    arg = np.full((n_cells, c), -1, dtype=np.int64)
    for j in range(p):
        cell = index[j]
        for k in range(c):
            # strict > keeps the earliest row on ties
            if arg[cell, k] < 0 or values[j, k] > out[cell, k]:
                out[cell, k] = values[j, k]
                arg[cell, k] = j
    return out, arg


@njit(parallel=True, **_JIT)
def segment_max_backward(grad_out, arg, p):
    n_cells, c = grad_out.shape
    grad = np.zeros((p, c))
    for cell in prange(n_cells):
        for k in range(c):
            j = arg[cell, k]
            if j >= 0:
                grad[j, k] += grad_out[cell, k]
    return grad


@njit(parallel=True, **_JIT)
def bilinear_forward(maps, pts):
    b, c, h, w = maps.shape
    p = pts.shape[1]
    out = np.empty((b, p, c))
    for i in prange(b):
        for j in range(p):
            gx = pts[i, j, 0] * w - 0.5
            gy = pts[i, j, 1] * h - 0.5
            x0 = np.floor(gx)
            y0 = np.floor(gy)
            wx = gx - x0
            wy = gy - y0
            x0c = min(max(int(x0), 0), w - 1)
            x1c = min(max(int(x0) + 1, 0), w - 1)
            y0c = min(max(int(y0), 0), h - 1)
            y1c = min(max(int(y0) + 1, 0), h - 1)
            for k in range(c):
                v0 = (1.0 - wx) * maps[i, k, y0c, x0c] + wx * maps[i, k, y0c, x1c]
                v1 = (1.0 - wx) * maps[i, k, y1c, x0c] + wx * maps[i, k, y1c, x1c]
                out[i, j, k] = (1.0 - wy) * v0 + wy * v1
    return out


@njit(parallel=True, **_JIT)
def bilinear_backward(maps, pts, grad_out):
    b, c, h, w = maps.shape
    p = pts.shape[1]
    grad_maps = np.zeros((b, c, h, w))
    grad_pts = np.empty((b, p, 2))
    for i in prange(b):
        for j in range(p):
            gx = pts[i, j, 0] * w - 0.5
            gy = pts[i, j, 1] * h - 0.5
            x0 = np.floor(gx)
            y0 = np.floor(gy)
            wx = gx - x0
            wy = gy - y0
            x0c = min(max(int(x0), 0), w - 1)
            x1c = min(max(int(x0) + 1, 0), w - 1)
            y0c = min(max(int(y0), 0), h - 1)
            y1c = min(max(int(y0) + 1, 0), h - 1)
            gu = 0.0
            gv = 0.0
            for k in range(c):
                g = grad_out[i, j, k]
                f00 = maps[i, k, y0c, x0c]
                f01 = maps[i, k, y0c, x1c]
                f10 = maps[i, k, y1c, x0c]
                f11 = maps[i, k, y1c, x1c]
                gu += g * ((1.0 - wy) * (f01 - f00) + wy * (f11 - f10))
                gv += g * ((1.0 - wx) * (f10 - f00) + wx * (f11 - f01))
                grad_maps[i, k, y0c, x0c] += g * (1.0 - wy) * (1.0 - wx)
                grad_maps[i, k, y0c, x1c] += g * (1.0 - wy) * wx
                grad_maps[i, k, y1c, x0c] += g * wy * (1.0 - wx)
                grad_maps[i, k, y1c, x1c] += g * wy * wx
            grad_pts[i, j, 0] = gu * w
            grad_pts[i, j, 1] = gv * h
    return grad_maps, grad_pts


@njit(parallel=True, **_JIT)
def raycast_boxes(origins, dirs, boxes, t_max):
    r = origins.shape[0]
    nb = boxes.shape[0]
    best_t = np.full(r, t_max)
    hit_box = np.full(r, -1, dtype=np.int64)
    face_axis = np.zeros(r, dtype=np.int64)
    face_sign = np.zeros(r)
    for i in prange(r):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx_, dy_, dz_ = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        for b in range(nb):
            cx, cy, cz = boxes[b, 0], boxes[b, 1], boxes[b, 2]
            cyaw, syaw = boxes[b, 6], boxes[b, 7]
            px = ox - cx
            py = oy - cy
            lo0 = cyaw * px + syaw * py
            lo1 = -syaw * px + cyaw * py
            lo2 = oz - cz
            ld0 = cyaw * dx_ + syaw * dy_
            ld1 = -syaw * dx_ + cyaw * dy_
            ld2 = dz_
            t_near = -np.inf
            t_far = np.inf
            axis_near = 0
            miss = False
            for ax in range(3):
                if ax == 0:
                    lo, ld, half = lo0, ld0, boxes[b, 3]
                elif ax == 1:
                    lo, ld, half = lo1, ld1, boxes[b, 4]
                else:
                    lo, ld, half = lo2, ld2, boxes[b, 5]
                if abs(ld) < 1e-12:
                    if abs(lo) > half:
                        miss = True
                        break
                    continue
                inv = 1.0 / ld
                t1 = (-half - lo) * inv
                t2 = (half - lo) * inv
                if t1 < t2:
                    t_lo, t_hi = t1, t2
                else:
                    t_lo, t_hi = t2, t1
                if t_lo > t_near:
                    t_near = t_lo
                    axis_near = ax
                if t_hi < t_far:
                    t_far = t_hi
            if miss or t_near > t_far or t_near <= 1e-9 or t_near >= best_t[i]:
                continue
            if axis_near == 0:
                ld = ld0
            elif axis_near == 1:
                ld = ld1
            else:
                ld = ld2
            best_t[i] = t_near
            hit_box[i] = b
            face_axis[i] = axis_near
            face_sign[i] = -1.0 if ld > 0 else (1.0 if ld < 0 else 0.0)
    return best_t, hit_box, face_axis, face_sign


@njit(**_JIT)
def suppress_local_max(heat):
    c, h, w = heat.shape
    keep = np.zeros((c, h, w), dtype=np.bool_)
    for k in range(c):
        for y in range(h):
            for x in range(w):
                v = heat[k, y, x]
                ok = True
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        if dy == 0 and dx == 0:
                            continue
                        ny, nx = y + dy, x + dx
                        if ny < 0 or ny >= h or nx < 0 or nx >= w:
                            continue
                        n = heat[k, ny, nx]
                        # earlier scan-order cell wins ties
                        if dy < 0 or (dy == 0 and dx < 0):
                            if not (v > n):
                                ok = False
                        else:
                            if not (v >= n):
                                ok = False
                keep[k, y, x] = ok
    return keep
