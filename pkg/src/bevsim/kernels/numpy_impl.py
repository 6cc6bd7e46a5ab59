"""Pure-numpy implementations of the hot kernels.

Fallback path for machines without numba (select with BEVSIM_BACKEND=numpy).
Semantics are identical to the numba implementations; summation order within
a kernel is fixed so repeated runs are bitwise reproducible.
"""

import numpy as np

BACKEND_NAME = "numpy"


def scatter_add_forward(values, index, n_cells):
    """Sum rows of `values` into `n_cells` buckets given by `index`.

    values: (B, P, C) float64, index: (P,) int64 -> (B, n_cells, C).
    np.add.at applies updates in index order, matching the sequential loop
    of the numba path within each batch row.
    """
    b, _, c = values.shape
    out = np.zeros((b, n_cells, c))
    for i in range(b):
        np.add.at(out[i], index, values[i])
    return out


def scatter_add_backward(grad_out, index):
    """Gradient of scatter_add w.r.t. values: gather rows back."""
    return grad_out[:, index, :]


def segment_max_forward(values, index, n_cells):
    """Per-bucket, per-channel max with argmax for gradient routing.

    values: (P, C), index: (P,) -> (out (n_cells, C), arg (n_cells, C) int64).
    Empty buckets hold 0 with arg -1. Ties resolve to the earliest row.
    """
    p, c = values.shape
    out = np.zeros((n_cells, c))
    arg = np.full((n_cells, c), -1, dtype=np.int64)
    if p == 0:
        return out, arg
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    cells, starts = np.unique(sorted_idx, return_index=True)
    bounds = np.append(starts, p)
    for i, cell in enumerate(cells):
        rows = order[bounds[i]:bounds[i + 1]]
        block = values[rows]
        rel = np.argmax(block, axis=0)
        out[cell] = block[rel, np.arange(c)]
        arg[cell] = rows[rel]
    return out, arg


def segment_max_backward(grad_out, arg, p):
    """Route each bucket/channel gradient to its argmax row."""
    c = grad_out.shape[1]
    grad = np.zeros((p, c))
    cells, chans = np.nonzero(arg >= 0)
    grad[arg[cells, chans], chans] += grad_out[cells, chans]
    return grad


def _grid_coords(pts, h, w):
    gx = pts[..., 0] * w - 0.5
    gy = pts[..., 1] * h - 0.5
    x0 = np.floor(gx)
    y0 = np.floor(gy)
    wx = gx - x0
    wy = gy - y0
    x0c = np.clip(x0, 0, w - 1).astype(np.int64)
    x1c = np.clip(x0 + 1, 0, w - 1).astype(np.int64)
    y0c = np.clip(y0, 0, h - 1).astype(np.int64)
    y1c = np.clip(y0 + 1, 0, h - 1).astype(np.int64)
    return x0c, x1c, y0c, y1c, wx, wy


def bilinear_forward(maps, pts):
    """Bilinear interpolation on [0,1]^2-normalized coordinates.

    maps: (B, C, H, W), pts: (B, P, 2) as (u toward W, v toward H), cell
    centers at (i + 0.5)/N; out-of-range coordinates clamp to the border.
    Returns (B, P, C).
    """
    b, c, h, w = maps.shape
    x0, x1, y0, y1, wx, wy = _grid_coords(pts, h, w)
    bi = np.arange(b)[:, None]
    f00 = maps[bi, :, y0, x0]
    f01 = maps[bi, :, y0, x1]
    f10 = maps[bi, :, y1, x0]
    f11 = maps[bi, :, y1, x1]
    wxe = wx[..., None]
    wye = wy[..., None]
    return (1.0 - wye) * ((1.0 - wxe) * f00 + wxe * f01) + wye * (
        (1.0 - wxe) * f10 + wxe * f11
    )


def bilinear_backward(maps, pts, grad_out):
    """Gradients of bilinear_forward w.r.t. maps and pts."""
    b, c, h, w = maps.shape
    x0, x1, y0, y1, wx, wy = _grid_coords(pts, h, w)
    bi = np.arange(b)[:, None]
    f00 = maps[bi, :, y0, x0]
    f01 = maps[bi, :, y0, x1]
    f10 = maps[bi, :, y1, x0]
    f11 = maps[bi, :, y1, x1]
    wxe = wx[..., None]
    wye = wy[..., None]

    dwx = (1.0 - wye) * (f01 - f00) + wye * (f11 - f10)
    dwy = (1.0 - wxe) * (f10 - f00) + wxe * (f11 - f01)
    grad_pts = np.empty_like(pts)
    grad_pts[..., 0] = np.sum(grad_out * dwx, axis=-1) * w
    grad_pts[..., 1] = np.sum(grad_out * dwy, axis=-1) * h

    grad_maps = np.zeros_like(maps)
    for corner, (yy, xx) in zip(
        (
            (1.0 - wye) * (1.0 - wxe),
            (1.0 - wye) * wxe,
            wye * (1.0 - wxe),
            wye * wxe,
        ),
        ((y0, x0), (y0, x1), (y1, x0), (y1, x1)),
    ):
        np.add.at(grad_maps, (bi, slice(None), yy, xx), grad_out * corner)
    return grad_maps, grad_pts


_PARALLEL_EPS = 1e-12


def raycast_boxes(origins, dirs, boxes, t_max):
    """Nearest ray/box intersection via the slab method in each box frame.

    origins, dirs: (R, 3); boxes: (B, 8) rows of
    (cx, cy, cz, half_l, half_w, half_h, cos_yaw, sin_yaw).
    Returns (t (R,), hit_box (R,) int64, face_axis (R,) int64,
    face_sign (R,)); misses hold t = t_max, hit_box = -1.
    """
    r = origins.shape[0]
    nb = boxes.shape[0]
    best_t = np.full(r, t_max)
    hit_box = np.full(r, -1, dtype=np.int64)
    face_axis = np.zeros(r, dtype=np.int64)
    face_sign = np.zeros(r)
    for b in range(nb):
        cx, cy, cz, hl, hw, hh, cy_, sy_ = boxes[b]
        dx = origins[:, 0] - cx
        dy = origins[:, 1] - cy
        dz = origins[:, 2] - cz
        lo = np.stack(
            [cy_ * dx + sy_ * dy, -sy_ * dx + cy_ * dy, dz], axis=1
        )
        ld = np.stack(
            [
                cy_ * dirs[:, 0] + sy_ * dirs[:, 1],
                -sy_ * dirs[:, 0] + cy_ * dirs[:, 1],
                dirs[:, 2],
            ],
            axis=1,
        )
        half = np.array([hl, hw, hh])
        t_near = np.full(r, -np.inf)
        t_far = np.full(r, np.inf)
        axis_near = np.zeros(r, dtype=np.int64)
        miss = np.zeros(r, dtype=bool)
        for ax in range(3):
            parallel = np.abs(ld[:, ax]) < _PARALLEL_EPS
            outside = np.abs(lo[:, ax]) > half[ax]
            miss |= parallel & outside
            inv = np.where(parallel, np.inf, 1.0 / np.where(parallel, 1.0, ld[:, ax]))
            t1 = (-half[ax] - lo[:, ax]) * inv
            t2 = (half[ax] - lo[:, ax]) * inv
            t_lo = np.minimum(t1, t2)
            t_hi = np.maximum(t1, t2)
            t_lo = np.where(parallel, -np.inf, t_lo)
            t_hi = np.where(parallel, np.inf, t_hi)
            better = t_lo > t_near
            axis_near = np.where(better & ~parallel, ax, axis_near)
            t_near = np.maximum(t_near, t_lo)
            t_far = np.minimum(t_far, t_hi)
        hit = (~miss) & (t_near <= t_far) & (t_near > 1e-9) & (t_near < best_t)
        sign = -np.sign(ld[np.arange(r), axis_near])
        best_t = np.where(hit, t_near, best_t)
        hit_box = np.where(hit, b, hit_box)
        face_axis = np.where(hit, axis_near, face_axis)
        face_sign = np.where(hit, sign, face_sign)
    return best_t, hit_box, face_axis, face_sign


def suppress_local_max(heat):
    """Keep cells that are the strict 3x3 neighborhood maximum.

    heat: (C, H, W) -> boolean mask of the same shape. Ties go to the
    lexicographically first cell so peaks are never duplicated.
    """
    c, h, w = heat.shape
    pad = np.full((c, h + 2, w + 2), -np.inf)
    pad[:, 1:h + 1, 1:w + 1] = heat
    keep = np.ones((c, h, w), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            if dy == 1 and dx == 1:
                continue
            neigh = pad[:, dy:dy + h, dx:dx + w]
            if dy < 1 or (dy == 1 and dx < 1):
                keep &= heat > neigh
            else:
                keep &= heat >= neigh
    return keep
