"""View transforms shared by teacher and student.

Pinhole projection, frustum generation with discrete depth bins, the
depth/context conv heads, feature lifting, BEV sum-pooling, and the pillar
encoder that turns raw LiDAR points into a BEV feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import Conv2d, Linear, Module


@dataclass(frozen=True)
class BevGrid:
    """Shared BEV extent and resolution for both branches and both models."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx <= 0 or self.ny <= 0:
            raise ValueError(f"grid cells must be positive, got nx={self.nx}, ny={self.ny}")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError("grid extent must be non-empty")

    @property
    def cell_w(self):
        return (self.x_max - self.x_min) / self.nx

    @property
    def cell_h(self):
        return (self.y_max - self.y_min) / self.ny

    @property
    def n_cells(self):
        return self.nx * self.ny

    def cell_of(self, x, y):
        """Containing cell (ix, iy) of metric coordinates; may be out of range."""
        ix = np.floor((np.asarray(x) - self.x_min) / self.cell_w).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.y_min) / self.cell_h).astype(np.int64)
        return ix, iy

    def cell_coords(self, x, y):
        """Continuous cell coordinates where integer values are cell centers."""
        cx = (np.asarray(x) - self.x_min) / self.cell_w - 0.5
        cy = (np.asarray(y) - self.y_min) / self.cell_h - 0.5
        return cx, cy

    @staticmethod
    def square(extent, cells):
        return BevGrid(-extent, extent, -extent, extent, cells, cells)


@dataclass(frozen=True)
class DepthBins:
    d_min: float
    d_max: float
    n_bins: int

    def __post_init__(self):
        if self.d_min <= 0:
            raise ValueError(f"d_min must be positive, got {self.d_min}")
        if self.n_bins < 2:
            raise ValueError(f"need at least 2 depth bins, got {self.n_bins}")

    @property
    def width(self):
        return (self.d_max - self.d_min) / self.n_bins

    def centers(self):
        return self.d_min + (np.arange(self.n_bins) + 0.5) * self.width


def project_points(view, pts_ego):
    """Project (P, 3) ego points through a pinhole view.

    Returns (uv (P, 2) pixels, depth (P,) camera-frame z, valid (P,) bool);
    points at or behind the camera plane are flagged invalid.
    """
    pts_ego = np.asarray(pts_ego, dtype=np.float64)
    cam = pts_ego @ view.rot.T + view.trans
    depth = cam[:, 2]
    valid = depth > 1e-9
    z = np.where(valid, depth, 1.0)
    uv = np.stack(
        [view.fx * cam[:, 0] / z + view.cx, view.fy * cam[:, 1] / z + view.cy], axis=1
    )
    return uv, depth, valid


def unproject_pixel(view, u, v, depth):
    """Ego-frame point of pixel (u, v) at camera-frame depth."""
    cam = np.array([(u - view.cx) / view.fx * depth, (v - view.cy) / view.fy * depth, depth])
    return view.rot.T @ (cam - view.trans)


@dataclass
class FrustumPoints:
    """One ego point per (view, feature pixel, depth bin), plus provenance."""

    ego: np.ndarray  # (P, 3) in (view, row, col, bin) row-major order
    view: np.ndarray  # (P,) int
    u: np.ndarray  # (P,) source pixel column
    v: np.ndarray  # (P,) source pixel row
    k: np.ndarray  # (P,) depth bin
    n_views: int
    h_feat: int
    w_feat: int
    n_bins: int

    @property
    def count(self):
        return self.ego.shape[0]


def gen_frustum(rig, feat_size, bins: DepthBins):
    """Ego-frame point cloud of the camera frustum at feature resolution.

    Feature cell (i, j) rays pass through the center of its image patch;
    each ray is scattered at every bin-center depth.
    """
    h_f, w_f = feat_size
    pts = []
    views = []
    us = []
    vs = []
    ks = []
    centers = bins.centers()
    for vi, view in enumerate(rig):
        su = view.w_img / w_f
        sv = view.h_img / h_f
        for i in range(h_f):
            v_pix = (i + 0.5) * sv
            for j in range(w_f):
                u_pix = (j + 0.5) * su
                for k, d in enumerate(centers):
                    pts.append(unproject_pixel(view, u_pix, v_pix, d))
                    views.append(vi)
                    us.append(u_pix)
                    vs.append(v_pix)
                    ks.append(k)
    return FrustumPoints(
        ego=np.array(pts), view=np.array(views), u=np.array(us), v=np.array(vs),
        k=np.array(ks, dtype=np.int64), n_views=len(rig), h_feat=h_f, w_feat=w_f,
        n_bins=bins.n_bins,
    )


class SmallConvStack(Module):
    """Two padded 3x3 convs with relu, then a 1x1 head (DepthNet / context net)."""

    def __init__(self, rng, c_in, c_mid, c_out, head_bias=0.0, zero_head=False):
        self.conv1 = Conv2d(rng, c_in, c_mid, 3)
        self.conv2 = Conv2d(rng, c_mid, c_mid, 3)
        self.head = Conv2d(rng, c_mid, c_out, 1, bias_init=head_bias, zero=zero_head)

    def __call__(self, x):
        x = ad.relu(self.conv1(x))
        x = ad.relu(self.conv2(x))
        return self.head(x)


def lift(context, depth_logits, frustum: FrustumPoints):
    """Scatter per-pixel context along each ray, weighted by depth softmax.

    context: (B*V, C, h, w), depth_logits: (B*V, D, h, w) -> (B, P, C) point
    features in frustum order. The depth softmax sums to one per pixel, so
    summing a pixel's bins recovers its context vector exactly.
    """
    bv, c, h, w = context.shape
    d = depth_logits.shape[1]
    v = frustum.n_views
    b = bv // v
    probs = ad.softmax(depth_logits, axis=1)
    probs = ad.reshape(ad.transpose(probs, (0, 2, 3, 1)), (b, v * h * w * d, 1))
    ctx = ad.reshape(ad.transpose(context, (0, 2, 3, 1)), (b, v * h * w, 1, c))
    ctx = ad.reshape(ad.broadcast_to(ctx, (b, v * h * w, d, c)), (b, v * h * w * d, c))
    return ad.mul(ad.broadcast_to(probs, (b, v * h * w * d, c)), ctx)


def frustum_cells(frustum: FrustumPoints, grid: BevGrid):
    """Static (valid_rows, flat_cell_index) of frustum points inside the grid."""
    ix, iy = grid.cell_of(frustum.ego[:, 0], frustum.ego[:, 1])
    ok = (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny)
    rows = np.nonzero(ok)[0]
    return rows, iy[ok] * grid.nx + ix[ok]


def bev_pool(point_feats, frustum: FrustumPoints, grid: BevGrid):
    """Sum-aggregate (B, P, C) frustum point features into (B, C, ny, nx).

    Out-of-extent points are dropped; in-extent points bin by floor to the
    containing cell; accumulation order is the point order, so the result
    is bitwise stable.
    """
    rows, cells = frustum_cells(frustum, grid)
    b, _, c = point_feats.shape
    kept = ad.take(point_feats, rows, axis=1, unique=True)
    pooled = ad.scatter_add(kept, cells, grid.n_cells)  # (B, n_cells, C)
    return ad.reshape(ad.transpose(pooled, (0, 2, 1)), (b, c, grid.ny, grid.nx))


class PillarEncoder(Module):
    """LiDAR points -> BEV feature map via per-cell max pooling.

    Per point features are (z, intensity, dx, dy) offsets to the containing
    cell center; a shared linear + relu embeds them, a per-cell max reduces
    each occupied pillar, and a 1x1 conv mixes channels. Empty cells stay 0.
    """

    def __init__(self, rng, grid: BevGrid, c_hidden=16, c_out=16):
        self.grid = grid
        self.embed = Linear(rng, 4, c_hidden)
        self.mix = Conv2d(rng, c_hidden, c_out, 1)
        self.c_hidden = c_hidden

    def pillar_features(self, points):
        """Per-point encodings and flat cell indices for in-extent points."""
        grid = self.grid
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
        ix, iy = grid.cell_of(pts[:, 0], pts[:, 1])
        ok = (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny)
        pts = pts[ok]
        ix, iy = ix[ok], iy[ok]
        cx = grid.x_min + (ix + 0.5) * grid.cell_w
        cy = grid.y_min + (iy + 0.5) * grid.cell_h
        feats = np.stack([pts[:, 2], pts[:, 3], pts[:, 0] - cx, pts[:, 1] - cy], axis=1)
        return feats, iy * grid.nx + ix

    def __call__(self, points):
        grid = self.grid
        feats, cells = self.pillar_features(points)
        emb = ad.relu(self.embed(ad.Tensor(feats)))
        per_cell = ad.segment_max(emb, cells, grid.n_cells)  # (n_cells, C)
        bev = ad.reshape(ad.transpose(per_cell, (1, 0)), (self.c_hidden, grid.ny, grid.nx))
        return self.mix(bev)
