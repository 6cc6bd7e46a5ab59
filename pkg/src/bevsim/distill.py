"""Object-aware masking and the four distillation losses.

Feature losses are MSE against detached teacher maps; the cross-modal loss
is restricted to object regions by a mask built from a Gaussian center
heatmap and a box-interior binary map; prediction distillation weights each
matched teacher detection by its BEV IoU against ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_EPS = 1e-8
SIGMA_FLOOR = 2.0
RADIUS_OVERLAP = 0.1
QFL_BETA = 2.0
MATCH_RADIUS_M = 2.0


def gaussian_radius(h_cells, w_cells, min_overlap):
    """Largest center shift (in cells) keeping IoU >= min_overlap for the
    three corner-shift cases; the smallest of the three roots wins."""
    if h_cells <= 0 or w_cells <= 0:
        raise ValueError(f"box extents must be positive, got {h_cells} x {w_cells}")
    if not 0.0 < min_overlap < 1.0:
        raise ValueError(f"min_overlap must be in (0, 1), got {min_overlap}")
    h, w, o = h_cells, w_cells, min_overlap

    # shifted diagonally: inter (w-r)(h-r), union 2wh - inter
    b1 = h + w
    c1 = w * h * (1 - o) / (1 + o)
    r1 = (b1 - math.sqrt(b1 * b1 - 4 * c1)) / 2.0
    # shrunk inside: inter (w-2r)(h-2r), union wh
    b2 = 2 * (h + w)
    c2 = (1 - o) * w * h
    r2 = (b2 - math.sqrt(b2 * b2 - 16 * c2)) / 8.0
    # grown outside: inter wh, union (w+2r)(h+2r)
    b3 = 2 * o * (h + w)
    c3 = (o - 1) * w * h
    r3 = (-b3 + math.sqrt(b3 * b3 - 16 * o * c3)) / (8.0 * o)
    return max(0.0, min(r1, r2, r3))


def _box_sigma(box, grid):
    cell = grid.cell_w
    r = gaussian_radius(box.size[0] / cell, box.size[1] / cell, RADIUS_OVERLAP)
    return max((2.0 * r + 1.0) / 6.0, SIGMA_FLOOR)


def class_heatmap(boxes, grid, snap=False):
    """Sum of per-object Gaussians evaluated on the cell-center lattice.

    Centers are continuous cell coordinates; `snap=True` moves each center
    to its containing cell so the peak value is exactly 1 (detection
    training targets need discrete positives, the distillation mask does
    not).
    """
    h = np.zeros((grid.ny, grid.nx))
    xs = np.arange(grid.nx)
    ys = np.arange(grid.ny)[:, None]
    for box in boxes:
        cx, cy = grid.cell_coords(box.center[0], box.center[1])
        if snap:
            ix, iy = grid.cell_of(box.center[0], box.center[1])
            cx, cy = float(ix), float(iy)
        sigma = _box_sigma(box, grid)
        h += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
    return h


def heatmap(boxes, grid, num_classes):
    """Overall heatmap: per-class sums added together, clipped to [0, 1]."""
    total = np.zeros((grid.ny, grid.nx))
    for c in range(num_classes):
        total += class_heatmap([b for b in boxes if b.class_id == c], grid)
    return np.clip(total, 0.0, 1.0)


def box_binary_map(boxes, grid):
    """1 where the cell center lies inside any yaw-rotated BEV rectangle."""
    b = np.zeros((grid.ny, grid.nx))
    xs = grid.x_min + (np.arange(grid.nx) + 0.5) * grid.cell_w
    ys = grid.y_min + (np.arange(grid.ny) + 0.5) * grid.cell_h
    gx, gy = np.meshgrid(xs, ys)
    for box in boxes:
        dx = gx - box.center[0]
        dy = gy - box.center[1]
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        inside = (np.abs(lx) <= box.size[0] / 2.0) & (np.abs(ly) <= box.size[1] / 2.0)
        b[inside] = 1.0
    return b


@dataclass
class ObjectMask:
    """mask = binary * heat; zero everywhere outside ground-truth boxes."""

    mask: np.ndarray
    heat: np.ndarray
    binary: np.ndarray


def object_mask(heat, binary):
    return ObjectMask(mask=binary * heat, heat=heat, binary=binary)


def build_object_mask(boxes, grid, num_classes):
    return object_mask(heatmap(boxes, grid, num_classes), box_binary_map(boxes, grid))


# -- feature losses -----------------------------------------------------------

def _check_pair(f_t, f_s):
    if f_t.requires_grad:
        raise ValueError("teacher features must be detached")
    if f_t.shape != f_s.shape:
        raise ValueError(f"feature shapes differ: teacher {f_t.shape} vs student {f_s.shape}")


def imd_loss(f_t, f_s):
    """Mean squared error between camera-branch BEV maps."""
    _check_pair(f_t, f_s)
    return ad.tmean(ad.square(ad.sub(f_s, f_t)))


def mmdf_loss(f_t, f_s):
    """Mean squared error between fused BEV maps."""
    return imd_loss(f_t, f_s)


def cmd_loss(f_t, f_s, mask=None):
    """Masked MSE between LiDAR and simulated-LiDAR maps, (C, ny, nx).

    The per-cell channel-mean squared difference is weighted by the object
    mask and normalized by the mask mass; mask=None falls back to a global
    MSE (the masking-disabled configuration).
    """
    _check_pair(f_t, f_s)
    if mask is None:
        return ad.tmean(ad.square(ad.sub(f_s, f_t)))
    d2 = ad.tmean(ad.square(ad.sub(f_s, f_t)), axis=0)  # (ny, nx)
    if d2.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match cells {d2.shape}")
    weighted = ad.tsum(ad.mul(d2, Tensor(mask)))
    return weighted / max(float(mask.sum()), MASK_EPS)


# -- prediction distillation ---------------------------------------------------

@dataclass
class QualityScore:
    """Per-detection confidence weight: BEV IoU with its matched box."""

    score: float
    matched_gt: int | None


def _aa_iou(ca, ha, cb, hb):
    ix = max(0.0, min(ca[0] + ha[0], cb[0] + hb[0]) - max(ca[0] - ha[0], cb[0] - hb[0]))
    iy = max(0.0, min(ca[1] + ha[1], cb[1] + hb[1]) - max(ca[1] - ha[1], cb[1] - hb[1]))
    inter = ix * iy
    union = 4.0 * ha[0] * ha[1] + 4.0 * hb[0] * hb[1] - inter
    return inter / union if union > 0 else 0.0


def derotated_iou(det_box, gt_box):
    """BEV IoU after rotating both footprints into the ground-truth frame
    and treating them as axis-aligned."""
    c, s = math.cos(gt_box.yaw), math.sin(gt_box.yaw)
    dx = det_box.center[0] - gt_box.center[0]
    dy = det_box.center[1] - gt_box.center[1]
    local = (c * dx + s * dy, -s * dx + c * dy)
    return _aa_iou(
        (0.0, 0.0), (gt_box.size[0] / 2.0, gt_box.size[1] / 2.0),
        local, (det_box.size[0] / 2.0, det_box.size[1] / 2.0),
    )


def quality_score(teacher_dets, gt_boxes):
    """Greedy one-to-one matching by descending confidence to the nearest
    same-class ground-truth center within 2 m; unmatched scores are 0."""
    order = sorted(range(len(teacher_dets)), key=lambda i: -teacher_dets[i].confidence)
    used = set()
    scores = [QualityScore(0.0, None) for _ in teacher_dets]
    for i in order:
        det = teacher_dets[i]
        best = None
        best_d = MATCH_RADIUS_M
        for j, gt in enumerate(gt_boxes):
            if j in used or gt.class_id != det.box.class_id:
                continue
            d = math.hypot(det.box.center[0] - gt.center[0], det.box.center[1] - gt.center[1])
            if d <= best_d:
                best_d = d
                best = j
        if best is not None:
            used.add(best)
            scores[i] = QualityScore(derotated_iou(det.box, gt_boxes[best]), best)
    return scores


def smooth_l1_terms(diff):
    """Elementwise 0.5 d^2 inside |d| < 1, |d| - 0.5 outside."""
    quad = ad.mul(ad.square(diff), 0.5)
    over = ad.relu(ad.sub(ad.absolute(diff), 1.0))
    return ad.sub(quad, ad.mul(ad.square(over), 0.5))


def qfl_terms(p, y, beta=QFL_BETA):
    """Elementwise quality focal loss with a soft target y in [0, 1]."""
    pc = ad.clip(p, 1e-6, 1.0 - 1e-6)
    yt = y if isinstance(y, Tensor) else Tensor(y)
    ce = ad.sub(
        ad.mul(ad.sub(yt, 1.0), ad.log(ad.sub(1.0, pc))),
        ad.mul(yt, ad.log(pc)),
    )
    return ad.mul(ad.abspow(ad.sub(yt, pc), beta), ce)


def qfl(p, y, beta=QFL_BETA):
    """Quality focal loss averaged over entries."""
    return ad.tmean(qfl_terms(p, y, beta))


def _gather_cells(t, cells, nx):
    """Select (K, C) rows of a (C, ny, nx) tensor at (iy, ix) cells."""
    c = t.shape[0]
    flat = ad.reshape(t, (c, t.shape[1] * t.shape[2]))
    idx = [iy * nx + ix for iy, ix in cells]
    return ad.transpose(ad.take(flat, idx, axis=1), (1, 0))


def mmdp_loss(teacher_dets, teacher_cls_probs, teacher_reg, student_cls_logits,
              student_box_reg, gt_boxes, grid, beta=QFL_BETA):
    """Quality-weighted prediction distillation at teacher detection cells.

    For every teacher detection: SmoothL1 between the raw 8-dim regression
    vectors (summed) plus QFL between class probabilities (averaged), both
    scaled by the detection's quality score and normalized by total score
    mass. No detections, or all scores zero, contribute 0.
    """
    if not teacher_dets:
        return Tensor(0.0)
    scores = np.array([q.score for q in quality_score(teacher_dets, gt_boxes)])
    cells = [d.cell for d in teacher_dets]
    t_reg = np.stack([teacher_reg[:, iy, ix] for iy, ix in cells])  # (K, 8)
    t_prob = np.stack([teacher_cls_probs[:, iy, ix] for iy, ix in cells])  # (K, n_cls)

    s_reg = _gather_cells(student_box_reg, cells, grid.nx)
    s_prob = ad.sigmoid(_gather_cells(student_cls_logits, cells, grid.nx))

    reg_term = ad.tsum(smooth_l1_terms(ad.sub(s_reg, Tensor(t_reg))), axis=1)
    cls_term = ad.tmean(qfl_terms(s_prob, Tensor(t_prob), beta), axis=1)
    per_det = ad.mul(ad.add(reg_term, cls_term), Tensor(scores))
    return ad.tsum(per_det) / max(float(scores.sum()), MASK_EPS)
