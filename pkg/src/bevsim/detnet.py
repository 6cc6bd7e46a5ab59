"""Teacher (LiDAR + camera fusion), student (camera + simulated LiDAR) and
camera-only detectors, plus the detection loss and box decoding.

All three share the encoder / fusion / head building blocks so teacher and
student feature maps line up shape-for-shape, which the distillation losses
rely on.
"""

from __future__ import annotations

import json
import math
import os
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import bsdt, distill, kernels
from .autodiff import Tensor
from .gcm import GeometryCompensation
from .geometry import BevGrid, DepthBins, PillarEncoder, SmallConvStack, bev_pool, gen_frustum, lift
from .nn import Conv2d, Module
from .scenegen import Box3D, default_rig

REG_DIM = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
CLS_BIAS_INIT = -2.19  # sigmoid prior ~0.1 on the class heatmaps
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
REG_WEIGHT = 0.25


@dataclass
class FeatureBundle:
    """The named BEV maps of one forward pass: the distillation hook points."""

    c_bev: Tensor  # camera-branch BEV features
    l_bev: Tensor | None  # LiDAR (teacher) or simulated-LiDAR (student) BEV
    u_bev: Tensor  # fused BEV features
    cls_logits: Tensor  # (B, n_classes, ny, nx)
    box_reg: Tensor  # (B, 8, ny, nx)
    detached: bool


@dataclass
class Detection:
    box: Box3D
    class_id: int
    confidence: float
    cell: tuple  # (iy, ix)


class Encoder2D(Module):
    """Shared per-view image encoder: three stride-2 stages (/8 overall).

    Each stage is a 2x2 mean-pool then a padded 3x3 conv: the conv op
    requires exactly divisible output extents, which rules out stride-2
    convs on even image sizes.
    """

    def __init__(self, rng, c_in, channels=(8, 16, 32)):
        self.stage1 = Conv2d(rng, c_in, channels[0], 3)
        self.stage2 = Conv2d(rng, channels[0], channels[1], 3)
        self.stage3 = Conv2d(rng, channels[1], channels[2], 3)

    def __call__(self, x):
        x = ad.relu(self.stage1(ad.avg_pool2(x)))
        x = ad.relu(self.stage2(ad.avg_pool2(x)))
        return ad.relu(self.stage3(ad.avg_pool2(x)))


class FuseNet(Module):
    """Fully convolutional fusion of two concatenated BEV maps."""

    def __init__(self, rng, c_in, c_out):
        self.conv1 = Conv2d(rng, c_in, c_out, 3)
        self.conv2 = Conv2d(rng, c_out, c_out, 3)

    def __call__(self, x):
        return ad.relu(self.conv2(ad.relu(self.conv1(x))))


class DetHead(Module):
    """1x1 class-heatmap and box-regression branches."""

    def __init__(self, rng, c_in, num_classes):
        self.cls = Conv2d(rng, c_in, num_classes, 1, bias_init=CLS_BIAS_INIT)
        self.reg = Conv2d(rng, c_in, REG_DIM, 1)

    def __call__(self, x):
        return self.cls(x), self.reg(x)


class CameraBranch(Module):
    """DepthNet + context net + lift + BEV pooling for one feature stream."""

    def __init__(self, rng, c_in, hidden, c_bev, n_bins):
        self.depth = SmallConvStack(rng, c_in, hidden, n_bins)
        self.context = SmallConvStack(rng, c_in, hidden, c_bev)

    def __call__(self, f_uv, frustum, grid):
        logits = self.depth(f_uv)
        ctx = self.context(f_uv)
        return bev_pool(lift(ctx, logits, frustum), frustum, grid)


def _flatten_views(images):
    b, v, c, h, w = images.shape
    return ad.reshape(images, (b * v, c, h, w))


class TeacherNet(Module):
    """Fusion detector: pillar-encoded LiDAR plus lifted camera features."""

    kind = "teacher"

    def __init__(self, rng, arch):
        self.arch = arch
        self.grid = arch_grid(arch)
        self.rig = default_rig(arch["image_h"], arch["image_w"])
        bins = DepthBins(arch["d_min"], arch["d_max"], arch["n_bins"])
        feat = (arch["image_h"] // 8, arch["image_w"] // 8)
        self.frustum = gen_frustum(self.rig, feat, bins)
        c_enc = arch["enc_channels"][-1]
        self.encoder = Encoder2D(rng, arch["c_img"], tuple(arch["enc_channels"]))
        self.camera = CameraBranch(rng, c_enc, arch["hidden"], arch["c_bev"], arch["n_bins"])
        self.pillars = PillarEncoder(rng, self.grid, arch["c_bev"], arch["c_bev"])
        self.fuse = FuseNet(rng, 2 * arch["c_bev"], arch["c_fuse"])
        self.head = DetHead(rng, arch["c_fuse"], arch["num_classes"])

    def forward(self, images, points_list, detach=False):
        ctx = ad.no_grad() if detach else nullcontext()
        with ctx:
            imgs = Tensor(images)
            f_uv = self.encoder(_flatten_views(imgs))
            c_bev = self.camera(f_uv, self.frustum, self.grid)
            l_bev = ad.stack([self.pillars(p) for p in points_list], axis=0)
            u_bev = self.fuse(ad.concat([l_bev, c_bev], axis=1))
            cls_logits, box_reg = self.head(u_bev)
        return FeatureBundle(c_bev, l_bev, u_bev, cls_logits, box_reg, detached=detach)


class StudentNet(Module):
    """Camera-only detector with a parallel simulated-LiDAR branch.

    The simulated branch runs geometry compensation in the UV plane, its own
    depth/context nets, lifting and pooling, then BEV-plane compensation;
    no point cloud appears anywhere in its signature.
    """

    kind = "student"

    def __init__(self, rng, arch):
        self.arch = arch
        self.grid = arch_grid(arch)
        self.rig = default_rig(arch["image_h"], arch["image_w"])
        bins = DepthBins(arch["d_min"], arch["d_max"], arch["n_bins"])
        feat = (arch["image_h"] // 8, arch["image_w"] // 8)
        self.frustum = gen_frustum(self.rig, feat, bins)
        c_enc = arch["enc_channels"][-1]
        g = arch["gcm"]
        self.encoder = Encoder2D(rng, arch["c_img"], tuple(arch["enc_channels"]))
        self.camera = CameraBranch(rng, c_enc, arch["hidden"], arch["c_bev"], arch["n_bins"])
        if arch.get("share_depth_heads", False):
            self.sim_camera = self.camera
        else:
            self.sim_camera = CameraBranch(rng, c_enc, arch["hidden"], arch["c_bev"], arch["n_bins"])
        self.gc_uv = GeometryCompensation(
            rng, c_enc, g["layers"], g["heads"], g["points"], g["offset_radius"])
        self.gc_bev = GeometryCompensation(
            rng, arch["c_bev"], g["layers"], g["heads"], g["points"], g["offset_radius"])
        self.fuse = FuseNet(rng, 2 * arch["c_bev"], arch["c_fuse"])
        self.head = DetHead(rng, arch["c_fuse"], arch["num_classes"])

    def forward(self, images, detach=False):
        ctx = ad.no_grad() if detach else nullcontext()
        with ctx:
            imgs = Tensor(images)
            f_uv = self.encoder(_flatten_views(imgs))
            c_bev = self.camera(f_uv, self.frustum, self.grid)
            l_bev = self.gc_bev(self.sim_camera(self.gc_uv(f_uv), self.frustum, self.grid))
            u_bev = self.fuse(ad.concat([l_bev, c_bev], axis=1))
            cls_logits, box_reg = self.head(u_bev)
        return FeatureBundle(c_bev, l_bev, u_bev, cls_logits, box_reg, detached=detach)


class CameraOnlyNet(Module):
    """Plain lift-splat detector; the no-simulated-branch baseline."""

    kind = "camera"

    def __init__(self, rng, arch):
        self.arch = arch
        self.grid = arch_grid(arch)
        self.rig = default_rig(arch["image_h"], arch["image_w"])
        bins = DepthBins(arch["d_min"], arch["d_max"], arch["n_bins"])
        feat = (arch["image_h"] // 8, arch["image_w"] // 8)
        self.frustum = gen_frustum(self.rig, feat, bins)
        c_enc = arch["enc_channels"][-1]
        self.encoder = Encoder2D(rng, arch["c_img"], tuple(arch["enc_channels"]))
        self.camera = CameraBranch(rng, c_enc, arch["hidden"], arch["c_bev"], arch["n_bins"])
        self.neck = FuseNet(rng, arch["c_bev"], arch["c_fuse"])
        self.head = DetHead(rng, arch["c_fuse"], arch["num_classes"])

    def forward(self, images, detach=False):
        ctx = ad.no_grad() if detach else nullcontext()
        with ctx:
            imgs = Tensor(images)
            f_uv = self.encoder(_flatten_views(imgs))
            c_bev = self.camera(f_uv, self.frustum, self.grid)
            u_bev = self.neck(c_bev)
            cls_logits, box_reg = self.head(u_bev)
        return FeatureBundle(c_bev, None, u_bev, cls_logits, box_reg, detached=detach)


def arch_grid(arch):
    return BevGrid.square(arch["extent"], arch["grid_cells"])


# -- detection loss ------------------------------------------------------------

def reg_target(box, grid):
    """Regression vector and containing cell for one ground-truth box."""
    ix, iy = grid.cell_of(box.center[0], box.center[1])
    cx, cy = grid.cell_coords(box.center[0], box.center[1])
    vec = np.array([
        cx - ix, cy - iy, box.center[2],
        math.log(box.size[0]), math.log(box.size[1]), math.log(box.size[2]),
        math.sin(box.yaw), math.cos(box.yaw),
    ])
    return vec, (int(iy), int(ix))


def det_loss(cls_logits, box_reg, boxes, grid, num_classes):
    """Penalty-reduced focal loss on snapped class heatmaps plus L1 on the
    regression vectors at ground-truth center cells (one scene)."""
    target = np.stack(
        [distill.class_heatmap([b for b in boxes if b.class_id == c], grid, snap=True)
         for c in range(num_classes)]
    )
    pos_mask = (target >= 1.0 - 1e-9).astype(np.float64)
    neg_w = np.maximum(1.0 - target, 0.0) ** FOCAL_BETA
    n_pos = max(pos_mask.sum(), 1.0)

    p = ad.clip(ad.sigmoid(cls_logits), 1e-6, 1.0 - 1e-6)
    pos_term = ad.mul(ad.mul(ad.square(ad.sub(1.0, p)), ad.log(p)), Tensor(pos_mask))
    neg_term = ad.mul(ad.mul(ad.square(p), ad.log(ad.sub(1.0, p))), Tensor(neg_w * (1.0 - pos_mask)))
    focal = ad.mul(ad.tsum(ad.add(pos_term, neg_term)), -1.0 / n_pos)

    if boxes:
        vecs, cells = zip(*(reg_target(b, grid) for b in boxes))
        flat = ad.reshape(box_reg, (REG_DIM, grid.n_cells))
        idx = [iy * grid.nx + ix for iy, ix in cells]
        picked = ad.transpose(ad.take(flat, idx, axis=1), (1, 0))
        l1 = ad.tmean(ad.absolute(ad.sub(picked, Tensor(np.stack(vecs)))))
        return ad.add(focal, ad.mul(l1, REG_WEIGHT))
    return focal


def det_loss_batch(bundle: FeatureBundle, scene_boxes, grid, num_classes):
    total = None
    for i, boxes in enumerate(scene_boxes):
        cls_i = ad.reshape(ad.take(bundle.cls_logits, [i], axis=0, unique=True),
                           bundle.cls_logits.shape[1:])
        reg_i = ad.reshape(ad.take(bundle.box_reg, [i], axis=0, unique=True),
                           bundle.box_reg.shape[1:])
        term = det_loss(cls_i, reg_i, boxes, grid, num_classes)
        total = term if total is None else ad.add(total, term)
    return total / len(scene_boxes)


# -- decoding -------------------------------------------------------------------

def decode(cls_logits, box_reg, grid, score_thresh=0.1, topk=20):
    """Peak-pick per-class heatmaps into detections, best-first.

    3x3 local maxima above the threshold survive, top-k overall; box fields
    come from the regression channels at each peak cell.
    """
    probs = 1.0 / (1.0 + np.exp(-np.asarray(cls_logits, dtype=np.float64)))
    reg = np.asarray(box_reg, dtype=np.float64)
    keep = kernels.suppress_local_max(np.ascontiguousarray(probs)) & (probs >= score_thresh)
    cs, ys, xs = np.nonzero(keep)
    if len(cs) == 0:
        return []
    scores = probs[cs, ys, xs]
    order = np.lexsort((xs, ys, cs, -scores))[:topk]
    dets = []
    for i in order:
        c, iy, ix = int(cs[i]), int(ys[i]), int(xs[i])
        r = reg[:, iy, ix]
        x = grid.x_min + (ix + r[0] + 0.5) * grid.cell_w
        y = grid.y_min + (iy + r[1] + 0.5) * grid.cell_h
        box = Box3D(
            center=(x, y, r[2]),
            size=(math.exp(r[3]), math.exp(r[4]), math.exp(r[5])),
            yaw=math.atan2(r[6], r[7]),
            class_id=c,
        )
        dets.append(Detection(box=box, class_id=c, confidence=float(scores[i]), cell=(iy, ix)))
    return dets


def encode_raw(boxes, grid, num_classes, peak_logit=500.0, bg_logit=-500.0):
    """Synthesize head outputs whose decode recovers `boxes` exactly."""
    cls = np.full((num_classes, grid.ny, grid.nx), bg_logit)
    reg = np.zeros((REG_DIM, grid.ny, grid.nx))
    for box in boxes:
        vec, (iy, ix) = reg_target(box, grid)
        cls[box.class_id, iy, ix] = peak_logit
        reg[:, iy, ix] = vec
    return cls, reg


# -- checkpoints ----------------------------------------------------------------

def build_model(arch, seed=0):
    rng = np.random.default_rng(seed)
    kind = arch["kind"]
    if kind == "teacher":
        return TeacherNet(rng, arch)
    if kind == "student":
        return StudentNet(rng, arch)
    if kind == "camera":
        return CameraOnlyNet(rng, arch)
    raise ValueError(f"unknown model kind {kind!r}")


def save_checkpoint(ckpt_dir, model):
    os.makedirs(ckpt_dir, exist_ok=True)
    params = {}
    for i, (name, p) in enumerate(model.named_parameters()):
        fname = f"param_{i:04d}.bsdt"
        bsdt.write(os.path.join(ckpt_dir, fname), p.data)
        params[name] = fname
    with open(os.path.join(ckpt_dir, "model.json"), "w", encoding="utf-8") as f:
        json.dump({"arch": model.arch, "params": params}, f, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir):
    with open(os.path.join(ckpt_dir, "model.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    model = build_model(meta["arch"])
    have = dict(model.named_parameters())
    if set(have) != set(meta["params"]):
        missing = set(meta["params"]) ^ set(have)
        raise ValueError(f"checkpoint/model parameter names differ: {sorted(missing)}")
    for name, fname in meta["params"].items():
        arr = bsdt.read(os.path.join(ckpt_dir, fname))
        if arr.shape != have[name].shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {have[name].shape}")
        have[name].data = arr
    return model
