"""Deterministic synthetic scenes: 3D boxes, rendered views, LiDAR sweeps.

A scene is a pure function of (seed, config). Per-scene randomness comes
from counter-based Philox streams keyed on (seed, stage), so scenes can be
generated on parallel workers without order dependence.
"""

from __future__ import annotations

import json
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bsdt, kernels

STREAM_BOXES = 0
STREAM_LIDAR = 1
STREAM_RENDER = 2


def scene_rng(seed, stream):
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


@dataclass
class Box3D:
    """Axis yaw-rotated cuboid in the ego frame; yaw in (-pi, pi]."""

    center: tuple  # (x, y, z) meters
    size: tuple  # (length, width, height) meters
    yaw: float
    class_id: int

    def to_json(self):
        return {
            "center": list(self.center),
            "size": list(self.size),
            "yaw": self.yaw,
            "class_id": self.class_id,
        }

    @staticmethod
    def from_json(d):
        return Box3D(tuple(d["center"]), tuple(d["size"]), d["yaw"], d["class_id"])


@dataclass
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    rot: np.ndarray  # (3, 3) ego -> camera
    trans: np.ndarray  # (3,)
    h_img: int
    w_img: int

    def to_json(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rot": self.rot.tolist(), "trans": self.trans.tolist(),
            "h_img": self.h_img, "w_img": self.w_img,
        }

    @staticmethod
    def from_json(d):
        return CameraView(d["fx"], d["fy"], d["cx"], d["cy"],
                          np.array(d["rot"]), np.array(d["trans"]),
                          d["h_img"], d["w_img"])


def make_view(cam_pos, yaw_deg, h_img, w_img, fov_deg=90.0):
    """Pinhole view at `cam_pos` looking along ego yaw `yaw_deg`.

    Camera frame: x right, y down, z forward (the optical axis).
    """
    psi = math.radians(yaw_deg)
    z_c = np.array([math.cos(psi), math.sin(psi), 0.0])
    y_c = np.array([0.0, 0.0, -1.0])
    x_c = np.cross(y_c, z_c)
    rot = np.stack([x_c, y_c, z_c])
    trans = -rot @ np.asarray(cam_pos, dtype=np.float64)
    fx = (w_img / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return CameraView(fx=fx, fy=fx, cx=w_img / 2.0, cy=h_img / 2.0,
                      rot=rot, trans=trans, h_img=h_img, w_img=w_img)


def default_rig(h_img=64, w_img=128):
    """Two forward cameras (front-left, front-right), 90 degree FOV each."""
    return [
        make_view((0.8, 0.3, 1.6), 45.0, h_img, w_img),
        make_view((0.8, -0.3, 1.6), -45.0, h_img, w_img),
    ]


@dataclass
class SceneConfig:
    n_boxes: tuple = (2, 6)  # inclusive range per scene
    num_classes: int = 3
    extent: float = 20.0  # BEV half-extent, meters
    # per-class (length, width, height) ranges: car-, pedestrian-, barrier-like
    size_priors: tuple = (
        ((3.6, 4.6), (1.7, 2.1), (1.4, 1.8)),
        ((0.6, 0.9), (0.6, 0.9), (1.6, 1.9)),
        ((2.2, 3.2), (0.4, 0.7), (0.9, 1.2)),
    )
    x_range: tuple = (4.0, 18.0)  # camera-visible placement band
    y_range: tuple = (-14.0, 14.0)
    min_gap: float = 0.4  # enforced BEV clearance between boxes
    h_img: int = 64
    w_img: int = 128
    # LiDAR
    n_beams: int = 8
    elev_range_deg: tuple = (-26.0, -3.0)
    azimuth_step_deg: float = 3.0
    lidar_dropout: float = 0.3
    lidar_height: float = 1.8
    max_range: float = 30.0
    sparsity_target: float = 0.16  # expected occupied fraction of BEV cells
    # rendering
    inv_depth_jitter: float = 0.01
    max_place_attempts: int = 1000

    def to_json(self):
        d = dict(vars(self))
        d["n_boxes"] = list(self.n_boxes)
        d["size_priors"] = [[list(r) for r in p] for p in self.size_priors]
        d["x_range"] = list(self.x_range)
        d["y_range"] = list(self.y_range)
        d["elev_range_deg"] = list(self.elev_range_deg)
        return d

    @staticmethod
    def from_json(d):
        kw = dict(d)
        kw["n_boxes"] = tuple(kw["n_boxes"])
        kw["size_priors"] = tuple(tuple(tuple(r) for r in p) for p in kw["size_priors"])
        kw["x_range"] = tuple(kw["x_range"])
        kw["y_range"] = tuple(kw["y_range"])
        kw["elev_range_deg"] = tuple(kw["elev_range_deg"])
        return SceneConfig(**kw)


@dataclass
class Scene:
    seed: int
    boxes: list
    images: np.ndarray  # (V, C_img, H, W); C_img = num_classes tints + inverse depth
    points: np.ndarray  # (N, 4): x, y, z, intensity
    n_requested: int = 0
    rig: list = field(default_factory=list)


# -- box sampling ------------------------------------------------------------

def rect_corners(cx, cy, length, width, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def rects_overlap(a_corners, b_corners, margin=0.0):
    """Separating-axis test for two convex quads, with a clearance margin."""
    for quad in (a_corners, b_corners):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            norm = np.hypot(axis[0], axis[1])
            if norm == 0.0:
                continue
            axis = axis / norm
            pa = a_corners @ axis
            pb = b_corners @ axis
            if pa.max() + margin <= pb.min() or pb.max() + margin <= pa.min():
                return False
    return True


def sample_scene(seed, cfg: SceneConfig):
    """Draw ground-truth boxes only; non-overlapping in BEV by rejection.

    Returns (boxes, n_requested); len(boxes) < n_requested when placement
    ran out of attempts.
    """
    rng = scene_rng(seed, STREAM_BOXES)
    n_req = int(rng.integers(cfg.n_boxes[0], cfg.n_boxes[1] + 1))
    boxes = []
    corners = []
    for _ in range(n_req):
        placed = False
        for _attempt in range(cfg.max_place_attempts):
            class_id = int(rng.integers(0, cfg.num_classes))
            lr, wr, hr = cfg.size_priors[class_id]
            length = float(rng.uniform(*lr))
            width = float(rng.uniform(*wr))
            height = float(rng.uniform(*hr))
            x = float(rng.uniform(*cfg.x_range))
            y = float(rng.uniform(*cfg.y_range))
            yaw = float(rng.uniform(-math.pi, math.pi))
            if yaw <= -math.pi:
                yaw = math.pi
            cand = rect_corners(x, y, length, width, yaw)
            if any(rects_overlap(cand, c, cfg.min_gap) for c in corners):
                continue
            boxes.append(Box3D((x, y, height / 2.0), (length, width, height), yaw, class_id))
            corners.append(cand)
            placed = True
            break
        if not placed:
            break
    return boxes, n_req


def _box_params(boxes):
    out = np.zeros((len(boxes), 8))
    for i, b in enumerate(boxes):
        out[i] = (
            b.center[0], b.center[1], b.center[2],
            b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0,
            math.cos(b.yaw), math.sin(b.yaw),
        )
    return out


def _face_normals(boxes_arr, hit_box, face_axis, face_sign):
    n = np.zeros((hit_box.shape[0], 3))
    hit = hit_box >= 0
    cy = boxes_arr[hit_box[hit], 6]
    sy = boxes_arr[hit_box[hit], 7]
    ax = face_axis[hit]
    sg = face_sign[hit]
    nx = np.where(ax == 0, cy * sg, np.where(ax == 1, -sy * sg, 0.0))
    ny = np.where(ax == 0, sy * sg, np.where(ax == 1, cy * sg, 0.0))
    nz = np.where(ax == 2, sg, 0.0)
    n[hit] = np.stack([nx, ny, nz], axis=1)
    return n


_LIGHT = np.array([0.25, -0.15, 0.95])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT = 0.35
_DIFFUSE = 0.65


def shading(normal):
    return _AMBIENT + _DIFFUSE * max(float(normal @ _LIGHT), 0.0)


def render_views(boxes, rig, cfg: SceneConfig, rng):
    """Painter's render of box faces: per-pixel nearest hit via ray casting.

    Channel layout: one tint channel per class holding the Lambertian
    shading of the hit face, then an inverse-depth channel with seeded
    jitter. Background is a fixed vertical gradient with zero depth.
    """
    n_cls = cfg.num_classes
    boxes_arr = _box_params(boxes)
    images = np.zeros((len(rig), n_cls + 1, cfg.h_img, cfg.w_img))
    for vi, view in enumerate(rig):
        h, w = view.h_img, view.w_img
        us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        d_cam = np.stack(
            [(us - view.cx) / view.fx, (vs - view.cy) / view.fy, np.ones_like(us)], axis=-1
        ).reshape(-1, 3)
        cam_pos = -view.rot.T @ view.trans
        dirs = d_cam @ view.rot  # R^T applied row-wise
        origins = np.broadcast_to(cam_pos, dirs.shape).copy()
        grad = 0.08 + 0.12 * (vs / max(h - 1, 1))
        for c in range(n_cls):
            images[vi, c] = grad
        noise = rng.normal(0.0, 1.0, size=(h, w))
        if len(boxes):
            t, hit_box, face_axis, face_sign = kernels.raycast_boxes(
                np.ascontiguousarray(origins), np.ascontiguousarray(dirs), boxes_arr, 1e9
            )
            normals = _face_normals(boxes_arr, hit_box, face_axis, face_sign)
            shade = _AMBIENT + _DIFFUSE * np.maximum(normals @ _LIGHT, 0.0)
            hit = (hit_box >= 0).reshape(h, w)
            shade = shade.reshape(h, w)
            t = t.reshape(h, w)
            cls = np.zeros((h, w), dtype=np.int64)
            cls[hit] = np.array([boxes[i].class_id for i in hit_box[hit_box >= 0]], dtype=np.int64)
            for c in range(n_cls):
                images[vi, c][hit] = np.where(cls[hit] == c, shade[hit], 0.0)
            inv = np.zeros((h, w))
            inv[hit] = 1.0 / t[hit]
            images[vi, n_cls] = inv
        images[vi, n_cls] += cfg.inv_depth_jitter * noise
    return images


def sample_lidar(boxes, cfg: SceneConfig, rng):
    """Ray-cast a beam grid against boxes and the ground plane z=0.

    Bernoulli dropout is drawn per ray up front, so the draw count does not
    depend on scene content. Intensity is class_id / num_classes for box
    hits and 0 for ground hits.
    """
    elevs = np.radians(np.linspace(cfg.elev_range_deg[0], cfg.elev_range_deg[1], cfg.n_beams))
    azims = np.radians(np.arange(0.0, 360.0, cfg.azimuth_step_deg))
    ee, aa = np.meshgrid(elevs, azims, indexing="ij")
    dirs = np.stack(
        [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1
    ).reshape(-1, 3)
    n_rays = dirs.shape[0]
    keep = rng.random(n_rays) >= cfg.lidar_dropout
    origin = np.array([0.0, 0.0, cfg.lidar_height])
    origins = np.broadcast_to(origin, dirs.shape).copy()

    if len(boxes):
        boxes_arr = _box_params(boxes)
        t_box, hit_box, _, _ = kernels.raycast_boxes(
            np.ascontiguousarray(origins), np.ascontiguousarray(dirs), boxes_arr, cfg.max_range
        )
    else:
        t_box = np.full(n_rays, cfg.max_range)
        hit_box = np.full(n_rays, -1, dtype=np.int64)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore"):
        t_ground = np.where(dz < -1e-12, -cfg.lidar_height / dz, np.inf)
    box_hit = hit_box >= 0
    ground_better = (t_ground < np.where(box_hit, t_box, np.inf)) & (t_ground <= cfg.max_range)
    use_box = box_hit & ~ground_better
    use_ground = ground_better
    t = np.where(use_box, t_box, np.where(use_ground, t_ground, np.nan))
    valid = keep & (use_box | use_ground)

    pts = origins[valid] + t[valid, None] * dirs[valid]
    intensity = np.zeros(valid.sum())
    vb = use_box[valid]
    if vb.any():
        ids = hit_box[valid][vb]
        intensity[vb] = np.array([boxes[i].class_id for i in ids]) / cfg.num_classes
    return np.concatenate([pts, intensity[:, None]], axis=1)


def make_scene(seed, cfg: SceneConfig):
    boxes, n_req = sample_scene(seed, cfg)
    rig = default_rig(cfg.h_img, cfg.w_img)
    images = render_views(boxes, rig, cfg, scene_rng(seed, STREAM_RENDER))
    points = sample_lidar(boxes, cfg, scene_rng(seed, STREAM_LIDAR))
    return Scene(seed=seed, boxes=boxes, images=images, points=points,
                 n_requested=n_req, rig=rig)


# -- dataset io ---------------------------------------------------------------

_SCENE_RE = re.compile(r"scene_\d{6}\.bsd$")


def write_scene(path, scene: Scene):
    header = {
        "seed": scene.seed,
        "n_requested": scene.n_requested,
        "boxes": [b.to_json() for b in scene.boxes],
        "rig": [v.to_json() for v in scene.rig],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(hb).to_bytes(4, "little"))
        f.write(hb)
        f.write(bsdt.pack(scene.images))
        f.write(bsdt.pack(scene.points))


def read_scene(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4:
        raise ValueError(f"{path}: truncated scene file")
    hlen = int.from_bytes(buf[:4], "little")
    if 4 + hlen > len(buf):
        raise ValueError(f"{path}: truncated scene header")
    header = json.loads(buf[4:4 + hlen].decode("utf-8"))
    images, off = bsdt.unpack_from(buf, 4 + hlen, source=str(path))
    points, off = bsdt.unpack_from(buf, off, source=str(path))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return Scene(
        seed=header["seed"],
        boxes=[Box3D.from_json(b) for b in header["boxes"]],
        images=images,
        points=points,
        n_requested=header["n_requested"],
        rig=[CameraView.from_json(v) for v in header["rig"]],
    )


def write_dataset(scenes, out_dir, cfg: SceneConfig, seed):
    os.makedirs(out_dir, exist_ok=True)
    for i, scene in enumerate(scenes):
        write_scene(os.path.join(out_dir, f"scene_{i:06d}.bsd"), scene)
    manifest = {"config": cfg.to_json(), "n_scenes": len(scenes), "seed": seed}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def read_dataset(dir_path):
    """Load every scene file, in lexicographic filename order."""
    names = sorted(n for n in os.listdir(dir_path) if _SCENE_RE.match(n))
    return [read_scene(os.path.join(dir_path, n)) for n in names]


def read_manifest(dir_path):
    with open(os.path.join(dir_path, "manifest.json"), "r", encoding="utf-8") as f:
        return json.load(f)


def generate_dataset(seed, cfg: SceneConfig, n_scenes, out_dir, workers=1):
    """Generate scenes (seed + index each) and write them plus a manifest."""
    seeds = [seed + i for i in range(n_scenes)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(lambda s: make_scene(s, cfg), seeds))
    else:
        scenes = [make_scene(s, cfg) for s in seeds]
    return write_dataset(scenes, out_dir, cfg, seed)
