"""Training loops, evaluation, the ablation runner and the gradient audit.

Every entry point is a pure function of (scenes, config, seed): shuffling
and initialization draw from seeded generators, losses accumulate in fixed
order, so reruns produce bitwise-identical checkpoints and reports.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import distill
from .autodiff import Tensor
from .detnet import (FeatureBundle, build_model, decode, det_loss_batch, encode_raw)
from .geometry import BevGrid
from .optim import Adam, cosine_lr
from .scenegen import Box3D, SceneConfig, default_rig, render_views, sample_lidar, scene_rng, Scene

DISTILL_TERMS = ("imd", "cmd", "mmdf", "mmdp")


@dataclass
class DistillConfig:
    """Loss switches and training protocol for one student run.

    Disabled losses are never computed (they are absent from the loss logs,
    not merely zero-weighted). oam=False turns the CMD mask off entirely
    (global MSE); gcm=False builds the simulated branch without
    compensation layers.
    """

    imd: bool = False
    cmd: bool = False
    mmdf: bool = False
    mmdp: bool = False
    gcm: bool = True
    oam: bool = True
    weights: dict = field(default_factory=lambda: {t: 1.0 for t in DISTILL_TERMS})
    epochs: int = 8
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 42
    teacher_score_thresh: float = 0.2
    teacher_topk: int = 10
    qfl_beta: float = 2.0

    def enabled(self):
        return [t for t in DISTILL_TERMS if getattr(self, t)]


@dataclass
class EvalReport:
    per_class_ap: dict  # class -> {threshold: ap}
    class_ap: dict  # class -> mean over thresholds
    mean_ap: float
    thresholds: tuple
    counts: dict  # class -> {threshold: {"tp":, "fp":, "fn":}}
    n_scenes: int
    wall_clock: float

    def to_json(self):
        # wall_clock deliberately left out: reports must be bitwise
        # reproducible from the lock file alone
        return {
            "per_class_ap": {str(k): {str(t): v for t, v in d.items()}
                             for k, d in self.per_class_ap.items()},
            "class_ap": {str(k): v for k, v in self.class_ap.items()},
            "mean_ap": self.mean_ap,
            "thresholds": list(self.thresholds),
            "counts": {str(k): {str(t): dict(c) for t, c in d.items()}
                       for k, d in self.counts.items()},
            "n_scenes": self.n_scenes,
        }


def scene_inputs(scenes, idxs):
    images = np.stack([scenes[i].images for i in idxs])
    points = [scenes[i].points for i in idxs]
    boxes = [scenes[i].boxes for i in idxs]
    return images, points, boxes


def _forward(model, images, points):
    if model.kind == "teacher":
        return model.forward(images, points)
    return model.forward(images)


def _slice_scene(t, i):
    return ad.reshape(ad.take(t, [i], axis=0, unique=True), t.shape[1:])


def _distill_terms(teacher_bundle: FeatureBundle, student_bundle: FeatureBundle,
                   boxes, masks, grid, num_classes, cfg: DistillConfig):
    """The enabled distillation losses for one batch, averaged over scenes."""
    terms = {}
    n = len(boxes)
    if cfg.imd:
        terms["imd"] = distill.imd_loss(teacher_bundle.c_bev, student_bundle.c_bev)
    if cfg.cmd:
        total = None
        for i in range(n):
            t_i = _slice_scene(teacher_bundle.l_bev, i)
            s_i = _slice_scene(student_bundle.l_bev, i)
            term = distill.cmd_loss(t_i, s_i, masks[i] if cfg.oam else None)
            total = term if total is None else ad.add(total, term)
        terms["cmd"] = total / n
    if cfg.mmdf:
        terms["mmdf"] = distill.mmdf_loss(teacher_bundle.u_bev, student_bundle.u_bev)
    if cfg.mmdp:
        total = None
        t_probs = 1.0 / (1.0 + np.exp(-teacher_bundle.cls_logits.data))
        for i in range(n):
            dets = decode(teacher_bundle.cls_logits.data[i], teacher_bundle.box_reg.data[i],
                          grid, cfg.teacher_score_thresh, cfg.teacher_topk)
            term = distill.mmdp_loss(
                dets, t_probs[i], teacher_bundle.box_reg.data[i],
                _slice_scene(student_bundle.cls_logits, i),
                _slice_scene(student_bundle.box_reg, i),
                boxes[i], grid, cfg.qfl_beta)
            total = term if total is None else ad.add(total, term)
        terms["mmdp"] = total / n
    return terms


def train_model(arch, scenes, epochs, batch_size, lr, seed, teacher=None,
                dcfg: DistillConfig | None = None, log_rows=None, model=None):
    """Train a detector; with `teacher` + `dcfg` this is distillation.

    Returns the trained model. log_rows, when given, accumulates
    (step, term, value) tuples for loss_curves.csv.
    """
    grid = BevGrid.square(arch["extent"], arch["grid_cells"])
    num_classes = arch["num_classes"]
    if model is None:
        model = build_model(arch, seed)
    opt = Adam(model.named_parameters(), lr=lr)
    shuffle_rng = np.random.default_rng(seed)
    n = len(scenes)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = epochs * steps_per_epoch

    masks = {}
    if dcfg is not None and dcfg.cmd and dcfg.oam:
        for i, s in enumerate(scenes):
            masks[i] = distill.build_object_mask(s.boxes, grid, num_classes).mask

    step = 0
    for _epoch in range(epochs):
        perm = shuffle_rng.permutation(n)
        for lo in range(0, n, batch_size):
            idxs = perm[lo:lo + batch_size]
            images, points, boxes = scene_inputs(scenes, idxs)
            bundle = _forward(model, images, points)
            terms = {"det": det_loss_batch(bundle, boxes, grid, num_classes)}
            if teacher is not None and dcfg is not None:
                t_bundle = teacher.forward(images, points, detach=True)
                batch_masks = [masks.get(i) for i in idxs] if dcfg.oam else [None] * len(idxs)
                terms.update(_distill_terms(
                    t_bundle, bundle, boxes, batch_masks, grid, num_classes, dcfg))
            total = terms["det"]
            if dcfg is not None:
                for t in dcfg.enabled():
                    total = ad.add(total, ad.mul(terms[t], dcfg.weights.get(t, 1.0)))
            value = float(total.data)
            if not np.isfinite(value):
                raise RuntimeError(f"non-finite loss at step {step}")
            if log_rows is not None:
                for name, t in terms.items():
                    log_rows.append((step, name, float(t.data)))
                log_rows.append((step, "total", value))
            opt.zero_grad()
            ad.backward(total)
            opt.step(cosine_lr(lr, step, total_steps))
            step += 1
    opt.zero_grad()
    return model


def train_teacher(scenes, arch, epochs=8, batch_size=8, lr=2e-3, seed=42, log_rows=None):
    arch = dict(arch, kind="teacher")
    return train_model(arch, scenes, epochs, batch_size, lr, seed, log_rows=log_rows)


def distill_student(teacher, scenes, arch, dcfg: DistillConfig, log_rows=None):
    """Freeze the teacher and train a student under the configured losses."""
    arch = dict(arch, kind="student")
    if not dcfg.gcm:
        arch["gcm"] = dict(arch["gcm"], layers=0)
    t_grid = BevGrid.square(teacher.arch["extent"], teacher.arch["grid_cells"])
    s_grid = BevGrid.square(arch["extent"], arch["grid_cells"])
    if (t_grid != s_grid or teacher.arch["c_bev"] != arch["c_bev"]
            or teacher.arch["c_fuse"] != arch["c_fuse"]):
        raise ValueError("teacher and student feature shapes are incompatible")
    return train_model(arch, scenes, dcfg.epochs, dcfg.batch_size, dcfg.lr, dcfg.seed,
                       teacher=teacher, dcfg=dcfg, log_rows=log_rows)


# -- evaluation -----------------------------------------------------------------

def average_precision(tp_flags, n_gt):
    """Area under the precision-recall curve, envelope-interpolated."""
    if n_gt == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / n_gt
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def evaluate(model, scenes, thresholds=(0.5, 1.0, 2.0, 4.0), score_thresh=0.1,
             topk=20, batch_size=8):
    """Toy mAP: center-distance matched AP per class and threshold."""
    t0 = time.perf_counter()
    grid = model.grid
    num_classes = model.arch["num_classes"]
    all_dets = []  # (scene_idx, Detection)
    for lo in range(0, len(scenes), batch_size):
        idxs = list(range(lo, min(lo + batch_size, len(scenes))))
        images, points, _ = scene_inputs(scenes, idxs)
        if model.kind == "teacher":
            bundle = model.forward(images, points, detach=True)
        else:
            bundle = model.forward(images, detach=True)
        for j, si in enumerate(idxs):
            dets = decode(bundle.cls_logits.data[j], bundle.box_reg.data[j],
                          grid, score_thresh, topk)
            all_dets.extend((si, d) for d in dets)

    per_class_ap = {}
    class_ap = {}
    counts = {}
    for c in range(num_classes):
        n_gt = sum(1 for s in scenes for b in s.boxes if b.class_id == c)
        if n_gt == 0:
            continue
        cls_dets = [(si, d) for si, d in all_dets if d.class_id == c]
        cls_dets.sort(key=lambda e: (-e[1].confidence, e[0], e[1].cell))
        per_class_ap[c] = {}
        counts[c] = {}
        for tau in thresholds:
            matched = {}
            flags = []
            for si, d in cls_dets:
                best = None
                best_d = tau
                for gi, gt in enumerate(scenes[si].boxes):
                    if gt.class_id != c or (si, gi) in matched:
                        continue
                    dist = math.hypot(d.box.center[0] - gt.center[0],
                                      d.box.center[1] - gt.center[1])
                    if dist <= best_d:
                        best_d = dist
                        best = gi
                if best is not None:
                    matched[(si, best)] = True
                    flags.append(True)
                else:
                    flags.append(False)
            tp = sum(flags)
            per_class_ap[c][tau] = average_precision(flags, n_gt)
            counts[c][tau] = {"tp": tp, "fp": len(flags) - tp, "fn": n_gt - tp}
        class_ap[c] = float(np.mean(list(per_class_ap[c].values())))
    mean_ap = float(np.mean(list(class_ap.values()))) if class_ap else 0.0
    return EvalReport(per_class_ap=per_class_ap, class_ap=class_ap, mean_ap=mean_ap,
                      thresholds=tuple(thresholds), counts=counts,
                      n_scenes=len(scenes), wall_clock=time.perf_counter() - t0)


# -- ablation -------------------------------------------------------------------

ABLATION_ROWS = [
    ("a", "camera-only baseline", "camera", None),
    ("b", "simulated multi-modal, no distillation", "student", {}),
    ("c", "cmd w/o gcm & oam", "student", dict(cmd=True, gcm=False, oam=False)),
    ("d", "cmd w/o oam", "student", dict(cmd=True, oam=False)),
    ("e", "cmd w/o gcm", "student", dict(cmd=True, gcm=False)),
    ("f", "cmd", "student", dict(cmd=True)),
    ("g", "imd", "student", dict(imd=True)),
    ("h", "mmd w/o mmd-p", "student", dict(mmdf=True)),
    ("i", "mmd w/o mmd-f", "student", dict(mmdp=True)),
    ("m", "all", "student", dict(imd=True, cmd=True, mmdf=True, mmdp=True)),
]


def ablate(train_scenes, val_scenes, teacher, arch, base_cfg: DistillConfig,
           eval_kwargs=None, progress=None):
    """Train and evaluate every ablation row with one shared seed/dataset."""
    eval_kwargs = eval_kwargs or {}
    results = []
    for row, label, kind, switches in ABLATION_ROWS:
        if progress:
            progress(f"[ablate] row ({row}): {label}")
        cfg_echo = {"row": row, "label": label, "arch": kind,
                    "switches": dict(switches) if switches is not None else None,
                    "epochs": base_cfg.epochs, "batch_size": base_cfg.batch_size,
                    "lr": base_cfg.lr, "seed": base_cfg.seed}
        if kind == "camera":
            model = train_model(dict(arch, kind="camera"), train_scenes, base_cfg.epochs,
                                base_cfg.batch_size, base_cfg.lr, base_cfg.seed)
        elif not switches:
            model = train_model(dict(arch, kind="student"), train_scenes, base_cfg.epochs,
                                base_cfg.batch_size, base_cfg.lr, base_cfg.seed)
        else:
            overrides = {k: v for k, v in switches.items()}
            dcfg = DistillConfig(**{**_cfg_dict(base_cfg), **overrides})
            model = distill_student(teacher, train_scenes, arch, dcfg)
        report = evaluate(model, val_scenes, **eval_kwargs)
        results.append({"row": row, "label": label, "mean_ap": report.mean_ap,
                        "class_ap": report.class_ap, "config": cfg_echo})
    base = next(r["mean_ap"] for r in results if r["row"] == "b")
    for r in results:
        r["improvement"] = r["mean_ap"] - base if r["row"] not in ("a", "b") else None
    return results


def _cfg_dict(cfg: DistillConfig):
    return {f.name: getattr(cfg, f.name) for f in fields(DistillConfig)}


def write_ablation_csv(path, results):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["row", "label", "mean_ap", "improvement", "config"])
        for r in results:
            imp = "" if r["improvement"] is None else f"{r['improvement']:.6f}"
            w.writerow([r["row"], r["label"], f"{r['mean_ap']:.6f}", imp,
                        json.dumps(r["config"], sort_keys=True)])


def format_ablation_table(results):
    lines = [f"{'row':<4}{'configuration':<42}{'toy-mAP':>10}{'improvement':>13}"]
    for r in results:
        imp = "-" if r["improvement"] is None else f"{r['improvement']:+.4f}"
        lines.append(f"{r['row']:<4}{r['label']:<42}{r['mean_ap']:>10.4f}{imp:>13}")
    lines.append("improvement column is relative to row (b)")
    return "\n".join(lines)


def write_loss_curves(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "term", "value"])
        for step, term, value in rows:
            w.writerow([step, term, f"{value:.10g}"])


def write_eval_report(path, report: EvalReport):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=2, sort_keys=True)


# -- gradient audit ---------------------------------------------------------------

MICRO_ARCH = {
    "kind": "student", "num_classes": 3, "c_img": 4,
    "enc_channels": [6, 10, 16], "hidden": 8, "c_bev": 8, "c_fuse": 8,
    "extent": 8.0, "grid_cells": 8, "image_h": 16, "image_w": 32,
    "d_min": 1.0, "d_max": 11.0, "n_bins": 4,
    "gcm": {"layers": 2, "heads": 2, "points": 4, "offset_radius": 0.1},
    "share_depth_heads": False,
}

MICRO_SCENE_CFG = SceneConfig(
    n_boxes=(2, 2), extent=8.0, x_range=(2.5, 6.5), y_range=(-4.5, 4.5),
    h_img=16, w_img=32, n_beams=5, elev_range_deg=(-35.0, -8.0),
    azimuth_step_deg=6.0, lidar_dropout=0.1, max_range=14.0,
)

MICRO_BOXES = [
    Box3D((4.2, 1.4, 0.8), (3.6, 1.8, 1.6), 0.45, 0),
    Box3D((5.2, -2.6, 0.85), (0.7, 0.7, 1.7), -1.2, 1),
    Box3D((3.0, -0.8, 0.5), (2.4, 0.5, 1.0), 2.2, 2),
]


def micro_instance(seed=0):
    """A tiny but complete scene + models for fast end-to-end audits."""
    cfg = MICRO_SCENE_CFG
    rig = default_rig(cfg.h_img, cfg.w_img)
    images = render_views(MICRO_BOXES, rig, cfg, scene_rng(seed, 2))
    points = sample_lidar(MICRO_BOXES, cfg, scene_rng(seed, 1))
    scene = Scene(seed=seed, boxes=MICRO_BOXES, images=images, points=points,
                  n_requested=len(MICRO_BOXES), rig=rig)
    teacher = build_model(dict(MICRO_ARCH, kind="teacher"), seed=1)
    student = build_model(dict(MICRO_ARCH, kind="student"), seed=2)
    return scene, teacher, student


def _probe_params(fn, params, n_probe, eps, rel_tol, rng):
    """Audit `fn()` against central differences at sampled parameter entries."""
    for _, p in params:
        p.grad = None
    loss = fn()
    ad.backward(loss)
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in params}
    sizes = np.array([p.size for _, p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_probe, total), replace=False)
    bounds = np.cumsum(sizes)
    probes = []
    ok = True
    max_err = 0.0
    for flat in sorted(int(i) for i in picks):
        pi = int(np.searchsorted(bounds, flat, side="right"))
        off = flat - (0 if pi == 0 else int(bounds[pi - 1]))
        name, p = params[pi]
        buf = p.data.reshape(-1)
        orig = buf[off]
        buf[off] = orig + eps
        with ad.no_grad():
            hi = float(fn().data)
        buf[off] = orig - eps
        with ad.no_grad():
            lo = float(fn().data)
        buf[off] = orig
        numeric = (hi - lo) / (2.0 * eps)
        analytic = float(grads[name].reshape(-1)[off])
        if not (np.isfinite(numeric) and np.isfinite(analytic)):
            err = np.inf
            in_noise = False
        else:
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            # central differences carry ~macheps*|f|/eps rounding noise; when
            # the disagreement sits below that floor the probe is as exact as
            # the oracle can measure, whatever the relative error says
            floor = 10.0 * 2.3e-16 * max(abs(hi), abs(lo), 1.0) / (2.0 * eps)
            in_noise = abs(analytic - numeric) <= floor
        probes.append({"param": name, "index": off, "analytic": analytic,
                       "numeric": numeric, "rel_err": err, "within_noise": in_noise})
        effective = 0.0 if in_noise else err
        max_err = max(max_err, effective)
        ok = ok and (err <= rel_tol or in_noise)
    return {"max_rel_err": max_err, "passed": ok, "probes": probes}


def grad_audit(n_probe=20, eps=1e-5, rel_tol=1e-4, seed=0):
    """Finite-difference audit of every loss term on the micro instance."""
    scene, teacher, student = micro_instance(seed)
    grid = teacher.grid
    ncls = MICRO_ARCH["num_classes"]
    images = scene.images[None]
    points = [scene.points]
    boxes = [scene.boxes]
    mask = distill.build_object_mask(scene.boxes, grid, ncls).mask
    t_bundle = teacher.forward(images, points, detach=True)
    fake_cls, fake_reg = encode_raw(scene.boxes, grid, ncls)
    fake_dets = decode(fake_cls, fake_reg, grid, 0.5, 10)
    fake_probs = 1.0 / (1.0 + np.exp(-fake_cls))

    def student_bundle():
        return student.forward(images)

    def term_det():
        return det_loss_batch(student_bundle(), boxes, grid, ncls)

    def term_det_teacher():
        return det_loss_batch(teacher.forward(images, points), boxes, grid, ncls)

    def term_imd():
        return distill.imd_loss(t_bundle.c_bev, student_bundle().c_bev)

    def term_cmd():
        b = student_bundle()
        return distill.cmd_loss(_slice_scene(t_bundle.l_bev, 0), _slice_scene(b.l_bev, 0), mask)

    def term_mmdf():
        return distill.mmdf_loss(t_bundle.u_bev, student_bundle().u_bev)

    def term_mmdp():
        b = student_bundle()
        return distill.mmdp_loss(fake_dets, fake_probs, fake_reg,
                                 _slice_scene(b.cls_logits, 0), _slice_scene(b.box_reg, 0),
                                 scene.boxes, grid)

    def term_total():
        b = student_bundle()
        loss = det_loss_batch(b, boxes, grid, ncls)
        loss = ad.add(loss, distill.imd_loss(t_bundle.c_bev, b.c_bev))
        loss = ad.add(loss, distill.cmd_loss(
            _slice_scene(t_bundle.l_bev, 0), _slice_scene(b.l_bev, 0), mask))
        loss = ad.add(loss, distill.mmdf_loss(t_bundle.u_bev, b.u_bev))
        return ad.add(loss, distill.mmdp_loss(
            fake_dets, fake_probs, fake_reg,
            _slice_scene(b.cls_logits, 0), _slice_scene(b.box_reg, 0), scene.boxes, grid))

    student_params = list(student.named_parameters())
    teacher_params = list(teacher.named_parameters())
    rng = np.random.default_rng(seed)
    report = {"terms": {}, "eps": eps, "rel_tol": rel_tol}
    for name, fn, params in [
        ("det", term_det, student_params),
        ("det_teacher", term_det_teacher, teacher_params),
        ("imd", term_imd, student_params),
        ("cmd", term_cmd, student_params),
        ("mmdf", term_mmdf, student_params),
        ("mmdp", term_mmdp, student_params),
        ("total", term_total, student_params),
    ]:
        report["terms"][name] = _probe_params(fn, params, n_probe, eps, rel_tol, rng)
    report["passed"] = all(t["passed"] for t in report["terms"].values())
    return report
