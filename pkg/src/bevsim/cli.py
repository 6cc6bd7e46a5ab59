"""Command-line entry point: the full dataset -> teacher -> distill ->
evaluate -> ablate -> audit -> figure-export workflow."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from . import distill as distill_mod
from . import harness, imgio, scenegen
from .detnet import decode, load_checkpoint, save_checkpoint
from .kernels import active_backend


def _load_cfg(args):
    return cfgmod.load_config(args.config) if args.config else cfgmod.resolve_config()


def _add_common(p, data=False, out=True):
    p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, default=None,
                   help="seed override (flag > BEVSIM_SEED > config > 42)")
    if data:
        p.add_argument("--data", required=True, help="dataset directory")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def cmd_gen(args):
    cfg = _load_cfg(args)
    seed = cfgmod.resolve_seed(args.seed, cfg["data"]["seed"])
    cfg["data"]["seed"] = seed
    scfg = cfgmod.scene_config(cfg)
    n = cfg["data"]["n_scenes"]
    manifest = scenegen.generate_dataset(seed, scfg, n, args.out, workers=args.workers)
    cfgmod.write_lock(args.out, cfg, "gen", active_backend())
    print(f"wrote {manifest['n_scenes']} scenes to {args.out} (seed {seed})")
    return 0


def cmd_train_teacher(args):
    cfg = _load_cfg(args)
    seed = cfgmod.resolve_seed(args.seed, cfg["train"]["seed"])
    cfg["train"]["seed"] = seed
    scenes = scenegen.read_dataset(args.data)
    arch = cfgmod.arch_from_config(cfg, "teacher")
    rows = []
    t = cfg["train"]
    model = harness.train_teacher(scenes, arch, t["epochs"], t["batch_size"],
                                  t["lr"], seed, log_rows=rows)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "checkpoint"), model)
    harness.write_loss_curves(os.path.join(args.out, "loss_curves.csv"), rows)
    cfgmod.write_lock(args.out, cfg, "train-teacher", active_backend(), data_dir=args.data)
    print(f"teacher trained on {len(scenes)} scenes; checkpoint in {args.out}/checkpoint")
    return 0


def cmd_distill(args):
    cfg = _load_cfg(args)
    if args.loss is not None:
        wanted = [t.strip() for t in args.loss.split(",") if t.strip()]
        bad = [t for t in wanted if t not in harness.DISTILL_TERMS]
        if bad:
            raise cfgmod.ConfigError(f"unknown loss terms: {','.join(bad)}")
        for t in harness.DISTILL_TERMS:
            cfg["distill"][t] = t in wanted
    if args.no_gcm:
        cfg["distill"]["gcm"] = False
    if args.no_oam:
        cfg["distill"]["oam"] = False
    seed = cfgmod.resolve_seed(args.seed, cfg["train"]["seed"])
    cfg["train"]["seed"] = seed
    scenes = scenegen.read_dataset(args.data)
    teacher = load_checkpoint(args.teacher)
    arch = cfgmod.arch_from_config(cfg, "student")
    dcfg = cfgmod.distill_config(cfg, seed)
    rows = []
    student = harness.distill_student(teacher, scenes, arch, dcfg, log_rows=rows)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "checkpoint"), student)
    harness.write_loss_curves(os.path.join(args.out, "loss_curves.csv"), rows)
    cfgmod.write_lock(args.out, cfg, "distill", active_backend(),
                      data_dir=args.data, teacher=args.teacher)
    enabled = ",".join(dcfg.enabled()) or "none"
    print(f"student distilled with losses [{enabled}]; checkpoint in {args.out}/checkpoint")
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    scenes = scenegen.read_dataset(args.data)
    model = load_checkpoint(args.ckpt)
    e = cfg["eval"]
    report = harness.evaluate(model, scenes, tuple(e["thresholds"]),
                              e["score_thresh"], e["topk"])
    os.makedirs(args.out, exist_ok=True)
    harness.write_eval_report(os.path.join(args.out, "eval_report.json"), report)
    cfgmod.write_lock(args.out, cfg, "eval", active_backend(),
                      data_dir=args.data, ckpt=args.ckpt)
    print(f"toy-mAP {report.mean_ap:.4f} over {report.n_scenes} scenes "
          f"({report.wall_clock:.1f}s)")
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    seed = cfgmod.resolve_seed(args.seed, cfg["train"]["seed"])
    cfg["train"]["seed"] = seed
    train_scenes = scenegen.read_dataset(args.data)
    val_scenes = scenegen.read_dataset(args.val_data)
    teacher = load_checkpoint(args.teacher)
    arch = cfgmod.arch_from_config(cfg, "student")
    dcfg = cfgmod.distill_config(cfg, seed)
    e = cfg["eval"]
    results = harness.ablate(train_scenes, val_scenes, teacher, arch, dcfg,
                             eval_kwargs={"thresholds": tuple(e["thresholds"]),
                                          "score_thresh": e["score_thresh"],
                                          "topk": e["topk"]},
                             progress=print)
    os.makedirs(args.out, exist_ok=True)
    harness.write_ablation_csv(os.path.join(args.out, "ablation.csv"), results)
    table = harness.format_ablation_table(results)
    with open(os.path.join(args.out, "ablation.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    cfgmod.write_lock(args.out, cfg, "ablate", active_backend(),
                      data_dir=args.data, teacher=args.teacher)
    print(table)
    return 0


def cmd_gradcheck(args):
    report = harness.grad_audit(seed=cfgmod.resolve_seed(args.seed, None))
    for name, term in report["terms"].items():
        mark = "pass" if term["passed"] else "FAIL"
        print(f"{name:<12} max_rel_err {term['max_rel_err']:.3e}  [{mark}]")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "grad_audit.json"), "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
    print("gradient audit:", "pass" if report["passed"] else "FAIL")
    return 0 if report["passed"] else 1


def cmd_export_figs(args):
    cfg = _load_cfg(args)
    scene = scenegen.read_scene(args.scene)
    model = load_checkpoint(args.ckpt)
    grid = model.grid
    ncls = model.arch["num_classes"]
    images = scene.images[None]
    if model.kind == "teacher":
        bundle = model.forward(images, [scene.points], detach=True)
    else:
        bundle = model.forward(images, detach=True)
    os.makedirs(args.out, exist_ok=True)
    legend = []
    maps = [
        ("bev_cam.pgm", bundle.c_bev.data[0]),
        ("bev_simlidar.pgm", bundle.l_bev.data[0] if bundle.l_bev is not None
         else np.zeros((1, grid.ny, grid.nx))),
        ("bev_fused.pgm", bundle.u_bev.data[0]),
    ]
    for name, feat in maps:
        img, lo, hi = imgio.feature_to_gray(feat)
        imgio.write_pgm(os.path.join(args.out, name), img)
        legend.append(f"{name}: channel-mean, min {lo:.6g} max {hi:.6g}")
    mask = distill_mod.build_object_mask(scene.boxes, grid, ncls).mask
    imgio.write_pgm(os.path.join(args.out, "mask.pgm"),
                    np.round(255.0 * mask).astype(np.uint8))
    legend.append("mask.pgm: round(255 * object mask), no rescaling")

    e = cfg["eval"]
    dets = decode(bundle.cls_logits.data[0], bundle.box_reg.data[0], grid,
                  e["score_thresh"], e["topk"])
    gt_fill = distill_mod.box_binary_map(scene.boxes, grid) > 0
    det_fill = distill_mod.box_binary_map([d.box for d in dets], grid) > 0
    canvas = np.full((grid.ny, grid.nx, 3), 255, dtype=np.uint8)
    canvas[gt_fill] = (235, 90, 90)
    canvas[det_fill] = (90, 200, 90)
    canvas[gt_fill & det_fill] = (240, 200, 70)
    imgio.write_ppm(os.path.join(args.out, "dets.ppm"), canvas)
    legend.append("dets.ppm: gt red, detections green, overlap yellow; row 0 = y_min")
    with open(os.path.join(args.out, "legend.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(legend) + "\n")
    cfgmod.write_lock(args.out, cfg, "export-figs", active_backend(), ckpt=args.ckpt)
    print(f"wrote {len(maps) + 2} figures to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bevsim",
        description="Desk-scale BEV detection with simulated multi-modal distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--workers", type=int, default=1, help="parallel scene workers")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train-teacher", help="train the fusion teacher")
    _add_common(p, data=True)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    _add_common(p, data=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.add_argument("--loss", default=None,
                   help="comma list of enabled losses (imd,cmd,mmdf,mmdp)")
    p.add_argument("--no-gcm", action="store_true", help="drop geometry compensation")
    p.add_argument("--no-oam", action="store_true", help="drop object-aware masking")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint (toy mAP)")
    _add_common(p, data=True)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the full ablation table")
    _add_common(p, data=True)
    p.add_argument("--val-data", required=True, help="held-out dataset directory")
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all loss terms")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="optional report directory")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export-figs", help="export BEV feature maps and detections")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--scene", required=True, help="scene file (.bsd)")
    p.set_defaults(fn=cmd_export_figs)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
