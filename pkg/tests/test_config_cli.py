import json
import os

import numpy as np
import pytest

from bevsim import config as cfgmod
from bevsim import imgio
from bevsim.cli import main
from bevsim.config import ConfigError, resolve_config, resolve_seed

MICRO_CONFIG = {
    "data": {
        "n_scenes": 6, "n_val_scenes": 3,
        "n_boxes": [2, 2], "extent": 8.0, "x_range": [2.5, 6.5], "y_range": [-4.5, 4.5],
        "h_img": 16, "w_img": 32, "n_beams": 5, "elev_range_deg": [-35.0, -8.0],
        "azimuth_step_deg": 6.0, "lidar_dropout": 0.1, "max_range": 14.0,
        "sparsity_target": 0.1,
    },
    "model": {
        "enc_channels": [6, 10, 16], "hidden": 8, "c_bev": 8, "c_fuse": 8,
        "extent": 8.0, "grid_cells": 8, "d_min": 1.0, "d_max": 11.0, "n_bins": 4,
    },
    "train": {"epochs": 1, "batch_size": 3, "lr": 1e-3},
    "eval": {"score_thresh": 0.05, "topk": 8},
}


class TestConfig:
    def test_defaults_resolve(self):
        cfg = resolve_config()
        assert cfg["train"]["epochs"] > 0
        assert cfg["data"]["n_scenes"] == 512 and cfg["data"]["n_val_scenes"] == 128

    def test_partial_overlay(self):
        cfg = resolve_config({"train": {"epochs": 3}})
        assert cfg["train"]["epochs"] == 3
        assert cfg["train"]["batch_size"] == 8  # untouched default

    def test_unknown_key_rejected_with_path(self):
        with pytest.raises(ConfigError, match="distill.bogus"):
            resolve_config({"distill": {"bogus": 1}})

    def test_unknown_top_level_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key: frobnicate"):
            resolve_config({"frobnicate": {}})

    def test_nested_weights_validated(self):
        with pytest.raises(ConfigError, match="weights.xyz"):
            resolve_config({"distill": {"weights": {"xyz": 2.0}}})

    def test_seed_precedence(self, monkeypatch):
        monkeypatch.delenv("BEVSIM_SEED", raising=False)
        assert resolve_seed(None, None) == 42
        assert resolve_seed(None, 7) == 7
        monkeypatch.setenv("BEVSIM_SEED", "13")
        assert resolve_seed(None, 7) == 13
        assert resolve_seed(99, 7) == 99


class TestImgIO:
    def test_pgm_roundtrip(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        imgio.write_pgm(tmp_path / "a.pgm", img)
        assert np.array_equal(imgio.read_pnm(tmp_path / "a.pgm"), img)

    def test_ppm_roundtrip(self, tmp_path):
        img = np.arange(24, dtype=np.uint8).reshape(2, 4, 3)
        imgio.write_ppm(tmp_path / "a.ppm", img)
        assert np.array_equal(imgio.read_pnm(tmp_path / "a.ppm"), img)

    def test_zero_map_renders_mid_gray(self):
        img, lo, hi = imgio.feature_to_gray(np.zeros((2, 4, 4)))
        assert (img == 128).all()

    def test_min_max_scaling(self):
        img, lo, hi = imgio.feature_to_gray(np.array([[0.0, 1.0], [0.5, 1.0]]))
        assert img.min() == 0 and img.max() == 255
        assert (lo, hi) == (0.0, 1.0)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Full CLI pipeline on a micro config: gen -> teacher -> distill -> eval."""
    root = tmp_path_factory.mktemp("ws")
    cfg_path = root / "micro.json"
    cfg_path.write_text(json.dumps(MICRO_CONFIG))
    data = root / "data"
    assert main(["gen", "--config", str(cfg_path), "--out", str(data)]) == 0
    teacher_dir = root / "teacher"
    assert main(["train-teacher", "--config", str(cfg_path), "--data", str(data),
                 "--out", str(teacher_dir)]) == 0
    student_dir = root / "student"
    assert main(["distill", "--config", str(cfg_path), "--data", str(data),
                 "--teacher", str(teacher_dir / "checkpoint"),
                 "--out", str(student_dir)]) == 0
    return root, cfg_path, data, teacher_dir, student_dir


class TestCLI:
    def test_gen_outputs(self, workspace):
        _, _, data, _, _ = workspace
        names = sorted(os.listdir(data))
        assert "manifest.json" in names and "config.lock.json" in names
        assert sum(n.endswith(".bsd") for n in names) == 6

    def test_gen_deterministic_rerun(self, workspace, tmp_path):
        root, cfg_path, data, _, _ = workspace
        again = tmp_path / "data2"
        assert main(["gen", "--config", str(cfg_path), "--out", str(again)]) == 0
        for name in sorted(os.listdir(data)):
            if name.endswith(".bsd"):
                assert (again / name).read_bytes() == (data / name).read_bytes()

    def test_lock_file_reproduces_gen(self, workspace, tmp_path):
        _, _, data, _, _ = workspace
        lock = data / "config.lock.json"
        again = tmp_path / "data3"
        assert main(["gen", "--config", str(lock), "--out", str(again)]) == 0
        for name in sorted(os.listdir(data)):
            if name.endswith(".bsd"):
                assert (again / name).read_bytes() == (data / name).read_bytes()

    def test_invalid_config_key_nonzero_exit(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"data": {"wrong_key": 1}}))
        code = main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "wrong_key" in capsys.readouterr().err

    def test_unknown_flag_errors(self, workspace):
        _, cfg_path, data, _, _ = workspace
        with pytest.raises(SystemExit) as exc:
            main(["gen", "--config", str(cfg_path), "--out", "x", "--frob"])
        assert exc.value.code != 0

    def test_help_lists_all_subcommands(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        out = capsys.readouterr().out
        for cmd in ("gen", "train-teacher", "distill", "eval", "ablate",
                    "gradcheck", "export-figs"):
            assert cmd in out

    def test_train_outputs(self, workspace):
        _, _, _, teacher_dir, student_dir = workspace
        for d in (teacher_dir, student_dir):
            assert (d / "checkpoint" / "model.json").exists()
            assert (d / "loss_curves.csv").exists()
            assert (d / "config.lock.json").exists()
        header = (teacher_dir / "loss_curves.csv").read_text().splitlines()[0]
        assert header == "step,term,value"

    def test_distill_loss_flag_and_switches(self, workspace, tmp_path):
        root, cfg_path, data, teacher_dir, _ = workspace
        out = tmp_path / "s2"
        assert main(["distill", "--config", str(cfg_path), "--data", str(data),
                     "--teacher", str(teacher_dir / "checkpoint"), "--out", str(out),
                     "--loss", "imd,cmd", "--no-gcm", "--no-oam"]) == 0
        lock = json.loads((out / "config.lock.json").read_text())
        assert lock["distill"]["imd"] and lock["distill"]["cmd"]
        assert not lock["distill"]["mmdf"] and not lock["distill"]["mmdp"]
        assert not lock["distill"]["gcm"] and not lock["distill"]["oam"]
        terms = {line.split(",")[1] for line in
                 (out / "loss_curves.csv").read_text().splitlines()[1:]}
        assert terms == {"det", "imd", "cmd", "total"}

    def test_bad_loss_flag_rejected(self, workspace, tmp_path, capsys):
        _, cfg_path, data, teacher_dir, _ = workspace
        code = main(["distill", "--config", str(cfg_path), "--data", str(data),
                     "--teacher", str(teacher_dir / "checkpoint"),
                     "--out", str(tmp_path / "s3"), "--loss", "imd,nope"])
        assert code == 2 and "nope" in capsys.readouterr().err

    def test_eval_emits_report_with_map(self, workspace, tmp_path):
        _, cfg_path, data, _, student_dir = workspace
        out = tmp_path / "eval"
        assert main(["eval", "--config", str(cfg_path), "--data", str(data),
                     "--ckpt", str(student_dir / "checkpoint"), "--out", str(out)]) == 0
        doc = json.loads((out / "eval_report.json").read_text())
        assert "mean_ap" in doc and 0.0 <= doc["mean_ap"] <= 1.0

    def test_eval_does_not_mutate_dataset(self, workspace, tmp_path):
        _, cfg_path, data, _, student_dir = workspace
        before = {n: (data / n).read_bytes() for n in os.listdir(data)}
        main(["eval", "--config", str(cfg_path), "--data", str(data),
              "--ckpt", str(student_dir / "checkpoint"), "--out", str(tmp_path / "e2")])
        after = {n: (data / n).read_bytes() for n in os.listdir(data)}
        assert before == after

    def test_gradcheck_exit_codes(self, tmp_path):
        assert main(["gradcheck", "--out", str(tmp_path / "audit")]) == 0
        assert (tmp_path / "audit" / "grad_audit.json").exists()

    def test_export_figs_contract(self, workspace, tmp_path):
        _, cfg_path, data, _, student_dir = workspace
        out = tmp_path / "figs"
        scene = data / "scene_000000.bsd"
        assert main(["export-figs", "--config", str(cfg_path),
                     "--ckpt", str(student_dir / "checkpoint"),
                     "--scene", str(scene), "--out", str(out)]) == 0
        for name in ("bev_cam.pgm", "bev_simlidar.pgm", "bev_fused.pgm",
                     "mask.pgm", "dets.ppm", "legend.txt"):
            assert (out / name).exists(), name

    def test_mask_pgm_values_match_definition(self, workspace, tmp_path):
        _, cfg_path, data, _, student_dir = workspace
        out = tmp_path / "figs2"
        main(["export-figs", "--config", str(cfg_path),
              "--ckpt", str(student_dir / "checkpoint"),
              "--scene", str(data / "scene_000001.bsd"), "--out", str(out)])
        from bevsim import distill as dmod
        from bevsim.scenegen import read_scene
        from bevsim.detnet import load_checkpoint
        scene = read_scene(data / "scene_000001.bsd")
        model = load_checkpoint(student_dir / "checkpoint")
        mask = dmod.build_object_mask(scene.boxes, model.grid, 3).mask
        img = imgio.read_pnm(out / "mask.pgm")
        assert np.array_equal(img, np.round(255.0 * mask).astype(np.uint8))

    def test_distill_reproducible_from_lock(self, workspace, tmp_path):
        _, _, data, teacher_dir, student_dir = workspace
        lock = student_dir / "config.lock.json"
        out = tmp_path / "s_again"
        assert main(["distill", "--config", str(lock), "--data", str(data),
                     "--teacher", str(teacher_dir / "checkpoint"),
                     "--out", str(out)]) == 0
        a = sorted(os.listdir(student_dir / "checkpoint"))
        for name in a:
            assert (out / "checkpoint" / name).read_bytes() == \
                (student_dir / "checkpoint" / name).read_bytes()
