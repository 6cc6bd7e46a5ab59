import math

import numpy as np
import pytest

from bevsim import autodiff as ad
from bevsim.autodiff import Tensor
from bevsim.detnet import (CameraOnlyNet, DetHead, Encoder2D, FuseNet, StudentNet,
                           TeacherNet, build_model, decode, det_loss, det_loss_batch,
                           encode_raw, load_checkpoint, reg_target, save_checkpoint)
from bevsim.geometry import BevGrid
from bevsim.harness import MICRO_ARCH, micro_instance
from bevsim.optim import Adam
from bevsim.scenegen import Box3D


class TestEncoder:
    def test_output_is_input_over_8(self):
        rng = np.random.default_rng(0)
        enc = Encoder2D(rng, 4, (8, 16, 32))
        out = enc(Tensor(rng.normal(size=(2, 4, 64, 128))))
        assert out.shape == (2, 32, 8, 16)

    def test_shared_weights_identical_views(self):
        rng = np.random.default_rng(1)
        enc = Encoder2D(rng, 4, (6, 8, 12))
        img = np.random.default_rng(2).normal(size=(4, 16, 32))
        out = enc(Tensor(np.stack([img, img])))
        assert np.array_equal(out.data[0], out.data[1])

    def test_gradient_audit(self):
        rng = np.random.default_rng(3)
        enc = Encoder2D(rng, 3, (4, 6, 8))
        x = rng.normal(size=(1, 3, 16, 16))
        w = enc.stage2.w
        fn = lambda v: ad.tsum(ad.square(enc(Tensor(x))))
        assert ad.finite_diff_check(fn, w, sample=25).passed


class TestFuseAndHead:
    def test_fuse_output_shape(self):
        rng = np.random.default_rng(4)
        fuse = FuseNet(rng, 8, 5)
        out = fuse(Tensor(rng.normal(size=(2, 8, 6, 6))))
        assert out.shape == (2, 5, 6, 6)

    def test_zero_input_bias_response_deterministic(self):
        rng = np.random.default_rng(5)
        fuse = FuseNet(rng, 4, 4)
        a = fuse(Tensor(np.zeros((1, 4, 5, 5))))
        b = fuse(Tensor(np.zeros((1, 4, 5, 5))))
        assert np.array_equal(a.data, b.data)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(6)
        fuse = FuseNet(rng, 4, 4)
        x = rng.normal(size=(3, 4, 5, 5))
        out = fuse(Tensor(x)).data
        out_perm = fuse(Tensor(x[[2, 0, 1]])).data
        assert np.array_equal(out[[2, 0, 1]], out_perm)

    def test_head_channel_counts_and_range(self):
        rng = np.random.default_rng(7)
        head = DetHead(rng, 6, 3)
        cls, reg = head(Tensor(rng.normal(size=(1, 6, 4, 4))))
        assert cls.shape == (1, 3, 4, 4)
        assert reg.shape == (1, 8, 4, 4)
        probs = ad.sigmoid(cls)
        assert (probs.data > 0).all() and (probs.data < 1).all()

    def test_head_gradient_audit(self):
        rng = np.random.default_rng(8)
        head = DetHead(rng, 4, 2)
        x = rng.normal(size=(1, 4, 3, 3))
        fn = lambda v: ad.tsum(ad.square(ad.concat(list(head(Tensor(x))), axis=1)))
        assert ad.finite_diff_check(fn, head.cls.w).passed


GRID = BevGrid.square(10.0, 10)


def box(x, y, yaw=0.0, cls=0, l=3.0, w=1.5, h=1.4):
    return Box3D((x, y, h / 2), (l, w, h), yaw, cls)


class TestDetLoss:
    def test_perfect_prediction_near_zero(self):
        # ideal detector output: probability 1 at center cells, 0 elsewhere,
        # exact regression vectors -> focal ~ 0 and L1 = 0
        boxes = [box(2.5, 3.5, yaw=0.4)]
        cls_raw, reg_raw = encode_raw(boxes, GRID, 3)
        loss = det_loss(Tensor(cls_raw, requires_grad=True),
                        Tensor(reg_raw, requires_grad=True), boxes, GRID, 3)
        assert float(loss.data) < 1e-4

    def test_empty_scene_background_only_finite(self):
        loss = det_loss(Tensor(np.zeros((3, 10, 10)), requires_grad=True),
                        Tensor(np.zeros((8, 10, 10)), requires_grad=True), [], GRID, 3)
        assert np.isfinite(float(loss.data)) and float(loss.data) > 0

    def test_overfit_single_scene(self):
        # 200 adam steps on raw logit/reg maps must cut the loss by >10x
        boxes = [box(2.5, 3.5, yaw=0.4), box(-3.5, -2.5, cls=1, l=0.8, w=0.8)]
        rng = np.random.default_rng(9)
        cls_t = Tensor(rng.normal(0, 0.1, size=(3, 10, 10)), requires_grad=True)
        reg_t = Tensor(rng.normal(0, 0.1, size=(8, 10, 10)), requires_grad=True)
        opt = Adam([("cls", cls_t), ("reg", reg_t)], lr=5e-2)
        losses = []
        for _ in range(200):
            opt.zero_grad()
            loss = det_loss(cls_t, reg_t, boxes, GRID, 3)
            losses.append(float(loss.data))
            ad.backward(loss)
            opt.step()
        assert losses[-1] < 0.1 * losses[0]


class TestDecode:
    def test_all_zero_heatmap_empty(self):
        assert decode(np.full((3, 10, 10), -50.0), np.zeros((8, 10, 10)), GRID) == []

    def test_roundtrip_exact(self):
        boxes = [box(2.51, 3.47, yaw=0.8, cls=2, l=3.3, w=1.7, h=1.5),
                 box(-4.0, 1.0, yaw=-2.4, cls=0)]
        cls_raw, reg_raw = encode_raw(boxes, GRID, 3)
        dets = decode(cls_raw, reg_raw, GRID, 0.5, 10)
        assert len(dets) == 2
        by_class = {d.class_id: d for d in dets}
        for b in boxes:
            d = by_class[b.class_id]
            assert np.allclose(d.box.center, b.center, atol=1e-9)
            assert np.allclose(d.box.size, b.size, atol=1e-9)
            assert abs(d.box.yaw - b.yaw) < 1e-9

    def test_sorted_by_confidence(self):
        cls_raw = np.full((2, 10, 10), -50.0)
        cls_raw[0, 2, 2] = 0.0   # p = 0.5
        cls_raw[1, 6, 6] = 2.0   # p ~ 0.88
        dets = decode(cls_raw, np.zeros((8, 10, 10)), GRID, 0.1, 10)
        confs = [d.confidence for d in dets]
        assert confs == sorted(confs, reverse=True)

    def test_topk_and_threshold(self):
        cls_raw = np.full((1, 10, 10), -50.0)
        for i, v in enumerate((3.0, 2.0, 1.0)):
            cls_raw[0, 2 * i + 1, 5] = v
        dets = decode(cls_raw, np.zeros((8, 10, 10)), GRID, 0.5, 2)
        assert len(dets) == 2
        assert dets[0].confidence > dets[1].confidence

    def test_local_max_suppression(self):
        cls_raw = np.full((1, 10, 10), -50.0)
        cls_raw[0, 4, 4] = 3.0
        cls_raw[0, 4, 5] = 2.0  # neighbor, must be suppressed
        dets = decode(cls_raw, np.zeros((8, 10, 10)), GRID, 0.1, 10)
        assert len(dets) == 1 and dets[0].cell == (4, 4)


class TestModels:
    def test_bundle_shapes(self):
        scene, teacher, student = micro_instance()
        images = scene.images[None]
        tb = teacher.forward(images, [scene.points])
        g = teacher.grid
        cb = MICRO_ARCH["c_bev"]
        assert tb.c_bev.shape == (1, cb, g.ny, g.nx)
        assert tb.l_bev.shape == (1, cb, g.ny, g.nx)
        assert tb.u_bev.shape == (1, MICRO_ARCH["c_fuse"], g.ny, g.nx)
        assert tb.cls_logits.shape == (1, 3, g.ny, g.nx)
        assert tb.box_reg.shape == (1, 8, g.ny, g.nx)
        sb = student.forward(images)
        assert sb.l_bev.shape == tb.l_bev.shape
        assert sb.u_bev.shape == tb.u_bev.shape

    def test_teacher_zero_cloud_still_runs(self):
        scene, teacher, _ = micro_instance()
        tb = teacher.forward(scene.images[None], [np.zeros((0, 4))])
        assert np.isfinite(tb.cls_logits.data).all()
        # pillar branch contributes only bias responses
        dets = decode(tb.cls_logits.data[0], tb.box_reg.data[0], teacher.grid, 0.0, 5)
        assert isinstance(dets, list)

    def test_detached_forward_produces_constants(self):
        scene, teacher, _ = micro_instance()
        tb = teacher.forward(scene.images[None], [scene.points], detach=True)
        assert tb.detached
        for t in (tb.c_bev, tb.l_bev, tb.u_bev, tb.cls_logits, tb.box_reg):
            assert not t.requires_grad

    def test_teacher_student_fuse_head_param_counts_match(self):
        _, teacher, student = micro_instance()
        t_fuse = sum(p.size for _, p in teacher.fuse.named_parameters())
        s_fuse = sum(p.size for _, p in student.fuse.named_parameters())
        t_head = sum(p.size for _, p in teacher.head.named_parameters())
        s_head = sum(p.size for _, p in student.head.named_parameters())
        assert t_fuse == s_fuse and t_head == s_head

    def test_student_gcm_identity_init_only_heads_differ(self):
        # with zero-init GCM, the simulated branch differs from the camera
        # branch only through its separate depth/context parameters
        scene, _, student = micro_instance()
        shared = build_model(dict(MICRO_ARCH, share_depth_heads=True), seed=4)
        sb = shared.forward(scene.images[None])
        assert np.array_equal(sb.l_bev.data, sb.c_bev.data)

    def test_teacher_grads_absent_after_distill_backward(self):
        scene, teacher, student = micro_instance()
        images = scene.images[None]
        tb = teacher.forward(images, [scene.points], detach=True)
        sb = student.forward(images)
        from bevsim.distill import imd_loss, mmdf_loss
        loss = ad.add(imd_loss(tb.c_bev, sb.c_bev), mmdf_loss(tb.u_bev, sb.u_bev))
        ad.backward(loss)
        for _, p in teacher.named_parameters():
            assert p.grad is None
        assert any(p.grad is not None for _, p in student.named_parameters())

    def test_end_to_end_student_gradient_audit(self):
        scene, teacher, student = micro_instance()
        images = scene.images[None]
        # nudge GCM off identity so both branches carry gradient
        rng = np.random.default_rng(12)
        for stack in (student.gc_uv, student.gc_bev):
            for layer in stack.layers:
                layer.offset.w.data = rng.normal(0, 0.2, size=layer.offset.w.shape)
                layer.out.w.data = rng.normal(0, 0.2, size=layer.out.w.shape)
        params = dict(student.named_parameters())

        def fn(v):
            sb = student.forward(images)
            return det_loss_batch(sb, [scene.boxes], student.grid, 3)

        for name in ("encoder.stage1.w", "sim_camera.depth.conv1.w",
                     "gc_uv.layers.0.offset.w", "gc_bev.layers.1.out.w",
                     "camera.context.head.w"):
            report = ad.finite_diff_check(fn, params[name], sample=6,
                                          rng=np.random.default_rng(1))
            assert report.passed, (name, report.max_rel_err)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        _, teacher, _ = micro_instance()
        save_checkpoint(tmp_path / "ckpt", teacher)
        back = load_checkpoint(tmp_path / "ckpt")
        a = dict(teacher.named_parameters())
        b = dict(back.named_parameters())
        assert set(a) == set(b)
        for name in a:
            assert np.array_equal(a[name].data, b[name].data)

    def test_forward_identical_after_reload(self, tmp_path):
        scene, teacher, _ = micro_instance()
        save_checkpoint(tmp_path / "ckpt", teacher)
        back = load_checkpoint(tmp_path / "ckpt")
        x = scene.images[None]
        t1 = teacher.forward(x, [scene.points], detach=True)
        t2 = back.forward(x, [scene.points], detach=True)
        assert np.array_equal(t1.cls_logits.data, t2.cls_logits.data)

    def test_shape_mismatch_rejected(self, tmp_path):
        import json
        _, teacher, _ = micro_instance()
        save_checkpoint(tmp_path / "ckpt", teacher)
        meta = json.loads((tmp_path / "ckpt" / "model.json").read_text())
        first = sorted(meta["params"])[0]
        from bevsim import bsdt
        bsdt.write(tmp_path / "ckpt" / meta["params"][first], np.zeros((2, 2)))
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(tmp_path / "ckpt")
