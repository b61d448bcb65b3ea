import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vidprobe import geometry as geo
from vidprobe.probe import ProbeConfig, ProbeOutputs, init_parameters, load_checkpoint
from vidprobe.trainer import (
    DatasetError,
    EmptyLossError,
    InsufficientFramesError,
    TrainConfig,
    build_targets,
    camera_loss,
    depth_loss,
    encode_camera_targets,
    huber,
    load_split,
    lr_at_step,
    pointmap_loss,
    sample_frames,
    select_fraction,
    total_loss,
    train_probe,
)
from vidprobe.trainer import test_frames as eval_frames


def fixture_probe_config(width=32, blocks=1, heads=4):
    """Probe sized to the shared 12x12 / 6x6 / 24-channel oracle fixture."""
    return ProbeConfig(
        width=width, blocks=blocks, heads=heads, channels=24,
        grid_h=6, grid_w=6, frames=4, out_h=12, out_w=12,
        mlp_ratio=2, fusion_width=16,
    )


class TestSampleFrames:
    def test_tight_case_has_single_feasible_set(self, rng):
        for _ in range(20):
            assert sample_frames(16, 4, 5, rng) == [0, 5, 10, 15]

    def test_too_few_frames(self, rng):
        with pytest.raises(InsufficientFramesError, match="16"):
            sample_frames(15, 4, 5, rng)

    @given(
        frame_count=st.integers(4, 60),
        frames=st.integers(2, 6),
        gap=st.integers(1, 8),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=200, deadline=None)
    def test_always_feasible_or_raises(self, frame_count, frames, gap, seed):
        rng = np.random.default_rng(seed)
        if frame_count - 1 - (frames - 1) * gap < 0:
            with pytest.raises(InsufficientFramesError):
                sample_frames(frame_count, frames, gap, rng)
            return
        picks = sample_frames(frame_count, frames, gap, rng)
        assert picks[0] == 0
        assert len(picks) == frames
        assert picks[-1] < frame_count
        assert all(b - a >= gap for a, b in zip(picks, picks[1:]))

    def test_uniform_over_feasible_sets(self):
        # T=10, S=3, gap=2: feasible sets are exactly C(7, 2) = 21 strictly
        # gapped index triples starting at 0.
        feasible = sorted(
            (0, a, b)
            for a, b in itertools.combinations(range(10), 2)
            if a >= 2 and b - a >= 2
        )
        assert len(feasible) == 21
        rng = np.random.default_rng(0)
        counts = {f: 0 for f in feasible}
        draws = 21_000
        for _ in range(draws):
            counts[tuple(sample_frames(10, 3, 2, rng))] += 1
        # each cell expects 1000 with sigma ~31; 200 is > 6 sigma
        assert min(counts.values()) > 800
        assert max(counts.values()) < 1200

    def test_eval_selection_deterministic(self):
        assert eval_frames(16, 4, 5) == [0, 5, 10, 15]
        assert eval_frames(24, 4, 5) == [0, 5, 10, 15]
        with pytest.raises(InsufficientFramesError):
            eval_frames(15, 4, 5)


class TestLosses:
    def test_pointmap_zero_at_target(self, rng):
        gt = torch.from_numpy(rng.normal(size=(2, 4, 4, 3))).float()
        conf = torch.ones(2, 4, 4)
        mask = torch.ones(2, 4, 4, dtype=torch.bool)
        assert pointmap_loss(gt, gt, conf, mask).item() == 0.0

    def test_pointmap_uniform_confidence_is_mean(self, rng):
        gt = torch.zeros(1, 3, 3, 3)
        pred = torch.zeros(1, 3, 3, 3)
        pred[0, 0, 0] = torch.tensor([3.0, 0.0, 4.0])  # squared norm 25
        conf = torch.ones(1, 3, 3)
        mask = torch.ones(1, 3, 3, dtype=torch.bool)
        assert pointmap_loss(pred, gt, conf, mask).item() == pytest.approx(25.0 / 9.0)

    def test_confidence_scale_invariance(self, rng):
        gt = torch.from_numpy(rng.normal(size=(2, 4, 4, 3)))
        pred = torch.from_numpy(rng.normal(size=(2, 4, 4, 3)))
        conf = torch.from_numpy(rng.uniform(0.1, 2.0, size=(2, 4, 4)))
        mask = torch.from_numpy(rng.random(size=(2, 4, 4)) < 0.8)
        base = pointmap_loss(pred, gt, conf, mask).item()
        scaled = pointmap_loss(pred, gt, conf * 7, mask).item()
        assert scaled == pytest.approx(base, rel=1e-12)

    def test_masked_pixels_ignored(self, rng):
        gt = torch.from_numpy(rng.normal(size=(1, 4, 4, 3))).float()
        pred = gt.clone()
        conf = torch.ones(1, 4, 4)
        mask = torch.ones(1, 4, 4, dtype=torch.bool)
        mask[0, 2, 2] = False
        pred[0, 2, 2] = 1e6  # garbage on an invalid pixel
        assert pointmap_loss(pred, gt, conf, mask).item() == 0.0

    def test_empty_mask_raises(self):
        z = torch.zeros(1, 2, 2, 3)
        with pytest.raises(EmptyLossError):
            pointmap_loss(z, z, torch.ones(1, 2, 2), torch.zeros(1, 2, 2, dtype=torch.bool))
        with pytest.raises(EmptyLossError):
            pointmap_loss(z, z, torch.zeros(1, 2, 2), torch.ones(1, 2, 2, dtype=torch.bool))

    def test_depth_constant_offset(self):
        gt = torch.full((1, 3, 3), 2.0)
        pred = gt + 0.3
        conf = torch.ones(1, 3, 3)
        mask = torch.ones(1, 3, 3, dtype=torch.bool)
        assert depth_loss(pred, gt, conf, mask).item() == pytest.approx(0.09, rel=1e-6)

    def test_huber_values(self):
        delta = 0.2
        err = torch.tensor([0.0, 0.1, 0.2, 0.5, -0.5])
        out = huber(err, delta)
        expect = torch.tensor([0.0, 0.005, 0.02, 0.2 * (0.5 - 0.1), 0.2 * (0.5 - 0.1)])
        torch.testing.assert_close(out, expect)

    def test_huber_continuous_at_knee(self):
        delta = 0.1
        below = huber(torch.tensor(delta - 1e-7), delta).item()
        above = huber(torch.tensor(delta + 1e-7), delta).item()
        assert abs(above - below) < 1e-7

    def test_camera_loss_zero_and_single_element(self):
        target = torch.zeros(1, 7)
        assert camera_loss(target, target, 0.1).item() == 0.0
        pred = target.clone()
        pred[0, 3] = 0.05  # inside the quadratic zone
        assert camera_loss(pred, target, 0.1).item() == pytest.approx(0.5 * 0.05**2 / 7)

    def test_camera_loss_shape_guard(self):
        with pytest.raises(ValueError, match="shape"):
            camera_loss(torch.zeros(2, 7), torch.zeros(3, 7), 0.1)


class TestTotalLoss:
    def _fake(self, rng, s=2, h=4, w=4):
        outputs = ProbeOutputs(
            points=torch.from_numpy(rng.normal(size=(s, h, w, 3))).float(),
            depth=torch.from_numpy(rng.uniform(0.5, 2, size=(s, h, w))).float(),
            cameras=torch.from_numpy(rng.normal(size=(s - 1, 7))).float(),
        )
        from vidprobe.trainer import SceneTargets

        targets = SceneTargets(
            points=torch.from_numpy(rng.normal(size=(s, h, w, 3))).float(),
            depth=torch.from_numpy(rng.uniform(0.5, 2, size=(s, h, w))).float(),
            conf=torch.ones(s, h, w),
            mask=torch.ones(s, h, w, dtype=torch.bool),
            cameras=torch.from_numpy(rng.normal(size=(s - 1, 7))).float(),
        )
        return outputs, targets

    def test_weighted_sum(self, rng):
        outputs, targets = self._fake(rng)
        cfg = TrainConfig(lambda_pmap=2.0, lambda_depth=0.5, lambda_cam=3.0)
        loss, terms = total_loss(outputs, targets, cfg)
        expect = (
            2.0 * pointmap_loss(outputs.points, targets.points, targets.conf, targets.mask)
            + 0.5 * depth_loss(outputs.depth, targets.depth, targets.conf, targets.mask)
            + 3.0 * camera_loss(outputs.cameras, targets.cameras, cfg.huber_delta)
        )
        assert loss.item() == pytest.approx(expect.item(), rel=1e-6)
        assert set(terms) == {"pmap", "depth", "cam", "total"}
        assert terms["total"] == pytest.approx(loss.item())

    def test_zero_weight_means_zero_gradient(self, toy_probe_config, rng):
        probe = init_parameters(toy_probe_config, seed=0)
        feats = torch.from_numpy(rng.normal(size=(2, 8, 4, 4))).float()
        outputs = probe(feats)
        from vidprobe.trainer import SceneTargets

        targets = SceneTargets(
            points=torch.zeros(2, 8, 8, 3),
            depth=torch.ones(2, 8, 8),
            conf=torch.ones(2, 8, 8),
            mask=torch.ones(2, 8, 8, dtype=torch.bool),
            cameras=torch.zeros(1, 7),
        )
        cfg = TrainConfig(lambda_cam=0.0)
        loss, terms = total_loss(outputs, targets, cfg)
        loss.backward()
        assert "cam" not in terms
        # camera head never participates: its gradient is exactly absent
        assert probe.camera_head.weight.grad is None
        assert probe.point_head.fuse.weight.grad is not None

    def test_all_zero_weights_raise(self, rng):
        outputs, targets = self._fake(rng)
        cfg = TrainConfig(lambda_pmap=0.0, lambda_depth=0.0, lambda_cam=0.0)
        with pytest.raises(EmptyLossError):
            total_loss(outputs, targets, cfg)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_depth=-0.1)


class TestTargets:
    def test_camera_targets_skip_reference(self):
        g1 = geo.PoseSE3(
            geo.rotation_from_axis_angle(np.array([0.0, 1.0, 0.0]), 0.3),
            np.array([0.1, -0.2, 0.5]),
        )
        poses = np.stack([np.eye(4), g1.matrix])
        enc = encode_camera_targets(poses)
        assert enc.shape == (1, 7)
        np.testing.assert_allclose(enc[0], geo.encode_pose(g1), atol=1e-12)

    def test_build_targets_shapes(self, oracle_dataset):
        scenes = load_split(oracle_dataset["train"], "oracle")
        targets = build_targets(scenes[0].norm, [0, 5, 10, 15])
        assert targets.points.shape == (4, 12, 12, 3)
        assert targets.depth.shape == (4, 12, 12)
        assert targets.mask.dtype == torch.bool
        assert targets.cameras.shape == (3, 7)
        assert targets.points.dtype == torch.float32


class TestSchedule:
    def test_warmup_then_cosine(self):
        cfg = TrainConfig(steps=100, warmup_steps=10, base_lr=1e-3, final_lr=1e-5)
        assert lr_at_step(0, cfg) == pytest.approx(1e-4)
        assert lr_at_step(9, cfg) == pytest.approx(1e-3)
        assert lr_at_step(10, cfg) == pytest.approx(1e-3)  # cosine starts at the peak
        mid = lr_at_step(10 + 45, cfg)
        assert mid == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5))
        assert lr_at_step(100, cfg) == pytest.approx(1e-5)

    def test_monotone_after_warmup(self):
        cfg = TrainConfig(steps=200, warmup_steps=20, base_lr=1e-3, final_lr=1e-6)
        rates = [lr_at_step(s, cfg) for s in range(20, 200)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))


class TestData:
    def test_load_split_sorted_and_normalized(self, oracle_dataset):
        scenes = load_split(oracle_dataset["train"], "oracle", split="train")
        assert len(scenes) == 9
        ids = [s.video_id for s in scenes]
        assert ids == sorted(ids)
        s0 = scenes[0]
        assert s0.features.shape == (16, 24, 6, 6)
        assert s0.features.dtype == np.float32
        norms = np.linalg.norm(s0.norm.points[s0.norm.mask], axis=-1)
        assert norms.mean() == pytest.approx(1.0, abs=1e-5)

    def test_split_guard(self, oracle_dataset):
        with pytest.raises(DatasetError, match="split"):
            load_split(oracle_dataset["train"], "oracle", split="test")

    def test_unknown_backbone(self, oracle_dataset):
        with pytest.raises(DatasetError, match="nope"):
            load_split(oracle_dataset["train"], "nope")

    def test_select_fraction_first_k(self, oracle_dataset):
        scenes = load_split(oracle_dataset["train"], "oracle")
        half = select_fraction(scenes, 0.5)
        assert [s.video_id for s in half] == [s.video_id for s in scenes[:4]]
        assert len(select_fraction(scenes, 0.01)) == 1
        assert len(select_fraction(scenes, 1.0)) == 9


class TestTrainLoop:
    def test_smoke_loss_decreases(self, oracle_dataset, tmp_path):
        cfg = TrainConfig(steps=40, batch_size=4, warmup_steps=10, base_lr=3e-4,
                          seed=0, log_every=1)
        probe, log = train_probe(
            oracle_dataset["train"], "oracle", fixture_probe_config(), cfg, tmp_path / "run"
        )
        totals = [r["total"] for r in log]
        assert len(totals) == 40
        assert np.mean(totals[-10:]) < np.mean(totals[:10])
        # artifacts on disk
        ck = tmp_path / "run" / "probe_oracle_40"
        assert (ck / "manifest.txt").exists()
        lines = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
        first = json.loads(lines[0])
        assert first["step"] == 0
        assert first["lr"] == pytest.approx(lr_at_step(0, cfg))
        assert {"pmap", "depth", "cam", "total"} <= set(first)
        reloaded = load_checkpoint(ck)
        for key, val in probe.state_dict().items():
            assert torch.equal(reloaded.state_dict()[key], val)

    def test_bit_identical_reruns(self, oracle_dataset, tmp_path):
        cfg = TrainConfig(steps=8, batch_size=3, warmup_steps=2, seed=11)
        train_probe(oracle_dataset["train"], "oracle", fixture_probe_config(), cfg, tmp_path / "a")
        train_probe(oracle_dataset["train"], "oracle", fixture_probe_config(), cfg, tmp_path / "b")
        ck_a, ck_b = tmp_path / "a" / "probe_oracle_8", tmp_path / "b" / "probe_oracle_8"
        files_a = sorted(p.name for p in ck_a.iterdir())
        assert files_a == sorted(p.name for p in ck_b.iterdir())
        for name in files_a:
            assert (ck_a / name).read_bytes() == (ck_b / name).read_bytes(), name

    def test_periodic_checkpoints(self, oracle_dataset, tmp_path):
        cfg = TrainConfig(steps=6, batch_size=2, warmup_steps=1, seed=2, checkpoint_every=2)
        train_probe(oracle_dataset["train"], "oracle", fixture_probe_config(), cfg, tmp_path / "run")
        names = sorted(p.name for p in (tmp_path / "run").iterdir() if p.is_dir())
        assert names == ["probe_oracle_2", "probe_oracle_4", "probe_oracle_6"]

    def test_shape_mismatch_rejected(self, oracle_dataset, tmp_path):
        bad = ProbeConfig(width=32, blocks=1, heads=4, channels=24, grid_h=6, grid_w=6,
                          frames=4, out_h=24, out_w=24, mlp_ratio=2, fusion_width=16)
        with pytest.raises(DatasetError, match="resolution"):
            train_probe(oracle_dataset["train"], "oracle", bad, TrainConfig(steps=1), tmp_path / "x")
