"""Frame sampling, confidence-weighted multi-task loss, and the probe fit loop.

Features are frozen inputs read from feature clips; only probe parameters are
optimized. Everything is seed-deterministic: batch order, frame sampling, and
reduction order are fixed so repeat runs produce bit-identical checkpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geometry
from .probe import Probe, ProbeConfig, ProbeOutputs, config_hash, init_parameters, save_checkpoint
from .tensorstore import (
    Manifest,
    SceneAnnotation,
    feature_for_frame,
    load_annotation,
    load_feature_clip,
    load_manifest,
)


class EmptyLossError(Exception):
    pass


class InsufficientFramesError(Exception):
    pass


class DatasetError(Exception):
    pass


@dataclass
class TrainConfig:
    lambda_pmap: float = 1.0
    lambda_depth: float = 1.0
    lambda_cam: float = 1.0
    huber_delta: float = 0.1
    frames: int = 4
    min_gap: int = 5
    steps: int = 2000
    batch_size: int = 4
    base_lr: float = 1e-4
    warmup_steps: int = 500
    final_lr: float = 1e-6
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    data_fraction: float = 1.0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_every: int = 1

    def __post_init__(self):
        if min(self.lambda_pmap, self.lambda_depth, self.lambda_cam) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.min_gap < 1:
            raise ValueError("minimum temporal gap must be at least 1")
        if not (0 < self.data_fraction <= 1):
            raise ValueError("data fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Frame sampling


def sample_frames(frame_count: int, frames: int, gap: int, rng: np.random.Generator) -> list[int]:
    """Frame 0 plus frames-1 more indices, all pairwise gaps >= gap, ascending.

    Uniform over the feasible sets: ordered choices x_i = y_i + i*gap with
    y_1 <= ... <= y_{S-1} in {0..M} biject onto (S-1)-subsets of {0..M+S-2}
    via z_i = y_i + (i-1), so a uniform subset gives a uniform feasible set.
    """
    spare = frame_count - 1 - (frames - 1) * gap
    if spare < 0:
        raise InsufficientFramesError(
            f"need at least {1 + (frames - 1) * gap} frames for {frames} samples at gap {gap}, got {frame_count}"
        )
    k = frames - 1
    z = np.sort(rng.choice(spare + k, size=k, replace=False))
    y = z - np.arange(k)
    return [0] + [int(y[i] + (i + 1) * gap) for i in range(k)]


def test_frames(frame_count: int, frames: int, gap: int) -> list[int]:
    """Deterministic evaluation selection: the lexicographically smallest feasible set."""
    if frame_count - 1 - (frames - 1) * gap < 0:
        raise InsufficientFramesError(
            f"need at least {1 + (frames - 1) * gap} frames for {frames} samples at gap {gap}, got {frame_count}"
        )
    return [i * gap for i in range(frames)]


# ---------------------------------------------------------------------------
# Losses


def _weighted_ratio(sq_err: torch.Tensor, conf: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = conf * mask.to(conf.dtype)
    denom = w.sum()
    if denom.item() <= 0:
        raise EmptyLossError("no valid pixels with positive confidence")
    return (w * sq_err).sum() / denom


def pointmap_loss(pred: torch.Tensor, gt: torch.Tensor, conf: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Confidence-weighted squared error over valid pixels, normalized by total confidence."""
    return _weighted_ratio(((pred - gt) ** 2).sum(dim=-1), conf, mask)


def depth_loss(pred: torch.Tensor, gt: torch.Tensor, conf: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return _weighted_ratio((pred - gt) ** 2, conf, mask)


def huber(err: torch.Tensor, delta: float) -> torch.Tensor:
    abs_err = err.abs()
    quad = 0.5 * err ** 2
    lin = delta * (abs_err - 0.5 * delta)
    return torch.where(abs_err <= delta, quad, lin)


def camera_loss(pred: torch.Tensor, target: torch.Tensor, delta: float) -> torch.Tensor:
    """Element-wise Huber between 7-vector pose encodings, averaged over frames and components."""
    if pred.shape != target.shape:
        raise ValueError(f"pose encoding shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return huber(pred - target, delta).mean()


@dataclass
class SceneTargets:
    """Per-sample supervision, already scene-normalized."""

    points: torch.Tensor  # (S, H, W, 3)
    depth: torch.Tensor  # (S, H, W)
    conf: torch.Tensor  # (S, H, W)
    mask: torch.Tensor  # (S, H, W) bool
    cameras: torch.Tensor  # (S-1, 7)


def encode_camera_targets(poses: np.ndarray) -> np.ndarray:
    """World-to-camera pose matrices to canonical 7-vectors, one per non-reference frame."""
    return np.stack([geometry.encode_pose(geometry.PoseSE3.from_matrix(g)) for g in poses[1:]])


def build_targets(ann: SceneAnnotation, frame_idx: list[int]) -> SceneTargets:
    """Slice a normalized annotation at the sampled frames."""
    idx = np.asarray(frame_idx)
    return SceneTargets(
        points=torch.from_numpy(np.ascontiguousarray(ann.points[idx])).float(),
        depth=torch.from_numpy(np.ascontiguousarray(ann.depth[idx])).float(),
        conf=torch.from_numpy(np.ascontiguousarray(ann.conf[idx])).float(),
        mask=torch.from_numpy(np.ascontiguousarray(ann.mask[idx])),
        cameras=torch.from_numpy(encode_camera_targets(ann.poses[idx])).float(),
    )


def total_loss(
    outputs: ProbeOutputs, targets: SceneTargets, config: TrainConfig
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the three terms; zero-weight terms are skipped outright
    so their parameters receive exactly zero gradient."""
    terms: dict[str, float] = {}
    parts = []
    if config.lambda_pmap > 0:
        l_pmap = pointmap_loss(outputs.points, targets.points, targets.conf, targets.mask)
        parts.append(config.lambda_pmap * l_pmap)
        terms["pmap"] = float(l_pmap.detach())
    if config.lambda_depth > 0:
        l_depth = depth_loss(outputs.depth, targets.depth, targets.conf, targets.mask)
        parts.append(config.lambda_depth * l_depth)
        terms["depth"] = float(l_depth.detach())
    if config.lambda_cam > 0:
        l_cam = camera_loss(outputs.cameras, targets.cameras, config.huber_delta)
        parts.append(config.lambda_cam * l_cam)
        terms["cam"] = float(l_cam.detach())
    if not parts:
        raise EmptyLossError("all loss weights are zero")
    loss = parts[0]
    for p in parts[1:]:
        loss = loss + p
    terms["total"] = float(loss.detach())
    return loss, terms


# ---------------------------------------------------------------------------
# Data access


@dataclass
class LoadedScene:
    video_id: str
    features: np.ndarray  # (T, C, grid_h, grid_w) float32
    ann: SceneAnnotation  # raw, un-normalized
    norm: SceneAnnotation  # scene-normalized copy


def load_split(manifest_path: str | Path, backbone: str, split: str | None = None) -> list[LoadedScene]:
    """Load every scene of a manifest into memory, features assembled per raw frame."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    if split is not None and manifest.split != split:
        raise DatasetError(f"{manifest_path}: manifest split {manifest.split!r} is not {split!r}")
    if not manifest.entries:
        raise DatasetError(f"{manifest_path}: empty split")
    root = manifest_path.parent
    scenes = []
    for entry in sorted(manifest.entries, key=lambda e: e.video_id):
        if backbone not in entry.features:
            raise DatasetError(f"video {entry.video_id} has no features for backbone {backbone!r}")
        clip = load_feature_clip(root / entry.features[backbone])
        feats = np.stack([feature_for_frame(clip, t) for t in range(entry.frame_count)])
        ann = load_annotation(root / entry.annotation)
        if ann.frame_count != entry.frame_count:
            raise DatasetError(f"video {entry.video_id}: manifest frame count disagrees with annotation")
        norm, _ = geometry.normalize_scene(ann)
        scenes.append(LoadedScene(entry.video_id, feats, ann, norm))
    return scenes


def select_fraction(scenes: list[LoadedScene], fraction: float) -> list[LoadedScene]:
    """Deterministic subsample: the first k scenes in video-id order."""
    if fraction >= 1.0:
        return list(scenes)
    k = max(1, round(fraction * len(scenes)))
    return sorted(scenes, key=lambda s: s.video_id)[:k]


# ---------------------------------------------------------------------------
# Optimization loop


def lr_at_step(step: int, config: TrainConfig) -> float:
    """Linear warmup to the base rate, then cosine decay to the final rate."""
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.base_lr * (step + 1) / config.warmup_steps
    span = max(1, config.steps - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    return config.final_lr + 0.5 * (config.base_lr - config.final_lr) * (1.0 + math.cos(math.pi * progress))


def train_probe(
    manifest_path: str | Path,
    backbone: str,
    probe_config: ProbeConfig,
    train_config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[Probe, list[dict]]:
    """Fit the probe on the train split; returns the probe and the step log.

    With out_dir set, writes checkpoints named probe_<backbone>_<step> plus a
    line-delimited JSON log and the resolved configs.
    """
    scenes = select_fraction(load_split(manifest_path, backbone, split="train"), train_config.data_fraction)
    for scene in scenes:
        _check_scene_compat(scene, probe_config)

    probe = init_parameters(probe_config, train_config.seed)
    optimizer = torch.optim.AdamW(
        probe.parameters(),
        lr=train_config.base_lr,
        weight_decay=train_config.weight_decay,
    )
    rng = np.random.default_rng(train_config.seed)
    log: list[dict] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "train_config.json").write_text(
            json.dumps(train_config.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        (out_path / "probe_config.json").write_text(
            json.dumps(probe_config.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    n = len(scenes)
    batch = min(train_config.batch_size, n)
    for step in range(train_config.steps):
        lr = lr_at_step(step, train_config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        picks = rng.choice(n, size=batch, replace=False) if batch < n else np.arange(n)
        optimizer.zero_grad(set_to_none=True)
        step_terms: dict[str, float] = {}
        total = None
        for scene_idx in picks:
            scene = scenes[int(scene_idx)]
            frame_idx = sample_frames(
                scene.ann.frame_count, train_config.frames, train_config.min_gap, rng
            )
            feats = torch.from_numpy(np.ascontiguousarray(scene.features[np.asarray(frame_idx)]))
            targets = build_targets(scene.norm, frame_idx)
            outputs = probe(feats)
            loss, terms = total_loss(outputs, targets, train_config)
            total = loss if total is None else total + loss
            for key, value in terms.items():
                step_terms[key] = step_terms.get(key, 0.0) + value / batch
        total = total / batch
        total.backward()
        if train_config.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(probe.parameters(), train_config.clip_norm)
        optimizer.step()

        if step % train_config.log_every == 0 or step == train_config.steps - 1:
            record = {"step": step, "lr": lr}
            record.update(step_terms)
            log.append(record)
        if (
            out_path is not None
            and train_config.checkpoint_every > 0
            and (step + 1) % train_config.checkpoint_every == 0
            and step + 1 < train_config.steps
        ):
            save_checkpoint(probe, out_path / f"probe_{backbone}_{step + 1}", train_config.seed)

    if out_path is not None:
        save_checkpoint(probe, out_path / f"probe_{backbone}_{train_config.steps}", train_config.seed)
        with open(out_path / "train_log.jsonl", "w", encoding="utf-8") as f:
            for record in log:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    return probe, log


def _check_scene_compat(scene: LoadedScene, probe_config: ProbeConfig) -> None:
    T, C, gh, gw = scene.features.shape
    if (C, gh, gw) != (probe_config.channels, probe_config.grid_h, probe_config.grid_w):
        raise DatasetError(
            f"video {scene.video_id}: feature shape {(C, gh, gw)} does not match probe config "
            f"{(probe_config.channels, probe_config.grid_h, probe_config.grid_w)}"
        )
    if (scene.ann.height, scene.ann.width) != (probe_config.out_h, probe_config.out_w):
        raise DatasetError(
            f"video {scene.video_id}: annotation resolution {(scene.ann.height, scene.ann.width)} "
            f"does not match probe output {(probe_config.out_h, probe_config.out_w)}"
        )
