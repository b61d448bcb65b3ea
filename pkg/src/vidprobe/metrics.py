"""Evaluation suite: point map error, depth error, pairwise pose AUC, and
cross-view correspondence error, with per-scene and aggregate reporting.

Stored metric values are never display-scaled; the point-error x10 rule is
applied at rendering time only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geometry
from .geometry import PoseError, PoseSE3
from .probe import Probe
from .tensorstore import SceneAnnotation
from .trainer import DatasetError, load_split, test_frames

AUC_GRID_STEP = 0.1


class DegenerateSceneError(Exception):
    pass


class NoOverlapError(Exception):
    pass


def _unit_mean_norm(points: np.ndarray) -> tuple[np.ndarray, float]:
    scale = float(np.linalg.norm(points, axis=-1).mean())
    if scale <= 0 or not math.isfinite(scale):
        raise DegenerateSceneError("point cloud has zero or non-finite mean norm")
    return points / scale, scale


def point_error(
    pred_points: np.ndarray,
    gt_points: np.ndarray,
    mask: np.ndarray,
    with_scale: bool = True,
) -> float:
    """Mean l2 residual after per-source unit-mean-norm scaling and Umeyama alignment.

    Valid pixels of all S frames are stacked into one cloud per source, each
    cloud normalized to unit mean norm, the prediction aligned onto the ground
    truth, and the mean per-point distance reported.
    """
    mask = np.asarray(mask, dtype=bool)
    pred = np.asarray(pred_points, dtype=np.float64)[mask]
    gt = np.asarray(gt_points, dtype=np.float64)[mask]
    if pred.shape[0] < 3:
        raise DegenerateSceneError(f"need at least 3 valid points, got {pred.shape[0]}")
    pred, _ = _unit_mean_norm(pred)
    gt, _ = _unit_mean_norm(gt)
    sim = geometry.umeyama_align(pred, gt, with_scale=with_scale)
    return float(np.linalg.norm(sim.apply(pred) - gt, axis=-1).mean())


def depth_error(
    pred_depth: np.ndarray,
    pred_points: np.ndarray,
    gt_depth: np.ndarray,
    gt_points: np.ndarray,
    mask: np.ndarray,
) -> float:
    """Mean absolute depth difference after per-source scale normalization.

    Each source's scale is the mean point norm of its own stacked cloud, the
    same normalization the point metric uses.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DegenerateSceneError("no valid pixels")
    _, scale_pred = _unit_mean_norm(np.asarray(pred_points, dtype=np.float64)[mask])
    _, scale_gt = _unit_mean_norm(np.asarray(gt_points, dtype=np.float64)[mask])
    pd = np.asarray(pred_depth, dtype=np.float64)[mask] / scale_pred
    gd = np.asarray(gt_depth, dtype=np.float64)[mask] / scale_gt
    return float(np.abs(pd - gd).mean())


def poses_from_encodings(encodings: np.ndarray) -> list[PoseSE3]:
    """7-vector encodings of frames 1..S-1 to pose list with the identity reference first."""
    poses = [PoseSE3.identity()]
    for enc in np.asarray(encodings, dtype=np.float64):
        poses.append(geometry.decode_pose(enc))
    return poses


def pairwise_pose_errors(
    pred_poses: list[PoseSE3], gt_poses: list[PoseSE3], eps: float = 1e-5
) -> list[PoseError]:
    """Relative rotation/translation errors over all unordered frame pairs."""
    if len(pred_poses) != len(gt_poses):
        raise ValueError("pose lists must have equal length")
    errors = []
    n = len(gt_poses)
    for i in range(n):
        for j in range(i + 1, n):
            rel_pred = geometry.relative_pose(pred_poses[i], pred_poses[j])
            rel_gt = geometry.relative_pose(gt_poses[i], gt_poses[j])
            e_rot = geometry.so3_geodesic_deg(rel_pred.R, rel_gt.R)
            e_trans, excluded = geometry.translation_angle_deg(rel_pred.t, rel_gt.t, eps)
            errors.append(PoseError(e_rot, e_trans, excluded))
    return errors


def auc_grid(theta_max: float, step: float = AUC_GRID_STEP) -> np.ndarray:
    n = int(round(theta_max / step))
    return np.arange(1, n + 1, dtype=np.float64) * step


def joint_accuracy_curve(errors: list[PoseError], thresholds: np.ndarray) -> np.ndarray:
    """Pr[max(e_R, e_T) <= theta] over non-excluded pairs, per threshold."""
    maxes = np.sort([e.max_error() for e in errors if not e.excluded])
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if maxes.size == 0:
        return np.zeros_like(thresholds)
    counts = np.searchsorted(maxes, thresholds, side="right")
    return counts / maxes.size


def pose_auc(errors: list[PoseError], theta_max: float) -> float:
    """Mean joint accuracy over the fixed fine grid theta in {0.1, ..., theta_max}."""
    return float(np.mean(joint_accuracy_curve(errors, auc_grid(theta_max))))


# ---------------------------------------------------------------------------
# Correspondence


def correspondence_error(
    feats_a: np.ndarray,
    feats_b: np.ndarray,
    ann: SceneAnnotation,
    frame_a: int,
    frame_b: int,
    n_anchors: int = 256,
    rng: np.random.Generator | None = None,
    nn_metric: str = "cosine",
    occlusion_tol: float = 0.05,
) -> float:
    """Mean pixel distance between feature nearest-neighbor matches and GT transfer.

    Anchors are valid pixels of view A reprojected into view B through the
    ground-truth depth and poses; anchors failing the in-bounds or relative
    depth occlusion test are dropped. Each surviving anchor queries with the
    feature cell containing it; the best cell of B (top-1 over l2-normalized
    features for cosine) maps back to its center pixel.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if nn_metric not in ("cosine", "euclidean"):
        raise ValueError(f"unknown nearest-neighbor metric {nn_metric!r}")
    C, fh, fw = feats_a.shape
    H, W = ann.height, ann.width
    if H % fh != 0 or W % fw != 0:
        raise ValueError(f"video {H}x{W} is not an integer multiple of the feature grid {fh}x{fw}")
    sh, sw = H // fh, W // fw

    valid = np.argwhere(ann.mask[frame_a])
    if valid.shape[0] == 0:
        raise NoOverlapError(f"frame {frame_a} has no valid pixels")
    take = min(n_anchors, valid.shape[0])
    anchors = valid[rng.choice(valid.shape[0], size=take, replace=False)]

    g_a = PoseSE3.from_matrix(ann.poses[frame_a])
    g_b = PoseSE3.from_matrix(ann.poses[frame_b])
    g_ab = geometry.relative_pose(g_a, g_b)
    k_a, k_b = ann.intrinsics[frame_a], ann.intrinsics[frame_b]
    depth_b = ann.depth[frame_b]
    mask_b = ann.mask[frame_b]

    queries = []
    gt_pixels = []
    for i, j in anchors:
        pix_b, z = geometry.reproject_pixel((j, i), float(ann.depth[frame_a][i, j]), k_a, k_b, g_ab)
        if z <= 0:
            continue
        ri, rj = int(round(pix_b[1])), int(round(pix_b[0]))
        if not (0 <= ri < H and 0 <= rj < W) or not mask_b[ri, rj]:
            continue
        if abs(z - depth_b[ri, rj]) > occlusion_tol * depth_b[ri, rj]:
            continue
        queries.append(feats_a[:, i // sh, j // sw])
        gt_pixels.append(pix_b)
    if not queries:
        raise NoOverlapError(f"no anchors of frame {frame_a} survive transfer into frame {frame_b}")

    q = np.asarray(queries, dtype=np.float64)  # (n, C)
    cells_b = feats_b.reshape(C, fh * fw).T.astype(np.float64)  # (fh*fw, C)
    if nn_metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        bn = cells_b / np.maximum(np.linalg.norm(cells_b, axis=1, keepdims=True), 1e-12)
        best = np.argmax(qn @ bn.T, axis=1)
    else:
        d2 = (q ** 2).sum(1)[:, None] - 2 * q @ cells_b.T + (cells_b ** 2).sum(1)[None, :]
        best = np.argmin(d2, axis=1)
    bi, bj = np.divmod(best, fw)
    pred_u = bj * sw + (sw - 1) / 2
    pred_v = bi * sh + (sh - 1) / 2
    gt = np.asarray(gt_pixels)
    dist = np.hypot(pred_u - gt[:, 0], pred_v - gt[:, 1])
    return float(dist.mean())


def cell_diagonal_px(ann_h: int, ann_w: int, grid_h: int, grid_w: int) -> float:
    """Diagonal of one feature cell in video pixels."""
    return math.hypot(ann_h / grid_h, ann_w / grid_w)


# ---------------------------------------------------------------------------
# Whole-probe evaluation


@dataclass
class EvalConfig:
    frames: int = 4
    min_gap: int = 5
    thetas: tuple[float, ...] = (5.0, 30.0)
    eps: float = 1e-5
    with_scale: bool = True
    correspondence: bool = True
    n_anchors: int = 256
    nn_metric: str = "cosine"
    seed: int = 0


@dataclass
class SceneMetrics:
    video_id: str
    point_err: float
    depth_err: float
    pose_errors: list[PoseError]
    auc: dict[float, float]
    correspondence_err: float | None = None

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "point_err": self.point_err,
            "depth_err": self.depth_err,
            "pose_errors": [[e.e_rot, e.e_trans, e.excluded] for e in self.pose_errors],
            "auc": {f"{t:g}": v for t, v in self.auc.items()},
            "correspondence_err": self.correspondence_err,
        }


@dataclass
class MetricsReport:
    scenes: list[SceneMetrics]
    thetas: tuple[float, ...]
    point_display_x10: bool = False

    @property
    def aggregate(self) -> dict[str, float]:
        agg = {
            "point_err": float(np.mean([s.point_err for s in self.scenes])),
            "depth_err": float(np.mean([s.depth_err for s in self.scenes])),
        }
        for theta in self.thetas:
            agg[f"auc@{theta:g}"] = float(np.mean([s.auc[theta] for s in self.scenes]))
        corr = [s.correspondence_err for s in self.scenes if s.correspondence_err is not None]
        if corr:
            agg["correspondence_err"] = float(np.mean(corr))
        return agg

    def to_json(self) -> str:
        payload = {
            "scenes": [s.to_dict() for s in self.scenes],
            "aggregate": self.aggregate,
            "thetas": list(self.thetas),
            "point_display_x10": self.point_display_x10,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def _rows(self) -> list[tuple[str, dict[str, float | None]]]:
        rows = []
        for s in self.scenes:
            vals: dict[str, float | None] = {"point": s.point_err, "depth": s.depth_err}
            for t in self.thetas:
                vals[f"auc@{t:g}"] = s.auc[t]
            vals["corr"] = s.correspondence_err
            rows.append((s.video_id, vals))
        agg = self.aggregate
        vals = {"point": agg["point_err"], "depth": agg["depth_err"]}
        for t in self.thetas:
            vals[f"auc@{t:g}"] = agg[f"auc@{t:g}"]
        vals["corr"] = agg.get("correspondence_err")
        rows.append(("mean", vals))
        return rows

    def to_table(self) -> str:
        point_label = "Point(x10)" if self.point_display_x10 else "Point"
        headers = ["Scene", point_label, "Depth"] + [f"AUC@{t:g}" for t in self.thetas] + ["Corr(px)"]

        def fmt(key: str, value: float | None) -> str:
            if value is None:
                return "-"
            if key == "point":
                return f"{value * 10:.2f}" if self.point_display_x10 else f"{value:.3f}"
            if key == "corr":
                return f"{value:.2f}"
            return f"{value:.3f}"

        body = []
        for name, vals in self._rows():
            body.append([name] + [fmt(k, v) for k, v in vals.items()])
        widths = [max(len(h), *(len(r[c]) for r in body)) for c, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(widths[c]) for c, h in enumerate(headers))]
        lines.append("  ".join("-" * w for w in widths))
        for row in body:
            lines.append("  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row)))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        cols = ["scene", "point_err", "depth_err"] + [f"auc@{t:g}" for t in self.thetas] + [
            "correspondence_err"
        ]
        lines = [",".join(cols)]
        for name, vals in self._rows():
            cells = [name]
            for key in ["point", "depth"] + [f"auc@{t:g}" for t in self.thetas] + ["corr"]:
                v = vals[key]
                cells.append("" if v is None else repr(float(v)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def evaluate_probe(
    probe: Probe,
    manifest_path: str | Path,
    backbone: str,
    eval_config: EvalConfig | None = None,
) -> MetricsReport:
    """Run the full metric suite over a manifest with deterministic frame selection."""
    cfg = eval_config or EvalConfig()
    scenes = load_split(manifest_path, backbone)
    if not scenes:
        raise DatasetError(f"{manifest_path}: empty split")
    results = []
    probe.eval()
    for idx, scene in enumerate(scenes):
        frame_idx = test_frames(scene.ann.frame_count, cfg.frames, cfg.min_gap)
        feats = torch.from_numpy(np.ascontiguousarray(scene.features[np.asarray(frame_idx)]))
        with torch.no_grad():
            outputs = probe(feats)
        pred_points = outputs.points.numpy().astype(np.float64)
        pred_depth = outputs.depth.numpy().astype(np.float64)
        sel = np.asarray(frame_idx)
        gt_points = scene.ann.points[sel]
        gt_depth = scene.ann.depth[sel]
        mask = scene.ann.mask[sel]

        p_err = point_error(pred_points, gt_points, mask, with_scale=cfg.with_scale)
        d_err = depth_error(pred_depth, pred_points, gt_depth, gt_points, mask)
        pred_poses = poses_from_encodings(outputs.cameras.numpy())
        gt_poses = [PoseSE3.from_matrix(scene.ann.poses[t]) for t in frame_idx]
        errors = pairwise_pose_errors(pred_poses, gt_poses, cfg.eps)
        auc = {t: pose_auc(errors, t) for t in cfg.thetas}

        corr = None
        if cfg.correspondence:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, idx]))
            try:
                corr = correspondence_error(
                    scene.features[frame_idx[0]].astype(np.float64),
                    scene.features[frame_idx[-1]].astype(np.float64),
                    scene.ann,
                    frame_idx[0],
                    frame_idx[-1],
                    n_anchors=cfg.n_anchors,
                    rng=rng,
                    nn_metric=cfg.nn_metric,
                )
            except NoOverlapError:
                corr = None
        results.append(SceneMetrics(scene.video_id, p_err, d_err, errors, auc, corr))
    return MetricsReport(results, tuple(cfg.thetas))
