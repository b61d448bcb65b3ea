"""Procedural scenes with analytic ray-cast ground truth, plus synthetic
"backbone features" whose 3D information content is set by a corruption dial.

Features are a fixed random encoding of the ground-truth 3D point seen by each
feature cell (plus a per-primitive appearance code). With the dial at zero they
are an invertible-up-to-encoding function of geometry; raising the dial blends
in frame-private noise, adds white noise, and drops channels, so closed-loop
probe error orders datasets by how much 3D structure survives.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .geometry import PoseSE3
from .tensorstore import (
    FeatureClip,
    Manifest,
    ManifestEntry,
    SceneAnnotation,
    build_index_map,
    save_manifest,
    write_annotation,
    write_feature_clip,
)

_T_MIN = 1e-4


class OracleError(Exception):
    pass


@dataclass
class OracleConfig:
    kind: str = "orbit"
    n_primitives: int = 5
    frame_count: int = 24
    image_h: int = 16
    image_w: int = 16
    fov_deg: float = 55.0
    grid_h: int = 8
    grid_w: int = 8
    channels: int = 48
    chunk_len: int = 8
    stride: int = 1
    orbit_span_deg: float = 150.0
    sigma: float = 0.0
    rho: float = 0.0
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("orbit", "flythrough"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.sigma < 0 or not (0 <= self.rho <= 1) or not (0 <= self.dropout < 1):
            raise ValueError("dial out of range: need sigma >= 0, rho in [0,1], dropout in [0,1)")
        if self.image_h % self.grid_h != 0 or self.image_w % self.grid_w != 0:
            raise ValueError("image size must be an integer multiple of the feature grid")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OracleConfig":
        return cls(**d)

    def intrinsics(self) -> np.ndarray:
        focal = 0.5 * self.image_w / math.tan(math.radians(self.fov_deg) / 2)
        return np.array([focal, focal, (self.image_w - 1) / 2, (self.image_h - 1) / 2])


@dataclass
class Dial:
    """One corruption level; doubles as the backbone identity of the clip."""

    backbone: str = "oracle"
    sigma: float = 0.0
    rho: float = 0.0
    dropout: float = 0.0
    layer: int | None = None
    timestep: int | None = None


# ---------------------------------------------------------------------------
# Primitives and ray casting


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def bounding_radius(self) -> float:
        return self.radius

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - self.center
        a = (dirs ** 2).sum(-1)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b ** 2 - 4 * a * c
        t = np.full(dirs.shape[0], np.inf)
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        near = (-b - root) / (2 * a)
        far = (-b + root) / (2 * a)
        # take the nearest intersection in front of the camera
        cand = np.where(near > _T_MIN, near, far)
        t = np.where(hit & (cand > _T_MIN), cand, np.inf)
        return t


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray  # half extents in the box frame
    rot: np.ndarray  # world-to-box rotation

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        o = self.rot @ (origin - self.center)
        d = dirs @ self.rot.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-self.half - o) / d
            t2 = (self.half - o) / d
        lo = np.fmin(t1, t2)
        hi = np.fmax(t1, t2)
        t_near = np.nanmax(lo, axis=-1)
        t_far = np.nanmin(hi, axis=-1)
        hit = (t_near <= t_far) & (t_far > _T_MIN)
        t = np.where(t_near > _T_MIN, t_near, t_far)
        return np.where(hit & (t > _T_MIN), t, np.inf)


@dataclass
class Rect:
    """Finite rectangle: center, two orthonormal in-plane axes with half sizes."""

    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float

    def bounding_radius(self) -> float:
        return math.hypot(self.half_u, self.half_v)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = self.normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - origin) @ n) / denom
        p = origin + t[:, None] * dirs - self.center
        inside = (np.abs(p @ self.axis_u) <= self.half_u) & (np.abs(p @ self.axis_v) <= self.half_v)
        ok = (np.abs(denom) > 1e-12) & (t > _T_MIN) & inside
        return np.where(ok, t, np.inf)


@dataclass
class SceneDef:
    """Full scene geometry: primitives plus world-to-camera poses per frame."""

    primitives: list
    poses: list[PoseSE3]  # already rebased so poses[0] is the identity
    intrinsics: np.ndarray  # (4,), shared by all frames
    image_h: int
    image_w: int


def look_at_pose(pos: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> PoseSE3:
    """World-to-camera pose with +z toward the target and image-y pointing down-ish."""
    pos = np.asarray(pos, dtype=np.float64)
    f = target - pos
    f = f / np.linalg.norm(f)
    x = np.cross(f, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-8:
        raise OracleError("camera forward axis is parallel to up")
    x = x / nx
    y = np.cross(f, x)
    R = np.stack([x, y, f])
    return PoseSE3(R, -R @ pos)


def pixel_rays(intrinsics: np.ndarray, pose: PoseSE3, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-space origin and unnormalized directions (camera z component 1) for pixels.

    Because the direction's camera-frame z is 1, the ray parameter t equals
    z-depth, so intersection distances are depths directly.
    """
    fx, fy, cx, cy = intrinsics
    d_cam = np.stack(
        [(uv[:, 0] - cx) / fx, (uv[:, 1] - cy) / fy, np.ones(uv.shape[0])], axis=-1
    )
    origin = -pose.R.T @ pose.t
    return origin, d_cam @ pose.R


def cast_rays(origin: np.ndarray, dirs: np.ndarray, primitives: list) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit over all primitives: (depth, primitive index), inf/-1 for misses."""
    best_t = np.full(dirs.shape[0], np.inf)
    best_id = np.full(dirs.shape[0], -1, dtype=np.int64)
    for pid, prim in enumerate(primitives):
        t = prim.intersect(origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, pid, best_id)
    return best_t, best_id


def _image_uv(h: int, w: int) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([jj.ravel(), ii.ravel()], axis=-1)  # (u, v) = (col, row)


def render_frame(scene: SceneDef, frame: int, uv: np.ndarray | None = None):
    """Ray-cast one frame: (points_world, depth, prim_id) flattened over pixels."""
    if uv is None:
        uv = _image_uv(scene.image_h, scene.image_w)
    pose = scene.poses[frame]
    origin, dirs = pixel_rays(scene.intrinsics, pose, uv)
    t, pid = cast_rays(origin, dirs, scene.primitives)
    safe_t = np.where(np.isfinite(t), t, 0.0)
    points = origin + safe_t[:, None] * dirs
    return points, t, pid


# ---------------------------------------------------------------------------
# Scene construction


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    axis = rng.standard_normal(3)
    while np.linalg.norm(axis) < 1e-6:
        axis = rng.standard_normal(3)
    return geometry.rotation_from_axis_angle(axis, rng.uniform(0, 2 * math.pi))


def _sample_primitives(rng: np.random.Generator, config: OracleConfig) -> list:
    prims = []
    for _ in range(config.n_primitives):
        if config.kind == "orbit":
            center = rng.uniform(-0.55, 0.55, size=3)
        else:
            center = np.array(
                [rng.uniform(1.5, 5.5), rng.uniform(-1.2, 1.2), rng.uniform(0.1, 1.4)]
            )
        kind = rng.choice(["sphere", "box", "rect"], p=[0.4, 0.4, 0.2])
        if kind == "sphere":
            prims.append(Sphere(center, float(rng.uniform(0.15, 0.35))))
        elif kind == "box":
            prims.append(Box(center, rng.uniform(0.1, 0.3, size=3), _random_rotation(rng)))
        else:
            R = _random_rotation(rng)
            prims.append(
                Rect(center, R[0], R[1], float(rng.uniform(0.2, 0.5)), float(rng.uniform(0.2, 0.5)))
            )
    if config.kind == "flythrough":
        # ground plane guarantees every frame sees structure
        prims.append(Rect(np.array([3.5, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), 6.0, 3.0))
    return prims


def _camera_path(rng: np.random.Generator, config: OracleConfig) -> list[PoseSE3]:
    T = config.frame_count
    poses = []
    if config.kind == "orbit":
        radius = rng.uniform(2.6, 3.4)
        elevation = math.radians(rng.uniform(10, 30))
        theta0 = rng.uniform(0, 2 * math.pi)
        direction = 1.0 if rng.uniform() < 0.5 else -1.0
        span = math.radians(config.orbit_span_deg)
        for i in range(T):
            theta = theta0 + direction * span * (i / max(1, T - 1))
            pos = radius * np.array(
                [math.cos(elevation) * math.cos(theta), math.cos(elevation) * math.sin(theta), math.sin(elevation)]
            )
            poses.append(look_at_pose(pos, np.zeros(3)))
    else:
        height = rng.uniform(0.4, 0.9)
        sway = rng.uniform(0.2, 0.4)
        cycles = rng.uniform(0.7, 1.4)
        step = rng.uniform(0.10, 0.14)
        phase = rng.uniform(0, 2 * math.pi)
        for i in range(T):
            pos = np.array([i * step, sway * math.sin(phase + 2 * math.pi * cycles * i / T), height])
            target = np.array(
                [i * step + 2.0, sway * math.sin(phase + 2 * math.pi * cycles * (i + 6) / T), height - 0.25]
            )
            poses.append(look_at_pose(pos, target))
    return poses


def _clearance(point: np.ndarray, prim) -> float:
    if isinstance(prim, Sphere):
        return float(np.linalg.norm(point - prim.center)) - prim.radius
    if isinstance(prim, Rect):
        q = point - prim.center
        qu = np.clip(q @ prim.axis_u, -prim.half_u, prim.half_u)
        qv = np.clip(q @ prim.axis_v, -prim.half_v, prim.half_v)
        closest = prim.center + qu * prim.axis_u + qv * prim.axis_v
        return float(np.linalg.norm(point - closest))
    # boxes are small; a bounding sphere is close enough for path clearance
    return float(np.linalg.norm(point - prim.center)) - prim.bounding_radius()


def _camera_clear(poses: list[PoseSE3], primitives: list, margin: float = 0.25) -> bool:
    for pose in poses:
        center = -pose.R.T @ pose.t
        for prim in primitives:
            if _clearance(center, prim) < margin:
                return False
    return True


def _rebase_to_first_frame(points: np.ndarray, poses: list[PoseSE3]) -> tuple[np.ndarray, np.ndarray]:
    """Re-express world points and poses so the first camera is the world frame."""
    g0 = poses[0]
    rebased = [g.compose(g0.inverse()) for g in poses]
    mats = np.stack([g.matrix for g in rebased])
    mats[0] = np.eye(4)
    return points @ g0.R.T + g0.t, mats


def build_scene(config: OracleConfig, seed: int) -> tuple[SceneDef, SceneAnnotation, np.ndarray]:
    """Generate geometry plus its rendered annotation; retries on bad layouts.

    Returns the scene (in first-frame coordinates), the float64 annotation,
    and the per-pixel primitive-id map (T, H, W).
    """
    H, W = config.image_h, config.image_w
    intr = config.intrinsics()
    for attempt in range(12):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        prims = _sample_primitives(rng, config)
        poses_world = _camera_path(rng, config)
        if not _camera_clear(poses_world, prims):
            continue
        depth = np.empty((config.frame_count, H, W))
        pids = np.empty((config.frame_count, H, W), dtype=np.int64)
        pts_world = np.empty((config.frame_count, H, W, 3))
        ok = True
        for t, pose in enumerate(poses_world):
            scene_tmp = SceneDef(prims, poses_world, intr, H, W)
            points, dist, pid = render_frame(scene_tmp, t)
            hit = np.isfinite(dist)
            if hit.sum() < 8:
                ok = False
                break
            depth[t] = dist.reshape(H, W)
            pids[t] = pid.reshape(H, W)
            pts_world[t] = points.reshape(H, W, 3)
        if not ok:
            continue
        mask = np.isfinite(depth)
        if mask.mean() < 0.05:
            continue
        flat_pts, pose_mats = _rebase_to_first_frame(pts_world.reshape(-1, 3), poses_world)
        points_first = np.where(mask[..., None], flat_pts.reshape(config.frame_count, H, W, 3), 0.0)
        ann = SceneAnnotation(
            points=points_first,
            depth=np.where(mask, depth, 0.0),
            conf=mask.astype(np.float64),
            mask=mask,
            poses=pose_mats,
            intrinsics=np.tile(intr, (config.frame_count, 1)),
        )
        rebased_poses = [PoseSE3.from_matrix(g) for g in pose_mats]
        # primitives live in generic world coordinates; move them to frame-0 coords
        g0 = poses_world[0]
        moved = [_transform_primitive(p, g0) for p in prims]
        scene = SceneDef(moved, rebased_poses, intr, H, W)
        return scene, ann, pids
    raise OracleError(f"could not generate a valid {config.kind} scene from seed {seed}")


def _transform_primitive(prim, g: PoseSE3):
    if isinstance(prim, Sphere):
        return Sphere(g.R @ prim.center + g.t, prim.radius)
    if isinstance(prim, Box):
        return Box(g.R @ prim.center + g.t, prim.half, prim.rot @ g.R.T)
    if isinstance(prim, Rect):
        return Rect(g.R @ prim.center + g.t, g.R @ prim.axis_u, g.R @ prim.axis_v, prim.half_u, prim.half_v)
    raise TypeError(f"unknown primitive {type(prim)!r}")


def generate_scene(config: OracleConfig, seed: int | None = None) -> SceneAnnotation:
    """Public scene generator; the annotation passes the geometric cross-checks."""
    _, ann, _ = build_scene(config, config.seed if seed is None else seed)
    return ann


# ---------------------------------------------------------------------------
# Feature synthesis


@dataclass
class FeatureEncoder:
    """Dataset-level fixed encoding of (3D point, appearance code) to C channels."""

    w_lin: np.ndarray  # (8, 3)
    b_lin: np.ndarray  # (8,)
    w_sin: np.ndarray  # (12, 3)
    proj: np.ndarray  # (C, 40)
    bg_code: np.ndarray  # (8,)

    @classmethod
    def create(cls, channels: int, dataset_seed: int) -> "FeatureEncoder":
        rng = np.random.default_rng(np.random.SeedSequence([dataset_seed, 0xE0C]))
        return cls(
            w_lin=0.5 * rng.standard_normal((8, 3)),
            b_lin=0.5 * rng.standard_normal(8),
            w_sin=1.5 * rng.standard_normal((12, 3)),
            proj=rng.standard_normal((channels, 40)) / math.sqrt(40),
            bg_code=rng.standard_normal(8),
        )

    def encode(self, points: np.ndarray, codes: np.ndarray) -> np.ndarray:
        """points (N, 3) and per-point appearance codes (N, 8) to features (N, C)."""
        lin = points @ self.w_lin.T + self.b_lin
        phase = points @ self.w_sin.T
        raw = np.concatenate([lin, np.sin(phase), np.cos(phase), codes], axis=-1)
        return raw @ self.proj.T


def _cell_centers_uv(config: OracleConfig) -> np.ndarray:
    sh = config.image_h // config.grid_h
    sw = config.image_w // config.grid_w
    vs = np.arange(config.grid_h) * sh + (sh - 1) / 2
    us = np.arange(config.grid_w) * sw + (sw - 1) / 2
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu.ravel(), vv.ravel()], axis=-1)


def clean_cell_features(
    scene: SceneDef,
    ann: SceneAnnotation,
    pids: np.ndarray,
    config: OracleConfig,
    encoder: FeatureEncoder,
    app_codes: np.ndarray,
) -> np.ndarray:
    """Uncorrupted features (T, C, grid_h, grid_w), one vector per feature cell.

    Each cell encodes the GT 3D point its center ray hits. A cell whose center
    ray misses but that contains valid pixels falls back to the nearest valid
    pixel in the cell; fully empty cells encode a far point on the center ray
    with the background appearance code.
    """
    T = config.frame_count
    gh, gw = config.grid_h, config.grid_w
    sh = config.image_h // gh
    sw = config.image_w // gw
    uv = _cell_centers_uv(config)
    feats = np.empty((T, config.channels, gh, gw))
    for t in range(T):
        points, dist, pid = render_frame(scene, t, uv)
        hit = np.isfinite(dist)
        pts = points.copy()
        codes = np.empty((gh * gw, 8))
        codes[:] = encoder.bg_code
        for cell in range(gh * gw):
            ci, cj = divmod(cell, gw)
            if hit[cell]:
                codes[cell] = app_codes[pid[cell]]
                continue
            rows = slice(ci * sh, (ci + 1) * sh)
            cols = slice(cj * sw, (cj + 1) * sw)
            sub_mask = ann.mask[t, rows, cols]
            if sub_mask.any():
                # nearest valid pixel to the cell center, row-major tie break
                pix = np.argwhere(sub_mask)
                centers = np.array([(sh - 1) / 2, (sw - 1) / 2])
                d2 = ((pix - centers) ** 2).sum(1)
                pi, pj = pix[int(np.argmin(d2))]
                pts[cell] = ann.points[t, ci * sh + pi, cj * sw + pj]
                codes[cell] = app_codes[pids[t, ci * sh + pi, cj * sw + pj]]
            else:
                origin, dirs = pixel_rays(scene.intrinsics, scene.poses[t], uv[cell : cell + 1])
                ray = dirs[0] / np.linalg.norm(dirs[0])
                pts[cell] = origin + 10.0 * ray
        feats[t] = encoder.encode(pts, codes).T.reshape(config.channels, gh, gw)
    return feats


def corrupt_features(clean: np.ndarray, dial: Dial, seed_seq: np.random.SeedSequence) -> np.ndarray:
    """Apply the awareness dial: frame-private blend, white noise, channel dropout."""
    T, C = clean.shape[0], clean.shape[1]
    blend_rng, white_rng, drop_rng = (
        np.random.default_rng(s) for s in seed_seq.spawn(3)
    )
    rms = float(np.sqrt((clean ** 2).mean()))
    out = clean.copy()
    if dial.rho > 0:
        private = blend_rng.standard_normal(clean.shape) * rms
        out = (1.0 - dial.rho) * out + dial.rho * private
    if dial.sigma > 0:
        out = out + dial.sigma * rms * white_rng.standard_normal(clean.shape)
    if dial.dropout > 0:
        k = int(round(dial.dropout * C))
        for t in range(T):
            if k > 0:
                dead = drop_rng.choice(C, size=k, replace=False)
                out[t, dead] = 0.0
    return out


def synthesize_features(
    scene: SceneDef,
    ann: SceneAnnotation,
    pids: np.ndarray,
    config: OracleConfig,
    dial: Dial,
    encoder: FeatureEncoder,
    scene_seed: int,
    dial_index: int = 0,
) -> FeatureClip:
    """Render clean cell features, corrupt them per the dial, and chunk them."""
    rng_app = np.random.default_rng(np.random.SeedSequence([scene_seed, 2]))
    app_codes = rng_app.standard_normal((len(scene.primitives), 8))
    clean = clean_cell_features(scene, ann, pids, config, encoder, app_codes)
    corrupted = corrupt_features(clean, dial, np.random.SeedSequence([scene_seed, 1, dial_index]))
    index_map, chunk_members = build_index_map(config.frame_count, config.chunk_len, config.stride)
    chunks = [corrupted[np.asarray(members)].astype(np.float32) for members in chunk_members]
    meta = {"chunk_len": config.chunk_len, "stride": config.stride}
    if dial.layer is not None:
        meta["layer"] = dial.layer
    if dial.timestep is not None:
        meta["timestep"] = dial.timestep
    return FeatureClip(
        backbone_id=dial.backbone,
        channels=config.channels,
        grid_h=config.grid_h,
        grid_w=config.grid_w,
        chunks=chunks,
        index_map=index_map,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Dataset assembly


def split_indices(n_scenes: int, train_ratio: float = 0.9) -> tuple[list[int], list[int]]:
    """Deterministic split by scene index: every k-th scene is test, k = 1/(1-ratio)."""
    if not (0 < train_ratio < 1):
        raise ValueError("train ratio must be in (0, 1)")
    k = int(round(1.0 / (1.0 - train_ratio)))
    test = [i for i in range(n_scenes) if i % k == k - 1]
    train = [i for i in range(n_scenes) if i % k != k - 1]
    if not test or not train:
        raise ValueError(f"split ratio {train_ratio} leaves an empty side for {n_scenes} scenes")
    return train, test


def build_oracle_dataset(
    n_scenes: int,
    config: OracleConfig,
    root: str | Path,
    dials: list[Dial] | None = None,
    train_ratio: float = 0.9,
) -> tuple[Path, Path]:
    """Write annotations, feature clips, and train/test manifests under root.

    All dial variants share scene geometry so datasets differing only in
    corruption level are directly comparable. Returns the manifest paths.
    """
    root = Path(root)
    if dials is None:
        dials = [Dial("oracle", config.sigma, config.rho, config.dropout)]
    encoder = FeatureEncoder.create(config.channels, config.seed)
    entries: list[ManifestEntry] = []
    for idx in range(n_scenes):
        scene_seed_seq = np.random.SeedSequence([config.seed, idx])
        scene_seed = int(scene_seed_seq.generate_state(1)[0])
        scene, ann, pids = build_scene(config, scene_seed)
        geometry.validate_annotation(ann, tol=1e-6)
        video_id = f"scene_{idx:04d}"
        ann_rel = f"scenes/{video_id}/ann"
        write_annotation(ann, root / ann_rel)
        features = {}
        for d_idx, dial in enumerate(dials):
            clip = synthesize_features(scene, ann, pids, config, dial, encoder, scene_seed, d_idx)
            clip_rel = f"scenes/{video_id}/{dial.backbone}"
            write_feature_clip(clip, root / clip_rel)
            features[dial.backbone] = clip_rel
        entries.append(ManifestEntry(video_id, ann_rel, config.frame_count, features))

    train_idx, test_idx = split_indices(n_scenes, train_ratio)
    train_path = root / "train.txt"
    test_path = root / "test.txt"
    save_manifest(Manifest("oracle", "train", [entries[i] for i in train_idx]), train_path)
    save_manifest(Manifest("oracle", "test", [entries[i] for i in test_idx]), test_path)
    return train_path, test_path
