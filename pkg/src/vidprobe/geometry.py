"""Rigid and similarity transform math: Umeyama alignment, pose error angles,
scene normalization, and pinhole unprojection/reprojection.

Conventions fixed here and used everywhere else:
  - poses are world-to-camera, world = the first-frame camera;
  - quaternions are [w, x, y, z] with w >= 0;
  - pixel (u, v) = (column, row), integer coordinates at pixel centers;
  - intrinsics are (fx, fy, cx, cy) in pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GeometryError(Exception):
    pass


class DegenerateConfigurationError(GeometryError):
    pass


class InvariantViolationError(GeometryError):
    pass


class EmptySceneError(GeometryError):
    pass


_ROT_TOL = 1e-6


def _check_rotation(R: np.ndarray, name: str = "R") -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvariantViolationError(f"{name} must be 3x3, got {R.shape}")
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    det = np.linalg.det(R)
    if err > _ROT_TOL or abs(det - 1.0) > _ROT_TOL:
        raise InvariantViolationError(f"{name} is not a rotation: orthonormality {err:.2e}, det {det:.8f}")
    return R


@dataclass
class PoseSE3:
    """World-to-camera rigid transform x_cam = R x_world + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, g: np.ndarray) -> "PoseSE3":
        g = np.asarray(g, dtype=np.float64)
        return cls(g[:3, :3], g[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        g = np.eye(4)
        g[:3, :3] = self.R
        g[:3, 3] = self.t
        return g

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Return self @ other (apply other first)."""
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t)

    def validate(self) -> None:
        _check_rotation(self.R, "pose rotation")
        if not np.all(np.isfinite(self.t)):
            raise InvariantViolationError("pose translation is not finite")


@dataclass
class Similarity:
    """x -> s * R x + t with s > 0."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (math.isfinite(self.s) and self.s > 0):
            raise InvariantViolationError(f"similarity scale must be finite and positive, got {self.s}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.s * (points @ self.R.T) + self.t


@dataclass
class PoseError:
    e_rot: float  # degrees in [0, 180]
    e_trans: float  # degrees in [0, 180]
    excluded: bool = False

    def max_error(self) -> float:
        return max(self.e_rot, self.e_trans)


# ---------------------------------------------------------------------------
# Quaternions


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion [w, x, y, z] to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64).reshape(4)
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n < 1e-12:
        raise InvariantViolationError("zero quaternion")
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion [w, x, y, z] with w >= 0.

    Branches on the largest diagonal combination so the division is always
    well conditioned, including near 180 degree rotations.
    """
    R = _check_rotation(R)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def rotation_from_axis_angle(axis: np.ndarray, radians: float) -> np.ndarray:
    """Rodrigues formula; axis need not be unit length."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise InvariantViolationError("rotation axis must be nonzero")
    x, y, z = axis / n
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(radians) * K + (1 - math.cos(radians)) * (K @ K)


def encode_pose(pose: PoseSE3) -> np.ndarray:
    """Pose to 7-vector [qw, qx, qy, qz, tx, ty, tz], qw >= 0."""
    return np.concatenate([matrix_to_quat(pose.R), pose.t])


def decode_pose(enc: np.ndarray) -> PoseSE3:
    enc = np.asarray(enc, dtype=np.float64).reshape(7)
    return PoseSE3(quat_to_matrix(enc[:4]), enc[4:])


# ---------------------------------------------------------------------------
# Alignment and error angles


def umeyama_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Similarity:
    """Least-squares similarity minimizing sum ||s R src_i + t - dst_i||^2.

    SVD of the cross-covariance with the determinant-sign correction; scale
    from the variance ratio. with_scale=False pins s=1.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DegenerateConfigurationError(f"need matching Nx3 clouds, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 correspondences, got {n}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise DegenerateConfigurationError("non-finite points")
    # exactly-rounded sums keep the result bit-identical under any common
    # permutation of the correspondences
    mu_src = np.array([math.fsum(src[:, k]) for k in range(3)]) / n
    mu_dst = np.array([math.fsum(dst[:, k]) for k in range(3)]) / n
    xs = src - mu_src
    xd = dst - mu_dst
    var_src = math.fsum(math.fsum(xs[:, k] ** 2) for k in range(3)) / n
    if var_src < 1e-18:
        raise DegenerateConfigurationError("source points are all coincident")
    cov = np.array([[math.fsum(xd[:, a] * xs[:, b]) for b in range(3)] for a in range(3)]) / n
    U, D, Vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        sign[2] = -1.0
    R = U @ np.diag(sign) @ Vt
    s = float((D * sign).sum()) / var_src if with_scale else 1.0
    t = mu_dst - s * R @ mu_src
    return Similarity(s, R, t)


def so3_geodesic_deg(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    R1 = _check_rotation(R1, "R1")
    R2 = _check_rotation(R2, "R2")
    cos_arg = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos_arg))))


def translation_angle_deg(t1: np.ndarray, t2: np.ndarray, eps: float = 1e-5) -> tuple[float, bool]:
    """Angle between translation directions; t2 is the ground-truth baseline.

    ||t2|| < eps marks the pair excluded (undefined direction); if only the
    prediction is degenerate the error is maximal (180).
    """
    t1 = np.asarray(t1, dtype=np.float64).reshape(3)
    t2 = np.asarray(t2, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2))):
        raise InvariantViolationError("non-finite translation")
    n1 = float(np.linalg.norm(t1))
    n2 = float(np.linalg.norm(t2))
    if n2 < eps:
        return 0.0, True
    if n1 < eps:
        return 180.0, False
    cos_arg = float(np.dot(t1, t2)) / (n1 * n2)
    return math.degrees(math.acos(min(1.0, max(-1.0, cos_arg)))), False


def relative_pose(g_i: PoseSE3, g_j: PoseSE3) -> PoseSE3:
    """Pose of frame j expressed in the camera frame of i: g_ij = g_j o g_i^-1."""
    return g_j.compose(g_i.inverse())


# ---------------------------------------------------------------------------
# Scene normalization and pinhole transfer


def normalize_scene(ann) -> tuple[object, float]:
    """Divide point maps, depths, and pose translations by the mean valid point norm.

    Returns a new annotation plus the scale; idempotent up to round-off.
    """
    from .tensorstore import SceneAnnotation

    mask = np.asarray(ann.mask, dtype=bool)
    if not mask.any():
        raise EmptySceneError("no valid pixels to normalize against")
    pts = np.asarray(ann.points, dtype=np.float64)
    s_norm = float(np.linalg.norm(pts[mask], axis=-1).mean())
    if s_norm <= 0:
        raise EmptySceneError("degenerate scene: all valid points at the origin")
    poses = np.array(ann.poses, dtype=np.float64, copy=True)
    poses[:, :3, 3] /= s_norm
    out = SceneAnnotation(
        points=(pts / s_norm).astype(ann.points.dtype),
        depth=(np.asarray(ann.depth, dtype=np.float64) / s_norm).astype(ann.depth.dtype),
        conf=ann.conf.copy(),
        mask=mask.copy(),
        poses=poses.astype(ann.poses.dtype),
        intrinsics=ann.intrinsics.copy(),
    )
    return out, s_norm


def unproject_depth(depth: np.ndarray, intrinsics: np.ndarray, pose: PoseSE3) -> np.ndarray:
    """Lift a depth map to world (first-frame) coordinates, one point per pixel.

    Depth is z-depth along the camera axis; pixels with non-positive depth
    still get a point (callers mask them out).
    """
    depth = np.asarray(depth, dtype=np.float64)
    fx, fy, cx, cy = np.asarray(intrinsics, dtype=np.float64).reshape(4)
    H, W = depth.shape
    u = np.arange(W, dtype=np.float64)[None, :]
    v = np.arange(H, dtype=np.float64)[:, None]
    x = (u - cx) / fx * depth
    y = (v - cy) / fy * depth
    cam = np.stack([np.broadcast_to(x, (H, W)), np.broadcast_to(y, (H, W)), depth], axis=-1)
    inv = pose.inverse()
    return cam @ inv.R.T + inv.t


def project_points(points_world: np.ndarray, intrinsics: np.ndarray, pose: PoseSE3) -> tuple[np.ndarray, np.ndarray]:
    """World points to continuous (u, v) pixels and z-depths in the given camera."""
    pts = np.asarray(points_world, dtype=np.float64)
    fx, fy, cx, cy = np.asarray(intrinsics, dtype=np.float64).reshape(4)
    cam = pts @ pose.R.T + pose.t
    z = cam[..., 2]
    u = fx * cam[..., 0] / z + cx
    v = fy * cam[..., 1] / z + cy
    return np.stack([u, v], axis=-1), z


def reproject_pixel(
    pixel: np.ndarray,
    depth: float,
    intrinsics_a: np.ndarray,
    intrinsics_b: np.ndarray,
    g_ab: PoseSE3,
) -> tuple[np.ndarray, float]:
    """Transfer a pixel with known depth from view A to view B.

    g_ab maps camera-A coordinates to camera-B coordinates. Returns the
    continuous target pixel and its z-depth in B (negative means behind B).
    """
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    fxa, fya, cxa, cya = np.asarray(intrinsics_a, dtype=np.float64).reshape(4)
    cam_a = np.array([(u - cxa) / fxa * depth, (v - cya) / fya * depth, depth])
    cam_b = g_ab.R @ cam_a + g_ab.t
    fxb, fyb, cxb, cyb = np.asarray(intrinsics_b, dtype=np.float64).reshape(4)
    z = float(cam_b[2])
    pixel_b = np.array([fxb * cam_b[0] / z + cxb, fyb * cam_b[1] / z + cyb])
    return pixel_b, z


def validate_annotation(ann, tol: float = 1e-4) -> None:
    """Cross-check depth, point map, and poses against each other.

    For every frame, unprojecting the depth map through the stored pose must
    reproduce the stored point map at valid pixels.
    """
    ann.validate_basic()
    for t in range(ann.frame_count):
        pose = PoseSE3.from_matrix(ann.poses[t])
        pose.validate()
        mask = ann.mask[t]
        if not mask.any():
            continue
        lifted = unproject_depth(ann.depth[t], ann.intrinsics[t], pose)
        err = np.max(np.abs(lifted[mask] - np.asarray(ann.points[t], dtype=np.float64)[mask]))
        if err > tol:
            raise InvariantViolationError(f"frame {t}: point map disagrees with unprojected depth by {err:.3e}")
