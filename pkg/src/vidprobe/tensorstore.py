"""Bit-exact tensor container, feature clips, scene annotations, and dataset manifests.

Binary layout of a tensor file:

    magic   4 bytes  b"VFPB"
    version u32 LE   = 1
    dtype   u8       0 = float32 little-endian
    ndim    u8
    shape   ndim x u64 LE
    payload row-major values

Everything else in this module is plain-text (key=value lines) so datasets
diff cleanly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VFPB"
VERSION = 1
DTYPE_F32 = 0

_HEADER_FMT = "<4sIBB"  # magic, version, dtype, ndim


class TensorStoreError(Exception):
    """Base class for container format errors."""


class UnsupportedDtypeError(TensorStoreError):
    pass


class BadMagicError(TensorStoreError):
    pass


class VersionMismatchError(TensorStoreError):
    pass


class TruncatedPayloadError(TensorStoreError):
    pass


class MissingFrameError(TensorStoreError):
    pass


class ClipFormatError(TensorStoreError):
    pass


class ManifestError(TensorStoreError):
    pass


def write_tensor(values: np.ndarray, path: str | Path) -> None:
    """Write a real-valued array as a float32 tensor file."""
    arr = np.asarray(values)
    if arr.ndim == 0:
        raise UnsupportedDtypeError("tensor shape must be non-empty; got a scalar")
    if arr.dtype.kind not in "fiub":
        raise UnsupportedDtypeError(f"cannot store dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = struct.pack(_HEADER_FMT, MAGIC, VERSION, DTYPE_F32, arr.ndim)
    shape = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(shape)
        f.write(arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file written by :func:`write_tensor`, bit-for-bit."""
    with open(path, "rb") as f:
        raw = f.read()
    head_size = struct.calcsize(_HEADER_FMT)
    if len(raw) < head_size:
        raise TruncatedPayloadError(f"{path}: file shorter than the fixed header ({len(raw)} < {head_size} bytes)")
    magic, version, dtype, ndim = struct.unpack_from(_HEADER_FMT, raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{path}: unknown dtype code {dtype}")
    shape_size = 8 * ndim
    if len(raw) < head_size + shape_size:
        raise TruncatedPayloadError(f"{path}: truncated shape block at byte {len(raw)}")
    shape = struct.unpack_from(f"<{ndim}Q", raw, head_size)
    count = int(np.prod(shape)) if ndim else 0
    expected = head_size + shape_size + 4 * count
    if len(raw) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload ends at byte {len(raw)}, expected {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=head_size + shape_size, count=count)
    return data.reshape(shape).copy()


# ---------------------------------------------------------------------------
# Frame-to-feature index map


def build_index_map(
    frame_count: int, chunk_len: int, stride: int
) -> tuple[dict[int, tuple[int, int]], list[list[int]]]:
    """Split a video into fixed-stride chunks and build the frame index map.

    Frames are subsampled at ``stride`` from each starting phase and grouped
    into runs of ``chunk_len``. Raw frame 0 is prepended to every chunk at
    local index 0 so all chunks share the same reference frame. Returns the
    map raw index -> (chunk id, local index) and the per-chunk raw-index
    contents (including the prepended reference).
    """
    if frame_count < 1:
        raise ValueError("frame_count must be positive")
    if chunk_len < 1 or stride < 1:
        raise ValueError("chunk_len and stride must be positive")
    chunks: list[list[int]] = []
    index_map: dict[int, tuple[int, int]] = {}
    for phase in range(stride):
        frames = list(range(phase, frame_count, stride))
        for start in range(0, len(frames), chunk_len):
            members = frames[start : start + chunk_len]
            if not members:
                continue
            cid = len(chunks)
            chunks.append([0] + members)
            for local, t in enumerate(members, start=1):
                index_map.setdefault(t, (cid, local))
    index_map[0] = (0, 0)
    return index_map, chunks


# ---------------------------------------------------------------------------
# Feature clips


@dataclass
class FeatureClip:
    """Per-frame spatial feature maps for one video plus the frame index map.

    ``chunks[c]`` has shape (n_local, C, grid_h, grid_w); ``index_map[t]``
    gives the (chunk, local) slot holding the features of raw frame ``t``.
    """

    backbone_id: str
    channels: int
    grid_h: int
    grid_w: int
    chunks: list[np.ndarray]
    index_map: dict[int, tuple[int, int]]
    meta: dict[str, int] = field(default_factory=dict)  # layer/timestep/chunk_len/stride

    def frame_indices(self) -> list[int]:
        return sorted(self.index_map)

    def validate(self) -> None:
        for t, (cid, local) in self.index_map.items():
            if cid < 0 or cid >= len(self.chunks):
                raise ClipFormatError(f"frame {t} maps to missing chunk {cid}")
            if local < 0 or local >= self.chunks[cid].shape[0]:
                raise ClipFormatError(f"frame {t} maps to missing slot ({cid}, {local})")
            if local == 0 and t != 0:
                raise ClipFormatError(f"local index 0 is reserved for raw frame 0, found frame {t}")
        for cid, arr in enumerate(self.chunks):
            if arr.shape[1:] != (self.channels, self.grid_h, self.grid_w):
                raise ClipFormatError(
                    f"chunk {cid} has shape {arr.shape}, expected "
                    f"(*, {self.channels}, {self.grid_h}, {self.grid_w})"
                )


def feature_for_frame(clip: FeatureClip, t: int) -> np.ndarray:
    """Return the (C, grid_h, grid_w) feature map recorded for raw frame ``t``."""
    try:
        cid, local = clip.index_map[t]
    except KeyError:
        raise MissingFrameError(f"no features recorded for raw frame {t}") from None
    return clip.chunks[cid][local]


_CLIP_META = "meta.txt"


def write_feature_clip(clip: FeatureClip, directory: str | Path) -> None:
    clip.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"backbone={clip.backbone_id}",
        f"channels={clip.channels}",
        f"grid_h={clip.grid_h}",
        f"grid_w={clip.grid_w}",
        f"chunks={len(clip.chunks)}",
    ]
    for key in sorted(clip.meta):
        lines.append(f"{key}={clip.meta[key]}")
    for t in clip.frame_indices():
        cid, local = clip.index_map[t]
        lines.append(f"pi={t}:{cid}:{local}")
    (directory / _CLIP_META).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for cid, arr in enumerate(clip.chunks):
        write_tensor(arr, directory / f"chunk_{cid:04d}.vfpb")


def load_feature_clip(directory: str | Path) -> FeatureClip:
    directory = Path(directory)
    meta_path = directory / _CLIP_META
    if not meta_path.is_file():
        raise ClipFormatError(f"{directory}: missing {_CLIP_META}")
    fields: dict[str, str] = {}
    index_map: dict[int, tuple[int, int]] = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        if key == "pi":
            t, cid, local = (int(x) for x in value.split(":"))
            index_map[t] = (cid, local)
        else:
            fields[key] = value
    try:
        n_chunks = int(fields.pop("chunks"))
        clip = FeatureClip(
            backbone_id=fields.pop("backbone"),
            channels=int(fields.pop("channels")),
            grid_h=int(fields.pop("grid_h")),
            grid_w=int(fields.pop("grid_w")),
            chunks=[read_tensor(directory / f"chunk_{cid:04d}.vfpb") for cid in range(n_chunks)],
            index_map=index_map,
            meta={k: int(v) for k, v in fields.items()},
        )
    except KeyError as exc:
        raise ClipFormatError(f"{meta_path}: missing field {exc}") from None
    clip.validate()
    return clip


# ---------------------------------------------------------------------------
# Scene annotations


@dataclass
class SceneAnnotation:
    """Ground truth for one video, in the first-frame camera coordinate system.

    points (T,H,W,3), depth/conf (T,H,W), mask (T,H,W) bool, poses (T,4,4)
    world-to-camera with world = first-frame camera, intrinsics (T,4) as
    (fx, fy, cx, cy) in pixels.
    """

    points: np.ndarray
    depth: np.ndarray
    conf: np.ndarray
    mask: np.ndarray
    poses: np.ndarray
    intrinsics: np.ndarray

    @property
    def frame_count(self) -> int:
        return self.points.shape[0]

    @property
    def height(self) -> int:
        return self.points.shape[1]

    @property
    def width(self) -> int:
        return self.points.shape[2]

    def validate_basic(self) -> None:
        T, H, W = self.depth.shape
        if self.points.shape != (T, H, W, 3):
            raise ValueError(f"points shape {self.points.shape} does not match depth {self.depth.shape}")
        if self.conf.shape != (T, H, W) or self.mask.shape != (T, H, W):
            raise ValueError("conf/mask shapes do not match depth")
        if self.poses.shape != (T, 4, 4) or self.intrinsics.shape != (T, 4):
            raise ValueError("poses must be (T,4,4) and intrinsics (T,4)")
        if not np.allclose(self.poses[0], np.eye(4), atol=1e-5):
            raise ValueError("first-frame pose must be the identity")
        if np.any(self.conf < 0):
            raise ValueError("confidence values must be non-negative")
        if np.any(self.mask & ~(self.depth > 0)):
            raise ValueError("masked-valid pixels must have positive depth")


_ANN_FILES = ("points", "depth", "conf", "mask", "poses", "intrinsics")


def write_annotation(ann: SceneAnnotation, directory: str | Path) -> None:
    ann.validate_basic()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in _ANN_FILES:
        arr = getattr(ann, name)
        if name == "mask":
            arr = arr.astype(np.float32)
        write_tensor(arr, directory / f"{name}.vfpb")


def load_annotation(directory: str | Path) -> SceneAnnotation:
    directory = Path(directory)
    arrays = {name: read_tensor(directory / f"{name}.vfpb") for name in _ANN_FILES}
    arrays["mask"] = arrays["mask"] > 0.5
    ann = SceneAnnotation(**arrays)
    ann.validate_basic()
    return ann


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class ManifestEntry:
    video_id: str
    annotation: str  # path relative to the dataset root
    frame_count: int
    features: dict[str, str]  # backbone id -> clip directory, relative


@dataclass
class Manifest:
    dataset_id: str
    split: str
    entries: list[ManifestEntry]

    def backbones(self) -> list[str]:
        ids: set[str] = set()
        for e in self.entries:
            ids.update(e.features)
        return sorted(ids)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    seen: set[str] = set()
    for e in manifest.entries:
        if e.video_id in seen:
            raise ManifestError(f"duplicate video id {e.video_id!r} in split {manifest.split!r}")
        seen.add(e.video_id)
    lines = [f"dataset={manifest.dataset_id} split={manifest.split}"]
    for e in manifest.entries:
        parts = [f"video={e.video_id}", f"frames={e.frame_count}", f"annotation={e.annotation}"]
        for backbone in sorted(e.features):
            parts.append(f"feature.{backbone}={e.features[backbone]}")
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path, verify: bool = True) -> Manifest:
    """Parse a manifest file; with ``verify`` also check referenced paths exist.

    Entry paths are interpreted relative to the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")

    def parse_pairs(line: str) -> dict[str, str]:
        pairs = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise ManifestError(f"{path}: malformed token {token!r}")
            pairs[key] = value
        return pairs

    head = parse_pairs(lines[0])
    entries = []
    seen: set[str] = set()
    for line in lines[1:]:
        pairs = parse_pairs(line)
        features = {
            key.split(".", 1)[1]: value for key, value in pairs.items() if key.startswith("feature.")
        }
        entry = ManifestEntry(
            video_id=pairs["video"],
            annotation=pairs["annotation"],
            frame_count=int(pairs["frames"]),
            features=features,
        )
        if entry.video_id in seen:
            raise ManifestError(f"{path}: duplicate video id {entry.video_id!r}")
        seen.add(entry.video_id)
        if verify:
            if not (root / entry.annotation).exists():
                raise ManifestError(f"{path}: missing annotation path {entry.annotation}")
            for backbone, rel in entry.features.items():
                if not (root / rel).exists():
                    raise ManifestError(f"{path}: missing {backbone} clip path {rel}")
        entries.append(entry)
    return Manifest(dataset_id=head.get("dataset", ""), split=head.get("split", ""), entries=entries)
