"""Extraction protocol shared by every backbone adapter.

All chunking logic lives here so adapters stay thin: a chunk plan says which
raw frames each chunk processes (raw frame 0 is prepended to every chunk), and
pi maps every raw frame index to its (chunk, local) feature slot. Clip
directories hold one tensor file per chunk plus a meta.txt describing layout,
extraction settings, and pi.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorfile import write_tensor

CLIP_META_NAME = "meta.txt"


class ProtocolError(Exception):
    pass


@dataclass
class ExtractionSpec:
    """Everything needed to reproduce an extraction run."""

    backbone: str
    checkpoint: str
    layer: int
    chunk_len: int
    stride: int
    grid_h: int
    grid_w: int
    channels: int
    timestep: int | None = None  # diffusion backbones only
    conditioning: str = "empty-text"  # or "first-frame"
    noise_seed: int = 0

    def __post_init__(self):
        if self.chunk_len < 2:
            raise ValueError(f"chunk length must be at least 2, got {self.chunk_len}")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.conditioning not in ("empty-text", "first-frame"):
            raise ValueError(f"unknown conditioning mode {self.conditioning!r}")


@dataclass
class ChunkPlan:
    """Raw-frame membership per chunk, plus the frame-to-slot map pi."""

    members: list[list[int]]  # members[c][l] = raw frame at (chunk c, local l)
    pi: dict[int, tuple[int, int]]


def plan_chunks(frame_count: int, chunk_len: int, stride: int) -> ChunkPlan:
    """Phase-major subsampled chunking with raw frame 0 leading every chunk.

    Frames of stride phase p form the subsequence p, p+stride, ...; each run
    of chunk_len consecutive subsequence entries becomes one chunk, prefixed
    with raw frame 0 so every chunk carries the reference view.
    """
    if frame_count < 1:
        raise ValueError("need at least one frame")
    members: list[list[int]] = []
    pi: dict[int, tuple[int, int]] = {}
    for phase in range(stride):
        run = list(range(phase, frame_count, stride))
        for start in range(0, len(run), chunk_len):
            chunk = run[start : start + chunk_len]
            cid = len(members)
            members.append([0] + chunk)
            for local, t in enumerate(chunk, start=1):
                pi.setdefault(t, (cid, local))
    pi[0] = (0, 0)
    return ChunkPlan(members, pi)


def identity_plan(frame_count: int) -> ChunkPlan:
    """Per-frame backbones: one chunk holding every frame in order, pi(t) = (0, t)."""
    if frame_count < 1:
        raise ValueError("need at least one frame")
    return ChunkPlan([list(range(frame_count))], {t: (0, t) for t in range(frame_count)})


@dataclass
class ClipBundle:
    """An extracted clip ready to be written: chunk tensors plus metadata."""

    backbone: str
    channels: int
    grid_h: int
    grid_w: int
    chunks: list[np.ndarray]  # each (n_local, C, grid_h, grid_w) float32
    pi: dict[int, tuple[int, int]]
    meta: dict[str, int] = field(default_factory=dict)

    def frame_count(self) -> int:
        return len(self.pi)


def write_clip(bundle: ClipBundle, directory: str | Path) -> Path:
    """Write chunk tensors and meta.txt; the meta write is atomic via rename."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for cid, chunk in enumerate(bundle.chunks):
        if chunk.shape[1:] != (bundle.channels, bundle.grid_h, bundle.grid_w):
            raise ProtocolError(
                f"chunk {cid} has shape {chunk.shape}, expected "
                f"(*, {bundle.channels}, {bundle.grid_h}, {bundle.grid_w})"
            )
        write_tensor(chunk.astype(np.float32), directory / f"chunk_{cid:04d}.vfpb")
    lines = [
        f"backbone={bundle.backbone}",
        f"channels={bundle.channels}",
        f"grid_h={bundle.grid_h}",
        f"grid_w={bundle.grid_w}",
        f"chunks={len(bundle.chunks)}",
    ]
    for key in sorted(bundle.meta):
        lines.append(f"{key}={bundle.meta[key]}")
    for t in sorted(bundle.pi):
        cid, local = bundle.pi[t]
        lines.append(f"pi={t}:{cid}:{local}")
    meta_path = directory / CLIP_META_NAME
    tmp = meta_path.with_name(meta_path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, meta_path)
    return directory
