"""Standalone clip validation: re-read every byte and check the layout invariants.

A clip that passes here is guaranteed loadable by any conforming consumer:
tensor files parse, chunk shapes agree with the declared grid, and pi maps
every raw frame 0..T-1 to an existing slot with slot 0 of each chunk reserved
for raw frame 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .protocol import CLIP_META_NAME
from .tensorfile import TensorFileError, read_tensor

_REQUIRED_FIELDS = ("backbone", "channels", "grid_h", "grid_w", "chunks")


@dataclass
class ValidationReport:
    path: str
    problems: list[str] = field(default_factory=list)
    frame_count: int = 0
    chunk_count: int = 0

    @property
    def ok(self) -> bool:
        return not self.problems

    def summary(self) -> str:
        status = "OK" if self.ok else "FAIL"
        lines = [f"{status} {self.path}: {self.frame_count} frames, {self.chunk_count} chunks"]
        lines.extend(f"  - {p}" for p in self.problems)
        return "\n".join(lines)


def validate_clip(directory: str | Path) -> ValidationReport:
    directory = Path(directory)
    report = ValidationReport(path=str(directory))
    meta_path = directory / CLIP_META_NAME
    if not meta_path.is_file():
        report.problems.append(f"missing {CLIP_META_NAME}")
        return report

    fields: dict[str, str] = {}
    pi: dict[int, tuple[int, int]] = {}
    for lineno, line in enumerate(meta_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            report.problems.append(f"meta.txt line {lineno}: not a key=value pair: {line!r}")
            continue
        if key == "pi":
            try:
                t, cid, local = (int(x) for x in value.split(":"))
            except ValueError:
                report.problems.append(f"meta.txt line {lineno}: malformed pi entry {value!r}")
                continue
            if t in pi:
                report.problems.append(f"duplicate pi entry for frame {t}")
            pi[t] = (cid, local)
        else:
            fields[key] = value

    for name in _REQUIRED_FIELDS:
        if name not in fields:
            report.problems.append(f"meta.txt missing required field {name!r}")
    if report.problems:
        return report

    try:
        channels = int(fields["channels"])
        grid_h = int(fields["grid_h"])
        grid_w = int(fields["grid_w"])
        n_chunks = int(fields["chunks"])
    except ValueError as exc:
        report.problems.append(f"meta.txt field not an integer: {exc}")
        return report
    report.chunk_count = n_chunks
    # consumers parse every auxiliary field as an integer, so enforce it here
    for key, value in fields.items():
        if key == "backbone":
            continue
        try:
            int(value)
        except ValueError:
            report.problems.append(f"meta.txt field {key!r} must be an integer, found {value!r}")

    chunks: list[np.ndarray | None] = []
    for cid in range(n_chunks):
        chunk_path = directory / f"chunk_{cid:04d}.vfpb"
        if not chunk_path.is_file():
            report.problems.append(f"missing chunk file {chunk_path.name}")
            chunks.append(None)
            continue
        try:
            arr = read_tensor(chunk_path)
        except TensorFileError as exc:
            report.problems.append(f"{chunk_path.name}: {exc}")
            chunks.append(None)
            continue
        if arr.ndim != 4 or arr.shape[1:] != (channels, grid_h, grid_w):
            report.problems.append(
                f"{chunk_path.name}: shape {arr.shape} does not match "
                f"(*, {channels}, {grid_h}, {grid_w})"
            )
            chunks.append(None)
        else:
            chunks.append(arr)

    if not pi:
        report.problems.append("no pi entries: clip maps no frames")
        return report
    report.frame_count = max(pi) + 1
    for t in range(report.frame_count):
        if t not in pi:
            report.problems.append(f"pi gap: no features recorded for raw frame {t}")
    for t, (cid, local) in sorted(pi.items()):
        if not 0 <= cid < n_chunks:
            report.problems.append(f"frame {t} maps to nonexistent chunk {cid}")
            continue
        if chunks[cid] is None:
            continue  # chunk problem already reported
        if not 0 <= local < chunks[cid].shape[0]:
            report.problems.append(
                f"frame {t} maps to slot {local} but chunk {cid} holds {chunks[cid].shape[0]} slots"
            )
        if local == 0 and t != 0:
            report.problems.append(f"slot 0 of chunk {cid} is reserved for raw frame 0, found frame {t}")
    if pi.get(0) is not None and pi[0] != (0, 0) and report.frame_count > 0:
        report.problems.append(f"raw frame 0 must map to (0, 0), found {pi[0]}")
    return report
