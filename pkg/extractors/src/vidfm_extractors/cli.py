"""Command-line feature extraction: videos in, evaluation-ready clips out.

Videos are .npy arrays of shape (T, H, W, 3); each one becomes a clip at
<out>/<video stem>/<backbone>/. A companion validator command re-reads clips
written by any producer and reports every layout violation it can find.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .backbones import DIFFUSION_BACKBONES, FEEDFORWARD_BACKBONES, extract
from .protocol import ExtractionSpec, write_clip
from .validate import validate_clip


def _load_video(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"video not found: {path}")
    frames = np.load(path)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"{path}: expected frames of shape (T, H, W, 3), got {frames.shape}")
    return frames


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidfm-extract",
        description="Extract frozen per-frame feature clips from videos with a registered backbone.",
    )
    parser.add_argument("videos", nargs="+", help=".npy video files of shape (T, H, W, 3)")
    parser.add_argument(
        "--backbone",
        required=True,
        help=f"backbone id ({', '.join(sorted(DIFFUSION_BACKBONES | FEEDFORWARD_BACKBONES))})",
    )
    parser.add_argument("--layer", type=int, required=True, help="stage to read features from")
    parser.add_argument("--timestep", type=int, help="noise timestep (diffusion backbones only)")
    parser.add_argument("--chunk", type=int, default=8, help="frames per denoising chunk")
    parser.add_argument("--stride", type=int, default=1, help="temporal stride between chunked frames")
    parser.add_argument("--out", required=True, help="output root directory")
    parser.add_argument("--checkpoint", default="random-init", help="checkpoint id seeding the weights")
    parser.add_argument("--grid-h", type=int, default=4, help="feature grid rows")
    parser.add_argument("--grid-w", type=int, default=4, help="feature grid columns")
    parser.add_argument("--channels", type=int, default=32, help="feature channels")
    parser.add_argument(
        "--conditioning",
        choices=["empty-text", "first-frame"],
        default="empty-text",
        help="conditioning fed to diffusion backbones",
    )
    parser.add_argument("--noise-seed", type=int, default=0, help="seed for the shared noise draw")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ExtractionSpec(
            backbone=args.backbone,
            checkpoint=args.checkpoint,
            layer=args.layer,
            chunk_len=args.chunk,
            stride=args.stride,
            grid_h=args.grid_h,
            grid_w=args.grid_w,
            channels=args.channels,
            timestep=args.timestep,
            conditioning=args.conditioning,
            noise_seed=args.noise_seed,
        )
        for video in args.videos:
            path = Path(video)
            frames = _load_video(path)
            bundle = extract(frames, spec)
            clip_dir = Path(args.out) / path.stem / spec.backbone
            write_clip(bundle, clip_dir)
            print(f"{clip_dir} ({frames.shape[0]} frames, {len(bundle.chunks)} chunks)")
    except Exception as exc:  # surface a clean one-line failure, nonzero status
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def validate_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vidfm-validate",
        description="Check extracted feature clips against the interchange layout.",
    )
    parser.add_argument("clips", nargs="+", help="clip directories to validate")
    args = parser.parse_args(argv)
    failures = 0
    for clip in args.clips:
        report = validate_clip(clip)
        print(report.summary())
        failures += 0 if report.ok else 1
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
