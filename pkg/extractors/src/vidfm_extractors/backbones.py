"""Backbone adapters producing per-frame spatial features.

No pretrained weights ship with this package; the registry holds small
deterministic stand-in networks whose weights derive from the checkpoint
reference string, so extraction runs are reproducible end to end and the
protocol (chunking, noise injection, layer taps, meta) is exercised exactly
as it would be with real models.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .protocol import ChunkPlan, ClipBundle, ExtractionSpec, identity_plan, plan_chunks

DIFFUSION_BACKBONES = {"toy-diffusion"}
FEEDFORWARD_BACKBONES = {"toy-frame"}
KNOWN_BACKBONES = DIFFUSION_BACKBONES | FEEDFORWARD_BACKBONES

_LATENT = 16
_STAGES = 4


class BackboneError(Exception):
    pass


class ShapeMismatchError(BackboneError):
    pass


def is_diffusion(backbone: str) -> bool:
    return backbone in DIFFUSION_BACKBONES


def check_spec(spec: ExtractionSpec) -> None:
    if spec.backbone not in KNOWN_BACKBONES:
        raise BackboneError(
            f"unknown backbone {spec.backbone!r}; available: {sorted(KNOWN_BACKBONES)}"
        )
    if is_diffusion(spec.backbone) and spec.timestep is None:
        raise BackboneError(f"backbone {spec.backbone!r} is a diffusion model: timestep required")
    if not is_diffusion(spec.backbone) and spec.timestep is not None:
        raise BackboneError(f"backbone {spec.backbone!r} takes no diffusion timestep")
    if not 0 <= spec.layer < _STAGES:
        raise BackboneError(f"layer {spec.layer} out of range: {spec.backbone!r} has {_STAGES} stages")


def _checkpoint_rng(checkpoint: str) -> np.random.Generator:
    digest = hashlib.sha256(checkpoint.encode("utf-8")).digest()
    return np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))


def _pool_to_grid(frames: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Average-pool (T, H, W, 3) video frames onto the feature grid."""
    T, H, W, C = frames.shape
    if H % grid_h != 0 or W % grid_w != 0:
        raise ShapeMismatchError(
            f"video {H}x{W} does not tile the {grid_h}x{grid_w} target grid"
        )
    ph, pw = H // grid_h, W // grid_w
    pooled = frames.reshape(T, grid_h, ph, grid_w, pw, C).mean(axis=(2, 4))
    return pooled  # (T, grid_h, grid_w, 3)


class ToyFrameEncoder:
    """Per-frame encoder: patch pooling followed by a fixed nonlinear projection."""

    def __init__(self, spec: ExtractionSpec):
        rng = _checkpoint_rng(spec.checkpoint)
        self.w1 = rng.standard_normal((3, _LATENT)) / np.sqrt(3)
        self.stages = [
            rng.standard_normal((_LATENT, _LATENT)) / np.sqrt(_LATENT) for _ in range(_STAGES)
        ]
        self.head = rng.standard_normal((_LATENT, spec.channels)) / np.sqrt(_LATENT)
        self.spec = spec

    def features(self, frames: np.ndarray) -> np.ndarray:
        """(T, H, W, 3) -> (T, C, grid_h, grid_w), each frame independent."""
        spec = self.spec
        x = _pool_to_grid(frames.astype(np.float64) / 255.0, spec.grid_h, spec.grid_w)
        x = np.tanh(x @ self.w1)
        for i, w in enumerate(self.stages):
            x = np.tanh(x @ w)
            if i == spec.layer:
                tap = x
        out = tap @ self.head
        return np.transpose(out, (0, 3, 1, 2)).astype(np.float32)


class ToyDiffusion:
    """Chunk denoiser: noise the pooled latents at the requested timestep, run
    one denoising pass with cross-frame coupling, and tap the requested stage."""

    def __init__(self, spec: ExtractionSpec):
        rng = _checkpoint_rng(spec.checkpoint)
        self.w_in = rng.standard_normal((3, _LATENT)) / np.sqrt(3)
        self.stage_w = [
            rng.standard_normal((_LATENT, _LATENT)) / np.sqrt(_LATENT) for _ in range(_STAGES)
        ]
        self.stage_mix = [
            rng.standard_normal((_LATENT, _LATENT)) / np.sqrt(_LATENT) for _ in range(_STAGES)
        ]
        self.cond_w = rng.standard_normal((_LATENT, _LATENT)) / np.sqrt(_LATENT)
        self.head = rng.standard_normal((_LATENT, spec.channels)) / np.sqrt(_LATENT)
        self.spec = spec

    def chunk_features(self, chunk_frames: np.ndarray, noise_rng: np.random.Generator) -> np.ndarray:
        """(n, H, W, 3) chunk -> (n, C, grid_h, grid_w) layer-tap features."""
        spec = self.spec
        x = _pool_to_grid(chunk_frames.astype(np.float64) / 255.0, spec.grid_h, spec.grid_w)
        x = x @ self.w_in
        # noise injection at timestep tau on a 0..1000 schedule
        sigma = spec.timestep / 1000.0
        x = x + sigma * noise_rng.standard_normal(x.shape)
        if spec.conditioning == "first-frame":
            x = x + (x[:1] @ self.cond_w)
        for i in range(_STAGES):
            context = x.mean(axis=0, keepdims=True)  # cross-frame coupling
            x = np.tanh(x @ self.stage_w[i] + 0.3 * context @ self.stage_mix[i])
            if i == spec.layer:
                tap = x
        out = tap @ self.head
        return np.transpose(out, (0, 3, 1, 2)).astype(np.float32)


def extract_feedforward(frames: np.ndarray, spec: ExtractionSpec) -> ClipBundle:
    """Per-frame extraction: no chunking, pi is the identity."""
    check_spec(spec)
    encoder = ToyFrameEncoder(spec)
    feats = encoder.features(frames)
    plan = identity_plan(frames.shape[0])
    return ClipBundle(
        backbone=spec.backbone,
        channels=spec.channels,
        grid_h=spec.grid_h,
        grid_w=spec.grid_w,
        chunks=[feats],
        pi=plan.pi,
        meta={"chunk_len": frames.shape[0], "stride": 1, "layer": spec.layer},
    )


def extract_diffusion(frames: np.ndarray, spec: ExtractionSpec) -> ClipBundle:
    """Chunked DIFT-style extraction with raw frame 0 prepended to every chunk."""
    check_spec(spec)
    model = ToyDiffusion(spec)
    plan = plan_chunks(frames.shape[0], spec.chunk_len, spec.stride)
    seed_root = np.random.SeedSequence([spec.noise_seed])
    chunk_seeds = seed_root.spawn(len(plan.members))
    chunks = []
    for members, seed in zip(plan.members, chunk_seeds):
        chunk_frames = frames[np.asarray(members)]
        chunks.append(model.chunk_features(chunk_frames, np.random.default_rng(seed)))
    return ClipBundle(
        backbone=spec.backbone,
        channels=spec.channels,
        grid_h=spec.grid_h,
        grid_w=spec.grid_w,
        chunks=chunks,
        pi=plan.pi,
        meta={
            "chunk_len": spec.chunk_len,
            "stride": spec.stride,
            "layer": spec.layer,
            "timestep": spec.timestep,
            "noise_seed": spec.noise_seed,
        },
    )


def extract(frames: np.ndarray, spec: ExtractionSpec) -> ClipBundle:
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (T, H, W, 3) video frames, got {frames.shape}")
    if is_diffusion(spec.backbone):
        return extract_diffusion(frames, spec)
    return extract_feedforward(frames, spec)
