"""Shallow alternating-attention probe with dense point/depth heads and a camera head.

The probe reads frozen per-frame feature grids for S frames of one video and
predicts, in the first frame's camera coordinates: a point map and a depth map
per frame, plus the pose of every non-reference frame as a unit quaternion and
translation. Only this module defines the compute graph; the trainer owns
optimization and the oracle owns data.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensorstore import read_tensor, write_tensor


@dataclass
class ProbeConfig:
    width: int = 1024
    blocks: int = 4
    heads: int = 8
    channels: int = 32
    grid_h: int = 8
    grid_w: int = 8
    frames: int = 4
    reference_indicator: bool = False
    out_h: int = 16
    out_w: int = 16
    mlp_ratio: int = 4
    fusion_width: int = 128
    rotation_param: str = "quat"

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.frames < 2:
            raise ValueError("need at least 2 frames per sample")
        if self.rotation_param != "quat":
            raise ValueError(f"unsupported rotation parameterization {self.rotation_param!r}")
        for out, grid, axis in ((self.out_h, self.grid_h, "h"), (self.out_w, self.grid_w, "w")):
            ratio = out / grid
            if out % grid != 0 or 2 ** int(round(math.log2(ratio))) != int(ratio):
                raise ValueError(f"out_{axis}={out} must be grid_{axis}={grid} times a power of 2")

    @property
    def upsample_stages(self) -> int:
        return int(round(math.log2(self.out_h / self.grid_h)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        return cls(**d)


def config_hash(config_dict: dict) -> str:
    """12-hex digest of the canonical JSON form; names run directories and checkpoints."""
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass
class ProbeOutputs:
    points: torch.Tensor  # (S, H_v, W_v, 3), first-frame coordinates
    depth: torch.Tensor  # (S, H_v, W_v), strictly positive
    cameras: torch.Tensor  # (S-1, 7): unit quaternion (w >= 0) then translation


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(y)


class FeedForward(nn.Module):
    def __init__(self, width: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(width, ratio * width)
        self.fc2 = nn.Linear(ratio * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class AlternatingBlock(nn.Module):
    """Pre-norm residual sublayers: frame attention, FFN, global attention, FFN.

    Frame attention treats the S frames as a batch so tokens only mix within
    a frame; global attention flattens all S*(1+P) tokens into one sequence.
    """

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm_frame = nn.LayerNorm(width)
        self.attn_frame = SelfAttention(width, heads)
        self.norm_ffn1 = nn.LayerNorm(width)
        self.ffn1 = FeedForward(width, mlp_ratio)
        self.norm_global = nn.LayerNorm(width)
        self.attn_global = SelfAttention(width, heads)
        self.norm_ffn2 = nn.LayerNorm(width)
        self.ffn2 = FeedForward(width, mlp_ratio)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        S, N, D = tokens.shape
        t = tokens + self.attn_frame(self.norm_frame(tokens))
        t = t + self.ffn1(self.norm_ffn1(t))
        flat = t.reshape(1, S * N, D)
        flat = flat + self.attn_global(self.norm_global(flat))
        t = flat.reshape(S, N, D)
        t = t + self.ffn2(self.norm_ffn2(t))
        return t


class DenseHead(nn.Module):
    """Fuse spatial tokens from two block depths into a dense map.

    1x1 projections bring both taps to the fusion width, a 3x3 conv merges
    them, then each upsampling stage doubles resolution with bilinear
    interpolation plus a 3x3 conv, ending in a two-conv output stem.
    """

    def __init__(self, width: int, fusion: int, stages: int, out_channels: int):
        super().__init__()
        self.proj_early = nn.Conv2d(width, fusion, 1)
        self.proj_late = nn.Conv2d(width, fusion, 1)
        self.fuse = nn.Conv2d(fusion, fusion, 3, padding=1)
        self.up = nn.ModuleList(nn.Conv2d(fusion, fusion, 3, padding=1) for _ in range(stages))
        self.out1 = nn.Conv2d(fusion, fusion // 2, 3, padding=1)
        self.out2 = nn.Conv2d(fusion // 2, out_channels, 1)

    def forward(self, early: torch.Tensor, late: torch.Tensor) -> torch.Tensor:
        y = self.proj_early(early) + self.proj_late(late)
        y = F.gelu(self.fuse(y))
        for conv in self.up:
            y = F.interpolate(y, scale_factor=2.0, mode="bilinear", align_corners=False)
            y = F.gelu(conv(y))
        return self.out2(F.gelu(self.out1(y)))


class Probe(nn.Module):
    def __init__(self, config: ProbeConfig):
        super().__init__()
        self.cfg = config
        d = config.width
        sites = config.grid_h * config.grid_w
        self.input_proj = nn.Linear(config.channels, d)
        self.pos_embed = nn.Parameter(torch.zeros(sites, d))
        self.frame_embed = nn.Parameter(torch.zeros(config.frames, d))
        self.camera_token = nn.Parameter(torch.zeros(d))
        self.reference_embed = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(
            AlternatingBlock(d, config.heads, config.mlp_ratio) for _ in range(config.blocks)
        )
        self.norm_final = nn.LayerNorm(d)
        self.camera_head = nn.Linear(d, 7)
        self.point_head = DenseHead(d, config.fusion_width, config.upsample_stages, 3)
        self.depth_head = DenseHead(d, config.fusion_width, config.upsample_stages, 1)
        # dense heads tap the trunk midway and at the end
        self.tap_early = (config.blocks + 1) // 2

    def tokenize(self, features: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        S, C, H, W = features.shape
        if C != cfg.channels:
            raise ValueError(f"feature channel mismatch: expected {cfg.channels}, got {C}")
        if S != cfg.frames or (H, W) != (cfg.grid_h, cfg.grid_w):
            raise ValueError(
                f"feature grid mismatch: expected ({cfg.frames}, *, {cfg.grid_h}, {cfg.grid_w}),"
                f" got {tuple(features.shape)}"
            )
        x = self.input_proj(features.flatten(2).transpose(1, 2))  # (S, P, d)
        x = x + self.pos_embed.unsqueeze(0) + self.frame_embed[:, None, :]
        cam = self.camera_token.unsqueeze(0) + self.frame_embed  # (S, d)
        tokens = torch.cat([cam.unsqueeze(1), x], dim=1)  # (S, 1+P, d)
        if cfg.reference_indicator:
            ref = torch.zeros_like(tokens)
            ref[0] = self.reference_embed
            tokens = tokens + ref
        return tokens

    def _to_grid(self, tokens: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        return tokens[:, 1:, :].transpose(1, 2).reshape(-1, cfg.width, cfg.grid_h, cfg.grid_w)

    def forward(self, features: torch.Tensor) -> ProbeOutputs:
        tokens = self.tokenize(features)
        tap_early = tokens
        t = tokens
        for i, block in enumerate(self.blocks, start=1):
            t = block(t)
            if i == self.tap_early:
                tap_early = t
        early_grid = self._to_grid(tap_early)
        late_grid = self._to_grid(t)
        points = self.point_head(early_grid, late_grid).permute(0, 2, 3, 1)
        depth = F.softplus(self.depth_head(early_grid, late_grid)).squeeze(1)
        cam_tokens = self.norm_final(t)[:, 0, :]
        raw = self.camera_head(cam_tokens[1:])  # frame 0 is the reference, identity by convention
        quat = raw[:, :4] / raw[:, :4].norm(dim=-1, keepdim=True).clamp_min(1e-12)
        sign = torch.where(quat[:, :1] < 0, -1.0, 1.0).to(quat.dtype)
        cameras = torch.cat([quat * sign, raw[:, 4:]], dim=-1)
        return ProbeOutputs(points=points, depth=depth, cameras=cameras)


def init_parameters(config: ProbeConfig, seed: int) -> Probe:
    """Build a probe with deterministic (config, seed) initialization.

    Linear and conv weights are fan-in scaled uniform, biases zero, norm
    gains one, embedding tables small-normal (sigma 0.02).
    """
    probe = Probe(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in probe.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                fan_in = module.weight.shape[1]
                if isinstance(module, nn.Conv2d):
                    fan_in *= module.kernel_size[0] * module.kernel_size[1]
                bound = 1.0 / math.sqrt(fan_in)
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
        for table in (probe.pos_embed, probe.frame_embed, probe.camera_token, probe.reference_embed):
            table.normal_(0.0, 0.02, generator=gen)
    return probe


# ---------------------------------------------------------------------------
# Checkpoints: one tensor file per parameter plus a text manifest


class CheckpointError(Exception):
    pass


def save_checkpoint(probe: Probe, directory: str | Path, seed: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"config_hash={config_hash(probe.cfg.to_dict())}", f"seed={seed}"]
    for name, param in probe.state_dict().items():
        arr = param.detach().cpu().numpy()
        if arr.ndim == 0:
            arr = arr.reshape(1)
        write_tensor(arr, directory / f"{name}.vfpb")
        lines.append(f"param={name} shape={','.join(str(x) for x in arr.shape)}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (directory / "config.json").write_text(
        json.dumps(probe.cfg.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_checkpoint(directory: str | Path, config: ProbeConfig | None = None) -> Probe:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.is_file():
        raise CheckpointError(f"missing checkpoint manifest: {manifest}")
    if config is None:
        config = ProbeConfig.from_dict(json.loads((directory / "config.json").read_text(encoding="utf-8")))
    fields = {}
    names = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.startswith("param="):
            names.append(line.split()[0].split("=", 1)[1])
        elif "=" in line:
            key, value = line.split("=", 1)
            fields[key] = value
    expected = config_hash(config.to_dict())
    if fields.get("config_hash") != expected:
        raise CheckpointError(
            f"checkpoint config hash {fields.get('config_hash')} does not match {expected}"
        )
    probe = Probe(config)
    state = {}
    for name, param in probe.state_dict().items():
        if name not in names:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        arr = read_tensor(directory / f"{name}.vfpb")
        state[name] = torch.from_numpy(arr.reshape(tuple(param.shape)))
    probe.load_state_dict(state)
    return probe
