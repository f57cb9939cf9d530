"""Compact 3D encoder-decoder producing dense per-voxel feature maps.

A small U-shaped network: 3x3x3 convolutions, stride-2 downsampling,
transposed-conv upsampling, skip connections, leaky rectifier, optional
per-instance channel normalization. The decoder restores the input
resolution, so the output is a D-channel feature map aligned to the
input patch voxel for voxel.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = "VSHOT-CKPT"
CHECKPOINT_VERSION = 1


class EncoderError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    levels: int = 3
    base_channels: int = 8
    feature_dim: int = 16
    leaky_slope: float = 0.01
    instance_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.feature_dim < 1:
            raise EncoderError("levels, base_channels and feature_dim must be >= 1")

    @property
    def divisor(self) -> int:
        """Patch dims must be divisible by this per axis."""
        return 2 ** (self.levels - 1)


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, slope, norm, stride=1):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm3d(out_ch, affine=True) if norm else None
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return self.act(x)


class Encoder(nn.Module):
    """Maps (B, 1, X, Y, Z) patches to (B, D, X, Y, Z) feature maps."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        ch = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        slope, norm = cfg.leaky_slope, cfg.instance_norm

        self.stem = _ConvBlock(1, ch[0], slope, norm)
        self.down = nn.ModuleList(
            _ConvBlock(ch[i - 1], ch[i], slope, norm, stride=2)
            for i in range(1, cfg.levels)
        )
        self.up = nn.ModuleList(
            nn.ConvTranspose3d(ch[i], ch[i - 1], 2, stride=2)
            for i in range(cfg.levels - 1, 0, -1)
        )
        self.fuse = nn.ModuleList(
            _ConvBlock(2 * ch[i - 1], ch[i - 1], slope, norm)
            for i in range(cfg.levels - 1, 0, -1)
        )
        self.head = nn.Conv3d(ch[0], cfg.feature_dim, 3, padding=1)
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        """Fan-in-scaled normal init, deterministic per seed; biases zero."""
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters()):
            if p.dim() > 1:  # conv kernels
                fan_in = int(np.prod(p.shape[1:]))
                std = (2.0 / fan_in) ** 0.5
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=gen) * std)
            elif "norm" in name and name.endswith("weight"):
                with torch.no_grad():
                    p.fill_(1.0)
            else:
                with torch.no_grad():
                    p.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[None, None]
        elif x.dim() == 4:
            x = x[:, None]
        d = self.cfg.divisor
        if any(s % d != 0 for s in x.shape[2:]):
            raise EncoderError(
                f"patch dims {tuple(x.shape[2:])} not divisible by {d} "
                f"(levels={self.cfg.levels})"
            )
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        y = skips.pop()
        for upconv, fuse in zip(self.up, self.fuse):
            y = upconv(y)
            y = fuse(torch.cat([y, skips.pop()], dim=1))
        return self.head(y)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_encoder(cfg: EncoderConfig) -> Encoder:
    return Encoder(cfg)


def parameter_count(cfg: EncoderConfig) -> int:
    """Closed-form parameter count for the architecture above."""
    ch = [cfg.base_channels * 2**i for i in range(cfg.levels)]
    k = 27  # 3x3x3 kernel
    n = 1 * ch[0] * k + ch[0]  # stem
    for i in range(1, cfg.levels):
        n += ch[i - 1] * ch[i] * k + ch[i]  # down
        n += ch[i] * ch[i - 1] * 8 + ch[i - 1]  # transposed conv, 2x2x2 kernel
        n += 2 * ch[i - 1] * ch[i - 1] * k + ch[i - 1]  # fuse
    n += ch[0] * cfg.feature_dim * k + cfg.feature_dim  # head
    if cfg.instance_norm:
        n += 2 * ch[0]  # stem norm
        for i in range(1, cfg.levels):
            n += 2 * ch[i] + 2 * ch[i - 1]  # down + fuse norms
    return n


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, encoder: Encoder, extra: dict | None = None) -> None:
    """Write encoder weights with a versioned config header."""
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": asdict(encoder.cfg),
        "state": {k: v.cpu() for k, v in encoder.state_dict().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path, expected: EncoderConfig | None = None) -> tuple[Encoder, dict]:
    """Load an encoder checkpoint; rejects bad magic/version or config mismatch."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = EncoderConfig(**payload["config"])
    if expected is not None and cfg != expected:
        raise CheckpointError(f"{path}: checkpoint config {cfg} does not match {expected}")
    enc = Encoder(cfg)
    enc.load_state_dict(payload["state"])
    return enc, payload["extra"]
