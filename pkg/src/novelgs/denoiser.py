"""Transformer denoiser: posed clean + noisy views -> per-view Gaussian attribute maps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from novelgs.gaussians import ATTRIBUTE_CHANNELS, HEAD_CHANNELS, GaussianSet, activate_attributes, merge_views
from novelgs.geometry import Camera, ray_map
from novelgs.tokenizer import PatchTokenizer

CHECKPOINT_FORMAT = "novelgs-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class DenoiserConfig:
    width: int = 64
    layer_count: int = 4
    head_count: int = 4
    patch_size: int = 8
    register_token_count: int = 0
    time_frequency_dim: int = 256
    time_embedding_dim: int = 64
    feature_dim: int = 32
    mlp_ratio: float = 4.0
    base_resolution: int = 32
    step_count: int = 1000
    # constant output biases (pre-activation)
    depth_bias: float = 0.0
    scale_bias: float = 0.0
    opacity_bias: float = -2.1972245773362196  # sigmoid -> 0.1
    color_bias: float = 0.0
    zero_init_heads: bool = True

    def __post_init__(self):
        for name in ("width", "layer_count", "head_count", "patch_size", "time_frequency_dim",
                     "time_embedding_dim", "feature_dim", "step_count"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.register_token_count < 0:
            raise ValueError("register_token_count must be non-negative")
        if self.width % self.head_count:
            raise ValueError("width must be divisible by head_count")
        if self.time_frequency_dim % 2:
            raise ValueError("time_frequency_dim must be even")

    @classmethod
    def full(cls, resolution: int = 256) -> "DenoiserConfig":
        """Full-size preset: 768 wide, 24 layers, stride-8 patches."""
        return cls(width=768, layer_count=24, head_count=12, patch_size=8, time_frequency_dim=256,
                   time_embedding_dim=768, feature_dim=64, base_resolution=resolution)

    def head_biases(self) -> dict[str, list[float]]:
        return {
            "depth": [self.depth_bias],
            "rotation": [1.0, 0.0, 0.0, 0.0],
            "scale": [self.scale_bias] * 3,
            "opacity": [self.opacity_bias],
            "color": [self.color_bias] * 3,
        }

    def bias_vector(self) -> torch.Tensor:
        b = self.head_biases()
        return torch.tensor([v for name in HEAD_CHANNELS for v in b[name]])


def sinusoidal_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """``[cos(t f_i), sin(t f_i)]`` with geometrically spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, frequency_dim: int, embedding_dim: int, step_count: int):
        super().__init__()
        self.frequency_dim = frequency_dim
        self.step_count = step_count
        self.mlp = nn.Sequential(
            nn.Linear(frequency_dim, embedding_dim), nn.SiLU(), nn.Linear(embedding_dim, embedding_dim)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        if torch.any((t < 0) | (t >= self.step_count)):
            raise ValueError(f"timestep out of range [0, {self.step_count})")
        freq = sinusoidal_features(t, self.frequency_dim).to(self.mlp[0].weight.dtype)
        return self.mlp(freq)


def _modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class Attention(nn.Module):
    def __init__(self, width: int, head_count: int):
        super().__init__()
        self.head_count = head_count
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.head_count, d // self.head_count).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class DenoiserBlock(nn.Module):
    """Pre-norm attention + MLP block with adaLN-Zero timestep modulation."""

    def __init__(self, width: int, head_count: int, time_dim: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, head_count)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width))
        self.ada_ln = nn.Sequential(nn.SiLU(), nn.Linear(time_dim, 6 * width))
        nn.init.zeros_(self.ada_ln[1].weight)
        nn.init.zeros_(self.ada_ln[1].bias)

    def forward(self, x: torch.Tensor, time_emb: torch.Tensor) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada_ln(time_emb).chunk(6, dim=-1)
        x = x + gate1[:, None] * self.attn(_modulate(self.norm1(x), shift1, scale1))
        x = x + gate2[:, None] * self.mlp(_modulate(self.norm2(x), shift2, scale2))
        return x


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config
        self.tokenizer = PatchTokenizer(c.width, c.patch_size, c.base_resolution)
        self.time_embed = TimestepEmbedder(c.time_frequency_dim, c.time_embedding_dim, c.step_count)
        self.registers = nn.Parameter(torch.randn(c.register_token_count, c.width) * 0.02)
        self.blocks = nn.ModuleList(
            [DenoiserBlock(c.width, c.head_count, c.time_embedding_dim, c.mlp_ratio) for _ in range(c.layer_count)]
        )
        self.final_norm = nn.LayerNorm(c.width)
        self.upsample = nn.ConvTranspose2d(c.width, c.feature_dim, kernel_size=c.patch_size, stride=c.patch_size)
        self.heads = nn.ModuleDict({name: nn.Linear(c.feature_dim, ch) for name, ch in HEAD_CHANNELS.items()})
        biases = c.head_biases()
        for name, head in self.heads.items():
            if c.zero_init_heads:
                nn.init.zeros_(head.weight)
            else:
                nn.init.normal_(head.weight, std=1e-3)
            with torch.no_grad():
                head.bias.copy_(torch.tensor(biases[name]))

    def forward(self, images: torch.Tensor, rays: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Raw attribute maps for a batch of scenes.

        Args:
            images: ``B×V×H×W×3`` in the diffusion range [-1, 1] (clean views
                first, then noisy views).
            rays: ``B×V×H×W×6`` Plücker maps of the same views.
            t: ``B`` integer timesteps.

        Returns:
            ``B×V×H×W×12`` unconstrained attribute maps.
        """
        b, v, h, w, _ = images.shape
        p = self.config.patch_size
        tokens = self.tokenizer(images, rays)  # B, V, gh, gw, D
        gh, gw = tokens.shape[2:4]
        x = tokens.reshape(b, v * gh * gw, -1)
        n_reg = self.config.register_token_count
        if n_reg:
            x = torch.cat([self.registers.expand(b, -1, -1).to(x.dtype), x], dim=1)
        time_emb = self.time_embed(torch.as_tensor(t).reshape(-1).expand(b))
        for block in self.blocks:
            x = block(x, time_emb)
        x = self.final_norm(x[:, n_reg:])
        grid = x.reshape(b * v, gh, gw, -1).permute(0, 3, 1, 2)
        feats = F.gelu(self.upsample(grid)).permute(0, 2, 3, 1)  # B*V, H, W, F
        raw = torch.cat([self.heads[name](feats) for name in HEAD_CHANNELS], dim=-1)
        assert raw.shape[1:3] == (gh * p, gw * p)
        return raw.reshape(b, v, h, w, ATTRIBUTE_CHANNELS)


def camera_rays(cameras: Sequence[Camera], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([ray_map(c) for c in cameras])).to(dtype)


def to_model_range(images01) -> torch.Tensor:
    return torch.as_tensor(images01) * 2.0 - 1.0


def predict_attribute_maps(model: Denoiser, clean_images, noisy_images, cameras: Sequence[Camera],
                           t: int) -> list[torch.Tensor]:
    """Per-view ``H×W×12`` raw maps for one scene.

    ``clean_images`` are ``m×H×W×3`` in [0, 1]; ``noisy_images`` are
    ``n×H×W×3`` already in the diffusion range; ``cameras`` lists the clean
    cameras followed by the noisy ones, in the normalized frame.
    """
    dtype = next(model.parameters()).dtype
    clean = to_model_range(torch.as_tensor(clean_images, dtype=dtype))
    noisy = torch.as_tensor(noisy_images, dtype=dtype).reshape(-1, *clean.shape[1:])
    if clean.shape[0] < 1:
        raise ValueError("at least one clean view is required")
    images = torch.cat([clean, noisy], dim=0)
    if len(cameras) != images.shape[0]:
        raise ValueError(f"{images.shape[0]} views but {len(cameras)} cameras")
    rays = camera_rays(cameras, dtype)
    raw = model(images[None], rays[None], torch.tensor([t]))
    return list(raw[0])


def gaussians_from_maps(maps: Sequence[torch.Tensor], cameras: Sequence[Camera],
                        rays: torch.Tensor | None = None) -> GaussianSet:
    if rays is None:
        rays = camera_rays(cameras, maps[0].dtype)
    sets = [
        activate_attributes(raw, rays[i], torch.as_tensor(cam.center, dtype=raw.dtype))
        for i, (raw, cam) in enumerate(zip(maps, cameras))
    ]
    return merge_views(sets)


def predict_gaussians(model: Denoiser, clean_images, noisy_images, cameras: Sequence[Camera],
                      t: int) -> GaussianSet:
    maps = predict_attribute_maps(model, clean_images, noisy_images, cameras, t)
    return gaussians_from_maps(maps, cameras)


def save_checkpoint(path: str | Path, model: Denoiser, schedule=None, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "schedule": None if schedule is None else schedule.to_dict(),
        "params": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[Denoiser, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = Denoiser(DenoiserConfig(**payload["config"]))
    model.load_state_dict(payload["params"])
    model.eval()
    return model, payload
