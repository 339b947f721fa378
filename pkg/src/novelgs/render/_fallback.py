"""Pure-torch compositing used when the compiled kernel is unavailable.

Evaluates every splat at every pixel in chunks and lets autograd produce
gradients. Transmittance is accumulated in log space so long splat lists
never hit a zero product.
"""

from __future__ import annotations

import torch

PIXEL_CHUNK = 256


def composite(means: torch.Tensor, conics: torch.Tensor, opacities: torch.Tensor, colors: torch.Tensor,
              order: torch.Tensor, height: int, width: int, background: torch.Tensor,
              alpha_max: float, eps_w: float) -> tuple[torch.Tensor, torch.Tensor]:
    dtype = means.dtype
    means, conics = means[order], conics[order]
    opacities, colors = opacities[order], colors[order]
    rows, cols = torch.meshgrid(
        torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij"
    )
    pixels = torch.stack([cols.reshape(-1) + 0.5, rows.reshape(-1) + 0.5], dim=-1)
    images, alphas = [], []
    for start in range(0, pixels.shape[0], PIXEL_CHUNK):
        px = pixels[start:start + PIXEL_CHUNK]
        if means.shape[0] == 0:
            trans = torch.ones(px.shape[0], dtype=dtype)
            img = trans[:, None] * background[None, :]
        else:
            dx = px[:, None, 0] - means[None, :, 0]
            dy = px[:, None, 1] - means[None, :, 1]
            power = -0.5 * (conics[:, 0] * dx * dx + 2.0 * conics[:, 1] * dx * dy + conics[:, 2] * dy * dy)
            alpha = torch.clamp(opacities * torch.exp(power), max=alpha_max)
            if eps_w > 0:
                alpha = torch.where(alpha < eps_w, torch.zeros_like(alpha), alpha)
            log_keep = torch.log1p(-alpha)
            log_trans = torch.cumsum(log_keep, dim=1)
            before = torch.exp(log_trans - log_keep)
            img = (alpha * before) @ colors
            trans = torch.exp(log_trans[:, -1])
            img = img + trans[:, None] * background[None, :]
        images.append(img)
        alphas.append(1.0 - trans)
    return torch.cat(images).reshape(height, width, 3), torch.cat(alphas).reshape(height, width)
