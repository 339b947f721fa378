"""Differentiable Gaussian splatting.

``render`` projects with torch (so gradients reach every Gaussian field) and
composites with the compiled kernel when it is importable, otherwise with a
pure-torch fallback. ``render_reference`` is the brute-force numpy oracle.

Set ``NOVELGS_RENDER_BACKEND=torch`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np
import torch

from novelgs.gaussians import GaussianSet, quaternion_to_matrix
from novelgs.geometry import Camera
from novelgs.render import _fallback
from novelgs.render.reference import (
    ALPHA_MAX,
    COV_EPS,
    NEAR_PLANE,
    Splat2D,
    composite as composite_reference,
    project_all,
    project_gaussian,
    render_reference,
)

try:
    from novelgs.render import _raster
except ImportError:  # extension not built
    _raster = None

WEIGHT_EPS = 1e-8

__all__ = [
    "ALPHA_MAX",
    "COV_EPS",
    "NEAR_PLANE",
    "WEIGHT_EPS",
    "Splat2D",
    "available_backends",
    "composite_reference",
    "default_backend",
    "project_all",
    "project_gaussian",
    "project_splats",
    "render",
    "render_reference",
]


def available_backends() -> list[str]:
    return (["cython"] if _raster is not None else []) + ["torch"]


def default_backend() -> str:
    forced = os.environ.get("NOVELGS_RENDER_BACKEND")
    if forced:
        if forced not in available_backends():
            raise RuntimeError(f"render backend {forced!r} requested but not available")
        return forced
    return available_backends()[0]


def project_splats(gaussians: GaussianSet, camera: Camera, near: float = NEAR_PLANE,
                   cov_eps: float = COV_EPS):
    """Differentiable batch projection.

    Returns ``(index, means2d, conics, depths)`` for the Gaussians in front of
    the near plane, where ``index`` selects them from ``gaussians``.
    """
    dtype = gaussians.centers.dtype
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    center = torch.as_tensor(camera.center, dtype=dtype)
    cam_all = (gaussians.centers - center) @ rot
    index = torch.nonzero(cam_all[:, 2].detach() > near).squeeze(-1)
    cam = cam_all[index]
    x, y, z = cam.unbind(-1)
    f = camera.focal

    rq = quaternion_to_matrix(gaussians.rotations[index])
    m = rq * gaussians.scales[index][:, None, :]
    cov3d = m @ m.transpose(1, 2)
    cov_cam = rot.T @ cov3d @ rot
    zeros = torch.zeros_like(z)
    jac = torch.stack(
        [torch.stack([f / z, zeros, -f * x / (z * z)], -1), torch.stack([zeros, f / z, -f * y / (z * z)], -1)],
        dim=1,
    )
    cov2d = jac @ cov_cam @ jac.transpose(1, 2) + cov_eps * torch.eye(2, dtype=dtype)
    cxx, cxy, cyy = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = cxx * cyy - cxy * cxy
    conics = torch.stack([cyy / det, -cxy / det, cxx / det], dim=-1)
    pp = torch.as_tensor(camera.principal_point, dtype=dtype)
    means = f * torch.stack([x / z, y / z], dim=-1) + pp
    return index, means, conics, z


class _RasterizeFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, conics, opacities, colors, order, height, width, background, alpha_max, eps_w):
        args = [np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float64)
                for t in (means, conics, opacities, colors)]
        order_np = np.ascontiguousarray(order.cpu().numpy(), dtype=np.intp)
        bg = np.ascontiguousarray(background.detach().cpu().numpy(), dtype=np.float64)
        image, trans = _raster.forward(*args, order_np, height, width, bg, alpha_max, eps_w)
        ctx.saved = (args, order_np, height, width, bg, alpha_max, eps_w, image, trans)
        ctx.dtype = means.dtype
        return (torch.from_numpy(image).to(means.dtype), torch.from_numpy(1.0 - trans).to(means.dtype))

    @staticmethod
    def backward(ctx, grad_image, grad_alpha):
        args, order_np, height, width, bg, alpha_max, eps_w, image, trans = ctx.saved
        g_img = np.ascontiguousarray(grad_image.detach().cpu().numpy(), dtype=np.float64)
        g_alpha = np.ascontiguousarray(grad_alpha.detach().cpu().numpy(), dtype=np.float64)
        grads = _raster.backward(*args, order_np, height, width, bg, alpha_max, eps_w,
                                 image, trans, g_img, g_alpha)
        g_means, g_conics, g_op, g_colors = (torch.from_numpy(g).to(ctx.dtype) for g in grads)
        return g_means, g_conics, g_op, g_colors, None, None, None, None, None, None


def render(gaussians: GaussianSet, camera: Camera, background=None, eps_w: float = WEIGHT_EPS,
           backend: str | None = None, alpha_max: float = ALPHA_MAX, near: float = NEAR_PLANE,
           cov_eps: float = COV_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Render ``(image H×W×3, alpha H×W)`` differentiably.

    Contributions with weight below ``eps_w`` are skipped; ``eps_w=0``
    reproduces the reference compositing exactly.
    """
    backend = backend or default_backend()
    dtype = gaussians.centers.dtype
    bg = torch.zeros(3, dtype=dtype) if background is None else torch.as_tensor(background, dtype=dtype)
    index, means, conics, depths = project_splats(gaussians, camera, near, cov_eps)
    # stable sort keeps Gaussian index order on depth ties
    order = torch.from_numpy(np.argsort(depths.detach().cpu().numpy().astype(np.float64), kind="stable"))
    opacities = gaussians.opacities[index]
    colors = gaussians.colors[index]
    if backend == "cython":
        if _raster is None:
            raise RuntimeError("compiled rasterizer is not built")
        return _RasterizeFunction.apply(means, conics, opacities, colors, order,
                                        camera.height, camera.width, bg, alpha_max, eps_w)
    if backend == "torch":
        return _fallback.composite(means, conics, opacities, colors, order,
                                   camera.height, camera.width, bg, alpha_max, eps_w)
    raise ValueError(f"unknown render backend {backend!r}")
