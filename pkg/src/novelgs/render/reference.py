"""Brute-force splatting oracle.

Every Gaussian is projected on its own and every splat is evaluated at every
pixel; there is no tiling, bounding box or weight cut-off. Used to check the
optimized renderer and to produce ground-truth datasets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from novelgs.geometry import Camera

ALPHA_MAX = 0.999
COV_EPS = 0.3
NEAR_PLANE = 0.01


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray

    @property
    def conic(self) -> tuple[float, float, float]:
        """Upper triangle ``(a, b, c)`` of the inverse 2D covariance."""
        cxx, cxy, cyy = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        det = cxx * cyy - cxy * cxy
        return cyy / det, -cxy / det, cxx / det


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def project_gaussian(center, scale, rotation, opacity, color, camera: Camera,
                     near: float = NEAR_PLANE, cov_eps: float = COV_EPS) -> Splat2D | None:
    """Project one Gaussian; returns ``None`` when it is at or behind the near plane."""
    p = camera.world_to_camera(center)
    x, y, z = p
    if z <= near:
        return None
    rot = _quat_to_matrix(rotation)
    cov3d = rot @ np.diag(np.asarray(scale, dtype=np.float64) ** 2) @ rot.T
    view = camera.rotation.T
    cov_cam = view @ cov3d @ view.T
    f = camera.focal
    jac = np.array([[f / z, 0.0, -f * x / (z * z)], [0.0, f / z, -f * y / (z * z)]])
    cov2d = jac @ cov_cam @ jac.T + cov_eps * np.eye(2)
    mean2d = f * np.array([x / z, y / z]) + camera.principal_point
    return Splat2D(mean2d, cov2d, float(z), float(opacity), np.asarray(color, dtype=np.float64))


def composite(splats: list[Splat2D], height: int, width: int, background=None,
              alpha_max: float = ALPHA_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Front-to-back alpha compositing of splats over every pixel.

    ``splats`` must already be in compositing order.
    """
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                             indexing="ij")
    px = (cols + 0.5).reshape(-1)
    py = (rows + 0.5).reshape(-1)
    trans = np.ones(height * width)
    image = np.zeros((height * width, 3))
    for s in splats:
        a, b, c = s.conic
        dx = px - s.mean2d[0]
        dy = py - s.mean2d[1]
        power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
        alpha = np.minimum(s.opacity * np.exp(power), alpha_max)
        weight = alpha * trans
        for k in range(3):
            image[:, k] = image[:, k] + weight * s.color[k]
        trans = trans * (1.0 - alpha)
    for k in range(3):
        image[:, k] = image[:, k] + trans * bg[k]
    return image.reshape(height, width, 3), (1.0 - trans).reshape(height, width)


def project_all(gaussians, camera: Camera, near: float = NEAR_PLANE,
                cov_eps: float = COV_EPS) -> list[tuple[int, Splat2D]]:
    """Project a ``GaussianSet`` and return ``(index, splat)`` pairs sorted front to back."""
    arr = gaussians.numpy()
    splats = []
    for i in range(len(arr["opacities"])):
        s = project_gaussian(arr["centers"][i], arr["scales"][i], arr["rotations"][i],
                             arr["opacities"][i], arr["colors"][i], camera, near, cov_eps)
        if s is not None:
            splats.append((i, s))
    # stable: ties keep Gaussian index order
    splats.sort(key=lambda item: item[1].depth)
    return splats


def render_reference(gaussians, camera: Camera, background=None, alpha_max: float = ALPHA_MAX,
                     near: float = NEAR_PLANE, cov_eps: float = COV_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Render ``(image H×W×3, alpha H×W)`` as float64 arrays."""
    splats = [s for _, s in project_all(gaussians, camera, near, cov_eps)]
    return composite(splats, camera.height, camera.width, background, alpha_max)
