"""Pinhole cameras, Plücker ray maps and camera-frame normalization.

Conventions used throughout the package:

* world frame is right-handed with +z up;
* camera frame follows the OpenCV layout (x right, y down, z forward);
* ``Camera.rotation`` maps camera-frame vectors to the world frame and
  ``Camera.center`` is the camera position in world coordinates;
* pixel ``(row, col)`` has its center at image coordinates ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Camera:
    """Intrinsics and world pose of a single view."""

    rotation: np.ndarray
    center: np.ndarray
    focal: float
    principal_point: np.ndarray
    resolution: tuple[int, int]

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        pp = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        height, width = (int(v) for v in self.resolution)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
            raise ValueError("camera rotation must be orthonormal with determinant +1")
        if not math.isfinite(self.focal) or self.focal <= 0:
            raise ValueError(f"focal length must be positive and finite, got {self.focal}")
        if height <= 0 or width <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "focal", float(self.focal))
        object.__setattr__(self, "resolution", (height, width))

    @property
    def height(self) -> int:
        return self.resolution[0]

    @property
    def width(self) -> int:
        return self.resolution[1]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map ``(..., 3)`` world points into the camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return pixel coordinates ``(..., 2)`` and camera-space depth ``(...)``."""
        cam = self.world_to_camera(points)
        z = cam[..., 2]
        uv = self.focal * cam[..., :2] / z[..., None] + self.principal_point
        return uv, z

    def with_resolution(self, resolution: tuple[int, int]) -> "Camera":
        """Same pose and field of view at a different image size."""
        height, width = resolution
        scale = width / self.width
        return Camera(
            self.rotation,
            self.center,
            self.focal * scale,
            self.principal_point * np.array([width / self.width, height / self.height]),
            (height, width),
        )

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "center": [float(v) for v in self.center],
            "focal": self.focal,
            "principal_point": [float(v) for v in self.principal_point],
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Camera":
        return cls(
            rotation=np.array(record["rotation"], dtype=np.float64).reshape(3, 3),
            center=np.array(record["center"], dtype=np.float64),
            focal=float(record["focal"]),
            principal_point=np.array(record["principal_point"], dtype=np.float64),
            resolution=(int(record["height"]), int(record["width"])),
        )


def focal_from_fov(fov_deg: float, width: int) -> float:
    return 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)


def look_at(center: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0),
            up: Sequence[float] = WORLD_UP) -> np.ndarray:
    """World-from-camera rotation for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("camera center coincides with the look-at target")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up axis; any horizontal right vector works
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def make_camera(center: Sequence[float], resolution: tuple[int, int], focal: float,
                target: Sequence[float] = (0.0, 0.0, 0.0)) -> Camera:
    height, width = resolution
    return Camera(
        rotation=look_at(center, target),
        center=np.asarray(center, dtype=np.float64),
        focal=focal,
        principal_point=np.array([width / 2.0, height / 2.0]),
        resolution=(height, width),
    )


def pixel_directions(camera: Camera) -> np.ndarray:
    """Unit world-space ray directions through every pixel center, ``H×W×3``."""
    rows, cols = np.meshgrid(
        np.arange(camera.height, dtype=np.float64) + 0.5,
        np.arange(camera.width, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    local = np.stack(
        [
            (cols - camera.principal_point[0]) / camera.focal,
            (rows - camera.principal_point[1]) / camera.focal,
            np.ones_like(rows),
        ],
        axis=-1,
    )
    world = local @ camera.rotation.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def plucker(origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Stack ``(o × d, d)`` along the last axis."""
    origins, directions = np.broadcast_arrays(
        np.asarray(origins, dtype=np.float64), np.asarray(directions, dtype=np.float64)
    )
    return np.concatenate([np.cross(origins, directions), directions], axis=-1)


def ray_map(camera: Camera) -> np.ndarray:
    """Per-pixel Plücker embedding ``(o × d, d)`` of shape ``H×W×6``."""
    if not (math.isfinite(camera.focal) and camera.focal > 0):
        raise ValueError("intrinsics are not invertible")
    directions = pixel_directions(camera)
    return plucker(camera.center, directions)


@dataclass(frozen=True)
class RigidTransform:
    """``x -> scale * rotation @ (x - offset)`` applied to world points."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) - self.offset) @ self.rotation.T

    def apply_camera(self, camera: Camera) -> Camera:
        return Camera(
            rotation=self.rotation @ camera.rotation,
            center=self.apply_points(camera.center),
            focal=camera.focal,
            principal_point=camera.principal_point,
            resolution=camera.resolution,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.scale * self.rotation @ self.offset, 1.0 / self.scale)


def normalization_transform(cameras: Sequence[Camera], condition_index: int = 0,
                            scene_center: Sequence[float] = (0.0, 0.0, 0.0),
                            canonical_radius: float | None = None) -> RigidTransform:
    """Rigid motion that puts the conditioning camera at ``(0, y, 0)`` with ``y > 0``.

    The scene is first shifted to ``scene_center``; then rotated about the up
    axis (azimuth) and tilted about the x axis (elevation). A camera lying on
    the up axis gets the identity rotation.
    """
    if not 0 <= condition_index < len(cameras):
        raise IndexError(f"condition index {condition_index} out of range for {len(cameras)} cameras")
    offset = np.asarray(scene_center, dtype=np.float64)
    x, y, z = cameras[condition_index].center - offset
    rho = math.hypot(x, y)
    if rho < 1e-12:
        rotation = np.eye(3)
    else:
        spin = math.pi / 2 - math.atan2(y, x)
        cz, sz = math.cos(spin), math.sin(spin)
        about_up = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
        tilt = -math.atan2(z, rho)
        cx, sx = math.cos(tilt), math.sin(tilt)
        about_x = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
        rotation = about_x @ about_up
    scale = 1.0
    if canonical_radius is not None:
        dist = math.sqrt(x * x + y * y + z * z)
        if dist > 0:
            scale = canonical_radius / dist
    return RigidTransform(rotation=rotation, offset=offset, scale=scale)


def normalize_cameras(cameras: Sequence[Camera], condition_index: int = 0,
                      scene_center: Sequence[float] = (0.0, 0.0, 0.0),
                      canonical_radius: float | None = None) -> list[Camera]:
    transform = normalization_transform(cameras, condition_index, scene_center, canonical_radius)
    return [transform.apply_camera(cam) for cam in cameras]


def orbit_cameras(azimuth_count: int, elevations_deg: Sequence[float], radius: float,
                  resolution: tuple[int, int], focal: float,
                  start_azimuth_deg: float = 0.0) -> list[Camera]:
    """Cameras on a sphere looking at the origin, ordered azimuth-major.

    Index ``k`` sits at azimuth ``k // len(elevations)`` and elevation
    ``k % len(elevations)``, so with ``elevations_deg=(30, 0, -30)`` indices
    0, 3, 6, 9 share the top ring and sweep the front half of the orbit.
    """
    if azimuth_count < 1:
        raise ValueError("azimuth_count must be at least 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    cameras = []
    for a in range(azimuth_count):
        azimuth = math.radians(start_azimuth_deg + 360.0 * a / azimuth_count)
        for elev_deg in elevations_deg:
            elev = math.radians(elev_deg)
            center = radius * np.array(
                [math.cos(elev) * math.cos(azimuth), math.cos(elev) * math.sin(azimuth), math.sin(elev)]
            )
            cameras.append(make_camera(center, resolution, focal))
    return cameras


def camera_azimuth_deg(camera: Camera) -> float:
    return math.degrees(math.atan2(camera.center[1], camera.center[0]))


def save_cameras(path: str | Path, cameras: Sequence[Camera]) -> None:
    Path(path).write_text(json.dumps([cam.to_dict() for cam in cameras], indent=1))


def load_cameras(path: str | Path) -> list[Camera]:
    return [Camera.from_dict(rec) for rec in json.loads(Path(path).read_text())]
