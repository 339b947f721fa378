"""Gaussian sets, per-pixel attribute activation and the ``.nvgs`` file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from novelgs.geometry import RigidTransform

DEPTH_NEAR = 0.1
DEPTH_FAR = 4.5
SCALE_MIN = 0.005
SCALE_MAX = 0.02
CENTER_BOUND = 1.0

# raw attribute channel layout
ATTRIBUTE_CHANNELS = 12
DEPTH = slice(0, 1)
ROTATION = slice(1, 5)
SCALE = slice(5, 8)
OPACITY = slice(8, 9)
COLOR = slice(9, 12)
HEAD_CHANNELS = {"depth": 1, "rotation": 4, "scale": 3, "opacity": 1, "color": 3}

NVGS_MAGIC = b"NVGS"
NVGS_VERSION = 1
_RECORD_FLOATS = 14


@dataclass
class GaussianSet:
    """Flat collection of 3D Gaussians stored as torch tensors.

    Attributes:
        centers: ``N×3`` positions.
        scales: ``N×3`` per-axis standard deviations.
        rotations: ``N×4`` unit quaternions ``(w, x, y, z)``.
        opacities: ``N`` values in ``(0, 1)``.
        colors: ``N×3`` linear RGB in ``(0, 1)``.
    """

    centers: torch.Tensor
    scales: torch.Tensor
    rotations: torch.Tensor
    opacities: torch.Tensor
    colors: torch.Tensor

    def __post_init__(self):
        n = self.centers.shape[0]
        shapes = {
            "centers": (n, 3),
            "scales": (n, 3),
            "rotations": (n, 4),
            "opacities": (n,),
            "colors": (n, 3),
        }
        for name, shape in shapes.items():
            if tuple(getattr(self, name).shape) != shape:
                raise ValueError(f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def count(self) -> int:
        return len(self)

    def fields(self) -> tuple[torch.Tensor, ...]:
        return self.centers, self.scales, self.rotations, self.opacities, self.colors

    @classmethod
    def empty(cls, dtype: torch.dtype = torch.float32) -> "GaussianSet":
        return cls(
            torch.zeros(0, 3, dtype=dtype),
            torch.zeros(0, 3, dtype=dtype),
            torch.zeros(0, 4, dtype=dtype),
            torch.zeros(0, dtype=dtype),
            torch.zeros(0, 3, dtype=dtype),
        )

    @classmethod
    def from_numpy(cls, centers, scales, rotations, opacities, colors,
                   dtype: torch.dtype = torch.float64) -> "GaussianSet":
        return cls(*(torch.as_tensor(np.asarray(a), dtype=dtype)
                     for a in (centers, scales, rotations, opacities, colors)))

    def to(self, dtype: torch.dtype) -> "GaussianSet":
        return GaussianSet(*(f.to(dtype) for f in self.fields()))

    def detach(self) -> "GaussianSet":
        return GaussianSet(*(f.detach() for f in self.fields()))

    def numpy(self) -> dict[str, np.ndarray]:
        names = ("centers", "scales", "rotations", "opacities", "colors")
        return {k: f.detach().cpu().numpy().astype(np.float64) for k, f in zip(names, self.fields())}

    def subset(self, index) -> "GaussianSet":
        return GaussianSet(*(f[index] for f in self.fields()))

    def check_invariants(self, bounded_scale: bool = True, atol: float = 1e-6) -> None:
        """Raise ``ValueError`` if any Gaussian violates the set invariants."""
        arr = self.numpy()
        if len(self) == 0:
            return
        if np.any(np.abs(np.linalg.norm(arr["rotations"], axis=1) - 1) > atol):
            raise ValueError("rotations must be unit quaternions")
        if np.any((arr["opacities"] <= 0) | (arr["opacities"] >= 1)):
            raise ValueError("opacities must lie in (0, 1)")
        if np.any((arr["colors"] <= 0) | (arr["colors"] >= 1)):
            raise ValueError("colors must lie in (0, 1)")
        if bounded_scale and np.any((arr["scales"] < SCALE_MIN) | (arr["scales"] > SCALE_MAX)):
            raise ValueError(f"scales must lie in [{SCALE_MIN}, {SCALE_MAX}]")
        if np.any(np.abs(arr["centers"]) > CENTER_BOUND):
            raise ValueError("centers must lie in [-1, 1]^3")

    def transformed(self, transform: RigidTransform) -> "GaussianSet":
        """Apply a similarity transform to positions, orientations and sizes."""
        dtype = self.centers.dtype
        rot = torch.as_tensor(transform.rotation, dtype=dtype)
        offset = torch.as_tensor(transform.offset, dtype=dtype)
        centers = transform.scale * (self.centers - offset) @ rot.T
        q_rot = torch.as_tensor(rotation_to_quaternion(transform.rotation), dtype=dtype)
        rotations = quaternion_multiply(q_rot.expand_as(self.rotations), self.rotations)
        return GaussianSet(centers, self.scales * transform.scale, rotations, self.opacities, self.colors)


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices ``(..., 3, 3)`` from (not necessarily unit) quaternions."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def rotation_to_quaternion(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    trace = np.trace(m)
    if trace > 0:
        s = 2.0 * np.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def depth_from_raw(raw_depth: torch.Tensor) -> torch.Tensor:
    w = torch.sigmoid(raw_depth)
    return (1 - w) * DEPTH_NEAR + w * DEPTH_FAR


def scale_from_raw(raw_scale: torch.Tensor) -> torch.Tensor:
    return SCALE_MIN + (SCALE_MAX - SCALE_MIN) * torch.sigmoid(raw_scale)


def normalize_quaternion(raw: torch.Tensor) -> torch.Tensor:
    norm = raw.norm(dim=-1, keepdim=True)
    identity = torch.zeros_like(raw)
    identity[..., 0] = 1
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return torch.where(norm > 0, raw / safe, identity)


def activate_attributes(raw: torch.Tensor, rays: torch.Tensor, origin: torch.Tensor) -> GaussianSet:
    """Turn a raw ``H×W×12`` attribute map into one Gaussian per pixel.

    Args:
        raw: unconstrained network output with channels depth(1),
            rotation(4), scale(3), opacity(1), color(3).
        rays: ``H×W×6`` Plücker map of the producing view; only the
            direction channels are read.
        origin: camera center ``(3,)`` (or per-pixel ``H×W×3``) that the
            depth is measured from.
    """
    if raw.shape[-1] != ATTRIBUTE_CHANNELS:
        raise ValueError(f"attribute map must have {ATTRIBUTE_CHANNELS} channels, got {raw.shape[-1]}")
    if raw.shape[:-1] != rays.shape[:-1]:
        raise ValueError(f"attribute map {tuple(raw.shape[:-1])} and rays {tuple(rays.shape[:-1])} differ in size")
    raw = raw.reshape(-1, ATTRIBUTE_CHANNELS)
    directions = rays.reshape(-1, 6)[:, 3:].to(raw.dtype)
    origin = torch.as_tensor(origin, dtype=raw.dtype).reshape(-1, 3)
    t = depth_from_raw(raw[:, DEPTH])
    centers = (origin + t * directions).clamp(-CENTER_BOUND, CENTER_BOUND)
    return GaussianSet(
        centers=centers,
        scales=scale_from_raw(raw[:, SCALE]),
        rotations=normalize_quaternion(raw[:, ROTATION]),
        opacities=torch.sigmoid(raw[:, OPACITY]).squeeze(-1),
        colors=torch.sigmoid(raw[:, COLOR]),
    )


def merge_views(sets: Sequence[GaussianSet]) -> GaussianSet:
    if not sets:
        raise ValueError("cannot merge an empty list of Gaussian sets")
    if len(sets) == 1:
        return sets[0]
    return GaussianSet(*(torch.cat(parts, dim=0) for parts in zip(*(s.fields() for s in sets))))


def save_nvgs(path: str | Path, gaussians: GaussianSet) -> None:
    """Write little-endian float32 records: center, scale, quaternion, opacity, color."""
    arr = gaussians.numpy()
    records = np.concatenate(
        [arr["centers"], arr["scales"], arr["rotations"], arr["opacities"][:, None], arr["colors"]], axis=1
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(NVGS_MAGIC)
        fh.write(struct.pack("<II", NVGS_VERSION, len(gaussians)))
        fh.write(records.tobytes())


def load_nvgs(path: str | Path, dtype: torch.dtype = torch.float64) -> GaussianSet:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != NVGS_MAGIC:
        raise ValueError(f"{path}: not an NVGS file (bad magic)")
    version, count = struct.unpack("<II", data[4:12])
    if version != NVGS_VERSION:
        raise ValueError(f"{path}: unsupported NVGS version {version}")
    expected = 12 + 4 * _RECORD_FLOATS * count
    if len(data) != expected:
        raise ValueError(f"{path}: truncated or oversized payload ({len(data)} bytes, expected {expected})")
    rec = np.frombuffer(data[12:], dtype="<f4").reshape(count, _RECORD_FLOATS).astype(np.float64)
    return GaussianSet.from_numpy(rec[:, 0:3], rec[:, 3:6], rec[:, 6:10], rec[:, 10], rec[:, 11:14], dtype=dtype)
