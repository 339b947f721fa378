"""Synthetic scenes, multi-view rendering, the scene directory format and view-role splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from novelgs.gaussians import SCALE_MAX, GaussianSet, load_nvgs, save_nvgs
from novelgs.geometry import Camera, focal_from_fov, load_cameras, make_camera, orbit_cameras, save_cameras
from novelgs.render import render_reference

log = logging.getLogger(__name__)

COVERAGE_THRESHOLD = 0.10
DEFAULT_FOV_DEG = 40.0
DEFAULT_RADIUS = 2.2
TRAIN_ELEVATION_RANGE = (-30.0, 60.0)
EVAL_ELEVATIONS = (30.0, 0.0, -30.0)
EVAL_AZIMUTHS = 7
ROLES = ("clean", "noisy", "supervision")

PALETTE = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.20, 0.55, 0.85],
        [0.95, 0.80, 0.25],
        [0.30, 0.75, 0.35],
        [0.65, 0.35, 0.80],
        [0.95, 0.55, 0.15],
        [0.80, 0.80, 0.80],
        [0.25, 0.75, 0.75],
    ]
)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitive_count: int = 4
    gaussians_per_primitive: int = 100
    kinds: tuple[str, ...] = ("sphere", "box")
    palette: np.ndarray = field(default_factory=lambda: PALETTE.copy())
    # every primitive stays inside this ball, so any rotation keeps it inside [-1, 1]^3
    extent: float = 0.95

    def __post_init__(self):
        if self.primitive_count < 1:
            raise ValueError("a scene needs at least one primitive")
        if not 1 <= self.gaussians_per_primitive <= 100:
            raise ValueError("gaussians_per_primitive must be in [1, 100]")


@dataclass
class SceneSample:
    scene_id: str
    images: np.ndarray  # V×H×W×3 in [0, 1]
    masks: np.ndarray  # V×H×W in {0, 1}
    cameras: list[Camera]
    gaussians: GaussianSet | None = None

    def __post_init__(self):
        if not (len(self.images) == len(self.masks) == len(self.cameras)):
            raise ValueError("image, mask and camera counts differ")

    @property
    def view_count(self) -> int:
        return len(self.cameras)


@dataclass
class ViewBatch:
    """Views of one scene with a role per view; ``t`` is filled in by training."""

    images: np.ndarray
    masks: np.ndarray
    cameras: list[Camera]
    roles: list[str]
    view_ids: list[int]
    t: int | None = None

    def __post_init__(self):
        if not (len(self.images) == len(self.masks) == len(self.cameras) == len(self.roles)):
            raise ValueError("batch fields have different view counts")
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise ValueError(f"unknown roles {sorted(bad)}")
        if len(set(self.view_ids)) != len(self.view_ids):
            raise ValueError("a view may hold only one role")

    def indices(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == role]


def _random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _sphere_points(rng, n, radius):
    # Fibonacci lattice with a random spin, jittered along the normal
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i + rng.uniform(0, 2 * math.pi)
    pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return pts * radius * (1 + 0.03 * rng.standard_normal((n, 1)))


def _box_points(rng, n, half):
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]).repeat(2)
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def generate_scene(spec: SceneSpec) -> GaussianSet:
    """Deterministic ground-truth scene of Gaussian clusters inside the unit ball."""
    rng = np.random.default_rng(spec.seed)
    centers, colors = [], []
    n = spec.gaussians_per_primitive
    for p in range(spec.primitive_count):
        kind = spec.kinds[rng.integers(len(spec.kinds))]
        if kind == "sphere":
            size = rng.uniform(0.18, 0.32)
            local = _sphere_points(rng, n, size)
            reach = size * 1.1
        elif kind == "box":
            half = rng.uniform(0.12, 0.25, size=3)
            local = _box_points(rng, n, half)
            reach = float(np.linalg.norm(half))
        else:
            raise ValueError(f"unknown primitive kind {kind!r}")
        room = max(spec.extent - reach, 0.0)
        direction = rng.normal(size=3)
        offset = direction / np.linalg.norm(direction) * room * rng.uniform(0.0, 0.7) ** (1 / 3)
        pts = local + offset
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        pts = np.where(norms > spec.extent, pts * spec.extent / norms, pts)
        base = spec.palette[rng.integers(len(spec.palette))]
        centers.append(pts)
        colors.append(np.clip(base + 0.06 * rng.standard_normal((n, 3)), 0.02, 0.98))
    total = n * spec.primitive_count
    return GaussianSet.from_numpy(
        np.concatenate(centers),
        rng.uniform(0.7 * SCALE_MAX, SCALE_MAX, size=(total, 3)),
        _random_quaternions(rng, total),
        rng.uniform(0.8, 0.95, size=total),
        np.concatenate(colors),
    )


def coverage_filter(mask: np.ndarray, threshold: float = COVERAGE_THRESHOLD) -> bool:
    """True when at least ``threshold`` of the pixels are covered (boundary inclusive)."""
    mask = np.asarray(mask)
    covered = np.count_nonzero(mask > 0.5)
    return covered >= threshold * mask.size


def random_camera(rng: np.random.Generator, radius: float, resolution: tuple[int, int],
                  fov_deg: float = DEFAULT_FOV_DEG,
                  elevation_range: tuple[float, float] = TRAIN_ELEVATION_RANGE) -> Camera:
    azimuth = rng.uniform(0.0, 2 * math.pi)
    elevation = math.radians(rng.uniform(*elevation_range))
    center = radius * np.array(
        [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
    )
    return make_camera(center, resolution, focal_from_fov(fov_deg, resolution[1]))


def render_views(scene: GaussianSet, cameras: Sequence[Camera]) -> tuple[np.ndarray, np.ndarray]:
    images, masks = [], []
    for cam in cameras:
        img, alpha = render_reference(scene, cam)
        images.append(img)
        masks.append((alpha > 0.5).astype(np.float64))
    return np.stack(images), np.stack(masks)


def render_dataset(scene: GaussianSet, view_count: int, resolution: int | tuple[int, int],
                   radius: float = DEFAULT_RADIUS, seed: int = 0, scene_id: str = "scene",
                   fov_deg: float = DEFAULT_FOV_DEG, max_retries: int = 32) -> SceneSample:
    """Render ``view_count`` random views whose masks pass the coverage filter."""
    if view_count < 1:
        raise ValueError("view_count must be at least 1")
    resolution = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
    rng = np.random.default_rng(seed)
    images, masks, cameras = [], [], []
    for _ in range(view_count):
        for _attempt in range(max_retries):
            cam = random_camera(rng, radius, resolution, fov_deg)
            img, alpha = render_reference(scene, cam)
            mask = (alpha > 0.5).astype(np.float64)
            if coverage_filter(mask):
                break
        else:
            raise ValueError(f"{scene_id}: no view passed the coverage filter after {max_retries} tries")
        images.append(img)
        masks.append(mask)
        cameras.append(cam)
    return SceneSample(scene_id, np.stack(images), np.stack(masks), cameras, scene)


def render_orbit_sample(scene: GaussianSet, resolution: int, radius: float = DEFAULT_RADIUS,
                        scene_id: str = "scene", fov_deg: float = DEFAULT_FOV_DEG) -> SceneSample:
    """The 21-view evaluation trajectory: 7 azimuths at elevations 30, 0 and -30 degrees."""
    cameras = orbit_cameras(EVAL_AZIMUTHS, EVAL_ELEVATIONS, radius, (resolution, resolution),
                            focal_from_fov(fov_deg, resolution))
    images, masks = render_views(scene, cameras)
    return SceneSample(scene_id, images, masks, cameras, scene)


def make_scene(seed: int, view_count: int, resolution: int, radius: float = DEFAULT_RADIUS,
               spec_kwargs: dict | None = None, max_scene_tries: int = 16) -> SceneSample:
    """Generate a scene and render it, drawing a new scene if no view covers enough pixels."""
    for attempt in range(max_scene_tries):
        scene_seed = seed * 1000 + attempt
        spec = SceneSpec(seed=scene_seed, **(spec_kwargs or {}))
        try:
            return render_dataset(generate_scene(spec), view_count, resolution, radius,
                                  seed=scene_seed, scene_id=f"scene_{seed:05d}")
        except ValueError:
            log.info("scene seed %d rejected by the coverage filter", scene_seed)
    raise RuntimeError(f"could not generate a scene passing the coverage filter from seed {seed}")


def sample_view_split(sample: SceneSample, m: int, n: int, s: int,
                      seed: int | np.random.Generator = 0) -> ViewBatch:
    """Pick ``m`` clean, ``n`` noisy and ``s`` supervision views without replacement."""
    if m < 0 or n < 0 or s < 0:
        raise ValueError("view counts must be non-negative")
    if m + n + s > sample.view_count:
        raise ValueError(f"need {m + n + s} views but the scene has {sample.view_count}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = rng.permutation(sample.view_count)[: m + n + s].tolist()
    return make_view_batch(sample, chosen[:m], chosen[m:m + n], chosen[m + n:])


def make_view_batch(sample: SceneSample, clean: Sequence[int], noisy: Sequence[int] = (),
                    supervision: Sequence[int] = ()) -> ViewBatch:
    ids = list(clean) + list(noisy) + list(supervision)
    for i in ids:
        if not 0 <= i < sample.view_count:
            raise IndexError(f"view index {i} out of range for {sample.view_count} views")
    roles = ["clean"] * len(clean) + ["noisy"] * len(noisy) + ["supervision"] * len(supervision)
    return ViewBatch(
        images=sample.images[ids],
        masks=sample.masks[ids],
        cameras=[sample.cameras[i] for i in ids],
        roles=roles,
        view_ids=ids,
    )


# ---------------------------------------------------------------------------
# on-disk format


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_scene(root: str | Path, sample: SceneSample) -> Path:
    scene_dir = Path(root) / "scenes" / sample.scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    save_cameras(scene_dir / "cameras", sample.cameras)
    for k, (img, mask) in enumerate(zip(sample.images, sample.masks)):
        Image.fromarray(to_uint8(img), mode="RGB").save(scene_dir / f"view_{k}.png")
        Image.fromarray(to_uint8(mask), mode="L").save(scene_dir / f"view_{k}_alpha.png")
    if sample.gaussians is not None:
        save_nvgs(scene_dir / "scene.nvgs", sample.gaussians)
    return scene_dir


def read_scene(scene_dir: str | Path) -> SceneSample:
    scene_dir = Path(scene_dir)
    cameras = load_cameras(scene_dir / "cameras")
    images, masks = [], []
    for k in range(len(cameras)):
        images.append(np.asarray(Image.open(scene_dir / f"view_{k}.png").convert("RGB"), dtype=np.float64) / 255.0)
        masks.append(np.asarray(Image.open(scene_dir / f"view_{k}_alpha.png").convert("L"), dtype=np.float64) / 255.0)
    gt_path = scene_dir / "scene.nvgs"
    gaussians = load_nvgs(gt_path) if gt_path.exists() else None
    return SceneSample(scene_dir.name, np.stack(images), np.stack(masks), cameras, gaussians)


def write_dataset_manifest(root: str | Path, train_ids: Sequence[str], eval_ids: Sequence[str],
                           info: dict | None = None) -> None:
    manifest = {"scenes": {"train": list(train_ids), "eval": list(eval_ids)}, **(info or {})}
    (Path(root) / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_split(root: str | Path, split: str) -> list[SceneSample]:
    manifest = json.loads((Path(root) / "dataset.json").read_text())
    return [read_scene(Path(root) / "scenes" / sid) for sid in manifest["scenes"][split]]
