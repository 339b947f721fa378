"""Squared-cosine noise schedule, forward noising and the render-then-renoise sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from novelgs.denoiser import camera_rays, gaussians_from_maps, to_model_range
from novelgs.gaussians import GaussianSet
from novelgs.geometry import Camera
from novelgs.render import render

BETA_CAP = 0.999
COSINE_OFFSET = 0.008
DEFAULT_INFERENCE_STEPS = 50


@dataclass(frozen=True)
class DiffusionSchedule:
    step_count: int
    alpha_bar: np.ndarray
    betas: np.ndarray
    # listed next to the cosine law in the reference setup; kept as metadata only
    beta_start: float = 0.0001
    beta_end: float = 0.02
    kind: str = "squaredcos_cap_v2"

    def to_dict(self) -> dict:
        return {"step_count": self.step_count, "kind": self.kind,
                "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, record: dict) -> "DiffusionSchedule":
        schedule = make_schedule(int(record["step_count"]))
        return cls(schedule.step_count, schedule.alpha_bar, schedule.betas,
                   record.get("beta_start", 0.0001), record.get("beta_end", 0.02))


def cosine_alpha_bar(t: np.ndarray | float, step_count: int) -> np.ndarray:
    frac = (np.asarray(t, dtype=np.float64) / step_count + COSINE_OFFSET) / (1 + COSINE_OFFSET)
    return np.cos(frac * math.pi / 2) ** 2


def make_schedule(step_count: int = 1000) -> DiffusionSchedule:
    """``alpha_bar(t) = cos^2(((t/T + 0.008) / 1.008) * pi/2)`` for ``t = 0..T-1``.

    Betas are the per-step ratios ``1 - alpha_bar(t) / alpha_bar(t-1)`` (with
    ``alpha_bar(-1) = 1``), capped at 0.999; ``alpha_bar`` is then rebuilt as
    their running product so the two stay consistent even if the cap binds.
    """
    if step_count < 1:
        raise ValueError("step_count must be at least 1")
    target = cosine_alpha_bar(np.arange(step_count), step_count)
    prev = np.concatenate([[1.0], target[:-1]])
    betas = np.minimum(1.0 - target / prev, BETA_CAP)
    alpha_bar = np.cumprod(1.0 - betas)
    return DiffusionSchedule(step_count, alpha_bar, betas)


def q_sample(x0, t: int, noise, schedule: DiffusionSchedule):
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise`` for arrays or tensors in [-1, 1]."""
    if not 0 <= t < schedule.step_count:
        raise ValueError(f"timestep {t} out of range [0, {schedule.step_count})")
    if tuple(np.shape(x0)) != tuple(np.shape(noise)):
        raise ValueError("noise must have the same shape as x0")
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def inference_timesteps(schedule: DiffusionSchedule, steps: int) -> list[int]:
    """Descending, uniformly strided timesteps ending at 0 (a single step uses ``T-1``)."""
    if not 1 <= steps <= schedule.step_count:
        raise ValueError(f"inference steps must be in [1, {schedule.step_count}]")
    if steps == 1:
        return [schedule.step_count - 1]
    ts = np.rint(np.linspace(schedule.step_count - 1, 0, steps)).astype(int)
    return [int(t) for t in ts]


@torch.no_grad()
def sample(model, clean_images, cameras_all: Sequence[Camera], noisy_view_indices: Sequence[int],
           inference_steps: int = DEFAULT_INFERENCE_STEPS, seed: int = 0,
           schedule: DiffusionSchedule | None = None, fixed_noise: bool = False,
           trace: list | None = None) -> GaussianSet:
    """Iteratively denoise the noisy views by rendering and re-noising.

    Args:
        model: a ``Denoiser``.
        clean_images: ``m×H×W×3`` in [0, 1], matching the non-noisy entries of
            ``cameras_all`` in order.
        cameras_all: cameras of every input view, already normalized.
        noisy_view_indices: positions in ``cameras_all`` that are generated.
        inference_steps: number of scheduled timesteps.
        seed: seeds the initial noise and every re-noising draw.
        fixed_noise: reuse one noise tensor for every re-noising step.
        trace: if given, the rendered clean estimate of every step is appended.

    Returns:
        The Gaussians of the final prediction, in the cameras' frame.
    """
    schedule = schedule or make_schedule(model.config.step_count)
    if schedule.step_count != model.config.step_count:
        raise ValueError("schedule and model disagree on the number of timesteps")
    noisy_idx = list(noisy_view_indices)
    clean_idx = [i for i in range(len(cameras_all)) if i not in set(noisy_idx)]
    if any(not 0 <= i < len(cameras_all) for i in noisy_idx) or len(set(noisy_idx)) != len(noisy_idx):
        raise ValueError("noisy view indices must be distinct positions in cameras_all")
    dtype = next(model.parameters()).dtype
    clean = torch.as_tensor(np.asarray(clean_images), dtype=dtype)
    if clean.shape[0] != len(clean_idx):
        raise ValueError(f"{clean.shape[0]} clean images for {len(clean_idx)} clean cameras")
    if clean.shape[0] < 1:
        raise ValueError("at least one clean view is required")
    cameras = [cameras_all[i] for i in clean_idx] + [cameras_all[i] for i in noisy_idx]
    rays = camera_rays(cameras, dtype)
    clean_in = to_model_range(clean)
    n = len(noisy_idx)
    gen = torch.Generator().manual_seed(int(seed))

    def predict(x_noisy, t):
        images = torch.cat([clean_in, x_noisy], dim=0)
        raw = model(images[None], rays[None], torch.tensor([t]))[0]
        return gaussians_from_maps(list(raw), cameras, rays)

    if n == 0:
        return predict(clean_in[:0], 0)

    shape = (n, *clean.shape[1:])
    x = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    reused = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype) if fixed_noise else None
    timesteps = inference_timesteps(schedule, inference_steps)
    gaussians = None
    for i, t in enumerate(timesteps):
        gaussians = predict(x, t)
        if i == len(timesteps) - 1:
            break
        estimate = torch.stack([render(gaussians, cameras[len(clean_idx) + k])[0] for k in range(n)])
        if trace is not None:
            trace.append(estimate.clone())
        noise = reused if fixed_noise else torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
        x = q_sample(to_model_range(estimate), timesteps[i + 1], noise, schedule)
    return gaussians
