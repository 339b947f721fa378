"""Rendering losses, the train step and the two-stage training driver."""

from __future__ import annotations

import importlib
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from novelgs.data import SceneSample, ViewBatch, sample_view_split
from novelgs.denoiser import Denoiser, DenoiserConfig, camera_rays, gaussians_from_maps, save_checkpoint, to_model_range
from novelgs.diffusion import DiffusionSchedule, make_schedule, q_sample
from novelgs.geometry import normalize_cameras
from novelgs.render import WEIGHT_EPS, render

log = logging.getLogger(__name__)

PERCEPTUAL_PLUGIN_ENV = "NOVELGS_PERCEPTUAL_PLUGIN"

PerceptualFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def load_perceptual_plugin(target: str | None = None) -> PerceptualFn | None:
    """Load ``module[:attr]`` (default attr ``perceptual_distance``).

    The callable takes two ``H×W×3`` tensors in [0, 1] and returns a scalar.
    Falls back to the ``NOVELGS_PERCEPTUAL_PLUGIN`` environment variable.
    """
    target = target or os.environ.get(PERCEPTUAL_PLUGIN_ENV)
    if not target:
        return None
    module_name, _, attr = target.partition(":")
    module = importlib.import_module(module_name)
    return getattr(module, attr or "perceptual_distance")


_warned_missing_backend = False


def loss_image(pred: torch.Tensor, target: torch.Tensor, perceptual_weight: float = 1.0,
               perceptual: PerceptualFn | None = None) -> torch.Tensor:
    """Mean squared error plus ``perceptual_weight`` times the plugin distance."""
    global _warned_missing_backend
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    loss = torch.mean((pred - target) ** 2)
    if perceptual_weight > 0:
        if perceptual is None:
            if not _warned_missing_backend:
                warnings.warn("no perceptual backend configured; perceptual term dropped", RuntimeWarning)
                _warned_missing_backend = True
        else:
            loss = loss + perceptual_weight * perceptual(pred, target)
    return loss


def loss_mask(pred_alpha: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    if pred_alpha.shape != target_mask.shape:
        raise ValueError(f"shape mismatch {tuple(pred_alpha.shape)} vs {tuple(target_mask.shape)}")
    return torch.mean((pred_alpha - target_mask) ** 2)


def loss_total(renders: Sequence[torch.Tensor], alphas: Sequence[torch.Tensor],
               targets: Sequence[torch.Tensor], masks: Sequence[torch.Tensor],
               perceptual_weight: float = 1.0, perceptual: PerceptualFn | None = None,
               parts: dict | None = None) -> torch.Tensor:
    """Average of image + mask loss over the supervised views."""
    if not (len(renders) == len(alphas) == len(targets) == len(masks)):
        raise ValueError("supervision lists differ in length")
    if len(renders) == 0:
        raise ValueError("no supervised views")
    img_terms = [loss_image(r, t, perceptual_weight, perceptual) for r, t in zip(renders, targets)]
    mask_terms = [loss_mask(a, m) for a, m in zip(alphas, masks)]
    if parts is not None:
        parts["loss_img"] = float(sum(x.item() for x in img_terms) / len(img_terms))
        parts["loss_mask"] = float(sum(x.item() for x in mask_terms) / len(mask_terms))
    return sum(i + m for i, m in zip(img_terms, mask_terms)) / len(renders)


@dataclass
class StageConfig:
    resolution: int = 32
    steps: int = 2000
    lr: float = 4e-4
    decay_start: int = 3000


@dataclass
class TrainConfig:
    clean_count: int = 4
    noisy_count: int = 1
    extra_supervision_count: int = 3
    supervise_clean: bool = False
    stages: list[StageConfig] = field(default_factory=lambda: [StageConfig(32, 2000, 4e-4, 500),
                                                                StageConfig(64, 500, 4e-5, 0)])
    weight_decay: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.95)
    min_lr_ratio: float = 0.05
    max_grad_norm: float = 1.0
    perceptual_weight: float = 1.0
    batch_size: int = 1
    grad_accum: int = 1
    seed: int = 0
    weight_eps: float = WEIGHT_EPS
    log_every: int = 1
    checkpoint_every: int = 500
    model: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if self.clean_count < 1 or self.noisy_count < 0 or self.extra_supervision_count < 0:
            raise ValueError("need clean_count >= 1 and non-negative noisy/supervision counts")
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if isinstance(self.model, dict):
            self.model = DenoiserConfig(**self.model)
        self.adam_betas = tuple(self.adam_betas)
        for stage in self.stages:
            if stage.resolution % self.model.patch_size:
                raise ValueError(f"stage resolution {stage.resolution} not divisible by patch size")
        if self.noisy_count + self.extra_supervision_count == 0 and not self.supervise_clean:
            raise ValueError("nothing to supervise: add noisy or extra views, or supervise clean views")

    @classmethod
    def toy(cls, steps: int = 2000, seed: int = 0) -> "TrainConfig":
        """Four-scene overfit setting for CPU: 16² views, patch 4 (a 4×4 token grid per view)."""
        model = DenoiserConfig(width=64, layer_count=4, head_count=4, patch_size=4, base_resolution=16)
        return cls(stages=[StageConfig(16, steps, 2e-3, steps // 2)], batch_size=4, perceptual_weight=0.0,
                   seed=seed, model=model)

    @property
    def views_per_sample(self) -> int:
        return self.clean_count + self.noisy_count + self.extra_supervision_count

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text()))


def cosine_after(decay_start: int, total: int, min_ratio: float) -> Callable[[int], float]:
    def factor(step: int) -> float:
        if step < decay_start or total <= decay_start:
            return 1.0
        progress = min(1.0, (step - decay_start) / (total - decay_start))
        return min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * progress))

    return factor


def psnr_value(mse: float, cap: float = 99.0) -> float:
    return cap if mse <= 0 else min(cap, -10.0 * math.log10(mse))


class Trainer:
    """Owns the model parameters, optimizer and random state of one training run."""

    def __init__(self, model: Denoiser, config: TrainConfig, schedule: DiffusionSchedule | None = None,
                 perceptual: PerceptualFn | None = None):
        self.model = model
        self.config = config
        self.schedule = schedule or make_schedule(model.config.step_count)
        self.perceptual = perceptual
        self.rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.step = 0
        self._micro = 0
        self.set_stage(config.stages[0])

    def set_stage(self, stage: StageConfig) -> None:
        cfg = self.config
        self.stage = stage
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=stage.lr, betas=cfg.adam_betas,
                                           weight_decay=cfg.weight_decay)
        self.lr_schedule = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, cosine_after(stage.decay_start, stage.steps, cfg.min_lr_ratio)
        )
        self._micro = 0

    def draw_batch(self, scenes: Sequence[SceneSample]) -> list[ViewBatch]:
        cfg = self.config
        picks = self.rng.integers(len(scenes), size=cfg.batch_size)
        return [sample_view_split(scenes[i], cfg.clean_count, cfg.noisy_count, cfg.extra_supervision_count,
                                  self.rng) for i in picks]

    def forward_batch(self, batch: ViewBatch, t: int) -> dict:
        """Noise the noisy views, predict Gaussians and render the supervised cameras."""
        clean = batch.indices("clean")
        noisy = batch.indices("noisy")
        if not clean:
            raise ValueError("a batch needs at least one clean view")
        cameras = normalize_cameras(batch.cameras, clean[0])
        dtype = next(self.model.parameters()).dtype
        images = torch.as_tensor(batch.images, dtype=dtype)
        masks = torch.as_tensor(batch.masks, dtype=dtype)
        x0 = to_model_range(images[noisy])
        noise = torch.randn(x0.shape, generator=self.gen, dtype=torch.float64).to(dtype)
        inputs = torch.cat([to_model_range(images[clean]), q_sample(x0, t, noise, self.schedule)])
        in_cams = [cameras[i] for i in clean + noisy]
        rays = camera_rays(in_cams, dtype)
        raw = self.model(inputs[None], rays[None], torch.tensor([t]))[0]
        gaussians = gaussians_from_maps(list(raw), in_cams, rays)
        supervised = noisy + batch.indices("supervision")
        if self.config.supervise_clean:
            supervised = clean + supervised
        renders, alphas = [], []
        for i in supervised:
            img, alpha = render(gaussians, cameras[i], eps_w=self.config.weight_eps)
            renders.append(img)
            alphas.append(alpha)
        return {
            "gaussians": gaussians,
            "renders": renders,
            "alphas": alphas,
            "targets": [images[i] for i in supervised],
            "masks": [masks[i] for i in supervised],
        }

    def train_step(self, batches: Sequence[ViewBatch]) -> dict:
        """One micro-batch; the optimizer steps every ``grad_accum`` calls."""
        cfg = self.config
        self.model.train()
        total = 0.0
        parts_sum = {"loss_img": 0.0, "loss_mask": 0.0}
        mses = []
        loss = 0.0
        ts = []
        for batch in batches:
            t = batch.t if batch.t is not None else int(self.rng.integers(self.schedule.step_count))
            ts.append(t)
            out = self.forward_batch(batch, t)
            parts = {}
            scene_loss = loss_total(out["renders"], out["alphas"], out["targets"], out["masks"],
                                    cfg.perceptual_weight, self.perceptual, parts)
            loss = loss + scene_loss / len(batches)
            for k in parts_sum:
                parts_sum[k] += parts[k] / len(batches)
            mses += [float(torch.mean((r.detach() - tg) ** 2)) for r, tg in zip(out["renders"], out["targets"])]
        total = float(loss.detach())
        metrics = {"step": self.step, "loss": total, **parts_sum,
                   "psnr": float(np.mean([psnr_value(m) for m in mses])), "t": ts[0],
                   "lr": self.optimizer.param_groups[0]["lr"]}
        if not math.isfinite(total):
            log.warning("non-finite loss at step %d; update skipped", self.step)
            self.optimizer.zero_grad(set_to_none=True)
            self._micro = 0
            metrics["aborted"] = True
            return metrics
        (loss / cfg.grad_accum).backward()
        self._micro += 1
        if self._micro == cfg.grad_accum:
            if cfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.max_grad_norm)
            self.optimizer.step()
            self.optimizer.zero_grad(set_to_none=True)
            self.lr_schedule.step()
            self._micro = 0
            self.step += 1
        return metrics


def resample_scene(sample: SceneSample, resolution: int) -> SceneSample:
    """Re-render a scene's ground truth at another resolution with the same poses."""
    from novelgs.data import render_views

    if sample.cameras[0].resolution == (resolution, resolution):
        return sample
    if sample.gaussians is None:
        raise ValueError(f"{sample.scene_id}: no ground-truth Gaussians to re-render from")
    cameras = [c.with_resolution((resolution, resolution)) for c in sample.cameras]
    images, masks = render_views(sample.gaussians, cameras)
    return SceneSample(sample.scene_id, images, masks, cameras, sample.gaussians)


def train(config: TrainConfig, scenes: Sequence[SceneSample], model: Denoiser | None = None,
          out_dir: str | Path | None = None, perceptual: PerceptualFn | None = None,
          callback: Callable[[dict], None] | None = None) -> tuple[Denoiser, list[dict]]:
    """Run every stage in ``config.stages``, warm-starting each from the last.

    Metrics go to ``out_dir/metrics.jsonl`` and checkpoints to
    ``out_dir/checkpoint_<step>.pt`` plus ``out_dir/checkpoint.pt`` at the end.
    """
    torch.manual_seed(config.seed)
    model = model or Denoiser(config.model)
    trainer = Trainer(model, config, perceptual=perceptual)
    history = []
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "metrics.jsonl", "w")
    try:
        for stage_index, stage in enumerate(config.stages):
            if stage_index:
                trainer.set_stage(stage)
            stage_scenes = [resample_scene(s, stage.resolution) for s in scenes]
            start = trainer.step
            while trainer.step - start < stage.steps:
                metrics = trainer.train_step(trainer.draw_batch(stage_scenes))
                metrics["stage"] = stage_index
                history.append(metrics)
                if log_file and metrics["step"] % config.log_every == 0:
                    log_file.write(json.dumps({k: metrics[k] for k in
                                               ("step", "stage", "loss", "loss_img", "loss_mask", "psnr")}) + "\n")
                if callback:
                    callback(metrics)
                if out_dir is not None and config.checkpoint_every and trainer.step % config.checkpoint_every == 0 \
                        and trainer._micro == 0 and trainer.step > start:
                    save_checkpoint(out_dir / f"checkpoint_{trainer.step}.pt", model, trainer.schedule)
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.pt", model, trainer.schedule,
                            extra={"train_config": config.to_dict()})
    finally:
        if log_file:
            log_file.close()
    return model, history
