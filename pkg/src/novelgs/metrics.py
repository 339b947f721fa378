"""Image metrics and the orbit evaluation protocol."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from novelgs.data import SceneSample
from novelgs.gaussians import GaussianSet
from novelgs.geometry import RigidTransform, normalization_transform
from novelgs.render import render_reference

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = np.array([0.299, 0.587, 0.114])

# view-index defaults for count-style protocols; the top-ring indices 0, 3, 6, 9
# sweep the front half of the 21-view orbit and 15 sits behind them
DEFAULT_CLEAN_ORDER = (0, 3, 6, 9, 12, 18)
DEFAULT_NOISY_ORDER = (15, 18, 12, 10)


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(pred, target, cap: float = PSNR_CAP) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1], capped at ``cap`` dB."""
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0:
        return cap
    return min(cap, -10.0 * math.log10(mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(image, kernel.size, axis=0) @ kernel
    return sliding_window_view(rows, kernel.size, axis=1) @ kernel


def to_gray(image: np.ndarray) -> np.ndarray:
    image = _as_array(image)
    if image.ndim == 3:
        if image.shape[-1] != 3:
            raise ValueError("color images must have 3 channels")
        return image @ LUMA
    if image.ndim != 2:
        raise ValueError("expected an H×W or H×W×3 image")
    return image


def ssim(pred, target, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, data_range: float = 1.0) -> float:
    """Mean structural similarity on luma with an 11-tap Gaussian window (valid region only)."""
    x, y = to_gray(pred), to_gray(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} is smaller than the {window}-pixel window")
    k = _gaussian_window(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(x, k), _filter_valid(y, k)
    var_x = _filter_valid(x * x, k) - mu_x ** 2
    var_y = _filter_valid(y * y, k) - mu_y ** 2
    cov = _filter_valid(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class EvalProtocol:
    clean_indices: tuple[int, ...] = (0, 3, 6, 9)
    noisy_indices: tuple[int, ...] = (15,)
    steps: int = 50
    seed: int = 0
    style: str = "count"  # "count" -> NCV/NNV columns, "index" -> ICV/INV columns
    name: str = ""

    def __post_init__(self):
        if not self.clean_indices:
            raise ValueError("a protocol needs at least one clean view")
        if set(self.clean_indices) & set(self.noisy_indices):
            raise ValueError("a view cannot be both clean and noisy")
        if self.style not in ("count", "index"):
            raise ValueError("style must be 'count' or 'index'")

    @classmethod
    def from_counts(cls, ncv: int, nnv: int, steps: int = 50, seed: int = 0) -> "EvalProtocol":
        if not 1 <= ncv <= len(DEFAULT_CLEAN_ORDER) or not 0 <= nnv <= len(DEFAULT_NOISY_ORDER):
            raise ValueError(f"unsupported view counts ncv={ncv}, nnv={nnv}")
        noisy = DEFAULT_NOISY_ORDER[:nnv]
        clean = tuple(i for i in DEFAULT_CLEAN_ORDER if i not in noisy)[:ncv]
        return cls(clean, noisy, steps, seed, "count", f"ncv{ncv}nnv{nnv}")

    @classmethod
    def parse(cls, text: str, steps: int = 50, seed: int = 0) -> "EvalProtocol":
        """``ncv4nnv1`` (counts) or ``icv0,3,6,9inv15`` (indices; ``inv`` may be empty)."""
        m = re.fullmatch(r"ncv(\d+)nnv(\d+)", text)
        if m:
            return cls.from_counts(int(m[1]), int(m[2]), steps, seed)
        m = re.fullmatch(r"icv([\d,]+)inv([\d,]*)", text)
        if m:
            clean = tuple(int(v) for v in m[1].split(",") if v)
            noisy = tuple(int(v) for v in m[2].split(",") if v)
            return cls(clean, noisy, steps, seed, "index", text)
        raise ValueError(f"unrecognized protocol {text!r}")

    def columns(self) -> tuple[str, str]:
        if self.style == "count":
            return str(len(self.clean_indices)), str(len(self.noisy_indices))
        return ",".join(map(str, self.clean_indices)), ",".join(map(str, self.noisy_indices)) or "-"

    def headers(self) -> tuple[str, str]:
        return ("NCV", "NNV") if self.style == "count" else ("ICV", "INV")


class Reconstructor(Protocol):
    def __call__(self, sample: SceneSample, clean: Sequence[int], noisy: Sequence[int], steps: int,
                 seed: int) -> tuple[GaussianSet, RigidTransform]:
        """Return Gaussians and the world-to-frame transform they live in."""


class DenoiserReconstructor:
    """Runs the sampler in the frame normalized to the first clean view."""

    def __init__(self, model, schedule=None, fixed_noise: bool = False):
        self.model = model
        self.schedule = schedule
        self.fixed_noise = fixed_noise

    def __call__(self, sample, clean, noisy, steps, seed):
        from novelgs.diffusion import sample as run_sampler

        ids = list(clean) + list(noisy)
        cams = [sample.cameras[i] for i in ids]
        transform = normalization_transform(cams, 0)
        normalized = [transform.apply_camera(c) for c in cams]
        gaussians = run_sampler(self.model, sample.images[list(clean)], normalized,
                                list(range(len(clean), len(ids))), steps, seed, self.schedule,
                                fixed_noise=self.fixed_noise)
        return gaussians, transform


class GroundTruthReconstructor:
    """Oracle that returns the scene's own Gaussians (upper bound of the protocol)."""

    def __call__(self, sample, clean, noisy, steps, seed):
        if sample.gaussians is None:
            raise ValueError(f"{sample.scene_id}: no ground-truth Gaussians")
        return sample.gaussians, RigidTransform()


@dataclass
class EvalReport:
    protocol: dict
    rows: list[dict] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    @property
    def aggregate(self) -> dict:
        if not self.rows:
            return {"psnr": float("nan"), "ssim": float("nan"), "lpips": None}
        out = {k: float(np.mean([r[k] for r in self.rows])) for k in ("psnr", "ssim")}
        lp = [r["lpips"] for r in self.rows]
        out["lpips"] = None if any(v is None for v in lp) else float(np.mean(lp))
        return out

    def to_json(self) -> str:
        payload = {"protocol": self.protocol, "scenes": self.rows, "skipped": self.skipped,
                   "aggregate": self.aggregate}
        return json.dumps(payload, indent=1, sort_keys=True)

    def table_row(self) -> tuple[str, ...]:
        p = EvalProtocol(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.protocol.items()})
        agg = self.aggregate
        lp = "n/a" if agg["lpips"] is None else f"{agg['lpips']:.3f}"
        return (*p.columns(), f"{agg['psnr']:.3f}", f"{agg['ssim']:.3f}", lp)

    def headers(self) -> tuple[str, ...]:
        p = EvalProtocol(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.protocol.items()})
        return (*p.headers(), "PSNR↑", "SSIM↑", "LPIPS↓")

    def to_table(self, per_scene: bool = False) -> str:
        return format_table([self], per_scene)


def format_table(reports: Sequence[EvalReport], per_scene: bool = False) -> str:
    """Aligned columns, one row per report, in the layout of the ablation tables."""
    header = reports[0].headers()
    rows = [r.table_row() for r in reports]
    if per_scene:
        for rep in reports:
            for row in rep.rows:
                lp = "n/a" if row["lpips"] is None else f"{row['lpips']:.3f}"
                rows.append((row["scene"], "", f"{row['psnr']:.3f}", f"{row['ssim']:.3f}", lp))
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    sep = "-" * len(fmt(header))
    return "\n".join([fmt(header), sep, *(fmt(r) for r in rows)]) + "\n"


def evaluate(model: Reconstructor, eval_scenes: Sequence[SceneSample], protocol: EvalProtocol,
             lpips: Callable | None = None, image_hook: Callable | None = None) -> EvalReport:
    """Reconstruct each scene from the protocol's views and score every orbit view.

    Targets are rendered from the ground truth with the reference renderer
    when available (stored images otherwise); predictions use the same
    renderer so both sides share one rasterizer.
    """
    report = EvalReport(protocol=asdict(protocol))
    needed = max(protocol.clean_indices + protocol.noisy_indices)
    for sample in eval_scenes:
        if sample.view_count <= needed:
            report.skipped.append({"scene": sample.scene_id,
                                   "reason": f"needs {needed + 1} views, has {sample.view_count}"})
            continue
        gaussians, transform = model(sample, protocol.clean_indices, protocol.noisy_indices,
                                     protocol.steps, protocol.seed)
        psnrs, ssims, lps, preds = [], [], [], []
        for k, cam in enumerate(sample.cameras):
            if sample.gaussians is not None:
                target, _ = render_reference(sample.gaussians, cam)
            else:
                target = sample.images[k]
            pred, _ = render_reference(gaussians, transform.apply_camera(cam))
            psnrs.append(psnr(pred, target))
            ssims.append(ssim(pred, target))
            if lpips is not None:
                lps.append(float(lpips(torch.from_numpy(pred), torch.from_numpy(target))))
            preds.append(pred)
        if image_hook is not None:
            image_hook(sample, np.stack(preds))
        report.rows.append({
            "scene": sample.scene_id,
            "psnr": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims)),
            "lpips": float(np.mean(lps)) if lpips is not None else None,
            "view_psnr": [float(v) for v in psnrs],
            "view_ssim": [float(v) for v in ssims],
        })
    return report
