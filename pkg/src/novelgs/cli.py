"""Command-line entry points: ``novelgs <command> [flags]``.

Exit status is 0 on success, 1 when a command fails at runtime (including
rejected inputs) and 2 on usage errors. Every command takes a single
``--seed`` and appends a run record to ``manifest.jsonl`` in its output
directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

import novelgs
from novelgs.data import (
    EVAL_AZIMUTHS,
    EVAL_ELEVATIONS,
    DEFAULT_FOV_DEG,
    DEFAULT_RADIUS,
    SceneSpec,
    generate_scene,
    load_split,
    make_scene,
    read_scene,
    render_orbit_sample,
    to_uint8,
    write_dataset_manifest,
    write_scene,
)
from novelgs.gaussians import GaussianSet, load_nvgs, save_nvgs
from novelgs.geometry import focal_from_fov, normalization_transform, orbit_cameras
from novelgs.metrics import DenoiserReconstructor, EvalProtocol, GroundTruthReconstructor, evaluate, format_table
from novelgs.render import default_backend, render_reference

log = logging.getLogger("novelgs")

MANIFEST_NAME = "manifest.jsonl"
SH_C0 = 0.28209479177387814


class CommandError(Exception):
    """A rejected precondition; reported on stderr with exit status 1."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    code_version: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)

    def append_to(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_NAME
        with open(path, "a") as fh:
            fh.write(json.dumps(asdict(self), sort_keys=True) + "\n")
        return path


def code_version() -> str:
    return f"novelgs {novelgs.__version__}; torch {torch.__version__}; numpy {np.__version__}; " \
           f"render {default_backend()}; python {platform.python_version()}"


def _index_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()] if text else []
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated view indices, got {text!r}") from None


def _resolved_config(args: argparse.Namespace) -> dict:
    skip = {"func", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def _finish(args, out_dir: Path, inputs: Sequence, outputs: Sequence, started: float) -> None:
    manifest = RunManifest(
        command=args.command,
        config=_resolved_config(args),
        seed=args.seed,
        code_version=code_version(),
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
        wall_clock={"started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
                    "seconds": round(time.time() - started, 3)},
    )
    manifest.append_to(out_dir)


def _save_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def _orbit_layout(frame_count: int) -> tuple[int, tuple[float, ...]]:
    """Three-ring evaluation layout when the count allows it, else one ring at elevation 0."""
    if frame_count % len(EVAL_ELEVATIONS) == 0:
        return frame_count // len(EVAL_ELEVATIONS), EVAL_ELEVATIONS
    return frame_count, (0.0,)


def render_orbit_frames(gaussians: GaussianSet, out_dir: Path, frame_count: int = 21, resolution: int = 64,
                        radius: float = DEFAULT_RADIUS, fov_deg: float = DEFAULT_FOV_DEG) -> list[Path]:
    """Write ``frame_XXX.png`` along the orbit; 21 frames reproduce the evaluation trajectory."""
    if frame_count < 1:
        raise CommandError("frame count must be positive")
    if gaussians.count == 0:
        log.warning("the Gaussian set is empty; frames will be black")
    azimuths, elevations = _orbit_layout(frame_count)
    cameras = orbit_cameras(azimuths, elevations, radius, (resolution, resolution),
                            focal_from_fov(fov_deg, resolution))
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, cam in enumerate(cameras):
        image, _ = render_reference(gaussians, cam)
        path = out_dir / f"frame_{k:03d}.png"
        _save_png(path, image)
        paths.append(path)
    return paths


def write_ply(path: Path, gaussians: GaussianSet) -> None:
    """Binary little-endian PLY with the property layout common 3DGS viewers expect."""
    arr = gaussians.numpy()
    n = len(arr["opacities"])
    op = np.clip(arr["opacities"], 1e-6, 1 - 1e-6)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    columns = np.concatenate([
        arr["centers"], np.zeros((n, 3)), (arr["colors"] - 0.5) / SH_C0, np.log(op / (1 - op))[:, None],
        np.log(arr["scales"]), arr["rotations"],
    ], axis=1).astype("<f4")
    header = "ply\nformat binary_little_endian 1.0\n" + f"element vertex {n}\n" + \
             "".join(f"property float {name}\n" for name in names) + "end_header\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(columns.tobytes())


def _load_gaussians(path: Path) -> GaussianSet:
    if path.is_dir():
        path = path / "scene.nvgs"
    if not path.exists():
        raise CommandError(f"{path}: no such Gaussians file")
    return load_nvgs(path)


def _protocol_from_args(args) -> EvalProtocol:
    if args.clean is not None:
        return EvalProtocol(tuple(args.clean), tuple(args.noisy or ()), args.steps, args.seed, "index",
                            f"icv{','.join(map(str, args.clean))}inv{','.join(map(str, args.noisy or ()))}")
    if args.ncv is not None:
        return EvalProtocol.from_counts(args.ncv, args.nnv or 0, args.steps, args.seed)
    return EvalProtocol.parse(args.protocol, args.steps, args.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> tuple[list, list]:
    out = args.out
    if (out / "dataset.json").exists():
        raise CommandError(f"{out} already holds a dataset; choose a new directory")
    rng = np.random.default_rng(args.seed)
    seeds = rng.choice(2 ** 31, size=args.scenes + args.eval_scenes, replace=False)
    train_ids, eval_ids = [], []
    for k in range(args.scenes):
        sample = make_scene(int(seeds[k]), args.views, args.res, args.radius)
        sample.scene_id = f"train_{k:05d}"
        write_scene(out, sample)
        train_ids.append(sample.scene_id)
    for k in range(args.eval_scenes):
        scene = generate_scene(SceneSpec(seed=int(seeds[args.scenes + k])))
        sample = render_orbit_sample(scene, args.res, args.radius, scene_id=f"eval_{k:05d}")
        write_scene(out, sample)
        eval_ids.append(sample.scene_id)
    write_dataset_manifest(out, train_ids, eval_ids, {"views": args.views, "resolution": args.res,
                                                      "radius": args.radius, "seed": args.seed})
    print(f"wrote {len(train_ids)} training and {len(eval_ids)} evaluation scenes to {out}")
    return [], [out / "dataset.json"]


def cmd_train(args) -> tuple[list, list]:
    from novelgs.training import StageConfig, TrainConfig, load_perceptual_plugin, train

    record = json.loads(args.config.read_text()) if args.config else {}
    record["seed"] = args.seed
    if args.steps is not None or args.res is not None or args.lr is not None:
        base = TrainConfig(**record).stages[0]
        record["stages"] = [asdict(StageConfig(args.res or base.resolution, args.steps or base.steps,
                                               args.lr or base.lr, base.decay_start))]
    config = TrainConfig(**record)
    scenes = load_split(args.data, "train")
    if not scenes:
        raise CommandError(f"{args.data}: the training split is empty")
    torch.manual_seed(args.seed)
    _, history = train(config, scenes, out_dir=args.out, perceptual=load_perceptual_plugin())
    last = history[-1]
    print(f"trained {last['step'] + 1} steps; final loss {last['loss']:.5f}, psnr {last['psnr']:.2f} dB")
    (args.out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    return [args.data], [args.out / "checkpoint.pt", args.out / "metrics.jsonl"]


def cmd_infer(args) -> tuple[list, list]:
    from novelgs.denoiser import load_checkpoint
    from novelgs.diffusion import sample as run_sampler

    model, _ = load_checkpoint(args.checkpoint)
    scene = read_scene(args.scene)
    protocol = _protocol_from_args(args)
    ids = list(protocol.clean_indices) + list(protocol.noisy_indices)
    if max(ids) >= scene.view_count:
        raise CommandError(f"{args.scene}: view index {max(ids)} out of range for {scene.view_count} views")
    torch.manual_seed(args.seed)
    cams = [scene.cameras[i] for i in ids]
    transform = normalization_transform(cams, 0)
    normalized = [transform.apply_camera(c) for c in cams]
    clean = scene.images[list(protocol.clean_indices)]
    gaussians = run_sampler(model, clean, normalized, list(range(len(protocol.clean_indices), len(ids))),
                            args.steps, args.seed)
    world = gaussians.transformed(transform.inverse())
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "gaussians.nvgs"
    save_nvgs(path, world)
    frames = render_orbit_frames(world, args.out / "orbit", args.frames, args.render_res or scene.cameras[0].width)
    print(f"wrote {world.count} Gaussians to {path} and {len(frames)} orbit frames")
    return [args.checkpoint, args.scene], [path, args.out / "orbit"]


def cmd_eval(args) -> tuple[list, list]:
    scenes = load_split(args.data, args.split)
    if args.ground_truth:
        reconstructor = GroundTruthReconstructor()
        inputs = [args.data]
    else:
        if args.checkpoint is None:
            raise CommandError("eval needs --checkpoint or --ground-truth")
        from novelgs.denoiser import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        reconstructor = DenoiserReconstructor(model)
        inputs = [args.data, args.checkpoint]
    from novelgs.training import load_perceptual_plugin

    lpips = load_perceptual_plugin()
    protocol = _protocol_from_args(args)
    torch.manual_seed(args.seed)
    report = evaluate(reconstructor, scenes, protocol, lpips=lpips)
    args.out.mkdir(parents=True, exist_ok=True)
    name = protocol.name or "protocol"
    report_path = args.out / f"report_{name}.json"
    report_path.write_text(report.to_json())
    table = format_table([report], per_scene=args.per_scene)
    (args.out / f"table_{name}.txt").write_text(table)
    print(table, end="")
    return inputs, [report_path]


def cmd_render_orbit(args) -> tuple[list, list]:
    gaussians = _load_gaussians(args.gaussians)
    frames = render_orbit_frames(gaussians, args.out, args.frames, args.res, args.radius, args.fov)
    print(f"wrote {len(frames)} frames to {args.out}")
    return [args.gaussians], [args.out]


def cmd_export_gaussians(args) -> tuple[list, list]:
    gaussians = _load_gaussians(args.input)
    fmt = args.format or ("ply" if args.output.suffix == ".ply" else "nvgs")
    args.output.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "ply":
        write_ply(args.output, gaussians)
    else:
        save_nvgs(args.output, gaussians)
    print(f"exported {gaussians.count} Gaussians to {args.output} ({fmt})")
    return [args.input], [args.output]


# ---------------------------------------------------------------------------
# parser


def _add_view_selection(p: argparse.ArgumentParser, default_protocol: str = "ncv4nnv1") -> None:
    group = p.add_argument_group("view selection (indices into the 21-view orbit)")
    group.add_argument("--clean", type=_index_list, help="clean view indices, e.g. 0,3,6,9")
    group.add_argument("--noisy", type=_index_list, help="noisy view indices, e.g. 15")
    group.add_argument("--ncv", type=int, help="number of clean views")
    group.add_argument("--nnv", type=int, help="number of noisy views")
    group.add_argument("--protocol", default=default_protocol, help="ncv<k>nnv<j> or icv<i,...>inv<j,...>")
    p.add_argument("--steps", type=int, default=50, help="denoising steps")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="the only source of randomness")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="novelgs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"novelgs {novelgs.__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic multi-view dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scenes", type=int, default=64)
    p.add_argument("--eval-scenes", type=int, default=0, help="scenes rendered on the 21-view orbit")
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the denoiser")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, help="JSON training config")
    p.add_argument("--steps", type=int, help="run a single stage of this many steps")
    p.add_argument("--res", type=int, help="single-stage resolution")
    p.add_argument("--lr", type=float, help="single-stage learning rate")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="reconstruct Gaussians for one scene")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True, help="scene directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--frames", type=int, default=EVAL_AZIMUTHS * len(EVAL_ELEVATIONS))
    p.add_argument("--render-res", type=int)
    _add_view_selection(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score reconstructions on the evaluation orbit")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--ground-truth", action="store_true", help="score the ground-truth Gaussians")
    p.add_argument("--per-scene", action="store_true")
    _add_view_selection(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render-orbit", parents=[common], help="render turntable frames of a Gaussians file")
    p.add_argument("gaussians", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--frames", type=int, default=21)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    p.add_argument("--fov", type=float, default=DEFAULT_FOV_DEG)
    p.set_defaults(func=cmd_render_orbit)

    p = sub.add_parser("export-gaussians", parents=[common], help="copy or convert a Gaussians file")
    p.add_argument("input", type=Path, help=".nvgs file or scene directory")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--format", choices=("nvgs", "ply"))
    p.set_defaults(func=cmd_export_gaussians)
    return parser


def _check_usage(parser: argparse.ArgumentParser, args) -> None:
    if hasattr(args, "clean"):
        if args.clean is not None and args.ncv is not None:
            parser.error("use either --clean/--noisy or --ncv/--nnv, not both")
        if args.noisy is not None and args.clean is None:
            parser.error("--noisy needs --clean")
        if args.nnv is not None and args.ncv is None:
            parser.error("--nnv needs --ncv")
    for name in ("steps", "frames", "scenes", "views", "res"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            parser.error(f"--{name} must be positive")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _check_usage(parser, args)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        inputs, outputs = args.func(args)
    except (CommandError, ValueError, IndexError, FileNotFoundError, RuntimeError, OSError) as exc:
        print(f"novelgs {args.command}: error: {exc}", file=sys.stderr)
        return 1
    out_dir = args.output.parent if args.command == "export-gaussians" else args.out
    _finish(args, out_dir, inputs, outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
