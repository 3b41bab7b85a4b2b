"""Command-line interface.

Subcommands cover the whole pipeline: scene generation, the two training
stages, sampling, evaluation, parameter sweeps, and slice rendering.  Every
command takes explicit seeds; repeated runs with identical flags write
byte-identical outputs, and where a --workers flag exists the results do not
depend on the worker count.  Exit codes: 0 success, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import re
import sys
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


class UsageError(ValueError):
    pass


def _build_parser() -> _Parser:
    parser = _Parser(prog="voxdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a scene dataset")
    p.add_argument("--spec", required=True, help="scene spec JSON file")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, required=True, help="first scene seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--flip", type=float, default=0.0, help="label flip rate")
    p.add_argument("--dropout", type=float, default=0.0, help="occupied-voxel dropout rate")
    p.add_argument("--rays", type=int, default=256, help="azimuth ray count")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train-baseline", help="train the observation classifier")
    p.add_argument("--config", required=True, help="baseline config JSON")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--curve", help="loss curve CSV path")

    p = sub.add_parser("train-diffusion", help="train a diffusion denoiser")
    p.add_argument("--config", required=True, help="train config JSON")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--baseline", required=True, help="frozen classifier checkpoint")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--curve", help="loss curve CSV path")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int,
                   help="pause at this absolute step with a resumable checkpoint")

    p = sub.add_parser("sample", help="sample completions for one observation")
    p.add_argument("--ckpt", required=True, help="diffusion checkpoint")
    p.add_argument("--scene", required=True, help="observation .voxg file")
    p.add_argument("--steps", type=int, default=10, help="denoising steps")
    p.add_argument("--cfg-scale", type=float, default=3.5, help="classifier-free scale")
    p.add_argument("--cg-scale", type=float, default=0.0,
                   help="classifier-guidance scale (continuous path only)")
    p.add_argument("--n-samples", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="pooled IoU of predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of scene_NNNN.voxg predictions")
    p.add_argument("--gt", required=True, help="dataset directory (or plain grid directory)")
    p.add_argument("--masks", required=True, help="directory of visibility masks")
    p.add_argument("--out", required=True, help="report base path (.csv/.json appended)")
    p.add_argument("--vis-prob", help="dataset directory whose masks define visibility bins")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("sweep", help="evaluate a checkpoint over a parameter grid")
    p.add_argument("--config", required=True, help="sweep config JSON")
    p.add_argument("--param", required=True, choices=("cfg-scale", "steps"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("render-slices", help="write PNG slices of a grid")
    p.add_argument("--grid", required=True, help=".voxg file")
    p.add_argument("--axis", default="z", choices=("x", "y", "z"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scale", type=int, default=1, help="integer pixel magnification")
    return parser


def _positive(value: int, name: str) -> int:
    if value < 1:
        raise UsageError(f"{name} must be >= 1")
    return value


def _cmd_gen_data(args) -> None:
    from .grids import SceneSpec
    from .io import read_json
    from .training import make_dataset

    _positive(args.n, "--n")
    _positive(args.workers, "--workers")
    spec = SceneSpec.from_dict(read_json(args.spec))
    make_dataset(spec, args.n, args.seed, args.flip, args.dropout, args.out,
                 rays_per_axis=args.rays, workers=args.workers)
    print(f"wrote {args.n} scenes to {args.out}")


def _cmd_train_baseline(args) -> None:
    from .io import read_json
    from .training import BaselineConfig, Dataset, train_baseline

    config = BaselineConfig.from_dict(read_json(args.config))
    dataset = Dataset.from_dir(args.data)
    path = train_baseline(config, dataset, args.out, args.curve)
    print(f"wrote checkpoint {path}")


def _cmd_train_diffusion(args) -> None:
    from .io import read_json
    from .training import Dataset, TrainConfig, train_diffusion

    config = TrainConfig.from_dict(read_json(args.config))
    dataset = Dataset.from_dir(args.data)
    path = train_diffusion(config, dataset, args.baseline, args.out, args.curve,
                           resume_from=args.resume, stop_after=args.stop_after)
    print(f"wrote checkpoint {path}")


def _cmd_sample(args) -> None:
    from .io import read_grid, write_grid, write_json
    from .training import sample_from_checkpoint

    _positive(args.n_samples, "--n-samples")
    _positive(args.steps, "--steps")
    obs = read_grid(args.scene)
    grids = sample_from_checkpoint(args.ckpt, obs, num_steps=args.steps,
                                   guidance_scale=args.cfg_scale, seed=args.seed,
                                   num_samples=args.n_samples, cg_scale=args.cg_scale)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, grid in enumerate(grids):
        write_grid(out_dir / f"sample_{i:03d}.voxg", grid)
    write_json(out_dir / "sample_meta.json", {
        "checkpoint": str(args.ckpt), "scene": str(args.scene), "steps": args.steps,
        "cfg_scale": args.cfg_scale, "cg_scale": args.cg_scale, "seed": args.seed,
        "n_samples": args.n_samples,
    })
    print(f"wrote {len(grids)} samples to {out_dir}")


_SCENE_INDEX = re.compile(r"(\d{4})")


def _indexed_files(directory: Path, suffix: str) -> dict[int, Path]:
    out = {}
    for path in sorted(directory.glob(f"*{suffix}")):
        m = _SCENE_INDEX.search(path.name)
        if m:
            out.setdefault(int(m.group(1)), path)
    return out


def _cmd_eval(args) -> None:
    from .io import read_grid, read_mask
    from .metrics import IoUAccumulator, masked_regions, save_reports, visibility_probability

    _positive(args.workers, "--workers")
    pred_files = _indexed_files(Path(args.pred), ".voxg")
    if not pred_files:
        raise UsageError(f"no predictions found in {args.pred}")
    gt_files = _indexed_files(Path(args.gt), ".gt.voxg") or _indexed_files(Path(args.gt), ".voxg")
    mask_files = _indexed_files(Path(args.masks), ".voxm")
    vis_prob = None
    if args.vis_prob:
        prob_masks = _indexed_files(Path(args.vis_prob), ".voxm")
        vis_prob = visibility_probability([read_mask(p) for _, p in sorted(prob_masks.items())])
    accs: dict[str, IoUAccumulator] = {}
    num_classes = None
    sensor = _dataset_sensor(args.gt) or _dataset_sensor(args.masks)
    for index in sorted(pred_files):
        if index not in gt_files or index not in mask_files:
            raise UsageError(f"scene {index:04d} missing ground truth or mask")
        pred = read_grid(pred_files[index])
        gt = read_grid(gt_files[index])
        mask = read_mask(mask_files[index])
        if num_classes is None:
            num_classes = gt.num_classes
        regions = {"all": np.ones(gt.dims, dtype=bool)}
        if sensor is not None:
            regions.update(masked_regions(mask, sensor, vis_prob=vis_prob))
        else:
            regions["invisible"] = mask.flags == 0
        for name, region in regions.items():
            accs.setdefault(name, IoUAccumulator(num_classes)).update(
                pred.labels, gt.labels, region)
    reports = {name: acc.result() for name, acc in accs.items()}
    save_reports(reports, args.out)
    overall = reports["all"].miou
    print(f"evaluated {len(pred_files)} scenes; mIoU = {overall:.4f}")


def _dataset_sensor(directory: str) -> tuple[int, int, int] | None:
    from .io import read_json

    manifest = Path(directory) / "manifest.json"
    if manifest.exists():
        spec = read_json(manifest).get("scene_spec")
        if spec and "sensor" in spec:
            return tuple(spec["sensor"])
    return None


def _cmd_sweep(args) -> None:
    from .io import read_grid, read_json
    from .metrics import IoUAccumulator
    from .training import Dataset, sample_from_checkpoint

    config = read_json(args.config)
    for key in ("checkpoint", "data"):
        if key not in config:
            raise UsageError(f"sweep config missing required field {key!r}")
    try:
        values = [float(v) for v in args.values.split(",") if v != ""]
    except ValueError as exc:
        raise UsageError(f"bad --values list: {exc}") from None
    if not values:
        raise UsageError("--values must name at least one value")
    dataset = Dataset.from_dir(config["data"])
    n_scenes = int(config.get("n_scenes", len(dataset)))
    seed = int(config.get("seed", 0))
    mode = config.get("mode", "cfg")
    if mode not in ("cfg", "cg"):
        raise UsageError("sweep config field 'mode' must be 'cfg' or 'cg'")
    rows = []
    for value in values:
        steps = int(value) if args.param == "steps" else int(config.get("steps", 10))
        if args.param == "cfg-scale":
            cfg_scale = 0.0 if mode == "cg" else float(value)
            cg_scale = float(value) if mode == "cg" else float(config.get("cg_scale", 0.0))
        else:
            cfg_scale = float(config.get("cfg_scale", 3.5))
            cg_scale = float(config.get("cg_scale", 0.0))
        acc = IoUAccumulator(dataset.num_classes)
        for i in range(n_scenes):
            grids = sample_from_checkpoint(config["checkpoint"], dataset.obs(i),
                                           num_steps=steps, guidance_scale=cfg_scale,
                                           seed=seed + i, num_samples=1, cg_scale=cg_scale)
            acc.update(grids[0].labels, dataset.gt(i).labels)
        rows.append((value, acc.result().miou))
        print(f"{args.param} = {value}: mIoU = {rows[-1][1]:.4f}")
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([args.param.replace("-", "_"), "miou"])
        for value, miou in rows:
            writer.writerow([f"{value:g}", f"{miou:.6f}"])


def _cmd_render_slices(args) -> None:
    from .io import read_grid
    from .render import render_slices

    _positive(args.scale, "--scale")
    paths = render_slices(read_grid(args.grid), args.axis, args.out, args.scale)
    print(f"wrote {len(paths)} slices to {args.out}")


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-baseline": _cmd_train_baseline,
    "train-diffusion": _cmd_train_diffusion,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "render-slices": _cmd_render_slices,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"voxdiff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"voxdiff {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
