"""Dataset generation and training loops.

Scene datasets live on disk as one file group per scene plus a manifest.
Training is plain Adam with global-norm clipping at batch size >= 1; every
random draw (scene order, timesteps, forward noise, condition dropout) comes
from counter-based streams keyed by the absolute step index, so a run
checkpointed at step n and resumed reproduces the straight run exactly.

The observation classifier trains with cross-entropy on visible voxels only;
diffusion models train on every voxel.  Diffusion conditioning payloads come
from a frozen pre-trained classifier and are precomputed once per scene.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .continuous import forward_sample_gaussian, onehot_relax, sample_latent
from .discrete import forward_sample_discrete, sample_occupancy, training_loss_discrete
from .grids import SceneSpec, VisibilityMask, VoxelGrid, build_observation, compute_visibility, \
    corrupt_labels, generate_scene
from .guidance import ClassifierScorer
from .io import read_grid, read_json, read_mask, load_checkpoint, save_checkpoint, \
    write_grid, write_json, write_mask
from .network import Baseline, Denoiser, condition_payload, init_params, \
    make_latent_predictor, make_x0_predictor
from .rng import stream
from .schedule import NoiseSchedule, make_schedule
from .validation import check_probability, check_positive_int

__all__ = [
    "BaselineConfig",
    "TrainConfig",
    "Dataset",
    "make_dataset",
    "assert_disjoint_seeds",
    "train_baseline",
    "train_diffusion",
    "load_baseline_checkpoint",
    "load_diffusion_checkpoint",
    "sample_from_checkpoint",
]

DEFAULT_RAYS_PER_AXIS = 256


# ---------------------------------------------------------------------------
# datasets


def _scene_filenames(index: int) -> dict[str, str]:
    stem = f"scene_{index:04d}"
    return {
        "gt": f"{stem}.gt.voxg",
        "labels": f"{stem}.labels.voxg",
        "mask": f"{stem}.mask.voxm",
        "obs": f"{stem}.obs.voxg",
    }


def _write_scene(args) -> None:
    out_dir, index, seed, spec_dict, flip_rate, dropout_rate, rays = args
    spec = SceneSpec.from_dict(spec_dict)
    gt = generate_scene(spec, seed)
    mask = compute_visibility(gt, spec.sensor, spec.max_range, rays)
    labels = corrupt_labels(gt, flip_rate, dropout_rate, seed)
    obs = build_observation(gt, mask)
    names = _scene_filenames(index)
    out_dir = Path(out_dir)
    write_grid(out_dir / names["gt"], gt)
    write_grid(out_dir / names["labels"], labels)
    write_mask(out_dir / names["mask"], mask, spec.voxel_size)
    write_grid(out_dir / names["obs"], obs)


def make_dataset(spec: SceneSpec, count: int, seed_start: int, flip_rate: float,
                 dropout_rate: float, out_dir: str | Path, *,
                 rays_per_axis: int = DEFAULT_RAYS_PER_AXIS, workers: int = 1) -> Path:
    """Generate scenes with seeds seed_start..seed_start+count-1 into out_dir.

    Each scene contributes clean labels, annotation-corrupted training
    labels, a visibility mask, and an observation grid.  Every file depends
    only on its own seed, so the worker count never changes the output bytes.
    """
    check_positive_int(count, "count")
    check_probability(flip_rate, "flip_rate")
    check_probability(dropout_rate, "dropout_rate")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(str(out_dir), i, seed_start + i, spec.to_dict(), flip_rate, dropout_rate,
             rays_per_axis) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_write_scene, jobs, chunksize=8))
    else:
        for job in jobs:
            _write_scene(job)
    manifest = {
        "count": count,
        "seed_start": int(seed_start),
        "seeds": [int(seed_start + i) for i in range(count)],
        "scene_spec": spec.to_dict(),
        "num_classes": spec.num_classes,
        "voxel_size": spec.voxel_size,
        "flip_rate": float(flip_rate),
        "dropout_rate": float(dropout_rate),
        "rays_per_axis": int(rays_per_axis),
    }
    write_json(out_dir / "manifest.json", manifest)
    return out_dir


def assert_disjoint_seeds(manifest_a: dict, manifest_b: dict) -> None:
    overlap = set(manifest_a["seeds"]) & set(manifest_b["seeds"])
    if overlap:
        raise ValueError(f"datasets share scene seeds: {sorted(overlap)[:5]}...")


class Dataset:
    """Scene collection backed by a dataset directory or in-memory arrays."""

    def __init__(self, root: Path | None, manifest: dict):
        self.root = Path(root) if root is not None else None
        self.manifest = manifest
        self.spec = (SceneSpec.from_dict(manifest["scene_spec"])
                     if "scene_spec" in manifest else None)
        self.num_classes = int(manifest.get(
            "num_classes", self.spec.num_classes if self.spec else 0))
        self.voxel_size = float(manifest.get(
            "voxel_size", self.spec.voxel_size if self.spec else 1.0))
        self._cache: dict[tuple[str, int], object] = {}

    @classmethod
    def from_dir(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        return cls(root, read_json(root / "manifest.json"))

    @classmethod
    def from_arrays(cls, labels, masks, obs, num_classes: int, voxel_size: float = 1.0,
                    gt=None) -> "Dataset":
        """Wrap parallel per-scene arrays (or grid objects) without touching disk."""
        n = len(labels)
        if len(masks) != n or len(obs) != n or (gt is not None and len(gt) != n):
            raise ValueError("per-scene inputs must have equal lengths")
        ds = cls(None, {"count": n, "num_classes": int(num_classes),
                        "voxel_size": float(voxel_size), "seeds": []})
        for i in range(n):
            lab = labels[i] if isinstance(labels[i], VoxelGrid) else \
                VoxelGrid(np.asarray(labels[i]), voxel_size, num_classes)
            msk = masks[i] if isinstance(masks[i], VisibilityMask) else \
                VisibilityMask(np.asarray(masks[i]))
            ob = obs[i] if isinstance(obs[i], VoxelGrid) else \
                VoxelGrid(np.asarray(obs[i]), voxel_size, num_classes + 1)
            ds._cache[("labels", i)] = lab
            ds._cache[("mask", i)] = msk
            ds._cache[("obs", i)] = ob
            if gt is not None:
                g = gt[i] if isinstance(gt[i], VoxelGrid) else \
                    VoxelGrid(np.asarray(gt[i]), voxel_size, num_classes)
                ds._cache[("gt", i)] = g
        return ds

    def __len__(self) -> int:
        return int(self.manifest["count"])

    def _load(self, part: str, index: int):
        key = (part, index)
        if key not in self._cache:
            if self.root is None:
                raise KeyError(f"in-memory dataset has no {part!r} for scene {index}")
            path = self.root / _scene_filenames(index)[part]
            self._cache[key] = read_mask(path) if part == "mask" else read_grid(path)
        return self._cache[key]

    def gt(self, index: int) -> VoxelGrid:
        return self._load("gt", index)

    def labels(self, index: int) -> VoxelGrid:
        return self._load("labels", index)

    def mask(self, index: int) -> VisibilityMask:
        return self._load("mask", index)

    def obs(self, index: int) -> VoxelGrid:
        return self._load("obs", index)


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class BaselineConfig:
    num_classes: int = 6
    embed_dim: int = 64
    width: int = 64
    depth: int = 3
    feature_dim: int = 64
    total_steps: int = 4000
    batch_size: int = 1
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip: float = 1.0
    log_every: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown baseline config fields: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    """Diffusion training configuration (JSON round-trippable, snake_case keys)."""

    path: str = "discrete"                # "discrete" or "gaussian"
    schedule: str | None = None           # default: cosine for discrete, linear for gaussian
    timesteps: int = 200
    condition: str = "features"           # "labels", "logits", or "features"
    cond_dropout: float = 0.1
    lambda_aux: float = 1e-3
    relax_scale: float = 2.0
    embed_dim: int = 64
    widths: tuple[int, int, int] = (64, 128, 256)
    time_dim: int = 64
    time_hidden: int = 256
    total_steps: int = 20000
    batch_size: int = 1
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    grad_clip: float = 1.0
    checkpoint_every: int = 0             # 0 = final checkpoint only
    log_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.path not in ("discrete", "gaussian"):
            raise ValueError(f"path must be 'discrete' or 'gaussian', got {self.path!r}")
        if self.schedule is None:
            object.__setattr__(self, "schedule", "cosine" if self.path == "discrete" else "linear")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        check_probability(self.cond_dropout, "cond_dropout")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown train config fields: {sorted(extra)}")
        return cls(**d)

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule, self.timesteps)


# ---------------------------------------------------------------------------
# optimizer checkpoint plumbing


def _adam(params, cfg) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate,
                            betas=(cfg.adam_beta1, cfg.adam_beta2))


def _collect_tensors(modules: dict[str, torch.nn.Module],
                     optimizer: torch.optim.Adam | None) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for scope, module in modules.items():
        for name, p in module.named_parameters():
            qname = f"{scope}.{name}"
            tensors[qname] = p.detach().cpu().numpy()
            if optimizer is None:
                continue
            state = optimizer.state.get(p)
            if state:
                tensors[f"adam.exp_avg.{qname}"] = state["exp_avg"].detach().cpu().numpy()
                tensors[f"adam.exp_avg_sq.{qname}"] = state["exp_avg_sq"].detach().cpu().numpy()
                step = state["step"]
                step = float(step.item()) if torch.is_tensor(step) else float(step)
                tensors[f"adam.step.{qname}"] = np.array([step], dtype=np.float32)
    return tensors


def _restore_tensors(tensors: dict[str, np.ndarray], modules: dict[str, torch.nn.Module],
                     optimizer: torch.optim.Adam | None) -> None:
    for scope, module in modules.items():
        for name, p in module.named_parameters():
            qname = f"{scope}.{name}"
            if qname not in tensors:
                raise ValueError(f"checkpoint is missing tensor {qname}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(tensors[qname]).to(p.dtype))
            key = f"adam.exp_avg.{qname}"
            if optimizer is not None and key in tensors:
                optimizer.state[p] = {
                    "step": torch.tensor(float(tensors[f"adam.step.{qname}"][0])),
                    "exp_avg": torch.from_numpy(tensors[key].copy()),
                    "exp_avg_sq": torch.from_numpy(tensors[f"adam.exp_avg_sq.{qname}"].copy()),
                }


class _CurveWriter:
    def __init__(self, path: str | Path | None, log_every: int):
        self.rows: list[tuple[int, float, float]] = []
        self.path = Path(path) if path else None
        self.log_every = max(int(log_every), 1)

    def log(self, step: int, loss: float, lr: float) -> None:
        if step % self.log_every == 0:
            self.rows.append((step, loss, lr))

    def flush(self) -> None:
        if self.path is None:
            return
        with open(self.path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "lr"])
            for step, loss, lr in self.rows:
                writer.writerow([step, f"{loss:.8f}", f"{lr:.8g}"])


# ---------------------------------------------------------------------------
# baseline training


def _flush_denormals() -> None:
    """Flush subnormal floats to zero for the rest of the process.

    A few thousand steps into training, the first moments of rarely-updated
    parameters decay into the float32 subnormal range, and x86 executes
    subnormal arithmetic in microcode -- step time was measured going from
    ~55 ms to ~530 ms without this.  Values below ~1e-38 are far beneath the
    optimizer's epsilon, so flushing does not measurably change training.
    """
    np.finfo(np.float32), np.finfo(np.float64)  # build caches pre-flush, quietly
    torch.set_flush_denormal(True)


def train_baseline(config: BaselineConfig, dataset: Dataset, out_path: str | Path,
                   curve_path: str | Path | None = None) -> Path:
    """Train the observation classifier with cross-entropy on visible voxels."""
    _flush_denormals()
    K = dataset.num_classes
    if config.num_classes != K:
        raise ValueError(f"config num_classes {config.num_classes} != dataset classes {K}")
    model = init_params(Baseline(K, config.embed_dim, config.width, config.depth,
                                 config.feature_dim), config.seed)
    optimizer = _adam(model.parameters(), config)
    curve = _CurveWriter(curve_path, config.log_every)
    n = len(dataset)
    for step in range(config.total_steps):
        order = stream(config.seed, "order", step)
        optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for b in range(config.batch_size):
            i = int(order.integers(0, n))
            obs = torch.from_numpy(dataset.obs(i).labels.astype(np.int64))[None]
            target = torch.from_numpy(dataset.labels(i).labels.astype(np.int64))[None]
            visible = torch.from_numpy(dataset.mask(i).flags.astype(bool))[None]
            logits = model(obs)["logits"]
            loss = torch.nn.functional.cross_entropy(
                logits.permute(0, 2, 3, 4, 1)[visible], target[visible])
            (loss / config.batch_size).backward()
            total += float(loss.detach())
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        curve.log(step, total / config.batch_size, config.learning_rate)
    curve.flush()
    save_checkpoint(out_path, _collect_tensors({"baseline": model}, optimizer),
                    config.to_dict(), config.seed, {"kind": "baseline",
                                                    "step": config.total_steps})
    return Path(out_path)


def load_baseline_checkpoint(path: str | Path) -> tuple[Baseline, BaselineConfig]:
    tensors, header = load_checkpoint(path)
    if header["meta"].get("kind") != "baseline":
        raise ValueError(f"{path} is not a baseline checkpoint")
    config = BaselineConfig.from_dict(header["config"])
    model = Baseline(config.num_classes, config.embed_dim, config.width,
                     config.depth, config.feature_dim)
    _restore_tensors(tensors, {"baseline": model}, None)
    model.eval()
    return model, config


# ---------------------------------------------------------------------------
# diffusion training


def _build_denoiser(config: TrainConfig, num_classes: int, feature_channels: int) -> Denoiser:
    return Denoiser(num_classes, cond_kind=config.condition,
                    mode=config.path, embed_dim=config.embed_dim, widths=config.widths,
                    time_dim=config.time_dim, time_hidden=config.time_hidden,
                    feature_channels=feature_channels)


def _precompute_conditions(baseline: Baseline, dataset: Dataset, kind: str) -> list[np.ndarray]:
    return [condition_payload(baseline, dataset.obs(i).labels, kind) for i in range(len(dataset))]


def train_diffusion(config: TrainConfig, dataset: Dataset, baseline_path: str | Path,
                    out_path: str | Path, curve_path: str | Path | None = None,
                    resume_from: str | Path | None = None,
                    stop_after: int | None = None) -> Path:
    """Train a conditional diffusion denoiser against a frozen classifier's conditions.

    Targets are the (possibly annotation-corrupted) training labels at every
    voxel.  Per-element condition dropout swaps in the learned null condition
    so the model supports classifier-free guidance at sampling time.

    stop_after caps this call at that absolute step and writes a resumable
    checkpoint there, so a long run can proceed as a chain of short processes.
    """
    _flush_denormals()
    K = dataset.num_classes
    schedule = config.make_schedule()
    baseline, baseline_cfg = load_baseline_checkpoint(baseline_path)
    if baseline.num_classes != K:
        raise ValueError("baseline was trained for a different class count")
    conditions = _precompute_conditions(baseline, dataset, config.condition)
    model = init_params(_build_denoiser(config, K, baseline_cfg.feature_dim), config.seed)
    optimizer = _adam(model.parameters(), config)
    start_step = 0
    if resume_from is not None:
        tensors, header = load_checkpoint(resume_from)
        if header["meta"].get("kind") != "diffusion":
            raise ValueError(f"{resume_from} is not a diffusion checkpoint")
        if TrainConfig.from_dict(header["config"]) != config:
            raise ValueError("resume config differs from checkpoint config")
        _restore_tensors(tensors, {"denoiser": model, "baseline": baseline}, optimizer)
        start_step = int(header["meta"]["step"])
    end_step = config.total_steps
    if stop_after is not None:
        end_step = min(int(stop_after), config.total_steps)
        if end_step <= start_step:
            raise ValueError(f"stop_after {stop_after} is not past step {start_step}")
    curve = _CurveWriter(curve_path, config.log_every)
    n = len(dataset)
    relax_cache = [None] * n
    out_path = Path(out_path)

    def save(step: int, path: Path) -> None:
        tensors = _collect_tensors({"denoiser": model, "baseline": baseline}, optimizer)
        meta = {"kind": "diffusion", "step": step,
                "baseline_config": baseline_cfg.to_dict(),
                "num_classes": K, "voxel_size": dataset.voxel_size}
        if dataset.spec is not None:
            meta["scene_spec"] = dataset.spec.to_dict()
        save_checkpoint(path, tensors, config.to_dict(), config.seed, meta)

    for step in range(start_step, end_step):
        order = stream(config.seed, "order", step)
        drops = stream(config.seed, "drop", step)
        times = stream(config.seed, "t", step)
        optimizer.zero_grad(set_to_none=True)
        total = 0.0
        for b in range(config.batch_size):
            i = int(order.integers(0, n))
            t = int(times.integers(1, config.timesteps + 1))
            dropped = bool(drops.random() < config.cond_dropout)
            labels = dataset.labels(i)
            cond = None if dropped else torch.from_numpy(conditions[i])[None]
            if config.path == "discrete":
                x_t = forward_sample_discrete(labels, t, schedule,
                                              stream(config.seed, "xt", step, b))
                logits = model(torch.from_numpy(x_t.labels.astype(np.int64))[None], t, cond)
                loss = training_loss_discrete(labels, x_t, t,
                                              logits[0].permute(1, 2, 3, 0),
                                              schedule, config.lambda_aux)
            else:
                if relax_cache[i] is None:
                    relax_cache[i] = onehot_relax(labels, config.relax_scale).astype(np.float32)
                z0 = relax_cache[i]
                z_t = forward_sample_gaussian(z0, t, schedule,
                                              stream(config.seed, "xt", step, b)).astype(np.float32)
                pred = model(torch.from_numpy(z_t)[None], t, cond)
                loss = torch.mean((pred[0] - torch.from_numpy(z0)) ** 2)
            (loss / config.batch_size).backward()
            total += float(loss.detach())
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        curve.log(step, total / config.batch_size, config.learning_rate)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0 \
                and step + 1 < config.total_steps:
            save(step + 1, out_path.with_suffix(f".step{step + 1}.ckpt"))
            curve.flush()
    curve.flush()
    save(end_step, out_path)
    return out_path


def load_diffusion_checkpoint(path: str | Path):
    """Rebuild (denoiser, baseline, config, schedule, meta) from a checkpoint."""
    tensors, header = load_checkpoint(path)
    meta = header["meta"]
    if meta.get("kind") != "diffusion":
        raise ValueError(f"{path} is not a diffusion checkpoint")
    config = TrainConfig.from_dict(header["config"])
    baseline_cfg = BaselineConfig.from_dict(meta["baseline_config"])
    baseline = Baseline(baseline_cfg.num_classes, baseline_cfg.embed_dim, baseline_cfg.width,
                        baseline_cfg.depth, baseline_cfg.feature_dim)
    denoiser = _build_denoiser(config, int(meta["num_classes"]), baseline_cfg.feature_dim)
    _restore_tensors(tensors, {"denoiser": denoiser, "baseline": baseline}, None)
    denoiser.eval()
    baseline.eval()
    return denoiser, baseline, config, config.make_schedule(), meta


def sample_from_checkpoint(path: str | Path, obs: VoxelGrid, *, num_steps: int = 10,
                           guidance_scale: float = 3.5, seed: int = 0,
                           num_samples: int = 1, cg_scale: float = 0.0) -> list[VoxelGrid]:
    """Draw occupancy samples conditioned on one observation grid.

    Positive cg_scale enables classifier guidance (continuous path only): the
    conditional prediction is used as-is (no classifier-free extrapolation)
    and reverse-step means are shifted along the classifier gradient toward
    the classifier's own labeling of the observation.
    """
    denoiser, baseline, config, schedule, meta = load_diffusion_checkpoint(path)
    payload = condition_payload(baseline, obs.labels, config.condition)
    dims = obs.dims
    K = int(meta["num_classes"])
    voxel_size = float(meta["voxel_size"])
    out = []
    for s in range(num_samples):
        if config.path == "discrete":
            if cg_scale > 0.0:
                raise ValueError("classifier guidance is not defined on the discrete path")
            grid = sample_occupancy(make_x0_predictor(denoiser), payload, schedule,
                                    num_steps, guidance_scale, stream_seed(seed, s),
                                    dims=dims, num_classes=K, voxel_size=voxel_size)
        else:
            scorer = None
            cfg_scale = guidance_scale
            if cg_scale > 0.0:
                target = condition_payload(baseline, obs.labels, "labels")
                scorer = ClassifierScorer(baseline, target)
                cfg_scale = 0.0
            grid = sample_latent(make_latent_predictor(denoiser), payload, schedule,
                                 num_steps, cfg_scale, stream_seed(seed, s),
                                 dims=dims, num_classes=K, voxel_size=voxel_size,
                                 relax_scale=config.relax_scale,
                                 cg_scorer=scorer, cg_scale=cg_scale)
        out.append(grid)
    return out


def stream_seed(seed: int, index: int) -> int:
    """Stable derived integer seed for the index-th sample of a run."""
    return int(stream(seed, "sample", index).integers(0, 2**63 - 1))
