"""Estimator-style wrappers with the scikit-learn fit/predict contract.

Both estimators consume stacks of observation grids X of shape (N, X, Y, Z)
with integer labels in [0, K] (K is the UNKNOWN token) and targets y of shape
(N, X, Y, Z) with labels in [0, K).  Constructor arguments are stored
verbatim so get_params/set_params round-trip, and all fitted state lives in
trailing-underscore attributes.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .grids import VoxelGrid
from .network import condition_payload
from .training import BaselineConfig, Dataset, TrainConfig, load_baseline_checkpoint, \
    sample_from_checkpoint, train_baseline, train_diffusion

__all__ = ["BaselineOccupancyClassifier", "DiffusionOccupancyModel"]


def _check_arrays(X, y, visibility, num_classes: int):
    X = np.asarray(X)
    y = np.asarray(y)
    if X.ndim != 4 or y.ndim != 4:
        raise ValueError(f"X and y must be (N, X, Y, Z) label stacks, got {X.shape} and {y.shape}")
    if X.shape != y.shape:
        raise ValueError(f"X shape {X.shape} != y shape {y.shape}")
    if X.max(initial=0) > num_classes or y.max(initial=0) >= num_classes:
        raise ValueError("labels out of range for num_classes")
    if visibility is None:
        visibility = np.ones_like(y, dtype=np.uint8)
    else:
        visibility = np.asarray(visibility).astype(np.uint8)
        if visibility.shape != y.shape:
            raise ValueError(f"visibility shape {visibility.shape} != y shape {y.shape}")
    return X.astype(np.uint8), y.astype(np.uint8), visibility


class BaselineOccupancyClassifier(BaseEstimator):
    """Per-voxel semantic completion by a feed-forward observation classifier."""

    def __init__(self, num_classes: int = 6, embed_dim: int = 64, width: int = 64,
                 depth: int = 3, feature_dim: int = 64, total_steps: int = 4000,
                 batch_size: int = 1, learning_rate: float = 3e-4, grad_clip: float = 1.0,
                 seed: int = 0, work_dir: str | None = None):
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.width = width
        self.depth = depth
        self.feature_dim = feature_dim
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.grad_clip = grad_clip
        self.seed = seed
        self.work_dir = work_dir

    def _config(self) -> BaselineConfig:
        return BaselineConfig(num_classes=self.num_classes, embed_dim=self.embed_dim,
                              width=self.width, depth=self.depth, feature_dim=self.feature_dim,
                              total_steps=self.total_steps, batch_size=self.batch_size,
                              learning_rate=self.learning_rate, grad_clip=self.grad_clip,
                              seed=self.seed)

    def fit(self, X, y, visibility=None) -> "BaselineOccupancyClassifier":
        """Train on visible voxels of (X, y); visibility defaults to all-visible."""
        X, y, visibility = _check_arrays(X, y, visibility, self.num_classes)
        dataset = Dataset.from_arrays(list(y), list(visibility), list(X), self.num_classes)
        work = Path(self.work_dir) if self.work_dir else Path(tempfile.mkdtemp(prefix="voxdiff_"))
        work.mkdir(parents=True, exist_ok=True)
        self.checkpoint_path_ = str(train_baseline(self._config(), dataset, work / "baseline.ckpt"))
        self.model_, _ = load_baseline_checkpoint(self.checkpoint_path_)
        return self

    def _forward(self, X) -> dict[str, torch.Tensor]:
        check_is_fitted(self, "model_")
        X = np.asarray(X)
        squeeze = X.ndim == 3
        if squeeze:
            X = X[None]
        with torch.no_grad():
            out = self.model_(torch.from_numpy(X.astype(np.int64)))
        out["_squeeze"] = squeeze
        return out

    def predict(self, X) -> np.ndarray:
        """Most likely class labels, shape (N, X, Y, Z) (or unbatched like X)."""
        out = self._forward(X)
        pred = out["pred"].numpy().astype(np.uint8)
        return pred[0] if out["_squeeze"] else pred

    def predict_logits(self, X) -> np.ndarray:
        out = self._forward(X)
        logits = out["logits"].numpy()
        return logits[0] if out["_squeeze"] else logits

    def predict_features(self, X) -> np.ndarray:
        out = self._forward(X)
        features = out["features"].numpy()
        return features[0] if out["_squeeze"] else features


class DiffusionOccupancyModel(BaseEstimator):
    """Conditional generative completion of occupancy grids by iterative denoising.

    fit() first trains the observation classifier used for conditioning, then
    the denoiser; predict() draws one guided sample per scene with a seed
    fixed by the estimator, and sample() draws repeated samples.
    """

    def __init__(self, num_classes: int = 6, path: str = "discrete",
                 condition: str = "features", schedule: str | None = None,
                 timesteps: int = 200, embed_dim: int = 64,
                 widths: tuple[int, int, int] = (64, 128, 256), total_steps: int = 20000,
                 batch_size: int = 1, learning_rate: float = 3e-4, cond_dropout: float = 0.1,
                 lambda_aux: float = 1e-3, baseline_steps: int = 4000,
                 baseline_width: int = 64, sample_steps: int = 10,
                 guidance_scale: float = 3.5, voxel_size: float = 1.0, seed: int = 0,
                 work_dir: str | None = None):
        self.num_classes = num_classes
        self.path = path
        self.condition = condition
        self.schedule = schedule
        self.timesteps = timesteps
        self.embed_dim = embed_dim
        self.widths = widths
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.cond_dropout = cond_dropout
        self.lambda_aux = lambda_aux
        self.baseline_steps = baseline_steps
        self.baseline_width = baseline_width
        self.sample_steps = sample_steps
        self.guidance_scale = guidance_scale
        self.voxel_size = voxel_size
        self.seed = seed
        self.work_dir = work_dir

    def fit(self, X, y, visibility=None) -> "DiffusionOccupancyModel":
        X, y, visibility = _check_arrays(X, y, visibility, self.num_classes)
        dataset = Dataset.from_arrays(list(y), list(visibility), list(X),
                                      self.num_classes, self.voxel_size)
        work = Path(self.work_dir) if self.work_dir else Path(tempfile.mkdtemp(prefix="voxdiff_"))
        work.mkdir(parents=True, exist_ok=True)
        baseline_cfg = BaselineConfig(num_classes=self.num_classes, width=self.baseline_width,
                                      feature_dim=self.baseline_width,
                                      total_steps=self.baseline_steps,
                                      batch_size=self.batch_size,
                                      learning_rate=self.learning_rate, seed=self.seed)
        self.baseline_path_ = str(train_baseline(baseline_cfg, dataset, work / "baseline.ckpt"))
        cfg = TrainConfig(path=self.path, schedule=self.schedule, timesteps=self.timesteps,
                          condition=self.condition, cond_dropout=self.cond_dropout,
                          lambda_aux=self.lambda_aux, embed_dim=self.embed_dim,
                          widths=tuple(self.widths), total_steps=self.total_steps,
                          batch_size=self.batch_size, learning_rate=self.learning_rate,
                          seed=self.seed)
        self.checkpoint_path_ = str(train_diffusion(cfg, dataset, self.baseline_path_,
                                                    work / "diffusion.ckpt"))
        return self

    def sample(self, X, n_samples: int = 1, seed: int | None = None,
               num_steps: int | None = None, guidance_scale: float | None = None) -> list[list[VoxelGrid]]:
        """Draw n_samples completions per observation; returns a list per scene."""
        check_is_fitted(self, "checkpoint_path_")
        X = np.asarray(X)
        if X.ndim == 3:
            X = X[None]
        base_seed = self.seed if seed is None else seed
        out = []
        for i in range(X.shape[0]):
            obs = VoxelGrid(X[i].astype(np.uint8), self.voxel_size, self.num_classes + 1)
            out.append(sample_from_checkpoint(
                self.checkpoint_path_, obs,
                num_steps=self.sample_steps if num_steps is None else num_steps,
                guidance_scale=self.guidance_scale if guidance_scale is None else guidance_scale,
                seed=base_seed + i, num_samples=n_samples))
        return out

    def predict(self, X) -> np.ndarray:
        """One guided sample per scene at the estimator's sampling settings."""
        X = np.asarray(X)
        squeeze = X.ndim == 3
        samples = self.sample(X, n_samples=1)
        pred = np.stack([s[0].labels for s in samples])
        return pred[0] if squeeze else pred

    def condition_payloads(self, X, kind: str | None = None) -> list[np.ndarray]:
        """Expose the conditioning payloads the fitted classifier would produce."""
        check_is_fitted(self, "baseline_path_")
        baseline, _ = load_baseline_checkpoint(self.baseline_path_)
        X = np.asarray(X)
        if X.ndim == 3:
            X = X[None]
        kind = kind or self.condition
        return [condition_payload(baseline, X[i], kind) for i in range(X.shape[0])]
