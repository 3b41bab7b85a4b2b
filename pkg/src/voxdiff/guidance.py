"""Guidance: classifier-free logit extrapolation and classifier gradients.

Classifier-free guidance operates on clean-state predictions from paired
conditional/unconditional forward passes.  Classifier guidance shifts the
mean of a Gaussian reverse step along the gradient of a frozen classifier's
log-likelihood of a target labeling; it is only defined for the continuous
path, where the state is differentiable.
"""

from __future__ import annotations

import numpy as np
import torch

from .schedule import NoiseSchedule
from .validation import check_finite, check_same_shape

__all__ = ["cfg_combine", "ClassifierScorer", "cg_adjust"]


def cfg_combine(cond: np.ndarray, uncond: np.ndarray, scale: float) -> np.ndarray:
    """(scale + 1) * cond - scale * uncond, elementwise.

    Evaluated as cond + scale * (cond - uncond) so that scale = 0 returns the
    conditional prediction bit-for-bit and identical inputs are an exact
    fixed point for every scale.
    """
    cond = np.asarray(cond, dtype=np.float64)
    uncond = np.asarray(uncond, dtype=np.float64)
    check_same_shape(cond, uncond, "cond", "uncond")
    if not np.isfinite(scale):
        raise ValueError(f"guidance scale must be finite, got {scale}")
    check_finite(cond, "cond")
    check_finite(uncond, "uncond")
    return cond + scale * (cond - uncond)


class ClassifierScorer:
    """Log-likelihood (and its gradient) of a target labeling under a classifier.

    Wraps a frozen observation classifier.  The latent state's per-voxel
    softmax over the K semantic classes is fed through the classifier's
    soft-embedding path (with zero mass on the UNKNOWN token), and the score
    is the sum over voxels of the log-probability of the target label.
    """

    def __init__(self, classifier, target_labels: np.ndarray):
        self.classifier = classifier
        target = np.asarray(target_labels)
        if not np.issubdtype(target.dtype, np.integer):
            raise TypeError("target_labels must be an integer label array")
        self.target = torch.from_numpy(target.astype(np.int64))
        self.num_classes = classifier.num_classes

    def __call__(self, latent: np.ndarray) -> tuple[float, np.ndarray]:
        """Return (log-likelihood, gradient w.r.t. the latent volume)."""
        latent = np.asarray(latent)
        if np.issubdtype(latent.dtype, np.integer):
            raise TypeError("classifier guidance needs a continuous latent state, "
                            "not discrete labels")
        if latent.ndim != 4 or latent.shape[0] != self.num_classes:
            raise ValueError(f"latent must have shape (K, X, Y, Z) with K = "
                             f"{self.num_classes}, got {latent.shape}")
        dtype = next(self.classifier.parameters()).dtype
        z = torch.from_numpy(latent).to(dtype).requires_grad_(True)
        probs = torch.softmax(z, dim=0)
        padded = torch.cat([probs, torch.zeros_like(probs[:1])], dim=0)
        logits = self.classifier.forward_soft(padded[None])["logits"][0]
        logp = torch.log_softmax(logits, dim=0)
        score = logp.gather(0, self.target[None]).sum()
        (grad,) = torch.autograd.grad(score, z)
        return float(score.detach()), grad.numpy().astype(np.float64)


def cg_adjust(latent: np.ndarray, t: int, scorer: ClassifierScorer, scale: float,
              schedule: NoiseSchedule, t_next: int | None = None) -> np.ndarray:
    """Mean shift scale * var_post * grad log p(target | latent) for a reverse step.

    var_post is the posterior variance of the Gaussian step from t down to
    t_next (default t - 1).  scale = 0 returns an all-zero shift without
    evaluating the classifier.
    """
    latent = np.asarray(latent)
    if np.issubdtype(latent.dtype, np.integer):
        raise TypeError("classifier guidance is not defined on the discrete path")
    if not np.isfinite(scale) or scale < 0:
        raise ValueError(f"guidance scale must be finite and non-negative, got {scale}")
    if scale == 0.0:
        return np.zeros_like(latent, dtype=np.float64)
    u = t - 1 if t_next is None else t_next
    abar_t, abar_u = schedule.alpha_bar(t), schedule.alpha_bar(u)
    alpha_step = abar_t / abar_u
    var = (1.0 - alpha_step) * (1.0 - abar_u) / (1.0 - abar_t)
    _, grad = scorer(latent)
    return scale * var * grad
