"""Categorical diffusion over voxel labels with uniform transitions.

The forward process mixes each label toward the uniform distribution through
the one-step matrices Q_t = (1 - beta_t) I + beta_t / K; products of such
matrices stay in the family, so cumulative and skip-step ("bridge") kernels
have closed forms in terms of the schedule's alphas_bar.  The reverse model
predicts logits over the clean label x0 and turns them into a distribution
over the previous state by mixing exact posteriors.  All probability math is
float64.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.special import softmax

from .grids import VoxelGrid
from .rng import stream
from .schedule import NoiseSchedule, uniform_transition
from .validation import check_finite, check_num_classes, check_positive_int, check_timestep

__all__ = [
    "forward_sample_discrete",
    "posterior_discrete",
    "bridge_posterior_matrix",
    "model_reverse_distribution",
    "training_loss_discrete",
    "subset_timesteps",
    "sample_occupancy",
]


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return stream(seed, "discrete")


def _sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row of a (V, K) probability array."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random((probs.shape[0], 1)) * cdf[:, -1:]
    return np.minimum((u > cdf).sum(axis=-1), probs.shape[-1] - 1)


def forward_sample_discrete(grid: VoxelGrid, t: int, schedule: NoiseSchedule, seed) -> VoxelGrid:
    """Draw x_t ~ q(x_t | x0) for every voxel independently."""
    check_timestep(t, schedule.num_steps)
    qbar = uniform_transition(grid.num_classes, schedule.gamma_bar(t))
    probs = qbar[grid.labels.ravel()]
    out = _sample_categorical(probs, _as_generator(seed))
    return grid.with_labels(out.reshape(grid.dims).astype(np.uint8))


def bridge_posterior_matrix(schedule: NoiseSchedule, num_classes: int, t: int,
                            u: int | None = None) -> np.ndarray:
    """Posterior tensor P[a, c, j] = q(x_u = j | x_t = a, x0 = c) for u < t.

    u defaults to t - 1.  Built from the closed-form uniform kernels: the
    step kernel from u to t and the cumulative kernel from 0 to u.  For u = 0
    the cumulative kernel is the identity and each (a, c) row is a point mass
    on c.  Cached on the schedule per (K, t, u).
    """
    K = check_num_classes(num_classes)
    check_timestep(t, schedule.num_steps)
    if u is None:
        u = t - 1
    key = ("bridge", K, t, u)
    cached = schedule._derived_cache.get(key)
    if cached is not None:
        return cached
    q_step = uniform_transition(K, schedule.bridge_gamma(u, t))
    q_cum = uniform_transition(K, schedule.gamma_bar(u)) if u > 0 else np.eye(K)
    post = q_step.T[:, None, :] * q_cum[None, :, :]
    post /= post.sum(axis=-1, keepdims=True)
    post.flags.writeable = False
    schedule._derived_cache[key] = post
    return post


def posterior_discrete(x_t: int, x0: int, t: int, schedule: NoiseSchedule,
                       num_classes: int) -> np.ndarray:
    """Exact q(x_{t-1} | x_t, x0) as a length-K probability vector.

    At t = 1 this is a point mass on x0.
    """
    K = check_num_classes(num_classes)
    if not 0 <= x_t < K or not 0 <= x0 < K:
        raise ValueError(f"labels must lie in [0, {K}), got x_t={x_t}, x0={x0}")
    return bridge_posterior_matrix(schedule, K, t)[x_t, x0]


def model_reverse_distribution(x_t: int, t: int, x0_logits: np.ndarray,
                               schedule: NoiseSchedule, num_classes: int) -> np.ndarray:
    """Reverse distribution p(x_{t-1} | x_t): posteriors mixed by softmax(x0_logits)."""
    K = check_num_classes(num_classes)
    x0_logits = np.asarray(x0_logits, dtype=np.float64)
    if x0_logits.shape != (K,):
        raise ValueError(f"x0_logits must have shape ({K},), got {x0_logits.shape}")
    check_finite(x0_logits, "x0_logits")
    weights = softmax(x0_logits)
    return weights @ bridge_posterior_matrix(schedule, K, t)[x_t]


def _posterior_torch(schedule: NoiseSchedule, num_classes: int, t: int) -> torch.Tensor:
    key = ("bridge_torch", num_classes, t)
    cached = schedule._derived_cache.get(key)
    if cached is None:
        cached = torch.from_numpy(np.array(bridge_posterior_matrix(schedule, num_classes, t)))
        schedule._derived_cache[key] = cached
    return cached


def _flat_labels(x) -> np.ndarray:
    labels = x.labels if isinstance(x, VoxelGrid) else np.asarray(x)
    return labels.reshape(-1).astype(np.int64)


def training_loss_discrete(x0, x_t, t: int, x0_logits, schedule: NoiseSchedule,
                           lambda_aux: float = 1e-3) -> torch.Tensor:
    """Stepwise KL to the exact posterior plus a weighted cross-entropy on x0.

    x0 and x_t are label grids (VoxelGrid or integer arrays); x0_logits is a
    (..., K) tensor or array of clean-label logits aligned with the flattened
    voxel order.  At t = 1 the KL term reduces to the negative log-likelihood
    of x0 under the mixture.  Returns a float64 torch scalar (differentiable
    when x0_logits is a torch tensor).
    """
    check_timestep(t, schedule.num_steps)
    x0_flat = torch.from_numpy(_flat_labels(x0))
    xt_flat = torch.from_numpy(_flat_labels(x_t))
    if not torch.is_tensor(x0_logits):
        x0_logits = torch.from_numpy(np.asarray(x0_logits))
    K = x0_logits.shape[-1]
    logits = x0_logits.reshape(-1, K).double()
    if logits.shape[0] != x0_flat.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows for {x0_flat.shape[0]} voxels")
    if not torch.isfinite(logits).all():
        raise ValueError("x0_logits contains non-finite values")
    log_w = torch.log_softmax(logits, dim=-1)
    nll = -log_w.gather(1, x0_flat[:, None]).squeeze(1)
    if t == 1:
        main = nll.mean()
    else:
        post = _posterior_torch(schedule, K, t)
        target = post[xt_flat, x0_flat]
        mix = torch.einsum("vc,vcj->vj", log_w.exp(), post[xt_flat])
        kl = (target * (target.log() - mix.log())).sum(dim=-1)
        main = kl.mean()
    return main + float(lambda_aux) * nll.mean()


def subset_timesteps(num_steps_total: int, num_steps: int) -> list[int]:
    """Evenly spaced descending timesteps from T down to 1.

    Always includes T; includes 1 whenever more than one step is requested.
    """
    T = check_positive_int(num_steps_total, "num_steps_total")
    n = check_positive_int(num_steps, "num_steps")
    if n > T:
        raise ValueError(f"cannot visit {n} distinct steps of a {T}-step schedule")
    if n == 1:
        return [T]
    ts = np.rint(np.linspace(T, 1, n)).astype(int)
    out = [int(ts[0])]
    for v in ts[1:]:
        if int(v) < out[-1]:
            out.append(int(v))
    return out


def sample_occupancy(predict_x0, condition, schedule: NoiseSchedule, num_steps: int,
                     guidance_scale: float, seed: int, *, dims: tuple[int, int, int],
                     num_classes: int, voxel_size: float = 1.0) -> VoxelGrid:
    """Ancestral sampling of a label grid along an evenly strided step subset.

    predict_x0(labels, t, condition) must return clean-label logits of shape
    (X, Y, Z, K).  When condition is not None, logits are combined with a
    null-condition prediction at every visited step via classifier-free
    extrapolation at guidance_scale.  The final visited step returns the
    argmax of the guided logits directly.
    """
    from .guidance import cfg_combine

    if not callable(predict_x0):
        raise TypeError("predict_x0 must be callable")
    K = check_num_classes(num_classes)
    if not np.isfinite(guidance_scale) or guidance_scale < 0:
        raise ValueError(f"guidance_scale must be a finite non-negative scalar, got {guidance_scale}")
    steps = subset_timesteps(schedule.num_steps, num_steps)
    x = stream(seed, "init").integers(0, K, size=dims).astype(np.uint8)
    for i, t in enumerate(steps):
        logits = np.asarray(predict_x0(x, t, condition), dtype=np.float64)
        if logits.shape != (*dims, K):
            raise ValueError(f"predict_x0 returned shape {logits.shape}, expected {(*dims, K)}")
        if condition is not None and guidance_scale != 0.0:
            null_logits = np.asarray(predict_x0(x, t, None), dtype=np.float64)
            logits = cfg_combine(logits, null_logits, guidance_scale)
        check_finite(logits, "x0 logits")
        if i == len(steps) - 1:
            labels = np.argmax(logits, axis=-1).astype(np.uint8)
            return VoxelGrid(labels, voxel_size, K)
        weights = softmax(logits.reshape(-1, K), axis=-1)
        post = bridge_posterior_matrix(schedule, K, t, steps[i + 1])
        mix = np.einsum("vc,vcj->vj", weights, post[x.reshape(-1)])
        x = _sample_categorical(mix, stream(seed, "step", i)).reshape(dims).astype(np.uint8)
    raise AssertionError("unreachable")
