"""Gaussian diffusion over one-hot-relaxed label volumes, plus triplanes.

Labels are lifted to zero-mean continuous volumes with K channels; the
forward process is the standard variance-mixing Gaussian kernel driven by
the schedule's alphas_bar, and decoding is a per-voxel channel argmax.
Triplane pooling/lookup compresses a feature volume to three axis-aligned
planes read back by summed bilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import VoxelGrid
from .rng import stream
from .schedule import NoiseSchedule
from .validation import check_finite, check_num_classes, check_timestep

__all__ = [
    "onehot_relax",
    "decode_argmax",
    "forward_sample_gaussian",
    "posterior_coeffs_gaussian",
    "reverse_step_gaussian",
    "sample_latent",
    "Triplane",
    "pool_to_triplane",
    "triplane_lookup",
]

DEFAULT_RELAX_SCALE = 2.0


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return stream(seed, "gaussian")


def onehot_relax(grid: VoxelGrid, scale: float = DEFAULT_RELAX_SCALE) -> np.ndarray:
    """Lift labels to a (K, X, Y, Z) float64 volume.

    The labeled channel gets scale - scale/K and the others -scale/K, so every
    voxel's channel vector sums to zero and decoding is a channel argmax.
    """
    if not np.isfinite(scale) or scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    K = grid.num_classes
    onehot = np.equal(np.arange(K)[:, None, None, None], grid.labels[None]).astype(np.float64)
    return scale * (onehot - 1.0 / K)


def decode_argmax(volume: np.ndarray, voxel_size: float = 1.0) -> VoxelGrid:
    """Decode a (K, X, Y, Z) volume to labels by channel argmax (ties: lowest id)."""
    volume = np.asarray(volume)
    if volume.ndim != 4 or volume.shape[0] < 2:
        raise ValueError(f"expected a (K, X, Y, Z) volume with K >= 2, got shape {volume.shape}")
    check_finite(volume, "volume")
    labels = np.argmax(volume, axis=0).astype(np.uint8)
    return VoxelGrid(labels, voxel_size, volume.shape[0])


def forward_sample_gaussian(z0: np.ndarray, t: int, schedule: NoiseSchedule, seed) -> np.ndarray:
    """Draw z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    check_timestep(t, schedule.num_steps)
    z0 = np.asarray(z0, dtype=np.float64)
    abar = schedule.alpha_bar(t)
    eps = _as_generator(seed).standard_normal(z0.shape)
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def posterior_coeffs_gaussian(schedule: NoiseSchedule, t: int,
                              t_next: int | None = None) -> tuple[float, float, float]:
    """Coefficients (coef_x0, coef_xt, var) of q(z_u | z_t, z0) for u < t.

    The posterior mean is coef_x0 * z0 + coef_xt * z_t.  u defaults to t - 1;
    at u = 0 the variance is exactly zero and the mean reduces to z0.
    """
    check_timestep(t, schedule.num_steps)
    u = t - 1 if t_next is None else t_next
    if not 0 <= u < t:
        raise ValueError(f"need 0 <= t_next < t, got t_next={u}, t={t}")
    abar_t, abar_u = schedule.alpha_bar(t), schedule.alpha_bar(u)
    alpha_step = abar_t / abar_u
    beta_step = 1.0 - alpha_step
    coef_x0 = np.sqrt(abar_u) * beta_step / (1.0 - abar_t)
    coef_xt = np.sqrt(alpha_step) * (1.0 - abar_u) / (1.0 - abar_t)
    var = beta_step * (1.0 - abar_u) / (1.0 - abar_t)
    return float(coef_x0), float(coef_xt), float(var)


def reverse_step_gaussian(z_t: np.ndarray, t: int, x0_pred: np.ndarray,
                          schedule: NoiseSchedule, seed, t_next: int | None = None,
                          mean_shift: np.ndarray | None = None) -> np.ndarray:
    """Sample z_{t_next} from the posterior with z0 replaced by its prediction.

    An optional mean_shift (e.g. a classifier-guidance term) is added to the
    posterior mean before noise is drawn.  Steps with zero posterior variance
    return the mean itself.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    x0_pred = np.asarray(x0_pred, dtype=np.float64)
    if z_t.shape != x0_pred.shape:
        raise ValueError(f"z_t shape {z_t.shape} != x0_pred shape {x0_pred.shape}")
    coef_x0, coef_xt, var = posterior_coeffs_gaussian(schedule, t, t_next)
    mean = coef_x0 * x0_pred + coef_xt * z_t
    if mean_shift is not None:
        mean = mean + mean_shift
    if var == 0.0:
        return mean
    eps = _as_generator(seed).standard_normal(z_t.shape)
    return mean + np.sqrt(var) * eps


def sample_latent(predict_x0, condition, schedule: NoiseSchedule, num_steps: int,
                  guidance_scale: float, seed: int, *, dims: tuple[int, int, int],
                  num_classes: int, voxel_size: float = 1.0,
                  relax_scale: float = DEFAULT_RELAX_SCALE,
                  cg_scorer=None, cg_scale: float = 0.0) -> VoxelGrid:
    """Continuous-path analog of discrete ancestral sampling.

    predict_x0(z, t, condition) must return a (K, X, Y, Z) prediction of the
    clean relaxed volume.  Classifier-free extrapolation applies at every
    visited step when a condition is given; the prediction is clamped to the
    relaxation's value range.  Classifier guidance, when a scorer is given,
    shifts each reverse-step mean.  The final visited step decodes the guided
    prediction by argmax.
    """
    from .discrete import subset_timesteps
    from .guidance import cfg_combine, cg_adjust

    if not callable(predict_x0):
        raise TypeError("predict_x0 must be callable")
    K = check_num_classes(num_classes)
    if not np.isfinite(guidance_scale) or guidance_scale < 0:
        raise ValueError(f"guidance_scale must be a finite non-negative scalar, got {guidance_scale}")
    lo, hi = -relax_scale / K, relax_scale - relax_scale / K
    steps = subset_timesteps(schedule.num_steps, num_steps)
    z = stream(seed, "init").standard_normal((K, *dims))
    for i, t in enumerate(steps):
        pred = np.asarray(predict_x0(z, t, condition), dtype=np.float64)
        if pred.shape != (K, *dims):
            raise ValueError(f"predict_x0 returned shape {pred.shape}, expected {(K, *dims)}")
        if condition is not None and guidance_scale != 0.0:
            null_pred = np.asarray(predict_x0(z, t, None), dtype=np.float64)
            pred = cfg_combine(pred, null_pred, guidance_scale)
        check_finite(pred, "x0 prediction")
        pred = np.clip(pred, lo, hi)
        if i == len(steps) - 1:
            return decode_argmax(pred, voxel_size)
        t_next = steps[i + 1]
        shift = None
        if cg_scorer is not None and cg_scale > 0.0:
            shift = cg_adjust(z, t, cg_scorer, cg_scale, schedule, t_next)
        z = reverse_step_gaussian(z, t, pred, schedule, stream(seed, "step", i),
                                  t_next, mean_shift=shift)
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class Triplane:
    """Axis-aligned plane features pooled from a volume: xy, xz, and yz views."""

    xy: np.ndarray  # (C, X, Y)
    xz: np.ndarray  # (C, X, Z)
    yz: np.ndarray  # (C, Y, Z)

    def __post_init__(self):
        if not (self.xy.ndim == self.xz.ndim == self.yz.ndim == 3):
            raise ValueError("triplane components must be (C, A, B) arrays")
        c = self.xy.shape[0]
        if self.xz.shape[0] != c or self.yz.shape[0] != c:
            raise ValueError("triplane components must share the channel count")
        if (self.xy.shape[1] != self.xz.shape[1] or self.xy.shape[2] != self.yz.shape[1]
                or self.xz.shape[2] != self.yz.shape[2]):
            raise ValueError("triplane plane sizes are inconsistent")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.xy.shape[1], self.xy.shape[2], self.xz.shape[2])


def pool_to_triplane(volume: np.ndarray) -> Triplane:
    """Average-pool a (C, X, Y, Z) volume along each axis to three planes."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 4:
        raise ValueError(f"expected a (C, X, Y, Z) volume, got shape {volume.shape}")
    return Triplane(xy=volume.mean(axis=3), xz=volume.mean(axis=2), yz=volume.mean(axis=1))


def _bilinear(plane: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # plane: (C, A, B); a, b: (N,) continuous coordinates in index space.
    na, nb = plane.shape[1], plane.shape[2]
    a0 = np.clip(np.floor(a).astype(int), 0, max(na - 2, 0))
    b0 = np.clip(np.floor(b).astype(int), 0, max(nb - 2, 0))
    fa = a - a0
    fb = b - b0
    a1 = np.minimum(a0 + 1, na - 1)
    b1 = np.minimum(b0 + 1, nb - 1)
    p00 = plane[:, a0, b0]
    p01 = plane[:, a0, b1]
    p10 = plane[:, a1, b0]
    p11 = plane[:, a1, b1]
    return (p00 * (1 - fa) * (1 - fb) + p10 * fa * (1 - fb)
            + p01 * (1 - fa) * fb + p11 * fa * fb)


def triplane_lookup(tp: Triplane, points: np.ndarray) -> np.ndarray:
    """Sum of bilinear reads from the three planes at continuous (x, y, z) points.

    Coordinates live in plane index space, valid over [0, dim - 1] per axis;
    out-of-range points raise.  Accepts a single (3,) point or an (N, 3) batch.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise ValueError(f"points must have 3 coordinates, got shape {points.shape}")
    dims = tp.dims
    for ax in range(3):
        if np.any(pts[:, ax] < 0) or np.any(pts[:, ax] > dims[ax] - 1):
            raise ValueError(f"point coordinate outside [0, {dims[ax] - 1}] on axis {ax}")
    out = (_bilinear(tp.xy, pts[:, 0], pts[:, 1])
           + _bilinear(tp.xz, pts[:, 0], pts[:, 2])
           + _bilinear(tp.yz, pts[:, 1], pts[:, 2]))
    return out[:, 0] if single else out.T
