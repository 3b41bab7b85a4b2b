"""Noise schedules and uniform transition matrices.

All schedule math is float64.  A single schedule serves both diffusion paths:
alphas_bar[t] = prod_{s<=t} (1 - beta_s) is the signal retention of the
Gaussian path and, equivalently, one minus the cumulative mixing weight of
the uniform categorical path.
"""

from __future__ import annotations

import numpy as np

from .validation import check_num_classes, check_positive_int, check_timestep

KINDS = ("linear", "cosine")


class NoiseSchedule:
    """Immutable beta schedule over timesteps 1..num_steps."""

    def __init__(self, kind: str, num_steps: int, betas: np.ndarray):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.shape != (num_steps,):
            raise ValueError(f"expected {num_steps} betas, got shape {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas > 1.0):
            raise ValueError("betas must lie in (0, 1]")
        alphas_bar = np.cumprod(1.0 - betas)
        if num_steps >= 2 and not np.all(np.diff(alphas_bar) < 0.0):
            raise ValueError("alphas_bar must be strictly decreasing")
        betas.flags.writeable = False
        alphas_bar.flags.writeable = False
        self.kind = kind
        self.num_steps = int(num_steps)
        self.betas = betas
        self.alphas_bar = alphas_bar
        self._qbar_cache: dict[int, np.ndarray] = {}
        # Scratch cache for tensors derived from this schedule (posteriors etc.).
        self._derived_cache: dict = {}

    def beta(self, t: int) -> float:
        check_timestep(t, self.num_steps)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention; alpha_bar(0) = 1 by convention."""
        check_timestep(t, self.num_steps, lowest=0)
        return 1.0 if t == 0 else float(self.alphas_bar[t - 1])

    def gamma_bar(self, t: int) -> float:
        """Cumulative uniform-mixing weight of the categorical path."""
        return 1.0 - self.alpha_bar(t)

    def bridge_gamma(self, u: int, t: int) -> float:
        """Effective mixing weight of the categorical kernel from step u to t > u."""
        if not 0 <= u < t <= self.num_steps:
            raise ValueError(f"need 0 <= u < t <= {self.num_steps}, got u={u}, t={t}")
        return 1.0 - self.alpha_bar(t) / self.alpha_bar(u)


def make_schedule(kind: str, num_steps: int) -> NoiseSchedule:
    """Build a beta schedule.

    linear: betas evenly spaced from 1e-4 to 0.02.
    cosine: betas derived from the squared-cosine alpha_bar curve with offset
    0.008, clipped at 0.999.
    """
    check_positive_int(num_steps, "num_steps")
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, num_steps, dtype=np.float64)
    elif kind == "cosine":
        ts = np.arange(num_steps + 1, dtype=np.float64) / num_steps
        f = np.cos((ts + 0.008) / 1.008 * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        betas = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    return NoiseSchedule(kind, num_steps, betas)


def uniform_transition(num_classes: int, beta: float) -> np.ndarray:
    """One-step uniform transition matrix (1 - beta) I + beta / K."""
    K = check_num_classes(num_classes)
    if not np.isfinite(beta) or not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    mat = np.full((K, K), beta / K, dtype=np.float64)
    np.fill_diagonal(mat, 1.0 - beta + beta / K)
    mat.flags.writeable = False
    return mat


def cumulative_transition(schedule: NoiseSchedule, num_classes: int, t: int) -> np.ndarray:
    """Explicit product Q_1 Q_2 ... Q_t of the one-step uniform matrices.

    The closed form uniform_transition(K, gamma_bar(t)) gives the same matrix;
    the explicit product is kept as the reference route and cached per class
    count.  t = 0 returns the identity.
    """
    K = check_num_classes(num_classes)
    check_timestep(t, schedule.num_steps, lowest=0)
    cache = schedule._qbar_cache.get(K)
    if cache is None:
        mats = np.empty((schedule.num_steps + 1, K, K), dtype=np.float64)
        mats[0] = np.eye(K)
        for s in range(1, schedule.num_steps + 1):
            mats[s] = mats[s - 1] @ uniform_transition(K, schedule.betas[s - 1])
        mats.flags.writeable = False
        cache = schedule._qbar_cache[K] = mats
    return cache[t]
