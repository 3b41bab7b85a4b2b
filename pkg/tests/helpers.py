"""Independent reference implementations used to cross-check the package.

Everything here is written directly from first principles (set definitions,
explicit loops, brute-force enumeration) without calling into voxdiff, so a
bug in the package cannot hide in its own oracle.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


def ref_uniform_matrix(num_classes: int, beta: float) -> np.ndarray:
    mat = np.empty((num_classes, num_classes), dtype=np.float64)
    for i in range(num_classes):
        for j in range(num_classes):
            mat[i, j] = beta / num_classes + (1.0 - beta if i == j else 0.0)
    return mat


def ref_chain_product(betas, num_classes: int) -> np.ndarray:
    out = np.eye(num_classes)
    for beta in betas:
        out = out @ ref_uniform_matrix(num_classes, beta)
    return out


def ref_posterior(x_t: int, x0: int, t: int, betas, num_classes: int) -> np.ndarray:
    """q(x_{t-1} | x_t, x0) by enumerating the joint over x_{t-1}."""
    if t == 1:
        out = np.zeros(num_classes)
        out[x0] = 1.0
        return out
    q_cum = ref_chain_product(betas[: t - 1], num_classes)
    q_step = ref_uniform_matrix(num_classes, betas[t - 1])
    joint = np.array([q_cum[x0, j] * q_step[j, x_t] for j in range(num_classes)])
    return joint / joint.sum()


def ref_softmax(logits) -> np.ndarray:
    shifted = [v - max(logits) for v in logits]
    exps = [math.exp(v) for v in shifted]
    total = sum(exps)
    return np.array([v / total for v in exps])


def ref_reverse_mixture(x_t: int, t: int, logits, betas, num_classes: int) -> np.ndarray:
    """Explicit sum over clean labels of softmax weight times exact posterior."""
    weights = ref_softmax(logits)
    out = np.zeros(num_classes)
    for c in range(num_classes):
        out += weights[c] * ref_posterior(x_t, c, t, betas, num_classes)
    return out


@njit(cache=True)
def ref_raymarch_visibility(labels, ox, oy, oz, dirs, max_range, step):  # pragma: no cover
    """Fixed-step ray marching: an independent route to the same visibility set."""
    X, Y, Z = labels.shape
    flags = np.zeros((X, Y, Z), dtype=np.uint8)
    flags[ox, oy, oz] = 1
    px = ox + 0.5
    py = oy + 0.5
    pz = oz + 0.5
    n_steps = int(max_range / step) + 1
    for r in range(dirs.shape[0]):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        for k in range(1, n_steps + 1):
            t = k * step
            ix = int(np.floor(px + t * dx))
            iy = int(np.floor(py + t * dy))
            iz = int(np.floor(pz + t * dz))
            if ix < 0 or ix >= X or iy < 0 or iy >= Y or iz < 0 or iz >= Z:
                break
            flags[ix, iy, iz] = 1
            if labels[ix, iy, iz] != 0 and not (ix == ox and iy == oy and iz == oz):
                break
    return flags


def ref_iou(pred, gt, num_classes: int, mask=None):
    """Per-class IoU by explicit per-voxel counting loops."""
    inter = [0] * num_classes
    union = [0] * num_classes
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = np.ones(pred.shape[0], dtype=bool) if mask is None else np.asarray(mask).ravel().astype(bool)
    for p, g, m in zip(pred.tolist(), gt.tolist(), keep.tolist()):
        if not m:
            continue
        if p == g:
            inter[p] += 1
            union[p] += 1
        else:
            union[p] += 1
            union[g] += 1
    return [(inter[c] / union[c] if union[c] else None) for c in range(num_classes)]
