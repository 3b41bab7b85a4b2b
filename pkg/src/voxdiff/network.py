"""Denoising U-Net, observation classifier, and gradient utilities.

Networks run in float32 on CPU with a single torch thread so that repeated
runs are bit-identical.  All parameter initialization draws from the
package's counter-based streams keyed by parameter name, never from torch's
global RNG.  No normalization layers are used anywhere: parameters are
embeddings, time projections, conv kernels, and output projections only.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .rng import stream

torch.set_num_threads(1)

__all__ = [
    "time_embedding",
    "Denoiser",
    "Baseline",
    "init_params",
    "backprop",
    "grad_check",
    "condition_payload",
    "make_x0_predictor",
    "make_latent_predictor",
]

COND_KINDS = ("labels", "logits", "features")


def time_embedding(t: float, dim: int) -> np.ndarray:
    """Interleaved sinusoidal embedding of a scalar timestep.

    Component 2i is sin(t / 10000^(2i/dim)) and component 2i+1 the matching
    cosine.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    freqs = np.exp(-np.log(10000.0) * np.arange(dim // 2, dtype=np.float64) * 2.0 / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return out


def _sinusoid(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = torch.arange(dim // 2, dtype=t.dtype, device=t.device)
    freqs = torch.exp(-math.log(10000.0) * half * 2.0 / dim)
    angles = t[:, None] * freqs[None, :]
    out = torch.empty(t.shape[0], dim, dtype=t.dtype, device=t.device)
    out[:, 0::2] = torch.sin(angles)
    out[:, 1::2] = torch.cos(angles)
    return out


def _broadcast(vec: torch.Tensor) -> torch.Tensor:
    return vec[:, :, None, None, None]


class Denoiser(nn.Module):
    """Three-level U-Net predicting clean-label logits from a noisy state.

    mode "discrete" embeds a label grid through a (K+1)-row table whose last
    row doubles as the learned null-condition vector; mode "gaussian" takes a
    K-channel latent volume through a 1x1x1 projection and keeps a dedicated
    null vector.  The condition enters by channel concatenation at the input
    level after its own embedding ("labels") or a learned 1x1x1 projection
    ("logits", "features").  The timestep enters through a sinusoidal
    embedding, two linear layers with SiLU, and per-level learned affines.
    """

    def __init__(self, num_classes: int, cond_kind: str = "features", mode: str = "discrete",
                 embed_dim: int = 64, widths: tuple[int, int, int] = (64, 128, 256),
                 time_dim: int = 64, time_hidden: int = 256, feature_channels: int = 64):
        super().__init__()
        if cond_kind not in COND_KINDS:
            raise ValueError(f"cond_kind must be one of {COND_KINDS}, got {cond_kind!r}")
        if mode not in ("discrete", "gaussian"):
            raise ValueError(f"mode must be 'discrete' or 'gaussian', got {mode!r}")
        if len(widths) != 3:
            raise ValueError(f"widths must have three entries, got {widths}")
        K = int(num_classes)
        self.num_classes = K
        self.cond_kind = cond_kind
        self.mode = mode
        self.embed_dim = int(embed_dim)
        self.widths = tuple(int(w) for w in widths)
        self.time_dim = int(time_dim)

        if mode == "discrete":
            self.input_embed = nn.Embedding(K + 1, embed_dim)
        else:
            self.input_proj = nn.Conv3d(K, embed_dim, 1)
            self.null_embed = nn.Parameter(torch.zeros(embed_dim))
        if cond_kind == "labels":
            self.cond_embed = nn.Embedding(K, embed_dim)
        elif cond_kind == "logits":
            self.cond_proj = nn.Conv3d(K, embed_dim, 1)
        else:
            self.cond_proj = nn.Conv3d(int(feature_channels), embed_dim, 1)

        self.time_lin1 = nn.Linear(time_dim, time_hidden)
        self.time_lin2 = nn.Linear(time_hidden, time_hidden)

        w1, w2, w3 = self.widths
        cin = 2 * embed_dim
        self.enc1 = nn.Conv3d(cin, w1, 3, padding=1)
        self.down1 = nn.Conv3d(w1, w2, 3, stride=2, padding=1)
        self.down2 = nn.Conv3d(w2, w3, 3, stride=2, padding=1)
        self.mid = nn.Conv3d(w3, w3, 3, padding=1)
        self.up2 = nn.Conv3d(w3 + w2, w2, 3, padding=1)
        self.up1 = nn.Conv3d(w2 + w1, w1, 3, padding=1)
        self.out_proj = nn.Conv3d(w1, K, 1)

        self.t_stem = nn.Linear(time_hidden, cin)
        self.t_enc1 = nn.Linear(time_hidden, w1)
        self.t_down1 = nn.Linear(time_hidden, w2)
        self.t_down2 = nn.Linear(time_hidden, w3)
        self.t_mid = nn.Linear(time_hidden, w3)
        self.t_up2 = nn.Linear(time_hidden, w2)
        self.t_up1 = nn.Linear(time_hidden, w1)

    def null_condition(self) -> torch.Tensor:
        if self.mode == "discrete":
            return self.input_embed.weight[self.num_classes]
        return self.null_embed

    def _cond_channels(self, shape, cond, null_mask) -> torch.Tensor:
        B, spatial = shape[0], shape[-3:]
        null = self.null_condition()
        if cond is None:
            return _broadcast(null[None].expand(B, -1)).expand(B, -1, *spatial).clone()
        if self.cond_kind == "labels":
            c = self.cond_embed(cond).permute(0, 4, 1, 2, 3)
        else:
            c = self.cond_proj(cond)
        if null_mask is not None and null_mask.any():
            c = c.clone()
            c[null_mask] = _broadcast(null[None])[0]
        return c

    def forward(self, x: torch.Tensor, t, cond: torch.Tensor | None = None,
                null_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Return clean-label logits (B, K, X, Y, Z).

        x is (B, X, Y, Z) integer labels in discrete mode or a (B, K, X, Y, Z)
        float latent in gaussian mode; t is a scalar or (B,) timesteps; cond
        is the condition payload batch for this model's cond_kind, or None
        for the learned null condition; null_mask switches individual batch
        elements to the null condition.
        """
        dtype = self.out_proj.weight.dtype
        if self.mode == "discrete":
            if x.dtype not in (torch.int64, torch.int32, torch.uint8):
                raise TypeError("discrete-mode denoiser expects an integer label grid")
            h = self.input_embed(x.long()).permute(0, 4, 1, 2, 3)
        else:
            if x.dim() != 5 or x.shape[1] != self.num_classes:
                raise ValueError(f"gaussian-mode denoiser expects (B, K, X, Y, Z), got {tuple(x.shape)}")
            h = self.input_proj(x.to(dtype))
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), float(t), dtype=dtype)
        temb = self.time_lin2(F.silu(self.time_lin1(_sinusoid(t.to(dtype), self.time_dim))))
        c = self._cond_channels(h.shape, cond, null_mask)
        h = torch.cat([h, c], dim=1) + _broadcast(self.t_stem(temb))
        a1 = F.silu(self.enc1(h)) + _broadcast(self.t_enc1(temb))
        a2 = F.silu(self.down1(a1)) + _broadcast(self.t_down1(temb))
        a3 = F.silu(self.down2(a2)) + _broadcast(self.t_down2(temb))
        m = F.silu(self.mid(a3)) + _broadcast(self.t_mid(temb))
        u2 = F.interpolate(m, size=a2.shape[-3:], mode="nearest")
        u2 = F.silu(self.up2(torch.cat([u2, a2], dim=1))) + _broadcast(self.t_up2(temb))
        u1 = F.interpolate(u2, size=a1.shape[-3:], mode="nearest")
        u1 = F.silu(self.up1(torch.cat([u1, a1], dim=1))) + _broadcast(self.t_up1(temb))
        return self.out_proj(u1)


class Baseline(nn.Module):
    """Feed-forward observation classifier: embed, conv trunk, feature head.

    Consumes a label grid over K semantic classes plus an UNKNOWN token (id
    K) and produces a penultimate feature volume, per-class logits, and an
    argmax labeling.  The classifier weight starts at zero so initial logits
    are exactly uniform.
    """

    zero_init_names = frozenset({"classifier.weight"})

    def __init__(self, num_classes: int = 6, embed_dim: int = 64, width: int = 64,
                 depth: int = 3, feature_dim: int = 64):
        super().__init__()
        K = int(num_classes)
        self.num_classes = K
        self.feature_dim = int(feature_dim)
        self.embed = nn.Embedding(K + 1, embed_dim)
        convs = [nn.Conv3d(embed_dim, width, 3, padding=1)]
        convs += [nn.Conv3d(width, width, 3, padding=1) for _ in range(int(depth) - 1)]
        self.convs = nn.ModuleList(convs)
        self.feat = nn.Conv3d(width, feature_dim, 3, padding=1)
        self.classifier = nn.Conv3d(feature_dim, K, 1)

    def _trunk(self, h: torch.Tensor) -> dict[str, torch.Tensor]:
        for conv in self.convs:
            h = F.silu(conv(h))
        features = F.silu(self.feat(h))
        logits = self.classifier(features)
        return {"features": features, "logits": logits, "pred": logits.argmax(dim=1)}

    def forward(self, obs: torch.Tensor) -> dict[str, torch.Tensor]:
        """obs: (B, X, Y, Z) integer labels in [0, K] where K marks UNKNOWN."""
        if obs.dtype not in (torch.int64, torch.int32, torch.uint8):
            raise TypeError("baseline expects an integer observation grid")
        h = self.embed(obs.long()).permute(0, 4, 1, 2, 3)
        return self._trunk(h)

    def forward_soft(self, probs: torch.Tensor) -> dict[str, torch.Tensor]:
        """Soft path for guidance: (B, K+1, X, Y, Z) class probabilities."""
        if probs.dim() != 5 or probs.shape[1] != self.num_classes + 1:
            raise ValueError(f"expected (B, {self.num_classes + 1}, X, Y, Z), got {tuple(probs.shape)}")
        h = torch.einsum("bkxyz,ke->bexyz", probs.to(self.embed.weight.dtype), self.embed.weight)
        return self._trunk(h)


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically initialize all parameters from name-keyed streams.

    Embedding tables and learned constant vectors get N(0, 0.02); biases and
    any names the module lists in zero_init_names start at zero; all other
    weights get fan-in-scaled normals (std = sqrt(2 / fan_in)).
    """
    zero_names = frozenset(getattr(module, "zero_init_names", ()))
    for name, p in sorted(module.named_parameters()):
        rng = stream(seed, "init", name)
        with torch.no_grad():
            if name in zero_names or name.endswith(".bias"):
                p.zero_()
            elif "embed" in name:
                p.copy_(torch.from_numpy(rng.normal(0.0, 0.02, size=tuple(p.shape))).to(p.dtype))
            else:
                fan_in = int(np.prod(p.shape[1:]))
                std = math.sqrt(2.0 / fan_in)
                p.copy_(torch.from_numpy(rng.normal(0.0, std, size=tuple(p.shape))).to(p.dtype))
    return module


def backprop(model: nn.Module, loss: torch.Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every named parameter.

    Parameters outside the loss graph get zero gradients; a non-finite
    gradient raises with the offending tensor's name.
    """
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, p in sorted(model.named_parameters()):
        g = torch.zeros_like(p) if p.grad is None else p.grad
        if not torch.isfinite(g).all():
            raise ValueError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g.detach().cpu().numpy().copy()
    model.zero_grad(set_to_none=True)
    return grads


def grad_check(model: nn.Module, loss_fn, *, samples_per_tensor: int = 200,
               step: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn() must rebuild the scalar loss from the model's current
    parameters with no other source of randomness.  The model should be in
    float64.  The relative error divides by the larger gradient magnitude,
    floored at 0.01 so round-off on near-zero entries cannot dominate.
    """
    analytic = backprop(model, loss_fn())
    worst = 0.0
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            flat = p.view(-1)
            n = flat.numel()
            count = min(samples_per_tensor, n)
            idx = stream(seed, "gradcheck", name).choice(n, size=count, replace=False)
            ana = analytic[name].reshape(-1)
            for j in idx:
                j = int(j)
                orig = flat[j].item()
                flat[j] = orig + step
                plus = float(loss_fn())
                flat[j] = orig - step
                minus = float(loss_fn())
                flat[j] = orig
                numeric = (plus - minus) / (2.0 * step)
                err = abs(numeric - ana[j]) / max(abs(numeric), abs(float(ana[j])), 1e-2)
                worst = max(worst, err)
    return worst


def condition_payload(baseline: Baseline, obs_labels: np.ndarray, kind: str) -> np.ndarray:
    """Compute a condition payload from an observation with a frozen classifier.

    kind "labels" returns the argmax labeling (int64), "logits" the class
    logits (K, X, Y, Z), "features" the penultimate features (F, X, Y, Z).
    """
    if kind not in COND_KINDS:
        raise ValueError(f"kind must be one of {COND_KINDS}, got {kind!r}")
    with torch.no_grad():
        out = baseline(torch.from_numpy(np.asarray(obs_labels).astype(np.int64))[None])
    if kind == "labels":
        return out["pred"][0].numpy().astype(np.int64)
    if kind == "logits":
        return out["logits"][0].numpy().astype(np.float32)
    return out["features"][0].numpy().astype(np.float32)


def _payload_tensor(payload: np.ndarray, kind: str) -> torch.Tensor:
    arr = np.asarray(payload)
    if kind == "labels":
        return torch.from_numpy(arr.astype(np.int64))[None]
    return torch.from_numpy(arr.astype(np.float32))[None]


def make_x0_predictor(denoiser: Denoiser):
    """Wrap a discrete-mode denoiser as predict(labels, t, payload) -> (X, Y, Z, K)."""
    if denoiser.mode != "discrete":
        raise ValueError("make_x0_predictor needs a discrete-mode denoiser")

    def predict(labels: np.ndarray, t: int, payload) -> np.ndarray:
        with torch.no_grad():
            x = torch.from_numpy(np.asarray(labels).astype(np.int64))[None]
            cond = None if payload is None else _payload_tensor(payload, denoiser.cond_kind)
            logits = denoiser(x, t, cond)
        return logits[0].permute(1, 2, 3, 0).numpy()

    return predict


def make_latent_predictor(denoiser: Denoiser):
    """Wrap a gaussian-mode denoiser as predict(z, t, payload) -> (K, X, Y, Z)."""
    if denoiser.mode != "gaussian":
        raise ValueError("make_latent_predictor needs a gaussian-mode denoiser")

    def predict(latent: np.ndarray, t: int, payload) -> np.ndarray:
        with torch.no_grad():
            z = torch.from_numpy(np.asarray(latent).astype(np.float32))[None]
            cond = None if payload is None else _payload_tensor(payload, denoiser.cond_kind)
            pred = denoiser(z, t, cond)
        return pred[0].numpy()

    return predict
