"""Sparse per-pixel routing between the spectral and Gaussian branches.

A per-pixel score MLP reads both branch outputs; a per-sample contrast
statistic of the scores adapts the keep ratio; the top-k scores (k = ceil(rho *
points)) select pixels that take the spectral value, everyone else takes the
Gaussian value. The hard mask is used exactly in the forward pass. The backward
pass is straight-through: the mask passes gradients as-is along the chosen
branches, and the score gradient is the relaxed sigmoid path evaluated at the
soft gate, so it equals reverse-mode differentiation of

    g = g_hard + sigmoid(s / T) - stopgrad(sigmoid(s / T))

applied to r = g * zF + (1 - g) * zG. The keep ratio itself is treated as a
non-differentiable constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as T
from .errors import ContractError, DimensionError


@dataclass
class SparConfig:
    rho0: float = 0.30
    beta: float = 0.25
    rho_min: float = 0.10
    rho_max: float = 0.90
    temperature: float = 0.8
    eps: float = 1e-6

    def validate(self):
        if not (0.0 < self.rho_min <= self.rho_max <= 1.0):
            raise ContractError(f"SparConfig: bad rho bounds [{self.rho_min}, {self.rho_max}]")
        if self.temperature <= 0:
            raise ContractError("SparConfig: temperature must be positive")
        if self.eps <= 0:
            raise ContractError("SparConfig: eps must be positive")
        return self


class ScoreMlp:
    """Two-layer per-pixel scorer on the concatenated branch outputs (no biases)."""

    def __init__(self, channels, rng, hidden=None):
        import math
        h = hidden or channels
        b1 = 1.0 / math.sqrt(2 * channels)
        b2 = 1.0 / math.sqrt(h)
        self.w1 = T.Tensor(rng.uniform(-b1, b1, size=(h, 2 * channels)), requires_grad=True)
        self.w2 = T.Tensor(rng.uniform(-b2, b2, size=(1, h)), requires_grad=True)

    def parameters(self):
        return [self.w1, self.w2]

    def param_count(self):
        return self.w1.data.size + self.w2.data.size


def routing_logits(z_f, z_g, mlp):
    """Per-pixel scores, shape (B, 1, *S)."""
    if z_f.shape != z_g.shape:
        raise DimensionError(f"routing_logits: {z_f.shape} vs {z_g.shape}")
    cat = T.concat_channels([z_f, z_g])
    return T.pointwise_mix(T.gelu(T.pointwise_mix(cat, mlp.w1)), mlp.w2)


def keep_ratio(scores, cfg):
    """Per-sample (contrast, rho); computed on detached values, clipped to bounds."""
    s = scores.data if isinstance(scores, T.Tensor) else np.asarray(scores)
    flat = s.reshape(s.shape[0], -1)
    contrast = flat.std(axis=1) / (np.abs(flat).mean(axis=1) + cfg.eps)
    rho = np.clip(cfg.rho0 * (1.0 + cfg.beta * np.tanh(contrast - 1.0)),
                  cfg.rho_min, cfg.rho_max)
    return contrast, rho


@dataclass
class RoutingState:
    """Mask and statistics captured by one routing decision."""
    scores: np.ndarray
    contrast: np.ndarray
    rho: np.ndarray
    k: np.ndarray
    g_hard: np.ndarray
    g_soft: np.ndarray
    _zf_id: int = 0
    _zg_id: int = 0


def hard_mask(scores, rho):
    """Top-k binary mask per sample; stable ties: higher score first, then
    ascending flat spatial index."""
    b = scores.shape[0]
    flat = scores.reshape(b, -1)
    npts = flat.shape[1]
    k = np.ceil(rho * npts).astype(int)
    mask = np.zeros_like(flat)
    for i in range(b):
        order = np.argsort(-flat[i], kind="stable")
        mask[i, order[: k[i]]] = 1.0
    return mask.reshape(scores.shape), k


def route(z_f, z_g, scores, cfg):
    """Fuse branches through the hard gate; returns (fused tensor, RoutingState)."""
    cfg.validate()
    if z_f.shape != z_g.shape:
        raise DimensionError(f"route: {z_f.shape} vs {z_g.shape}")
    if scores.shape != (z_f.shape[0], 1) + z_f.shape[2:]:
        raise DimensionError(f"route: scores {scores.shape} vs fields {z_f.shape}")
    contrast, rho = keep_ratio(scores, cfg)
    g_hard, k = hard_mask(scores.data, rho)
    g_soft = expit(scores.data / cfg.temperature)
    state = RoutingState(scores=scores.data.copy(), contrast=contrast, rho=rho, k=k,
                         g_hard=g_hard, g_soft=g_soft,
                         _zf_id=id(z_f), _zg_id=id(z_g))
    zf_d, zg_d = z_f.data, z_g.data
    out = g_hard * zf_d + (1.0 - g_hard) * zg_d

    def vjp(g):
        d_zf, d_zg, d_s = spar_backward(g, state, zf_d, zg_d, cfg)
        return (d_zf if z_f.requires_grad else None,
                d_zg if z_g.requires_grad else None,
                d_s if scores.requires_grad else None)

    return T._node(out, (z_f, z_g, scores), vjp), state


def spar_backward(delta, state, z_f, z_g, cfg):
    """Gradients of the routed fusion w.r.t. (zF, zG, scores).

    Direct path: the hard mask gates delta onto each branch. Score path: the
    relaxed-gate derivative sigmoid'(s/T)/T times the per-pixel channel inner
    product delta . (zF - zG); its continuation into the score MLP (and through
    the concatenation back into the branches) happens in the surrounding graph.
    """
    zf_d = z_f.data if isinstance(z_f, T.Tensor) else np.asarray(z_f)
    zg_d = z_g.data if isinstance(z_g, T.Tensor) else np.asarray(z_g)
    if isinstance(z_f, T.Tensor) and state._zf_id not in (id(z_f), 0):
        raise ContractError("spar_backward: state does not belong to these tensors")
    if zf_d.shape != zg_d.shape or delta.shape != zf_d.shape:
        raise DimensionError("spar_backward: mismatched shapes")
    g_hard = state.g_hard
    d_zf = g_hard * delta
    d_zg = (1.0 - g_hard) * delta
    sg = state.g_soft
    dgate = (delta * (zf_d - zg_d)).sum(axis=1, keepdims=True)
    d_s = dgate * sg * (1.0 - sg) / cfg.temperature
    return d_zf, d_zg, d_s
