"""Multi-scale Gaussian smoothing branch.

Each scale owns a learnable per-group log-bandwidth. Every forward pass rebuilds
its kernel from scratch: taps exp(-d^2 / (2 sigma^2)) on the support |d| <=
ceil(3 sigma), normalized to unit sum (normalization can be switched off for the
no-normalization ablation). Scales run 1x1 pre-mix -> depthwise circular conv ->
1x1 post-mix; their outputs concatenate and a final 1x1 fuse brings the width
back to C, followed by GELU.

In 2D the square-support Gaussian factorizes exactly, so the depthwise pass is
applied separably along each axis with the same 1D taps; this equals the full
2D kernel convolution to machine precision while keeping memory linear in the
tap count.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigError, DimensionError


class ChannelMix:
    """1x1 convolution: weight (out, in) plus bias, wrapped as leaf tensors."""

    def __init__(self, out_ch, in_ch, rng, bias=True):
        bound = 1.0 / math.sqrt(in_ch)
        self.w = T.Tensor(rng.uniform(-bound, bound, size=(out_ch, in_ch)),
                          requires_grad=True)
        self.b = T.Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x):
        return T.pointwise_mix(x, self.w, self.b)

    def parameters(self):
        return [self.w] + ([self.b] if self.b is not None else [])

    def param_count(self):
        return sum(p.data.size for p in self.parameters())


def kernel_taps(log_sigma, normalize=True):
    """Value-level 1D taps for given log-bandwidths: array (G, 2*r_max + 1)."""
    sig = np.exp(np.asarray(log_sigma, dtype=np.float64))
    radii = np.ceil(3.0 * sig).astype(int)
    rmax = int(radii.max())
    d = np.arange(-rmax, rmax + 1)
    w = np.exp(-0.5 * (d[None, :] / sig[:, None]) ** 2)
    w[np.abs(d)[None, :] > radii[:, None]] = 0.0
    if normalize:
        w = w / w.sum(axis=1, keepdims=True)
    return w


def build_kernel(log_sigma, dims, normalize=True):
    """Full kernel the branch applies: (G, K) in 1D, (G, K, K) in 2D."""
    if dims not in (1, 2):
        raise ConfigError(f"build_kernel: dims must be 1 or 2, got {dims}")
    k1 = kernel_taps(log_sigma, normalize=normalize)
    if dims == 1:
        return k1
    return np.einsum("ga,gb->gab", k1, k1)


def gaussian_kernel_node(log_sigma, normalize=True):
    """Differentiable 1D tap builder: log_sigma (G,) -> taps (G, K)."""
    lam = log_sigma
    sig = np.exp(lam.data)
    radii = np.ceil(3.0 * sig).astype(int)
    rmax = int(radii.max())
    d = np.arange(-rmax, rmax + 1, dtype=np.float64)
    a = (d[None, :] / sig[:, None]) ** 2        # d^2 / sigma^2 = dw/dlambda factor
    w = np.exp(-0.5 * a)
    support = np.abs(d)[None, :] <= radii[:, None]
    w = np.where(support, w, 0.0)
    a = np.where(support, a, 0.0)
    if normalize:
        z = w.sum(axis=1, keepdims=True)
        k = w / z

        def vjp(g):
            abar = (k * a).sum(axis=1, keepdims=True)
            return ((g * k * (a - abar)).sum(axis=1),)
    else:
        k = w

        def vjp(g):
            return ((g * w * a).sum(axis=1),)

    return T._node(k, (lam,), vjp)


def _correlate_axis(arr, kexp, r, ax):
    """out[..., m, ...] = sum_t kexp[c, t] * arr[..., (m + t - r) mod n, ...]."""
    n = arr.shape[ax]
    kk = kexp.shape[1]
    head = np.take(arr, range(n - r, n), axis=ax) if r else None
    tail_len = kk - 1 - r
    tail = np.take(arr, range(0, tail_len), axis=ax) if tail_len else None
    pieces = [p for p in (head, arr, tail) if p is not None]
    padded = np.concatenate(pieces, axis=ax) if len(pieces) > 1 else arr
    win = sliding_window_view(padded, kk, axis=ax)
    if arr.ndim == 3:
        return np.einsum("bcnk,ck->bcn", win, kexp)
    return np.einsum("bcyxk,ck->bcyx", win, kexp)


def _correlate_axis_taps_grad(arr, g, r, kk, ax):
    """Gradient of the correlation w.r.t. the expanded per-channel taps."""
    n = arr.shape[ax]
    head = np.take(arr, range(n - r, n), axis=ax) if r else None
    tail_len = kk - 1 - r
    tail = np.take(arr, range(0, tail_len), axis=ax) if tail_len else None
    pieces = [p for p in (head, arr, tail) if p is not None]
    padded = np.concatenate(pieces, axis=ax) if len(pieces) > 1 else arr
    win = sliding_window_view(padded, kk, axis=ax)
    if arr.ndim == 3:
        return np.einsum("bcnk,bcn->ck", win, g)
    return np.einsum("bcyxk,bcyx->ck", win, g)


def depthwise_circular(x, taps, groups, axis):
    """Depthwise circular 1D convolution along ``axis`` with per-group taps.

    Kernels wider than the extent are folded modulo n first (offsets that wrap
    all the way around accumulate), which keeps the circular definition exact
    for any bandwidth.
    """
    c = x.shape[1]
    if c % groups != 0:
        raise ConfigError(f"depthwise_circular: {c} channels not divisible by {groups} groups")
    gsize = c // groups
    kd = taps.data
    kk = kd.shape[1]
    r = (kk - 1) // 2
    xd = x.data
    ax = axis % xd.ndim
    n = xd.shape[ax]

    folded = r >= n
    if folded:
        offsets = (np.arange(kk) - r) % n
        fold = np.zeros((kd.shape[0], n))
        np.add.at(fold, (np.arange(kd.shape[0])[:, None], offsets[None, :]), kd)
        work = fold
        wr, wk = 0, n
    else:
        work = kd
        wr, wk = r, kk

    kexp = np.repeat(work, gsize, axis=0)
    out = _correlate_axis(xd, kexp, wr, ax)

    def vjp(g):
        gx = gk = None
        if x.requires_grad:
            # adjoint of correlation: correlate with the index-reversed kernel
            rev = work[:, ::-1]
            gx = _correlate_axis(g, np.repeat(rev, gsize, axis=0), wk - 1 - wr, ax)
        if taps.requires_grad:
            kex_g = _correlate_axis_taps_grad(xd, g, wr, wk, ax)
            gwork = kex_g.reshape(groups, gsize, wk).sum(axis=1)
            if folded:
                gk = gwork[:, offsets]
            else:
                gk = gwork
        return (gx, gk)

    return T._node(out, (x, taps), vjp)


class GaussianScaleBank:
    """Per-level bank: M scales of (pre-mix, depthwise Gaussian, post-mix) + fuse."""

    def __init__(self, channels, scales, dims, rng, sigma_init=(0.5, 1.0, 2.5),
                 normalize=True):
        if dims not in (1, 2):
            raise ConfigError(f"GaussianScaleBank: dims must be 1 or 2, got {dims}")
        if dims == 1:
            groups = channels
        else:
            if channels % 4 != 0:
                raise ConfigError(
                    f"GaussianScaleBank: {channels} channels not divisible into groups of 4")
            groups = channels // 4
        self.channels = channels
        self.scales = scales
        self.dims = dims
        self.groups = groups
        self.normalize = normalize
        if scales == len(sigma_init):
            sigmas = list(sigma_init)
        else:
            lo, hi = min(sigma_init), max(sigma_init)
            sigmas = list(np.exp(np.linspace(np.log(lo), np.log(hi), scales)))
        self.log_sigma = [
            T.Tensor(np.full(groups, math.log(s)), requires_grad=True) for s in sigmas]
        self.pre = [ChannelMix(channels, channels, rng) for _ in range(scales)]
        self.post = [ChannelMix(channels, channels, rng) for _ in range(scales)]
        self.fuse = ChannelMix(channels, scales * channels, rng)

    def parameters(self):
        out = []
        for m in range(self.scales):
            out.append(self.log_sigma[m])
            out.extend(self.pre[m].parameters())
            out.extend(self.post[m].parameters())
        out.extend(self.fuse.parameters())
        return out

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def clamp_log_sigma(self, lo=-2.0, hi=2.0):
        for ls in self.log_sigma:
            np.clip(ls.data, lo, hi, out=ls.data)


def gaussian_branch_forward(h, bank):
    """Run the multi-scale branch on a (B, C, *S) field tensor."""
    if h.ndim != 2 + bank.dims:
        raise DimensionError(f"gaussian_branch: field rank {h.ndim} vs dims {bank.dims}")
    if h.shape[1] != bank.channels:
        raise DimensionError(
            f"gaussian_branch: {h.shape[1]} channels vs bank {bank.channels}")
    outs = []
    for m in range(bank.scales):
        taps = gaussian_kernel_node(bank.log_sigma[m], normalize=bank.normalize)
        z = bank.pre[m](h)
        if bank.dims == 1:
            z = depthwise_circular(z, taps, bank.groups, axis=-1)
        else:
            z = depthwise_circular(z, taps, bank.groups, axis=-2)
            z = depthwise_circular(z, taps, bank.groups, axis=-1)
        outs.append(bank.post[m](z))
    return T.gelu(bank.fuse(T.concat_channels(outs)))
