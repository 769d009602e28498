"""Truncated-spectrum convolution branch.

Fourier-multiplier layer: transform, keep the lowest modes, mix channels with a
complex weight per retained bin, transform back. Weight storage is resolution
independent — one complex tensor of shape (C, C, K0) in 1D or (C, C, K0, K0) in
2D held as paired real/imag buffers — and the slice actually applied at a level
is capped by that level's Nyquist via ``effective_modes``. On the full-FFT axis
(2D) both the [0:K_eff] and [-K_eff:] bin blocks are retained and the weight
tensor is sliced with the same two expressions, so rows alias when
2*K_eff > K0; gradients from both blocks accumulate into the shared rows.

To keep the retained spectrum exactly the transform of the real output, the
bins the c2r inverse would silently symmetrize (the DC bin in 1D, the kx=0
column in 2D) are Hermitian-projected after the mix. The projection does not
change the output field and is self-adjoint, so it appears unchanged in the
backward pass.

Complex multiplication is carried out on real pairs (two real einsums per
block); no complex parameters ever hit the optimizer.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError


def effective_modes(k0, n):
    """Modes actually retained at extent n: min(k0, n // 2)."""
    k0 = int(k0)
    n = int(n)
    if k0 < 1:
        raise ConfigError(f"effective_modes: k0 must be >= 1, got {k0}")
    if n < 2:
        raise ConfigError(f"effective_modes: extent must be >= 2, got {n}")
    return min(k0, n // 2)


class SpectralWeights:
    """Per-level complex mixing weights, stored as two real tensors."""

    def __init__(self, channels, modes, dims, rng):
        if dims not in (1, 2):
            raise ConfigError(f"SpectralWeights: dims must be 1 or 2, got {dims}")
        if modes < 1:
            raise ConfigError(f"SpectralWeights: modes must be >= 1, got {modes}")
        self.channels = channels
        self.modes = modes
        self.dims = dims
        shape = (channels, channels) + (modes,) * dims
        scale = 1.0 / (channels * channels)
        self.w_re = T.Tensor(rng.uniform(0.0, scale, size=shape), requires_grad=True)
        self.w_im = T.Tensor(rng.uniform(0.0, scale, size=shape), requires_grad=True)

    def parameters(self):
        return [self.w_re, self.w_im]

    def param_count(self):
        return self.w_re.data.size + self.w_im.data.size


def _hermitian_project_column(col):
    # pair bin k with bin (-k) mod n along the last axis; average with conjugate
    rev = np.roll(col[..., ::-1], 1, axis=-1)
    return 0.5 * (col + np.conj(rev))


def spectral_conv(h, weights):
    """Apply the truncated Fourier multiplier to a (B, C, *S) field tensor."""
    if h.ndim != 2 + weights.dims:
        raise DimensionError(
            f"spectral_conv: field rank {h.ndim} vs dims {weights.dims}")
    if h.shape[1] != weights.channels:
        raise DimensionError(
            f"spectral_conv: {h.shape[1]} channels vs weights {weights.channels}")
    if weights.dims == 1:
        return _spectral_conv_1d(h, weights)
    return _spectral_conv_2d(h, weights)


def _spectral_conv_1d(h, weights):
    n = h.shape[-1]
    k = effective_modes(weights.modes, n)
    wr = weights.w_re
    wi = weights.w_im
    x = np.fft.rfft(h.data, axis=-1)
    wc = wr.data[..., :k] + 1j * wi.data[..., :k]
    xk = x[..., :k]
    yk = np.einsum("oik,bik->bok", wc, xk)
    yk[..., 0] = yk[..., 0].real
    yfull = np.zeros(x.shape, dtype=complex)
    yfull[..., :k] = yk
    out = np.fft.irfft(yfull, n=n, axis=-1)

    def vjp(g):
        d = np.fft.rfft(g, axis=-1)[..., :k]
        d[..., 0] = d[..., 0].real  # adjoint of the DC projection
        gh = gwr = gwi = None
        if h.requires_grad:
            dx = np.einsum("oik,bok->bik", np.conj(wc), d)
            dfull = np.zeros(x.shape, dtype=complex)
            dfull[..., :k] = dx
            gh = np.fft.irfft(dfull, n=n, axis=-1)
        if wr.requires_grad or wi.requires_grad:
            mult = np.full(k, 2.0)
            mult[0] = 1.0
            gw = np.einsum("bik,bok->oik", np.conj(xk), d) * (mult / n)
            gwr = np.zeros_like(wr.data)
            gwi = np.zeros_like(wi.data)
            gwr[..., :k] = gw.real
            gwi[..., :k] = gw.imag
        return (gh, gwr, gwi)

    return T._node(out, (h, wr, wi), vjp)


def _spectral_conv_2d(h, weights):
    ny, nx = h.shape[-2], h.shape[-1]
    ky = effective_modes(weights.modes, ny)
    kx = effective_modes(weights.modes, nx)
    k0 = weights.modes
    wr = weights.w_re
    wi = weights.w_im
    x = np.fft.rfftn(h.data, axes=(-2, -1))
    wc = wr.data + 1j * wi.data
    wpos = wc[:, :, :ky, :kx]
    wneg = wc[:, :, k0 - ky:, :kx]
    xpos = x[..., :ky, :kx]
    xneg = x[..., ny - ky:, :kx]
    yfull = np.zeros(x.shape, dtype=complex)
    yfull[..., :ky, :kx] = np.einsum("oiyx,biyx->boyx", wpos, xpos)
    yfull[..., ny - ky:, :kx] = np.einsum("oiyx,biyx->boyx", wneg, xneg)
    yfull[..., 0] = _hermitian_project_column(yfull[..., 0])
    out = np.fft.irfftn(yfull, s=(ny, nx), axes=(-2, -1))

    def vjp(g):
        d = np.fft.rfftn(g, axes=(-2, -1))
        dc = d[..., 0].copy()
        d[..., 0] = _hermitian_project_column(dc)  # self-adjoint projection
        dpos = d[..., :ky, :kx]
        dneg = d[..., ny - ky:, :kx]
        gh = gwr = gwi = None
        if h.requires_grad:
            dfull = np.zeros(x.shape, dtype=complex)
            dfull[..., :ky, :kx] = np.einsum("oiyx,boyx->biyx", np.conj(wpos), dpos)
            dfull[..., ny - ky:, :kx] = np.einsum("oiyx,boyx->biyx", np.conj(wneg), dneg)
            gh = np.fft.irfftn(dfull, s=(ny, nx), axes=(-2, -1))
        if wr.requires_grad or wi.requires_grad:
            mult = np.full(kx, 2.0)
            mult[0] = 1.0
            scale = mult / (ny * nx)
            gpos = np.einsum("biyx,boyx->oiyx", np.conj(xpos), dpos) * scale
            gneg = np.einsum("biyx,boyx->oiyx", np.conj(xneg), dneg) * scale
            gwc = np.zeros(wc.shape, dtype=complex)
            gwc[:, :, :ky, :kx] += gpos
            gwc[:, :, k0 - ky:, :kx] += gneg  # aliased rows accumulate both blocks
            gwr = gwc.real.copy()
            gwi = gwc.imag.copy()
        return (gh, gwr, gwi)

    return T._node(out, (h, wr, wi), vjp)
