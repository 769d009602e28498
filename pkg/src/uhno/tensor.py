"""Dense f64 tensors with reverse-mode differentiation and real FFTs.

Everything downstream (branches, routing, model, losses, trainer) builds on the
ops in this module. Design points:

* Storage is always float64 numpy arrays; field tensors use the layout
  (batch, channels, *spatial) with 1 or 2 trailing spatial axes.
* The operation graph is recorded per forward pass. ``backward(loss)`` runs one
  reverse sweep, accumulates ``.grad`` on every reachable leaf with
  ``requires_grad``, and frees the graph. No higher-order derivatives.
* FFT convention: unnormalized forward transform, 1/N on the inverse (numpy's
  "backward" norm). ``real_fft_forward`` / ``real_fft_inverse`` are plain value
  transforms used by the spectral machinery, solvers, and metrics; the
  differentiable spectral convolution carries its own hand-written adjoint.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, DimensionError

_INV_SQRT2 = 0.7071067811865475244
_INV_SQRT_2PI = 0.3989422804014326779

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A float64 array plus an optional gradient buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def detach_array(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def parameter(data, rng=None, shape=None, scale=None):
    """Create a trainable leaf. Either wrap ``data`` or draw uniform(-scale, scale)."""
    if data is None:
        data = rng.uniform(-scale, scale, size=shape)
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data):
    return Tensor(data, requires_grad=False)


def _node(data, parents, vjp):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def bmul(gate, x):
    """Broadcast multiply of a (B, 1, *S) gate against a (B, C, *S) field."""
    gate, x = _as_tensor(gate), _as_tensor(x)
    if gate.ndim != x.ndim or gate.shape[1] != 1 or gate.shape[0] != x.shape[0] \
            or gate.shape[2:] != x.shape[2:]:
        raise DimensionError(f"bmul: gate {gate.shape} vs field {x.shape}")
    gd, xd = gate.data, x.data
    return _node(gd * xd, (gate, x),
                 lambda g: ((g * xd).sum(axis=1, keepdims=True), g * gd))


def saff(x, a=1.0, b=0.0):
    """Affine map a*x + b with scalar a, b."""
    x = _as_tensor(x)
    a = float(a)
    return _node(a * x.data + b, (x,), lambda g: (a * g,))


def tsum(x):
    x = _as_tensor(x)
    return _node(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy() if x.shape else g,))


def tmean(x):
    x = _as_tensor(x)
    n = x.data.size
    return _node(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy() if x.shape else g / n,))


def gelu(x):
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = _as_tensor(x)
    xd = x.data
    phi_x = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi_x

    def vjp(g):
        dens = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi_x + xd * dens),)

    return _node(out, (x,), vjp)


def sigmoid(x):
    x = _as_tensor(x)
    s = expit(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def detach(x):
    """Value pass-through that blocks gradient flow (stop-gradient)."""
    return Tensor(_as_tensor(x).data)


# ---------------------------------------------------------------------------
# channel mixing


def pointwise_mix(x, w, b=None):
    """Per-point channel mix: out[b, o, ...] = sum_i w[o, i] x[b, i, ...] (+ b[o]).

    Differentiable w.r.t. x, w, and b. Equivalent to a 1x1 convolution.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2:
        raise DimensionError(f"pointwise_mix: weight must be 2-d, got {w.shape}")
    if x.ndim < 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"pointwise_mix: x {x.shape} incompatible with w {w.shape}")
    xd, wd = x.data, w.data
    out = np.einsum("oi,bi...->bo...", wd, xd)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"pointwise_mix: bias {b.shape} vs out channels {w.shape[0]}")
        out = out + b.data.reshape((1, -1) + (1,) * (x.ndim - 2))
        parents.append(b)

    def vjp(g):
        gx = np.einsum("oi,bo...->bi...", wd, g) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gflat = g.reshape(g.shape[0], g.shape[1], -1)
            xflat = xd.reshape(xd.shape[0], xd.shape[1], -1)
            gw = np.einsum("bop,bip->oi", gflat, xflat)
        grads = [gx, gw]
        if b is not None:
            axes = (0,) + tuple(range(2, g.ndim))
            grads.append(g.sum(axis=axes) if b.requires_grad else None)
        return tuple(grads)

    return _node(out, parents, vjp)


def concat_channels(parts):
    parts = [_as_tensor(p) for p in parts]
    ref = parts[0]
    for p in parts[1:]:
        if p.shape[0] != ref.shape[0] or p.shape[2:] != ref.shape[2:]:
            raise DimensionError("concat_channels: mismatched batch/spatial shapes")
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=1)
        return tuple(pc if p.requires_grad else None for pc, p in zip(pieces, parts))

    return _node(out, parts, vjp)


# ---------------------------------------------------------------------------
# spatial ops (layout (B, C, N) or (B, C, Ny, Nx))


def _spatial_axes(x):
    if x.ndim == 3:
        return (2,)
    if x.ndim == 4:
        return (2, 3)
    raise DimensionError(f"expected 3-d or 4-d field tensor, got shape {x.shape}")


def _circular_pad_axis(x, width, axis):
    xd = x.data
    n = xd.shape[axis]
    if not (0 < width <= n):
        raise DimensionError(f"circular_pad: width {width} vs extent {n}")
    head = np.take(xd, range(n - width, n), axis=axis)
    tail = np.take(xd, range(0, width), axis=axis)
    out = np.concatenate([head, xd, tail], axis=axis)

    def vjp(g):
        core = np.take(g, range(width, width + n), axis=axis).copy()
        left = np.take(g, range(0, width), axis=axis)
        right = np.take(g, range(width + n, 2 * width + n), axis=axis)
        idx_l = [slice(None)] * g.ndim
        idx_l[axis] = slice(n - width, n)
        core[tuple(idx_l)] += left
        idx_r = [slice(None)] * g.ndim
        idx_r[axis] = slice(0, width)
        core[tuple(idx_r)] += right
        return (core,)

    return _node(out, (x,), vjp)


def circular_pad(x, width):
    """Wrap-pad every spatial axis by ``width`` points on both sides."""
    x = _as_tensor(x)
    for ax in _spatial_axes(x):
        x = _circular_pad_axis(x, width, ax)
    return x


def stride2_down(x, w, b=None):
    """Circular 3-tap (1D) or 3x3 (2D) stride-2 convolution; halves spatial extents."""
    x, w = _as_tensor(x), _as_tensor(w)
    axes = _spatial_axes(x)
    dims = len(axes)
    if w.ndim != 2 + dims or w.shape[2:] != (3,) * dims:
        raise DimensionError(f"stride2_down: weight {w.shape} invalid for {dims}-d field")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(f"stride2_down: {w.shape[1]} in-channels vs field {x.shape[1]}")
    for ax in axes:
        if x.shape[ax] % 2 != 0:
            raise DimensionError(f"stride2_down: odd extent {x.shape[ax]}")
    xd, wd = x.data, w.data
    e = x.shape
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError("stride2_down: bias shape mismatch")
        parents.append(b)

    if dims == 1:
        n = e[2]
        no = n // 2
        idx = [(2 * np.arange(no) + t - 1) % n for t in range(3)]
        out = np.zeros((e[0], wd.shape[0], no))
        for t in range(3):
            out += np.einsum("oi,bin->bon", wd[:, :, t], xd[:, :, idx[t]])
        if b is not None:
            out += b.data.reshape(1, -1, 1)

        def vjp(g):
            gx = gw = gb = None
            if x.requires_grad:
                gx = np.zeros_like(xd)
                for t in range(3):
                    gx[:, :, idx[t]] += np.einsum("oi,bon->bin", wd[:, :, t], g)
            if w.requires_grad:
                gw = np.zeros_like(wd)
                for t in range(3):
                    gw[:, :, t] = np.einsum("bon,bin->oi", g, xd[:, :, idx[t]])
            grads = [gx, gw]
            if b is not None:
                gb = g.sum(axis=(0, 2)) if b.requires_grad else None
                grads.append(gb)
            return tuple(grads)

        return _node(out, parents, vjp)

    ny, nx = e[2], e[3]
    oy, ox = ny // 2, nx // 2
    iy = [(2 * np.arange(oy) + t - 1) % ny for t in range(3)]
    ix = [(2 * np.arange(ox) + t - 1) % nx for t in range(3)]
    out = np.zeros((e[0], wd.shape[0], oy, ox))
    for ty in range(3):
        for tx in range(3):
            patch = xd[:, :, iy[ty][:, None], ix[tx][None, :]]
            out += np.einsum("oi,biyx->boyx", wd[:, :, ty, tx], patch)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def vjp2(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for ty in range(3):
                for tx in range(3):
                    gx[:, :, iy[ty][:, None], ix[tx][None, :]] += np.einsum(
                        "oi,boyx->biyx", wd[:, :, ty, tx], g)
        if w.requires_grad:
            gw = np.zeros_like(wd)
            for ty in range(3):
                for tx in range(3):
                    patch = xd[:, :, iy[ty][:, None], ix[tx][None, :]]
                    gw[:, :, ty, tx] = np.einsum("boyx,biyx->oi", g, patch)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    return _node(out, parents, vjp2)


def _up_axis(x, axis):
    # doubling interpolation at half-integer offsets with circular wrap:
    # out[2i] = 0.25 x[i-1] + 0.75 x[i], out[2i+1] = 0.75 x[i] + 0.25 x[i+1]
    xd = x.data
    xl = np.roll(xd, 1, axis=axis)
    xr = np.roll(xd, -1, axis=axis)
    even = 0.25 * xl + 0.75 * xd
    odd = 0.75 * xd + 0.25 * xr
    shape = list(xd.shape)
    shape[axis] *= 2
    out = np.empty(shape)
    sl_e = [slice(None)] * xd.ndim
    sl_e[axis] = slice(0, None, 2)
    sl_o = [slice(None)] * xd.ndim
    sl_o[axis] = slice(1, None, 2)
    out[tuple(sl_e)] = even
    out[tuple(sl_o)] = odd

    def vjp(g):
        ge = g[tuple(sl_e)]
        go = g[tuple(sl_o)]
        gx = 0.75 * ge + 0.25 * np.roll(ge, -1, axis=axis) \
            + 0.75 * go + 0.25 * np.roll(go, 1, axis=axis)
        return (gx,)

    return _node(out, (x,), vjp)


def bilinear_up(x):
    """Double every spatial extent by piecewise-linear interpolation (circular)."""
    x = _as_tensor(x)
    for ax in _spatial_axes(x):
        x = _up_axis(x, ax)
    return x


def circ_central_diff(x, axis, dx):
    """Central difference (x[i+1] - x[i-1]) / (2 dx) with circular wrap."""
    x = _as_tensor(x)
    xd = x.data
    inv = 1.0 / (2.0 * dx)
    out = (np.roll(xd, -1, axis=axis) - np.roll(xd, 1, axis=axis)) * inv

    def vjp(g):
        return ((np.roll(g, 1, axis=axis) - np.roll(g, -1, axis=axis)) * inv,)

    return _node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss):
    """Reverse sweep from a scalar loss; populates leaf ``.grad`` buffers.

    Gradients accumulate across calls (callers zero them between steps). The
    recorded graph is freed afterwards, so a second backward through the same
    nodes is impossible by construction.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward: loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")

    order = []
    state = {}
    stack = [loss]
    while stack:
        t = stack[-1]
        key = id(t)
        st = state.get(key, 0)
        if st == 0:
            state[key] = 1
            for p in t._parents:
                if p.requires_grad and state.get(id(p), 0) == 0:
                    stack.append(p)
        elif st == 1:
            state[key] = 2
            order.append(t)
            stack.pop()
        else:
            stack.pop()

    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._vjp is None:
            continue
        grads = t._vjp(t.grad)
        for p, g in zip(t._parents, grads):
            if g is None or not p.requires_grad:
                continue
            if g.shape != p.data.shape:
                g = np.reshape(g, p.data.shape)
            if p.grad is None:
                p.grad = np.array(g, dtype=np.float64)
            else:
                p.grad += g
    # free the graph; keep grads only on leaves
    for t in order:
        if t._parents:
            t._parents = ()
            t._vjp = None
            t.grad = None


# ---------------------------------------------------------------------------
# real FFTs (value transforms; convention: unnormalized forward, 1/N inverse)


class ComplexTensor:
    """Paired real/imag f64 buffers holding a half-spectrum."""

    __slots__ = ("re", "im")

    def __init__(self, re, im):
        re = np.asarray(re, dtype=np.float64)
        im = np.asarray(im, dtype=np.float64)
        if re.shape != im.shape:
            raise DimensionError(f"ComplexTensor: re {re.shape} vs im {im.shape}")
        self.re = re
        self.im = im

    @property
    def shape(self):
        return self.re.shape

    @classmethod
    def from_numpy(cls, z):
        z = np.asarray(z)
        return cls(z.real.astype(np.float64), z.imag.astype(np.float64))

    def to_numpy(self):
        return self.re + 1j * self.im


def real_fft_forward(x, spatial_dims=None):
    """rfft over the trailing spatial axes; last axis stores N//2 + 1 bins."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if spatial_dims is None:
        spatial_dims = max(1, xd.ndim - 2)
    if spatial_dims not in (1, 2) or xd.ndim < spatial_dims:
        raise DimensionError(f"real_fft_forward: bad spatial_dims {spatial_dims} for {xd.shape}")
    for ax in range(xd.ndim - spatial_dims, xd.ndim):
        if xd.shape[ax] < 2:
            raise DimensionError(f"real_fft_forward: extent {xd.shape[ax]} < 2")
    if spatial_dims == 1:
        return ComplexTensor.from_numpy(np.fft.rfft(xd, axis=-1))
    return ComplexTensor.from_numpy(np.fft.rfftn(xd, axes=(-2, -1)))


def real_fft_inverse(spec, spatial_shape):
    """Inverse of real_fft_forward back onto ``spatial_shape`` grid points."""
    if not isinstance(spec, ComplexTensor):
        spec = ComplexTensor.from_numpy(spec)
    spatial_shape = tuple(int(n) for n in spatial_shape)
    dims = len(spatial_shape)
    if dims not in (1, 2):
        raise DimensionError(f"real_fft_inverse: bad spatial rank {dims}")
    z = spec.to_numpy()
    if z.shape[-1] != spatial_shape[-1] // 2 + 1:
        raise DimensionError(
            f"real_fft_inverse: half axis {z.shape[-1]} vs extent {spatial_shape[-1]}")
    if dims == 1:
        return Tensor(np.fft.irfft(z, n=spatial_shape[0], axis=-1))
    if z.shape[-2] != spatial_shape[0]:
        raise DimensionError(
            f"real_fft_inverse: axis -2 {z.shape[-2]} vs extent {spatial_shape[0]}")
    return Tensor(np.fft.irfftn(z, s=spatial_shape, axes=(-2, -1)))
