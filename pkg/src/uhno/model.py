"""U-shaped hybrid operator: encoder, bottleneck, asymmetric decoder.

Encoder levels run a hybrid block then a circular 3-tap stride-2 convolution
that doubles the channel width (C_l = C0 * 2^l). The bottleneck is a single
block at the coarsest grid. Each decoder step upsamples bilinearly, mixes down
to the finer width, and runs a block whose two branch inputs differ on purpose:
the spectral branch reads the upsampled coarse context (plus the level's W_R
residual), the Gaussian branch reads the encoder skip at that resolution. The
routed result r is stitched as GELU(W_R h~ + r), with W_R shared between the
stitch and the spectral-side residual.

Ablation modes:
  full   both branches, routed fusion
  A      spectral only (r = zF)
  B      Gaussian only (r = zG)
  C/D/E  architecture identical to full; loss weights change at training time
  F      additive fusion r = W_o [zF; zG], no gate anywhere
  G      flat stack of hybrid blocks at input resolution, parameters matched
         to full within the search budget
  H      symmetric decoder: both branches read the upsampled context
  I      Gaussian kernels left unnormalized

Every block allocates all of its structures under every mode (so unused-branch
params exist and can be probed); ``parameters()`` exposes only the mode-active
subset and ``param_count`` counts exactly that subset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .gaussian import ChannelMix, GaussianScaleBank, gaussian_branch_forward
from .spar import RoutingState, ScoreMlp, SparConfig, route, routing_logits
from .spectral import SpectralWeights, spectral_conv

ABLATION_MODES = ("full", "A", "B", "C", "D", "E", "F", "G", "H", "I")


@dataclass
class ModelConfig:
    dims: int = 1
    levels: int = 3
    base_channels: int = 32
    modes: int = 24
    scales: int = 3
    in_channels: int = 1
    out_channels: int = 1
    mode: str = "full"
    spar: SparConfig = field(default_factory=SparConfig)
    sigma_init: tuple = (0.5, 1.0, 2.5)
    flat_depth_range: tuple = (4, 12)
    flat_width_mults: tuple = (1.0, 1.5, 2.0, 2.5, 3.0)

    def validate(self):
        if self.dims not in (1, 2):
            raise ConfigError(f"dims must be 1 or 2, got {self.dims}")
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1 or self.modes < 1 or self.scales < 1:
            raise ConfigError("base_channels, modes, scales must be positive")
        if self.mode not in ABLATION_MODES:
            raise ConfigError(f"unknown ablation mode {self.mode!r}")
        if self.dims == 2 and self.base_channels % 4 != 0:
            raise ConfigError("2D base_channels must be divisible by 4 (group constraint)")
        self.spar.validate()
        return self

    def to_dict(self):
        d = dict(self.__dict__)
        d["spar"] = dict(self.spar.__dict__)
        d["sigma_init"] = list(self.sigma_init)
        d["flat_depth_range"] = list(self.flat_depth_range)
        d["flat_width_mults"] = list(self.flat_width_mults)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["spar"] = SparConfig(**d.get("spar", {}))
        for key in ("sigma_init", "flat_depth_range", "flat_width_mults"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelTrace:
    """Per-forward diagnostics: routing decisions and the consistency pair."""
    routing: list = field(default_factory=list)       # (site name, RoutingState)
    cbc_pair: tuple | None = None                     # (zF, zG) at the last decoder level
    decoder_inputs: list = field(default_factory=list)  # (site, context array, skip array)


class HybridBlock:
    def __init__(self, name, channels, cfg, rng):
        self.name = name
        self.channels = channels
        self.spectral = SpectralWeights(channels, cfg.modes, cfg.dims, rng)
        self.gaussian = GaussianScaleBank(
            channels, cfg.scales, cfg.dims, rng, sigma_init=cfg.sigma_init,
            normalize=(cfg.mode != "I"))
        self.score = ScoreMlp(channels, rng)
        bound = 1.0 / math.sqrt(2 * channels)
        self.cat_w = T.Tensor(rng.uniform(-bound, bound, size=(channels, 2 * channels)),
                              requires_grad=True)
        self.res = ChannelMix(channels, channels, rng)

    def declared(self):
        out = [(f"{self.name}.spectral.re", self.spectral.w_re),
               (f"{self.name}.spectral.im", self.spectral.w_im)]
        for m in range(self.gaussian.scales):
            out.append((f"{self.name}.gaussian.s{m}.log_sigma", self.gaussian.log_sigma[m]))
            out.append((f"{self.name}.gaussian.s{m}.pre.w", self.gaussian.pre[m].w))
            out.append((f"{self.name}.gaussian.s{m}.pre.b", self.gaussian.pre[m].b))
            out.append((f"{self.name}.gaussian.s{m}.post.w", self.gaussian.post[m].w))
            out.append((f"{self.name}.gaussian.s{m}.post.b", self.gaussian.post[m].b))
        out.append((f"{self.name}.gaussian.fuse.w", self.gaussian.fuse.w))
        out.append((f"{self.name}.gaussian.fuse.b", self.gaussian.fuse.b))
        out.append((f"{self.name}.score.w1", self.score.w1))
        out.append((f"{self.name}.score.w2", self.score.w2))
        out.append((f"{self.name}.cat.w", self.cat_w))
        out.append((f"{self.name}.res.w", self.res.w))
        out.append((f"{self.name}.res.b", self.res.b))
        return out

    def active(self, mode):
        spectral = [self.spectral.w_re, self.spectral.w_im]
        gaussian = self.gaussian.parameters()
        score = self.score.parameters()
        res = self.res.parameters()
        if mode == "A":
            return spectral + score + res
        if mode == "B":
            return gaussian + score + res
        if mode == "F":
            return spectral + gaussian + [self.cat_w] + res
        return spectral + gaussian + score + res

    def combine(self, z_f, z_g, mode, spar_cfg, trace):
        if mode == "A":
            return z_f
        if mode == "B":
            return z_g
        if mode == "F":
            return T.pointwise_mix(T.concat_channels([z_f, z_g]), self.cat_w)
        s = routing_logits(z_f, z_g, self.score)
        r, state = route(z_f, z_g, s, spar_cfg)
        trace.routing.append((self.name, state))
        return r

    def forward_symmetric(self, h, mode, spar_cfg, trace):
        """Encoder / bottleneck / flat-stack step: both branches read h."""
        z_f = spectral_conv(h, self.spectral) if mode != "B" else None
        z_g = gaussian_branch_forward(h, self.gaussian) if mode != "A" else None
        if mode == "A":
            r = z_f
        elif mode == "B":
            r = z_g
        else:
            r = self.combine(z_f, z_g, mode, spar_cfg, trace)
        out = T.gelu(T.add(self.res(h), r))
        return out, z_f, z_g

    def forward_decoder(self, context, skip, mode, spar_cfg, trace):
        """Decoder step: spectral path on upsampled context, Gaussian on skip."""
        z_f = None
        if mode != "B":
            z_f = T.add(spectral_conv(context, self.spectral), self.res(context))
        z_g = None
        if mode != "A":
            source = context if mode == "H" else skip
            z_g = gaussian_branch_forward(source, self.gaussian)
        if mode == "A":
            r = z_f
        elif mode == "B":
            r = z_g
        else:
            r = self.combine(z_f, z_g, mode, spar_cfg, trace)
        out = T.gelu(T.add(self.res(context), r))
        return out, z_f, z_g

    def branch_pair(self):
        """Matched per-depth parameter groups for the gradient-angle diagnostic
        (weights only; biases and unpaired layers excluded)."""
        g = self.gaussian
        gaussian_ws = [g.log_sigma[m] for m in range(g.scales)]
        gaussian_ws += [g.pre[m].w for m in range(g.scales)]
        gaussian_ws += [g.post[m].w for m in range(g.scales)]
        gaussian_ws.append(g.fuse.w)
        return (self.name, [self.spectral.w_re, self.spectral.w_im], gaussian_ws)


class DownSample:
    def __init__(self, name, in_ch, out_ch, dims, rng):
        self.name = name
        shape = (out_ch, in_ch) + (3,) * dims
        bound = 1.0 / math.sqrt(in_ch * 3 ** dims)
        self.w = T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.b = T.Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x):
        return T.stride2_down(x, self.w, self.b)

    def declared(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]

    def parameters(self):
        return [self.w, self.b]


def _block_param_count(channels, cfg):
    """Mode-active scalar count of one hybrid block (closed form)."""
    c = channels
    spectral = 2 * c * c * cfg.modes ** cfg.dims
    groups = c if cfg.dims == 1 else c // 4
    gaussian = cfg.scales * (groups + 2 * (c * c + c)) + (cfg.scales * c * c + c)
    score = 2 * c * c + c
    cat = 2 * c * c
    res = c * c + c
    mode = cfg.mode
    if mode == "A":
        return spectral + score + res
    if mode == "B":
        return gaussian + score + res
    if mode == "F":
        return spectral + gaussian + cat + res
    return spectral + gaussian + score + res


def _u_param_count(cfg):
    total = cfg.base_channels * cfg.in_channels + cfg.base_channels
    for lvl in range(cfg.levels - 1):
        c = cfg.base_channels * 2 ** lvl
        total += _block_param_count(c, cfg)
        total += (2 * c) * c * 3 ** cfg.dims + 2 * c
    c_top = cfg.base_channels * 2 ** (cfg.levels - 1)
    total += _block_param_count(c_top, cfg)
    for lvl in range(cfg.levels - 1, 0, -1):
        c_hi = cfg.base_channels * 2 ** lvl
        c_lo = cfg.base_channels * 2 ** (lvl - 1)
        total += c_lo * c_hi + c_lo
        total += _block_param_count(c_lo, cfg)
    total += cfg.out_channels * cfg.base_channels + cfg.out_channels
    return total


def flat_stack_shape(cfg):
    """(depth, width) for the parameter-matched flat stack (mode G).

    Joint search over depth and width multiples of the base width, minimizing
    the distance to the full model's active count; depth-only search at base
    width cannot reach the Burgers-scale count.
    """
    import dataclasses
    full_cfg = dataclasses.replace(cfg, mode="full")
    target = _u_param_count(full_cfg)
    lo, hi = cfg.flat_depth_range
    best = None
    for mult in cfg.flat_width_mults:
        width = int(round(cfg.base_channels * mult))
        if cfg.dims == 2:
            width = max(4, (width // 4) * 4)
        for depth in range(lo, hi + 1):
            flat_cfg = dataclasses.replace(cfg, mode="full")
            count = width * cfg.in_channels + width
            count += depth * _block_param_count(width, flat_cfg)
            count += cfg.out_channels * width + cfg.out_channels
            gap = abs(count - target)
            if best is None or gap < best[0]:
                best = (gap, depth, width, count)
    return best[1], best[2]


class UhnoModel:
    def __init__(self, config, seed=0):
        self.config = config.validate()
        self.seed = int(seed)
        rng = np.random.default_rng([self.seed, 0x0D0E])
        cfg = self.config
        self._declared = []
        self.blocks = []
        if cfg.mode == "G":
            depth, width = flat_stack_shape(cfg)
            self.flat_depth = depth
            self.flat_width = width
            self.lifting = ChannelMix(width, cfg.in_channels, rng)
            self._declare_mix("lifting", self.lifting)
            for d in range(depth):
                blk = HybridBlock(f"flat{d}", width, cfg, rng)
                self.blocks.append(blk)
                self._declared.extend(blk.declared())
            self.projection = ChannelMix(cfg.out_channels, width, rng)
            self._declare_mix("projection", self.projection)
            return
        self.lifting = ChannelMix(cfg.base_channels, cfg.in_channels, rng)
        self._declare_mix("lifting", self.lifting)
        self.enc_blocks = []
        self.downs = []
        for lvl in range(cfg.levels - 1):
            c = cfg.base_channels * 2 ** lvl
            blk = HybridBlock(f"enc{lvl}", c, cfg, rng)
            self.enc_blocks.append(blk)
            self.blocks.append(blk)
            self._declared.extend(blk.declared())
            down = DownSample(f"down{lvl}", c, 2 * c, cfg.dims, rng)
            self.downs.append(down)
            self._declared.extend(down.declared())
        c_top = cfg.base_channels * 2 ** (cfg.levels - 1)
        self.bottleneck = HybridBlock("bottleneck", c_top, cfg, rng)
        self.blocks.append(self.bottleneck)
        self._declared.extend(self.bottleneck.declared())
        self.up_mixes = []
        self.dec_blocks = []
        for lvl in range(cfg.levels - 1, 0, -1):
            c_hi = cfg.base_channels * 2 ** lvl
            c_lo = cfg.base_channels * 2 ** (lvl - 1)
            up = ChannelMix(c_lo, c_hi, rng)
            self.up_mixes.append(up)
            self._declare_mix(f"up{lvl}", up)
            blk = HybridBlock(f"dec{lvl - 1}", c_lo, cfg, rng)
            self.dec_blocks.append(blk)
            self.blocks.append(blk)
            self._declared.extend(blk.declared())
        self.projection = ChannelMix(cfg.out_channels, cfg.base_channels, rng)
        self._declare_mix("projection", self.projection)

    def _declare_mix(self, name, mix):
        self._declared.append((f"{name}.w", mix.w))
        if mix.b is not None:
            self._declared.append((f"{name}.b", mix.b))

    # -- parameter access ---------------------------------------------------

    def all_parameters(self):
        """(name, tensor) pairs in declaration order — the checkpoint layout."""
        return list(self._declared)

    def parameters(self):
        """Mode-active trainable tensors."""
        cfg = self.config
        out = self.lifting.parameters()[:]
        if cfg.mode == "G":
            for blk in self.blocks:
                out.extend(blk.active("full"))
        else:
            for lvl, blk in enumerate(self.enc_blocks):
                out.extend(blk.active(cfg.mode))
                out.extend(self.downs[lvl].parameters())
            out.extend(self.bottleneck.active(cfg.mode))
            for up, blk in zip(self.up_mixes, self.dec_blocks):
                out.extend(up.parameters())
                out.extend(blk.active(cfg.mode))
        out.extend(self.projection.parameters())
        return out

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for _, p in self._declared:
            p.grad = None

    def clamp_sigmas(self, lo=-2.0, hi=2.0):
        for blk in self.blocks:
            blk.gaussian.clamp_log_sigma(lo, hi)

    def branch_pairs(self):
        return [blk.branch_pair() for blk in self.blocks]

    # -- forward ------------------------------------------------------------

    def _check_input(self, x):
        cfg = self.config
        if x.ndim != 2 + cfg.dims:
            raise DimensionError(f"forward: rank {x.ndim} field for dims={cfg.dims}")
        if x.shape[1] != cfg.in_channels:
            raise DimensionError(f"forward: {x.shape[1]} channels, expected {cfg.in_channels}")
        if cfg.mode != "G":
            div = 2 ** (cfg.levels - 1)
            for n in x.shape[2:]:
                if n % div != 0:
                    raise ConfigError(
                        f"forward: extent {n} not divisible by 2^(levels-1) = {div}")

    def forward(self, x, skip_transform=None):
        """Run the operator; returns (prediction, ModelTrace)."""
        if not isinstance(x, T.Tensor):
            x = T.constant(x)
        self._check_input(x.data)
        cfg = self.config
        trace = ModelTrace()
        if cfg.mode == "G":
            h = self.lifting(x)
            z_f = z_g = None
            for blk in self.blocks:
                h, z_f, z_g = blk.forward_symmetric(h, cfg.mode, cfg.spar, trace)
            if z_f is not None and z_g is not None:
                trace.cbc_pair = (z_f, z_g)
            return self.projection(h), trace
        h = self.lifting(x)
        skips = []
        for blk, down in zip(self.enc_blocks, self.downs):
            h, _, _ = blk.forward_symmetric(h, cfg.mode, cfg.spar, trace)
            skips.append(h)
            h = down(h)
        h, _, _ = self.bottleneck.forward_symmetric(h, cfg.mode, cfg.spar, trace)
        for i, (up, blk) in enumerate(zip(self.up_mixes, self.dec_blocks)):
            level = cfg.levels - 1 - i          # decoding level -> level - 1
            context = up(T.bilinear_up(h))
            skip = skips[level - 1]
            if skip_transform is not None:
                skip = skip_transform(skip)
            trace.decoder_inputs.append((blk.name, context.data, skip.data))
            h, z_f, z_g = blk.forward_decoder(context, skip, cfg.mode, cfg.spar, trace)
            if level - 1 == 0 and z_f is not None and z_g is not None:
                trace.cbc_pair = (z_f, z_g)
        return self.projection(h), trace

    def predict(self, u):
        """Inference step on a (B, C, *S) array; no graph recording."""
        with T.no_grad():
            out, _ = self.forward(T.constant(u))
        return out.data


# ---------------------------------------------------------------------------
# checkpoint container: one JSON header line + raw little-endian f64 blocks


def save_checkpoint(model, path, step=0, extra=None):
    names = [(n, list(p.data.shape)) for n, p in model.all_parameters()]
    header = {
        "format": "uhno-checkpoint-v1",
        "config": model.config.to_dict(),
        "seed": model.seed,
        "step": int(step),
        "params": names,
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        for _, p in model.all_parameters():
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != "uhno-checkpoint-v1":
            raise ContractError(f"not a checkpoint file: {path}")
        config = ModelConfig.from_dict(header["config"])
        model = UhnoModel(config, seed=header["seed"])
        declared = model.all_parameters()
        recorded = header["params"]
        if len(declared) != len(recorded):
            raise ContractError("checkpoint parameter list does not match the config")
        for (name, p), (rec_name, rec_shape) in zip(declared, recorded):
            if name != rec_name or list(p.data.shape) != rec_shape:
                raise ContractError(f"checkpoint mismatch at {rec_name}")
            n = int(np.prod(rec_shape)) if rec_shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ContractError("checkpoint truncated")
            p.data[...] = np.frombuffer(buf, dtype="<f8").reshape(p.data.shape)
        leftover = fh.read(1)
        if leftover:
            raise ContractError("checkpoint has trailing bytes")
    return model, header
