"""Text-conditional image denoisers: base, upsampler and inpainting variants.

A two-level U-Net: residual blocks at full and half resolution, one attention
layer at the lowest resolution where the projected caption sequence is
appended to the keys/values. The time embedding and the caption's final-token
embedding are summed and injected into every residual block.

The inpainting variant routes its four extra input channels (masked context
RGB + mask) through a separate zero-initialised stem added to the base stem;
by linearity that is the same parameterisation as widening the first
convolution, but the untouched base path stays bit-identical at init.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import engine as eng
from ..diffusion import DenoiserOutput
from ..engine import Conv2d, GroupNorm, Linear, Module, MultiHeadAttention, Tensor
from .text import K_MAX, VOCAB, TextEncoder


@dataclass
class DenoiserConfig:
    image_size: int = 16
    channels: int = 3
    base_width: int = 32
    channel_mult: tuple = (1, 2)
    res_blocks: int = 2
    text_width: int = 64
    text_layers: int = 2
    text_heads: int = 4
    time_width: int = 64
    attn_heads: int = 4
    variant: str = "base"  # base | upsampler | inpaint
    k_max: int = K_MAX
    dtype: str = "float32"

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["channel_mult"] = tuple(d.get("channel_mult", (1, 2)))
        return DenoiserConfig(**d)


def _groups(channels):
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t, dim, dtype=np.float32):
    """Sinusoidal features of integer timesteps, shape (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class ResBlock(Module):
    """Residual block with scale-shift conditioning: the embedding modulates
    the second normalization multiplicatively, so timestep-dependent gains
    are directly representable."""

    def __init__(self, c_in, c_out, emb_width, rng, dtype=np.float32):
        self.norm1 = GroupNorm(_groups(c_in), c_in, dtype=dtype)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype=dtype)
        # zero-init: modulation starts as identity and is learned
        self.emb = Linear(emb_width, 2 * c_out, rng, zero_init=True, dtype=dtype)
        self.norm2 = GroupNorm(_groups(c_out), c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, zero_init=True, dtype=dtype)
        self.skip = Conv2d(c_in, c_out, 1, rng, dtype=dtype) if c_in != c_out else None

    def __call__(self, x, emb):
        h = self.conv1(eng.silu(self.norm1(x)))
        n, c = h.shape[0], h.shape[1]
        mod = self.emb(eng.silu(emb)).reshape(n, 2 * c, 1, 1)
        scale, shift = mod[:, :c], mod[:, c:]
        h = self.norm2(h) * (scale + 1.0) + shift
        h = self.conv2(eng.silu(h))
        return (self.skip(x) if self.skip else x) + h


class AttnBlock(Module):
    """Spatial self-attention with the caption sequence in the context."""

    def __init__(self, channels, heads, text_width, rng, dtype=np.float32):
        self.norm = GroupNorm(_groups(channels), channels, dtype=dtype)
        self.attn = MultiHeadAttention(channels, heads, rng, dtype=dtype)
        self.text_proj = Linear(text_width, channels, rng, dtype=dtype)

    def __call__(self, x, text_seq, text_valid):
        n, c, h, w = x.shape
        flat = self.norm(x).reshape(n, c, h * w).transpose((0, 2, 1))
        ctx = self.text_proj(text_seq)
        valid = np.concatenate(
            [np.ones((n, h * w), dtype=bool), text_valid], axis=1
        )
        out = self.attn(flat, context=ctx, mask=eng.key_padding_bias(valid, dtype=flat.dtype))
        return x + out.transpose((0, 2, 1)).reshape(n, c, h, w)


class SpriteDenoiser(Module):
    """Predicts (eps, v) for a noised sprite given timestep and caption."""

    clip_x0 = True
    supports_empty = False  # flipped by the classifier-free fine-tune

    def __init__(self, config, rng):
        self.config = config
        dtype = np.dtype(config.dtype)
        c = config.channels
        w = config.base_width
        tw = config.time_width
        self.text = TextEncoder(config.text_width, config.text_layers,
                                config.text_heads, rng, k_max=config.k_max, dtype=dtype)
        self.time_fc1 = Linear(tw, tw, rng, dtype=dtype)
        self.time_fc2 = Linear(tw, tw, rng, dtype=dtype)
        self.cond_proj = Linear(config.text_width, tw, rng, dtype=dtype)

        stem_in = 2 * c if config.variant == "upsampler" else c
        self.conv_in = Conv2d(stem_in, w, 3, rng, dtype=dtype)
        if config.variant == "inpaint":
            # extra stem over (context rgb, mask); zero weights at init keep
            # the output bit-identical to the base checkpoint
            self.conv_in_extra = Conv2d(c + 1, w, 3, rng, zero_init=True, dtype=dtype)
        else:
            self.conv_in_extra = None

        m0 = w * config.channel_mult[0]
        m1 = w * config.channel_mult[1]
        self.down0 = [ResBlock(w if i == 0 else m0, m0, tw, rng, dtype=dtype)
                      for i in range(config.res_blocks)]
        self.down1 = [ResBlock(m0 if i == 0 else m1, m1, tw, rng, dtype=dtype)
                      for i in range(config.res_blocks)]
        self.mid_attn = AttnBlock(m1, config.attn_heads, config.text_width, rng, dtype=dtype)
        self.mid_res = ResBlock(m1, m1, tw, rng, dtype=dtype)
        self.up_conv = Conv2d(m1, m0, 3, rng, dtype=dtype)
        self.up0 = [ResBlock(2 * m0 if i == 0 else m0, m0, tw, rng, dtype=dtype)
                    for i in range(config.res_blocks)]
        self.norm_out = GroupNorm(_groups(m0), m0, dtype=dtype)
        self.conv_out = Conv2d(m0, 2 * c, 3, rng, dtype=dtype)

    def null_cond(self, n):
        from .text import EMPTY

        return [EMPTY] * n

    def forward(self, x, t, tokens, low_res=None, context_rgb=None, mask=None):
        cfg = self.config
        n = x.shape[0]
        if x.shape[1] != cfg.channels or x.shape[2] != cfg.image_size:
            raise eng.ShapeError("denoiser", x.shape,
                                 (n, cfg.channels, cfg.image_size, cfg.image_size))
        dtype = x.dtype

        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        emb = Tensor(timestep_embedding(t, cfg.time_width, dtype))
        emb = self.time_fc2(eng.silu(self.time_fc1(emb)))
        final, seq, valid = self.text(tokens)
        emb = emb + self.cond_proj(final)

        if cfg.variant == "upsampler":
            if low_res is None:
                raise ValueError("upsampler variant requires low_res")
            lr = Tensor(np.asarray(low_res, dtype=dtype))
            if lr.shape[0] != n or lr.shape[1] != cfg.channels:
                raise eng.ShapeError("upsampler low_res", lr.shape, x.shape)
            upsampled = eng.upsample_bicubic2d(lr, cfg.image_size, cfg.image_size)
            h = self.conv_in(eng.concat([x, upsampled], axis=1))
        elif cfg.variant == "inpaint":
            if context_rgb is None or mask is None:
                raise ValueError("inpaint variant requires context_rgb and mask")
            ctx = np.asarray(context_rgb, dtype=dtype)
            msk = np.asarray(mask, dtype=dtype)
            if msk.shape != (n, 1, cfg.image_size, cfg.image_size):
                raise eng.ShapeError("inpaint mask", msk.shape,
                                     (n, 1, cfg.image_size, cfg.image_size))
            extra = Tensor(np.concatenate([ctx, msk], axis=1))
            h = self.conv_in(x) + self.conv_in_extra(extra)
        else:
            if low_res is not None or context_rgb is not None or mask is not None:
                raise ValueError("base variant takes no conditioning images")
            h = self.conv_in(x)

        for block in self.down0:
            h = block(h, emb)
        skip = h
        h = eng.avg_pool2d(h, 2)
        for block in self.down1:
            h = block(h, emb)
        h = self.mid_attn(h, seq, valid)
        h = self.mid_res(h, emb)
        h = self.up_conv(eng.upsample_nearest2d(h, 2))
        h = eng.concat([h, skip], axis=1)
        for block in self.up0:
            h = block(h, emb)
        out = self.conv_out(eng.silu(self.norm_out(h)))
        c = cfg.channels
        return DenoiserOutput(out[:, :c], out[:, c:])

    def predict(self, x, t, tokens, **extras):
        """Numpy-in/numpy-out inference wrapper (no graph construction)."""
        with eng.no_grad():
            out = self.forward(Tensor(np.asarray(x, dtype=np.dtype(self.config.dtype))),
                               t, tokens, **extras)
        return DenoiserOutput(out.eps.data, out.v.data)


def build_base(rng, **overrides):
    return SpriteDenoiser(DenoiserConfig(**overrides), rng)


def build_upsampler(rng, image_size=32, text_width=32, **overrides):
    cfg = DenoiserConfig(image_size=image_size, text_width=text_width,
                         variant="upsampler", **overrides)
    return SpriteDenoiser(cfg, rng)


def build_inpaint(rng, **overrides):
    return SpriteDenoiser(DenoiserConfig(variant="inpaint", **overrides), rng)
