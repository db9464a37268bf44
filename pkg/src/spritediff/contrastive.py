"""Toy contrastive text-image model: CNN image encoder (optionally
time-conditioned for noised inputs), transformer caption encoder, the
symmetric contrastive loss, the reporting score, and the input-gradient used
for guidance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import engine as eng
from .engine import Conv2d, GroupNorm, Linear, Module, Parameter, Tensor
from .models.denoiser import timestep_embedding
from .models.text import K_MAX, TextEncoder

LOGIT_SCALE_INIT = float(np.log(1.0 / 0.07))
LOGIT_SCALE_MAX = 4.6  # e^4.6 ~ 100, the reporting scale ceiling
REPORT_SCALE = 100.0


@dataclass
class ClipConfig:
    image_size: int = 16
    channels: int = 3
    width: int = 16
    embed_dim: int = 32
    text_width: int = 32
    text_layers: int = 2
    text_heads: int = 4
    time_width: int = 32
    stem_kernel: int = 5   # first conv sees a whole glyph before any pooling
    pool: str = "meanmax"  # mean | meanmax (max keeps small-glyph presence)
    noised: bool = True
    k_max: int = K_MAX
    dtype: str = "float32"

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return ClipConfig(**d)


class ImageEncoder(Module):
    """3-block CNN; the timestep embedding is added after the first block."""

    def __init__(self, cfg, rng, dtype):
        w = cfg.width
        self.conv1 = Conv2d(cfg.channels, w, cfg.stem_kernel, rng, dtype=dtype)
        self.norm1 = GroupNorm(min(4, w), w, dtype=dtype)
        self.time_proj = Linear(cfg.time_width, w, rng, dtype=dtype)
        self.conv2 = Conv2d(w, 2 * w, 3, rng, dtype=dtype)
        self.norm2 = GroupNorm(min(4, 2 * w), 2 * w, dtype=dtype)
        self.conv3 = Conv2d(2 * w, 2 * w, 3, rng, dtype=dtype)
        self.norm3 = GroupNorm(min(4, 2 * w), 2 * w, dtype=dtype)
        self.pool = cfg.pool
        head_in = 4 * w if cfg.pool == "meanmax" else 2 * w
        self.head = Linear(head_in, cfg.embed_dim, rng, dtype=dtype)

    def __call__(self, x, t_emb):
        h = eng.silu(self.norm1(self.conv1(x)))
        h = eng.avg_pool2d(h, 2)
        n, c = h.shape[0], h.shape[1]
        h = h + self.time_proj(t_emb).reshape(n, c, 1, 1)
        h = eng.silu(self.norm2(self.conv2(h)))
        h = eng.avg_pool2d(h, 2)
        h = eng.silu(self.norm3(self.conv3(h)))
        flat = h.reshape(h.shape[0], h.shape[1], -1)
        pooled = flat.mean(axis=2)
        if self.pool == "meanmax":
            pooled = eng.concat([pooled, eng.max_(flat, axis=2)], axis=1)
        return self.head(pooled)


def normalize(x, eps=1e-8):
    """Unit-normalize along the last axis."""
    norm = eng.sqrt((x * x).sum(axis=-1, keepdims=True)) + eps
    return x * norm ** -1.0


class EmbeddingModel(Module):
    """Image encoder f(x[, t]) and caption encoder g(c) with a learnable,
    clamped logit scale."""

    def __init__(self, config, rng):
        self.config = config
        dtype = np.dtype(config.dtype)
        self.image = ImageEncoder(config, rng, dtype)
        self.text = TextEncoder(config.text_width, config.text_layers,
                                config.text_heads, rng, k_max=config.k_max, dtype=dtype)
        self.text_head = Linear(config.text_width, config.embed_dim, rng, dtype=dtype)
        self.logit_scale_log = Parameter(np.array([LOGIT_SCALE_INIT]), dtype=dtype)

    @property
    def noised(self):
        return self.config.noised

    def logit_scale(self):
        return eng.exp(eng.clip(self.logit_scale_log, None, LOGIT_SCALE_MAX))

    def encode_image(self, x, t=None):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.dtype(self.config.dtype)))
        n = x.shape[0]
        if not self.config.noised or t is None:
            t = 0
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        t_emb = Tensor(timestep_embedding(t, self.config.time_width, x.dtype))
        return normalize(self.image(x, t_emb))

    def encode_text(self, tokens_list):
        final, _, _ = self.text(tokens_list)
        return normalize(self.text_head(final))

    def dot_gradient(self, x, t, tokens, text_emb=None):
        """Gradient of sum_i f(x_i, t) . g(c_i) w.r.t. the images."""
        return clip_gradient(x, t, tokens, self, text_emb=text_emb)


def contrastive_loss_from_logits(logits):
    """Symmetric cross-entropy over an (N, N) logit matrix."""
    n = logits.shape[0]
    labels = np.arange(n)
    return 0.5 * (eng.cross_entropy(logits, labels)
                  + eng.cross_entropy(logits.transpose((1, 0)), labels))


def contrastive_loss(images, tokens_list, model, t=None):
    """Batch contrastive loss; `t` optionally noises the time conditioning."""
    if len(tokens_list) != (images.shape[0] if hasattr(images, "shape") else len(images)):
        raise ValueError("images and captions must be the same length")
    f = model.encode_image(images, t)
    g = model.encode_text(tokens_list)
    logits = f @ g.transpose((1, 0)) * model.logit_scale()
    return contrastive_loss_from_logits(logits)


def clip_score_from_dots(dots, scale=REPORT_SCALE):
    return float(scale * np.mean(np.asarray(dots)))


def clip_score(images, captions, model, scale=REPORT_SCALE):
    """Mean scaled image-caption dot product (reporting scale fixed at 100)."""
    n = images.shape[0] if hasattr(images, "shape") else len(images)
    if len(captions) != n:
        raise ValueError(f"{n} images vs {len(captions)} captions")
    with eng.no_grad():
        f = model.encode_image(images, None)
        g = model.encode_text(captions)
        dots = (f.data * g.data).sum(axis=1)
    return clip_score_from_dots(dots, scale)


def clip_gradient(x_t, t, tokens, model, text_emb=None):
    """d/dx of the per-sample embedding dot product, shape of x_t."""
    x = Tensor(np.asarray(x_t, dtype=np.dtype(model.config.dtype)), requires_grad=True)
    f = model.encode_image(x, t)
    if text_emb is None:
        g = model.encode_text(tokens)
    elif not isinstance(text_emb, Tensor):
        g = Tensor(np.asarray(text_emb, dtype=f.dtype))
    else:
        g = text_emb
    (f * g.detach()).sum().backward()
    return x.grad


def train_noised_clip(dataset, schedule, config):
    """Train the noised contrastive model; see trainer.train_clip."""
    from .trainer import train_clip

    return train_clip(dataset, schedule, config)
