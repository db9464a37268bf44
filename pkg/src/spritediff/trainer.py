"""Training loops for every stage: base model, classifier-free fine-tune,
inpainting fine-tune, upsampler, and the contrastive model; deterministic
seeding, line-delimited metrics, and checkpointing on a cadence.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import diffusion as dfn
from .contrastive import ClipConfig, EmbeddingModel, contrastive_loss
from .engine import Adam, Tensor
from .models import DenoiserConfig, SpriteDenoiser, build_base, build_inpaint, build_upsampler
from .datagen.masks import random_mask
from .service.checkpoint import load_into, save_model, vocab_fingerprint


class TrainingDiverged(RuntimeError):
    def __init__(self, step, lr):
        self.step = step
        self.lr = lr
        super().__init__(f"loss became non-finite at step {step} (lr {lr})")


@dataclass
class TrainConfig:
    stage: str = "base"  # base | cfg_finetune | inpaint_finetune | upsampler | clip
    iterations: int = 500
    batch_size: int = 32
    lr: float = 1e-4
    lr_final: Optional[float] = None  # linear decay target; None = constant
    seed: int = 0
    p_drop: Optional[float] = None   # defaults per stage
    hybrid_weight: float = 0.001
    use_hybrid: bool = True
    eval_cadence: int = 0            # 0: only the final checkpoint
    checkpoint_dir: Optional[str] = None
    schedule_kind: str = "cosine"
    T: int = 1000
    model: dict = field(default_factory=dict)  # DenoiserConfig / ClipConfig overrides

    def drop_probability(self):
        if self.p_drop is not None:
            return self.p_drop
        return 0.2 if self.stage == "cfg_finetune" else 0.0

    def lr_at(self, step):
        if self.lr_final is None or self.iterations <= 1:
            return self.lr
        frac = step / (self.iterations - 1)
        return self.lr + (self.lr_final - self.lr) * frac


@dataclass
class SpriteDataset:
    images: np.ndarray            # (N, C, H, W) in [-1, 1]
    tokens: list                  # CaptionTokens per image
    captions: list

    @staticmethod
    def from_corpus(corpus):
        from .models import tokenize

        images = np.stack([img for img, _, _ in corpus]).astype(np.float32)
        captions = [cap for _, cap, _ in corpus]
        return SpriteDataset(images, [tokenize(c) for c in captions], captions)

    def __len__(self):
        return len(self.captions)


def box_downsample(images, factor=2):
    """Box-filter downsample of (N, C, H, W) by an integer factor."""
    n, c, h, w = images.shape
    return images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def caption_drop_mask(rng, n, p_drop):
    """i.i.d. Bernoulli(p_drop) per example: True means replace with the
    empty sequence."""
    return rng.random(n) < p_drop


def _rngs(seed):
    root = np.random.SeedSequence(seed)
    model_seq, train_seq = root.spawn(2)
    return np.random.default_rng(model_seq), np.random.default_rng(train_seq)


def _metrics_writer(path):
    if path is None:
        return None
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return open(path, "a")


def _emit(records, fh, rec):
    records.append(rec)
    if fh is not None:
        fh.write(json.dumps(rec) + "\n")
        fh.flush()


def _maybe_checkpoint(model, config, step, arch="denoiser"):
    if not config.checkpoint_dir:
        return
    os.makedirs(config.checkpoint_dir, exist_ok=True)
    path = os.path.join(config.checkpoint_dir, f"{config.stage}_{step:06d}.gldm")
    save_model(path, model, arch, config.schedule_kind, config.T, vocab_fingerprint())


def diffusion_loss(model, x0, tokens, t, eps, schedule, config, extras=None):
    """Hybrid (or plain) objective for one batch; gradient-ready scalar."""
    x_t = dfn.q_sample(x0, t, eps, schedule).astype(x0.dtype)
    out = model.forward(Tensor(x_t), t, tokens, **(extras or {}))
    loss = dfn.simple_term(eps, out.eps)
    if config.use_hybrid:
        # t = 0 rows are excluded: the posterior there is degenerate
        weights = (t >= 1).astype(np.float64)
        loss = loss + config.hybrid_weight * dfn.vlb_term(
            x0, x_t, t, out.eps, out.v, schedule, weights=weights)
    return loss


def _train_denoiser(model, dataset, config, schedule, metrics_path=None,
                    batch_extras=None, empty_counter=None):
    from .models import EMPTY

    _, rng = _rngs(config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    fh = _metrics_writer(metrics_path)
    records = []
    p_drop = config.drop_probability()
    n = len(dataset)
    try:
        for step in range(config.iterations):
            t_begin = time.monotonic()
            idx = rng.integers(0, n, size=config.batch_size)
            x0 = dataset.images[idx]
            tokens = [dataset.tokens[i] for i in idx]
            if p_drop > 0:
                drops = caption_drop_mask(rng, config.batch_size, p_drop)
                tokens = [EMPTY if d else tok for tok, d in zip(tokens, drops)]
                if empty_counter is not None:
                    empty_counter.append(drops)
            t = rng.integers(0, schedule.T, size=config.batch_size)
            eps = rng.standard_normal(x0.shape).astype(x0.dtype)
            extras = batch_extras(x0, idx, rng) if batch_extras else None
            loss = diffusion_loss(model, x0, tokens, t, eps, schedule, config,
                                  extras=extras)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(step, opt.lr)
            opt.zero_grad()
            loss.backward()
            opt.lr = config.lr_at(step)
            opt.step()
            _emit(records, fh, {"step": step, "loss": value,
                                "wall_ms": (time.monotonic() - t_begin) * 1e3})
            if config.eval_cadence and (step + 1) % config.eval_cadence == 0:
                _maybe_checkpoint(model, config, step + 1)
    finally:
        if fh is not None:
            fh.close()
    _maybe_checkpoint(model, config, config.iterations)
    return records


def validation_loss(model, dataset, schedule, config, seed=10_000, batches=4,
                    extras_fn=None):
    """Fixed-seed simple-loss estimate on held-out data."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(batches):
        idx = rng.integers(0, len(dataset), size=config.batch_size)
        x0 = dataset.images[idx]
        tokens = [dataset.tokens[i] for i in idx]
        t = rng.integers(0, schedule.T, size=config.batch_size)
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
        x_t = dfn.q_sample(x0, t, eps, schedule).astype(x0.dtype)
        extras = extras_fn(x0, idx, rng) if extras_fn else None
        import spritediff.engine as eng

        with eng.no_grad():
            out = model.forward(Tensor(x_t), t, tokens, **(extras or {}))
        total += dfn.simple_term(eps, out.eps).item()
    return total / batches


def train_base(dataset, config, schedule=None):
    """Pre-train the text-conditional base model (no caption dropping)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    schedule = schedule or dfn.make_schedule(config.schedule_kind, config.T)
    model_rng, _ = _rngs(config.seed)
    model = build_base(model_rng, **config.model)
    metrics = _train_denoiser(model, dataset, config, schedule,
                              metrics_path=_default_metrics(config))
    return model, metrics


def finetune_cfg(model, dataset, config, schedule=None):
    """Resume training with captions dropped to the empty sequence."""
    p = config.drop_probability()
    if not 0.0 < p < 1.0:
        raise ValueError(f"cfg fine-tune needs p_drop in (0,1), got {p}")
    schedule = schedule or dfn.make_schedule(config.schedule_kind, config.T)
    empties = []
    metrics = _train_denoiser(model, dataset, config, schedule,
                              metrics_path=_default_metrics(config),
                              empty_counter=empties)
    model.supports_empty = True
    observed = float(np.concatenate(empties).mean()) if empties else 0.0
    return model, metrics, observed


def finetune_inpaint(base_model_or_state, dataset, config, schedule=None):
    """Expand the base model with zero-init context channels and fine-tune on
    randomly erased regions."""
    schedule = schedule or dfn.make_schedule(config.schedule_kind, config.T)
    model_rng, _ = _rngs(config.seed)
    if isinstance(base_model_or_state, SpriteDenoiser):
        base_cfg = base_model_or_state.config.to_dict()
        state = base_model_or_state.state_dict()
        supports_empty = base_model_or_state.supports_empty
    else:
        header, state = base_model_or_state
        base_cfg = dict(header["config"])
        supports_empty = bool(header.get("supports_empty", False))
    base_cfg["variant"] = "inpaint"
    model = SpriteDenoiser(DenoiserConfig.from_dict(base_cfg), model_rng)
    load_into(model, state, allow_missing_prefixes=("conv_in_extra.",))
    model.supports_empty = supports_empty
    _check_zero_init_equivalence(model, state, base_cfg)

    def make_extras(x0, idx, rng):
        masks = np.stack([random_mask(rng, x0.shape[-1])[0] for _ in idx])
        return {"context_rgb": x0 * masks, "mask": masks}

    metrics = _train_denoiser(model, dataset, config, schedule,
                              metrics_path=_default_metrics(config),
                              batch_extras=make_extras)
    return model, metrics


def _check_zero_init_equivalence(inpaint_model, state, base_cfg):
    """The freshly expanded model must reproduce the base bit-exactly."""
    cfg = dict(base_cfg)
    cfg["variant"] = "base"
    probe = SpriteDenoiser(DenoiserConfig.from_dict(cfg), np.random.default_rng(0))
    load_into(probe, state)
    rng = np.random.default_rng(1234)
    x = rng.standard_normal((2, probe.config.channels, probe.config.image_size,
                             probe.config.image_size)).astype(np.float32)
    toks = probe.null_cond(2)
    a = probe.predict(x, 3, toks)
    ctx = rng.standard_normal(x.shape).astype(np.float32)
    mask = (rng.random((2, 1, x.shape[2], x.shape[3])) > 0.5).astype(np.float32)
    b = inpaint_model.predict(x, 3, toks, context_rgb=ctx * mask, mask=mask)
    if not (np.array_equal(a.eps, b.eps) and np.array_equal(a.v, b.v)):
        raise RuntimeError("zero-init inpaint expansion is not equivalent to the base model")


def train_upsampler(dataset_hi, config, schedule=None):
    """Train the conditioned upsampler on (hi, box-downsampled lo) pairs."""
    if len(dataset_hi) == 0:
        raise ValueError("dataset is empty")
    schedule = schedule or dfn.make_schedule(config.schedule_kind, config.T)
    model_rng, _ = _rngs(config.seed)
    overrides = dict(config.model)
    image_size = overrides.pop("image_size", dataset_hi.images.shape[-1])
    model = build_upsampler(model_rng, image_size=image_size, **overrides)
    lows = box_downsample(dataset_hi.images).astype(np.float32)

    def make_extras(x0, idx, rng):
        return {"low_res": lows[idx]}

    metrics = _train_denoiser(model, dataset_hi, config, schedule,
                              metrics_path=_default_metrics(config),
                              batch_extras=make_extras)
    return model, metrics


def train_clip(dataset, schedule, config):
    """Contrastive training; each image is noised to a uniform-random t with
    the shared diffusion schedule before encoding (the noised variant)."""
    model_rng, rng = _rngs(config.seed)
    cfg = ClipConfig(**config.model) if config.model else ClipConfig()
    model = EmbeddingModel(cfg, model_rng)
    opt = Adam(model.parameters(), lr=config.lr)
    fh = _metrics_writer(_default_metrics(config))
    records = []
    n = len(dataset)
    try:
        for step in range(config.iterations):
            t_begin = time.monotonic()
            idx = rng.integers(0, n, size=config.batch_size)
            x = dataset.images[idx]
            tokens = [dataset.tokens[i] for i in idx]
            if cfg.noised:
                t = rng.integers(0, schedule.T, size=config.batch_size)
                eps = rng.standard_normal(x.shape).astype(x.dtype)
                x = dfn.q_sample(x, t, eps, schedule).astype(x.dtype)
            else:
                t = None
            loss = contrastive_loss(x, tokens, model, t)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(step, opt.lr)
            opt.zero_grad()
            loss.backward()
            opt.lr = config.lr_at(step)
            opt.step()
            _emit(records, fh, {"step": step, "loss": value,
                                "wall_ms": (time.monotonic() - t_begin) * 1e3})
            if config.eval_cadence and (step + 1) % config.eval_cadence == 0:
                _maybe_checkpoint(model, config, step + 1, arch="clip")
    finally:
        if fh is not None:
            fh.close()
    _maybe_checkpoint(model, config, config.iterations, arch="clip")
    return model, records


def _default_metrics(config):
    if not config.checkpoint_dir:
        return None
    return os.path.join(config.checkpoint_dir, f"{config.stage}_metrics.jsonl")


def save_denoiser(path, model, config, supports_empty=None):
    save_model(path, model, "denoiser", config.schedule_kind, config.T,
               vocab_fingerprint(),
               extra={"supports_empty": bool(model.supports_empty
                                             if supports_empty is None else supports_empty)})


def load_denoiser(path):
    from .service.checkpoint import read_checkpoint

    header, state = read_checkpoint(path)
    if header.get("arch") != "denoiser":
        raise ValueError(f"checkpoint arch {header.get('arch')!r} is not a denoiser")
    model = SpriteDenoiser(DenoiserConfig.from_dict(header["config"]),
                           np.random.default_rng(0))
    load_into(model, state)
    model.supports_empty = bool(header.get("supports_empty", False))
    return model, header


def save_clip(path, model, config):
    save_model(path, model, "clip", config.schedule_kind, config.T, vocab_fingerprint())


def load_clip(path):
    from .service.checkpoint import read_checkpoint

    header, state = read_checkpoint(path)
    if header.get("arch") != "clip":
        raise ValueError(f"checkpoint arch {header.get('arch')!r} is not a clip model")
    model = EmbeddingModel(ClipConfig.from_dict(header["config"]),
                           np.random.default_rng(0))
    load_into(model, state)
    return model, header
