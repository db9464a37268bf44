"""Sampling loops: ancestral generation on full or strided schedules, the two
inpainting procedures, SDEdit, and two-stage base+upsampler generation.

Every loop is a pure function of (weights, request, seed): randomness comes
only from the caller's Generator, and the final step draws no noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .diffusion import q_sample
from .guidance import GuidanceStrategy, guided_step_outputs


def build_strided(T, segments):
    """Timestep subsequence from (start, end, count) segments partitioning [0, T).

    Within a segment steps are floor(linspace(start, end, count)) with the
    endpoint excluded; counts above the segment width would collide and are
    rejected.
    """
    segs = sorted((int(a), int(b), int(c)) for a, b, c in segments)
    cursor = 0
    steps = []
    for start, end, count in segs:
        if start != cursor:
            raise ValueError(f"segments must partition [0,{T}): gap/overlap at {start}")
        if count < 1:
            raise ValueError("segment counts must be >= 1")
        if count > end - start:
            raise ValueError(f"count {count} exceeds segment width {end - start}")
        steps.extend(np.floor(np.linspace(start, end, count, endpoint=False)).astype(np.int64))
        cursor = end
    if cursor != T:
        raise ValueError(f"segments must partition [0,{T}): ends at {cursor}")
    out = np.unique(np.asarray(steps, dtype=np.int64))
    if len(out) != sum(c for _, _, c in segs):
        raise ValueError("segments produced duplicate timesteps")
    return out


def even_segments(T, counts):
    """Equal-width segments over [0, T) with the given per-segment counts."""
    k = len(counts)
    if T % k:
        raise ValueError(f"T={T} not divisible into {k} equal segments")
    w = T // k
    return [(i * w, (i + 1) * w, c) for i, c in enumerate(counts)]


UPSAMPLER_SEGMENT_COUNTS = (10, 10, 3, 2, 2)  # 27-step schedule


@dataclass
class SampleRequest:
    """Inputs that fully determine a sampling run for fixed weights."""

    prompt: str = ""
    strategy: Optional[GuidanceStrategy] = None
    steps: Optional[Any] = None      # None = full schedule, int = single segment, or segment list
    seed: int = 0
    count: int = 1
    mask: Optional[np.ndarray] = None
    known: Optional[np.ndarray] = None
    init_image: Optional[np.ndarray] = None
    t_start: Optional[int] = None
    extra: dict = field(default_factory=dict)


def respaced(schedule, steps):
    """Resolve a steps spec: None (full), an int (one even segment), a tuple
    of per-segment counts over equal ranges, or explicit (start, end, count)
    triples."""
    if steps is None:
        return schedule
    if isinstance(steps, (int, np.integer)):
        return schedule.respace(build_strided(schedule.T, [(0, schedule.T, int(steps))]))
    steps = list(steps)
    if steps and np.isscalar(steps[0]):
        segments = even_segments(schedule.T, [int(c) for c in steps])
    else:
        segments = steps
    return schedule.respace(build_strided(schedule.T, segments))


def _as_rng(rng):
    return np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng


def _step(denoiser, strategy, schedule, x, i, cond, rng, extras, dtype):
    """x_{i} -> x_{i-1}: mu_hat + sqrt(sigma) z, with z = 0 on the final step."""
    mu, sigma = guided_step_outputs(denoiser, strategy, x, i, cond, schedule,
                                    extras=extras)
    if i > 0:
        z = rng.standard_normal(x.shape).astype(dtype, copy=False)
        return (mu + np.sqrt(sigma) * z).astype(dtype, copy=False)
    return mu.astype(dtype, copy=False)


def ancestral_sample(denoiser, strategy, schedule, shape, cond, rng,
                     extras=None, dtype=np.float64):
    """Plain reverse-chain sampling from Gaussian noise."""
    rng = _as_rng(rng)
    x = rng.standard_normal(shape).astype(dtype, copy=False)
    for i in range(schedule.T - 1, -1, -1):
        x = _step(denoiser, strategy, schedule, x, i, cond, rng, extras, dtype)
    return x


def inpaint_replacement(denoiser, strategy, schedule, x0_known, mask, cond, rng,
                        extras=None, dtype=np.float64):
    """Generate while forcing the known region to q(x_t | x0) after each step.

    mask is 1 on known pixels; after the final step the known region is set
    to x0_known exactly, so known pixels round-trip bit-exactly. An all-zero
    mask draws exactly the same noise stream as ancestral_sample.
    """
    rng = _as_rng(rng)
    x0_known = np.asarray(x0_known, dtype=dtype)
    mask = np.asarray(mask)
    if mask.shape[-2:] != x0_known.shape[-2:] or mask.ndim != x0_known.ndim:
        raise ValueError(f"mask shape {mask.shape} does not match image {x0_known.shape}")
    any_known = bool(np.any(mask > 0))
    x = rng.standard_normal(x0_known.shape).astype(dtype, copy=False)
    for i in range(schedule.T - 1, -1, -1):
        x = _step(denoiser, strategy, schedule, x, i, cond, rng, extras, dtype)
        if not any_known:
            continue
        if i > 0:
            eps = rng.standard_normal(x0_known.shape).astype(dtype, copy=False)
            known_t = q_sample(x0_known, i - 1, eps, schedule).astype(dtype, copy=False)
            x = np.where(mask > 0, known_t, x)
        else:
            x = np.where(mask > 0, x0_known, x)
    return x


def inpaint_finetuned(denoiser, strategy, schedule, x0_known, mask, cond, rng,
                      dtype=np.float32, return_pre_restore=False):
    """Sample the fine-tuned inpainting model: masked context and mask ride
    along as extra input channels every step; the known region is restored
    once at the end."""
    if getattr(denoiser, "config", None) is None or denoiser.config.variant != "inpaint":
        raise ValueError("inpaint_finetuned requires the inpaint model variant")
    rng = _as_rng(rng)
    x0_known = np.asarray(x0_known, dtype=dtype)
    mask = np.asarray(mask, dtype=dtype)
    extras = {"context_rgb": x0_known * mask, "mask": mask}
    x = rng.standard_normal(x0_known.shape).astype(dtype, copy=False)
    for i in range(schedule.T - 1, -1, -1):
        x = _step(denoiser, strategy, schedule, x, i, cond, rng, extras, dtype)
    pre_restore = x
    restored = np.where(mask > 0, x0_known, x).astype(dtype, copy=False)
    if return_pre_restore:
        return restored, pre_restore
    return restored


def sdedit(denoiser, strategy, schedule, x_init, t_start, cond, rng,
           dtype=np.float32, extras=None):
    """Noise x_init `t_start` schedule steps in, then denoise from there.

    t_start = 0 returns x_init unchanged; t_start = len(schedule) is a full
    generation that ignores x_init's content distributionally.
    """
    rng = _as_rng(rng)
    if not 0 <= t_start <= schedule.T:
        raise ValueError(f"t_start {t_start} outside [0, {schedule.T}]")
    x_init = np.asarray(x_init, dtype=dtype)
    if t_start == 0:
        return x_init
    eps = rng.standard_normal(x_init.shape).astype(dtype, copy=False)
    x = q_sample(x_init, t_start - 1, eps, schedule).astype(dtype, copy=False)
    for i in range(t_start - 1, -1, -1):
        x = _step(denoiser, strategy, schedule, x, i, cond, rng, extras, dtype)
    return x


def two_stage(base_denoiser, base_strategy, base_schedule, upsampler,
              up_schedule, shape, cond, rng, up_strategy=None,
              dtype=np.float32):
    """Base-resolution generation followed by conditioned upsampling.

    Guidance is off for the upsampling stage by default.
    """
    rng = _as_rng(rng)
    low = ancestral_sample(base_denoiser, base_strategy, base_schedule, shape,
                           cond, rng, dtype=dtype)
    size = upsampler.config.image_size
    if size % low.shape[-1]:
        raise ValueError(f"upsampler size {size} incompatible with base {low.shape[-1]}")
    hi_shape = low.shape[:2] + (size, size)
    hi = ancestral_sample(upsampler, up_strategy, up_schedule, hi_shape, cond,
                          rng, extras={"low_res": low}, dtype=dtype)
    return hi, low


def two_stage_inpaint(upsampler, up_strategy, up_schedule, hi_known, hi_mask,
                      low_full, cond, rng, dtype=np.float32):
    """Upsampler-side inpainting: the full low-resolution image conditions the
    model, while the high-resolution known region enters only through
    replacement of the masked area."""
    return inpaint_replacement(upsampler, up_strategy, up_schedule, hi_known,
                               hi_mask, cond, rng,
                               extras={"low_res": np.asarray(low_full, dtype=dtype)},
                               dtype=dtype)
