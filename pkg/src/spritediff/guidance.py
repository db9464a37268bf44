"""Per-step guidance transforms: classifier, classifier-free, and contrastive
steering of the reverse-process mean, plus the strategy dispatch used by the
sampling loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .diffusion import mu_from_eps, sigma_from_v

KINDS = ("none", "classifier", "classifier_free", "clip")


@dataclass
class GuidanceStrategy:
    """How to steer one reverse step; `scale` is the guidance scale."""

    kind: str = "none"
    scale: float = 1.0
    classifier: Any = None        # needs grad_log_prob(x, t, label)
    label: Any = None             # target class for classifier guidance
    embedding_model: Any = None   # needs dot_gradient(x, t, tokens) and .noised
    allow_unnoised_clip: bool = False
    model_ref: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown guidance kind {self.kind!r}")
        if self.scale < 0:
            raise ValueError("guidance scale must be nonnegative")

    def validate(self, denoiser):
        if self.kind == "classifier" and self.classifier is None:
            raise ValueError("classifier guidance needs a classifier")
        if self.kind == "clip":
            if self.embedding_model is None:
                raise ValueError("clip guidance needs an embedding model")
            if not getattr(self.embedding_model, "noised", False) and not self.allow_unnoised_clip:
                raise ValueError("clip guidance needs a noised embedding model "
                                 "(set allow_unnoised_clip to override)")
        if self.kind == "classifier_free" and not getattr(denoiser, "supports_empty", True):
            raise ValueError("classifier-free guidance needs a denoiser trained "
                             "with empty captions")

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale, "model_ref": self.model_ref}

    @staticmethod
    def from_dict(d, **live_refs):
        return GuidanceStrategy(kind=d.get("kind", "none"), scale=float(d.get("scale", 1.0)),
                                model_ref=d.get("model_ref"), **live_refs)


def cfg_eps(eps_cond, eps_uncond, s):
    """Classifier-free extrapolation: eps_uncond + s * (eps_cond - eps_uncond)."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"cfg_eps shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + s * (eps_cond - eps_uncond)


def classifier_guided_mean(mu, sigma, grad_logp, s):
    """Shift the reverse mean by s * Sigma * grad log p(y|x_t); sigma is a variance."""
    return np.asarray(mu) + s * np.asarray(sigma) * np.asarray(grad_logp)


def clip_guided_mean(mu, sigma, clip_grad, s):
    """Same shift with the image-caption dot-product gradient."""
    return classifier_guided_mean(mu, sigma, clip_grad, s)


def guided_step_outputs(denoiser, strategy, x_t, i, cond, schedule,
                        clip_x0=None, extras=None):
    """One reverse step's (mu_hat, sigma) under the strategy.

    `i` indexes the (possibly respaced) schedule; the denoiser is conditioned
    on the original timestep via the schedule's timestep map. Classifier-free
    combines the two denoiser passes in eps space and keeps the conditional
    pass's variance; classifier/clip perturb the mean after it is formed
    (and after any x0 clamping).
    """
    strategy = strategy or GuidanceStrategy()
    strategy.validate(denoiser)
    if clip_x0 is None:
        clip_x0 = getattr(denoiser, "clip_x0", False)
    extras = extras or {}
    t_model = int(schedule.timestep_map[i])

    if strategy.kind == "classifier_free":
        out_c = denoiser.predict(x_t, t_model, cond, **extras)
        out_u = denoiser.predict(x_t, t_model, denoiser.null_cond(len(x_t)), **extras)
        eps = cfg_eps(out_c.eps, out_u.eps, strategy.scale)
        v = out_c.v
    else:
        out = denoiser.predict(x_t, t_model, cond, **extras)
        eps, v = out.eps, out.v

    mu = mu_from_eps(x_t, i, eps, schedule, clip_x0=clip_x0)
    sigma = sigma_from_v(v, i, schedule)

    if strategy.kind == "classifier":
        grad = strategy.classifier.grad_log_prob(x_t, t_model, strategy.label)
        mu = classifier_guided_mean(mu, sigma, grad, strategy.scale)
    elif strategy.kind == "clip":
        grad = strategy.embedding_model.dot_gradient(x_t, t_model, cond)
        mu = clip_guided_mean(mu, sigma, grad, strategy.scale)
    return mu, sigma
