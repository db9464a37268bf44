"""Gaussian diffusion math: schedules, forward noising, posterior means,
interpolated variances, and the two training losses.

All schedule tables are float64 and indexed 0..T-1 (index i is math step
i+1, so `alpha_bar[-1]` before index 0 is 1). Functions here are pure and
operate on numpy arrays; the losses return engine Tensors so gradients can
flow into a denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import engine as eng
from .engine import Tensor


@dataclass
class DenoiserOutput:
    """Noise prediction and variance-interpolation logits, same shape as x.

    Fields are numpy arrays on the sampling path and engine Tensors on the
    training path; `v` is only ever consumed through sigma_from_v.
    """

    eps: Union[np.ndarray, Tensor]
    v: Union[np.ndarray, Tensor]


class NoiseSchedule:
    """Per-timestep beta/alpha/alpha_bar/posterior-variance tables."""

    def __init__(self, betas, kind, alpha_bar=None, timestep_map=None):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a 1-D table")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        self.kind = kind
        self.T = len(betas)
        self.beta = betas
        self.alpha = 1.0 - betas
        self.alpha_bar = np.cumprod(self.alpha) if alpha_bar is None else np.asarray(alpha_bar)
        self.alpha_bar_prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.posterior_variance = (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar) * self.beta
        # index 0 has zero posterior variance; borrow index 1 so logs stay finite
        self.beta_tilde = self.posterior_variance.copy()
        if self.T > 1:
            self.beta_tilde[0] = self.beta_tilde[1]
        else:
            self.beta_tilde[0] = self.beta[0]
        self.log_beta = np.log(self.beta)
        self.log_beta_tilde = np.log(self.beta_tilde)
        # map from local index to the timestep the denoiser was trained on
        self.timestep_map = (np.arange(self.T) if timestep_map is None
                             else np.asarray(timestep_map, dtype=np.int64))

    def respace(self, timesteps):
        """Schedule over a strictly increasing subsequence of timesteps.

        Step variances are recomputed from alpha_bar ratios so marginals are
        preserved; consecutive indices reuse the original beta bit-exactly,
        which makes the identity respacing reproduce this schedule.
        """
        ts = np.asarray(sorted(timesteps), dtype=np.int64)
        if len(ts) == 0 or ts[0] < 0 or ts[-1] >= self.T or len(np.unique(ts)) != len(ts):
            raise ValueError(f"timesteps must be unique and within [0, {self.T})")
        base_ts = self.timestep_map[ts]
        betas = np.empty(len(ts), dtype=np.float64)
        prev_bar = 1.0
        for i, t in enumerate(ts):
            # consecutive (or leading) indices reuse the base beta: the ratio
            # formula equals it mathematically but loses a ulp to cancellation
            if t == (ts[i - 1] + 1 if i > 0 else 0):
                betas[i] = self.beta[t]
            else:
                betas[i] = 1.0 - self.alpha_bar[t] / prev_bar
            prev_bar = self.alpha_bar[t]
        return NoiseSchedule(betas, self.kind, alpha_bar=self.alpha_bar[ts],
                             timestep_map=base_ts)

    def _gather(self, table, t, ref_ndim):
        """Index a table with a scalar or per-sample t, broadcastable to data."""
        vals = table[np.asarray(t)]
        if np.ndim(t) == 0:
            return float(vals)
        return vals.reshape(vals.shape + (1,) * (ref_ndim - 1))


def make_schedule(kind, T):
    """Build a linear or cosine noising schedule with T steps."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind == "linear":
        # endpoints scale with 1000/T; clip keeps tiny-T tables valid
        scale = 1000.0 / T
        betas = np.minimum(np.linspace(0.0001 * scale, 0.02 * scale, T), 0.999)
    elif kind == "cosine":
        def f(i):
            return np.cos((i / T + 0.008) / 1.008 * np.pi / 2.0) ** 2

        i = np.arange(T, dtype=np.float64)
        betas = np.minimum(1.0 - f(i + 1) / f(i), 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas, kind)


def _check_t(t, T):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= T):
        raise IndexError(f"timestep {t} outside [0, {T})")
    return t


def q_sample(x0, t, eps, schedule):
    """Noise x0 to step t: sqrt(a_bar)*x0 + sqrt(1-a_bar)*eps; eps is caller-supplied."""
    t = _check_t(t, schedule.T)
    ab = schedule._gather(schedule.alpha_bar, t, np.ndim(x0))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def x0_from_eps(x_t, t, eps_hat, schedule, clip_x0=False):
    """Invert the marginal: estimate of the clean sample implied by eps_hat."""
    t = _check_t(t, schedule.T)
    ab = schedule._gather(schedule.alpha_bar, t, np.ndim(x_t))
    x0 = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return np.clip(x0, -1.0, 1.0) if clip_x0 else x0


def posterior_mean(x0, x_t, t, schedule):
    """Mean of q(x_{t-1} | x_t, x0) (conjugate diagonal Gaussian)."""
    t = _check_t(t, schedule.T)
    nd = np.ndim(x_t)
    ab = schedule._gather(schedule.alpha_bar, t, nd)
    abp = schedule._gather(schedule.alpha_bar_prev, t, nd)
    beta = schedule._gather(schedule.beta, t, nd)
    alpha = schedule._gather(schedule.alpha, t, nd)
    coef0 = np.sqrt(abp) * beta / (1.0 - ab)
    coeft = np.sqrt(alpha) * (1.0 - abp) / (1.0 - ab)
    return coef0 * x0 + coeft * x_t


def mu_from_eps(x_t, t, eps_hat, schedule, clip_x0=False):
    """Reverse-step mean derived from the predicted noise.

    Routes through the x0 estimate so the optional clamp applies before the
    posterior mean; unclamped this equals (x_t - beta/sqrt(1-a_bar)*eps)/sqrt(alpha).
    """
    x0 = x0_from_eps(x_t, t, eps_hat, schedule, clip_x0=clip_x0)
    return posterior_mean(x0, x_t, t, schedule)


def sigma_from_v(v, t, schedule):
    """Per-element variance interpolated between beta_tilde and beta.

    v_tilde = (v+1)/2 clipped to [0,1]; variance is exp of the log-space mix,
    so it is monotone in v and bounded by [beta_tilde, beta].
    """
    t = _check_t(t, schedule.T)
    nd = np.ndim(v)
    log_b = schedule._gather(schedule.log_beta, t, nd)
    log_bt = schedule._gather(schedule.log_beta_tilde, t, nd)
    frac = np.clip((np.asarray(v, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return np.exp(frac * log_b + (1.0 - frac) * log_bt)


def log_sigma_from_v_tensor(v, t, schedule):
    """Tensor-path log-variance mix for the VLB loss (gradient flows into v)."""
    nd = v.ndim
    log_b = np.asarray(schedule._gather(schedule.log_beta, t, nd), dtype=v.dtype)
    log_bt = np.asarray(schedule._gather(schedule.log_beta_tilde, t, nd), dtype=v.dtype)
    frac = eng.clip((v + 1.0) * 0.5, 0.0, 1.0)
    return frac * log_b + (1.0 - frac) * log_bt


def simple_term(eps, eps_hat):
    """Per-sample squared error of the noise prediction, averaged over a batch."""
    diff = eps_hat - Tensor(np.asarray(eps, dtype=eps_hat.dtype))
    per_sample = (diff * diff).reshape(diff.shape[0], -1).sum(axis=1)
    return per_sample.mean()


def loss_simple(x0_batch, captions, denoiser, schedule, rng):
    """E || eps - eps_hat(x_t, t, c) ||^2 with t ~ U[1,T], eps ~ N(0,I)."""
    x0 = np.asarray(x0_batch)
    n = x0.shape[0]
    t = rng.integers(0, schedule.T, size=n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = q_sample(x0, t, eps, schedule).astype(x0.dtype)
    out = denoiser.forward(Tensor(x_t), t, captions)
    return simple_term(eps, out.eps)


def vlb_term(x0, x_t, t, eps_hat, v, schedule, weights=None):
    """KL( q(x_{t-1}|x_t,x0) || p ) in nats per element.

    eps_hat is treated as a constant (the mean does not train here); gradient
    reaches the denoiser only through v. `weights` optionally zeroes rows
    (used to drop t=0 rows, where the posterior is degenerate).
    """
    if isinstance(eps_hat, Tensor):
        eps_hat = eps_hat.data
    dtype = v.dtype if isinstance(v, Tensor) else np.float64
    mu_p = mu_from_eps(np.asarray(x_t, np.float64), t, np.asarray(eps_hat, np.float64), schedule)
    mu_q = posterior_mean(np.asarray(x0, np.float64), np.asarray(x_t, np.float64), t, schedule)
    logvar_q = np.broadcast_to(
        np.log(schedule._gather(schedule.beta_tilde, _check_t(t, schedule.T), np.ndim(x_t))),
        mu_q.shape,
    )
    if not isinstance(v, Tensor):
        v = Tensor(np.asarray(v, dtype=np.float64))
    logvar_p = log_sigma_from_v_tensor(v, t, schedule)
    kl = eng.gaussian_kl(
        Tensor(mu_q.astype(dtype)),
        Tensor(logvar_q.astype(dtype)),
        Tensor(mu_p.astype(dtype)),
        logvar_p,
    )
    per_sample = kl.reshape(kl.shape[0], -1).mean(axis=1)
    if weights is not None:
        per_sample = per_sample * Tensor(np.asarray(weights, dtype=per_sample.dtype))
    return per_sample.mean()


def loss_vlb_term(x0, x_t, t, denoiser_output, schedule):
    """Spec-shaped wrapper around vlb_term for a single DenoiserOutput."""
    return vlb_term(x0, x_t, t, denoiser_output.eps, denoiser_output.v, schedule)
