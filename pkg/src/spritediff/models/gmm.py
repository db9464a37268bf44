"""Analytically tractable Gaussian mixtures: exact scores, the induced exact
denoiser, and the closed-form Bayes classifier used as a guidance oracle.

Noising a mixture component N(m, S) to step t gives
N(sqrt(a_bar) m, a_bar S + (1 - a_bar) I), so every score below is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffusion import DenoiserOutput


@dataclass
class GmmSpec:
    """Diagonal-covariance mixture with an integer label per component."""

    means: np.ndarray       # (K, d)
    variances: np.ndarray   # (K, d) diagonal entries
    weights: np.ndarray     # (K,)
    labels: np.ndarray      # (K,) ints

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-12):
            raise ValueError(f"mixture weights sum to {self.weights.sum()}, expected 1")
        if np.any(self.weights < 0) or np.any(self.variances <= 0):
            raise ValueError("weights must be >= 0 and variances > 0")
        if not (len(self.means) == len(self.variances) == len(self.weights) == len(self.labels)):
            raise ValueError("component table lengths differ")

    @property
    def d(self):
        return self.means.shape[1]

    def components_for(self, label):
        if label is None:
            return np.arange(len(self.weights))
        idx = np.nonzero(self.labels == label)[0]
        if len(idx) == 0:
            raise KeyError(f"no mixture component has label {label}")
        return idx


def _noised_params(gmm, alpha_bar):
    means = np.sqrt(alpha_bar) * gmm.means
    variances = alpha_bar * gmm.variances + (1.0 - alpha_bar)
    return means, variances


def _component_log_density(x, means, variances):
    # x (N, d) against each component -> (N, K)
    diff = x[:, None, :] - means[None, :, :]
    return -0.5 * np.sum(diff * diff / variances[None] + np.log(2 * np.pi * variances[None]),
                         axis=2)


def log_density(x, t, gmm, schedule, label=None):
    """log p_t(x | label) of the noised mixture (label None = marginal)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    idx = gmm.components_for(label)
    means, variances = _noised_params(gmm, schedule.alpha_bar[t])
    w = gmm.weights[idx] / gmm.weights[idx].sum()
    logs = _component_log_density(x, means[idx], variances[idx]) + np.log(w)[None, :]
    m = logs.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(logs - m).sum(axis=1, keepdims=True)))[:, 0]


def score(x, t, gmm, schedule, label=None):
    """Exact gradient of log p_t(x | label) w.r.t. x, shape (N, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    idx = gmm.components_for(label)
    means, variances = _noised_params(gmm, schedule.alpha_bar[t])
    means, variances = means[idx], variances[idx]
    w = gmm.weights[idx] / gmm.weights[idx].sum()
    logs = _component_log_density(x, means, variances) + np.log(w)[None, :]
    m = logs.max(axis=1, keepdims=True)
    resp = np.exp(logs - m)
    resp /= resp.sum(axis=1, keepdims=True)
    per_comp = -(x[:, None, :] - means[None]) / variances[None]
    return np.sum(resp[:, :, None] * per_comp, axis=1)


def eps_star(x, t, gmm, schedule, label=None):
    """Exact noise prediction: -sqrt(1 - a_bar_t) * score."""
    return -np.sqrt(1.0 - schedule.alpha_bar[t]) * score(x, t, gmm, schedule, label)


class AnalyticGmmDenoiser:
    """Drop-in denoiser backed by exact mixture scores.

    Emits v = -1 so the interpolated variance lands on beta_tilde (the exact
    posterior variance is not available in closed form for mixtures; this is
    its small-step limit).
    """

    clip_x0 = False
    supports_empty = True  # the marginal score is exact

    def __init__(self, gmm, schedule):
        self.gmm = gmm
        self.schedule = schedule

    def null_cond(self, n):
        return None

    def predict(self, x, t, cond=None, **_):
        x = np.asarray(x, dtype=np.float64)
        eps = eps_star(x, t, self.gmm, self.schedule, label=cond)
        return DenoiserOutput(eps, np.full_like(eps, -1.0))


class GmmBayesClassifier:
    """Closed-form p(y | x_t) under the noised mixture; exact gradients."""

    def __init__(self, gmm, schedule):
        self.gmm = gmm
        self.schedule = schedule

    def log_prob(self, x, t, label):
        prior = self.gmm.weights[self.gmm.components_for(label)].sum()
        return (np.log(prior)
                + log_density(x, t, self.gmm, self.schedule, label=label)
                - log_density(x, t, self.gmm, self.schedule, label=None))

    def grad_log_prob(self, x, t, label):
        return (score(x, t, self.gmm, self.schedule, label=label)
                - score(x, t, self.gmm, self.schedule, label=None))
