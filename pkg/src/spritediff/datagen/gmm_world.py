"""Labeled Gaussian-mixture worlds with exact samplers."""

from __future__ import annotations

import numpy as np

from ..models.gmm import GmmSpec


def make_gmm(means, variances, weights, labels=None):
    """Validate a mixture spec and return (spec, exact sampler).

    The sampler draws (x, component_label) via a component draw followed by a
    Gaussian draw.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if labels is None:
        labels = np.arange(len(means))
    spec = GmmSpec(means=means, variances=variances, weights=weights, labels=labels)

    def sample(n, rng):
        comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
        x = spec.means[comp] + rng.standard_normal((n, spec.d)) * np.sqrt(spec.variances[comp])
        return x, spec.labels[comp]

    return spec, sample


def symmetric_pair(separation=2.0, sigma=0.25):
    """The workhorse 1-D two-component world used across the test suite."""
    return make_gmm(means=[[-separation], [separation]],
                    variances=[[sigma ** 2], [sigma ** 2]],
                    weights=[0.5, 0.5], labels=[0, 1])
