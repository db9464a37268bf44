"""Distribution metrics over feature sets: Frechet distance, k-NN
precision/recall, and the inception-score analog backed by a small trained
shape classifier."""

from __future__ import annotations

import numpy as np

from .. import engine as eng
from ..engine import Conv2d, GroupNorm, Linear, Module, Tensor
from ..models.text import SHAPES


def _gaussian_fit(feats, eps_reg):
    mu = feats.mean(axis=0)
    c = np.cov(feats, rowvar=False)
    c = np.atleast_2d(c) + eps_reg * np.eye(feats.shape[1])
    return mu, c


def _sqrtm_psd(c):
    vals, vecs = np.linalg.eigh(c)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def frechet_distance(feats_real, feats_fake, eps_reg=1e-6):
    """||mu1-mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}) between Gaussian fits.

    The cross term is computed via the symmetric form
    tr((C1 C2)^{1/2}) = tr((A C2 A)^{1/2}) with A = C1^{1/2}.
    """
    feats_real = np.asarray(feats_real, dtype=np.float64)
    feats_fake = np.asarray(feats_fake, dtype=np.float64)
    if feats_real.ndim != 2 or feats_fake.ndim != 2:
        raise ValueError("feature sets must be 2-D (n, d)")
    if feats_real.shape[1] != feats_fake.shape[1]:
        raise ValueError(f"feature widths differ: {feats_real.shape[1]} vs "
                         f"{feats_fake.shape[1]}")
    if len(feats_real) < 2 or len(feats_fake) < 2:
        raise ValueError("need at least 2 samples per side")
    mu1, c1 = _gaussian_fit(feats_real, eps_reg)
    mu2, c2 = _gaussian_fit(feats_fake, eps_reg)
    a = _sqrtm_psd(c1)
    inner = a @ c2 @ a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_cross = np.sqrt(np.maximum(vals, 0.0)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * tr_cross)


def _sq_dists(a, b):
    return (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
            - 2.0 * a @ b.T)


def _knn_radii(x, k):
    d = _sq_dists(x, x)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def precision_recall(feats_real, feats_fake, k=3):
    """k-NN manifold estimates: a fake point is precise if it falls inside
    some real point's k-NN ball; recall swaps the roles."""
    feats_real = np.asarray(feats_real, dtype=np.float64)
    feats_fake = np.asarray(feats_fake, dtype=np.float64)
    if len(feats_real) < k + 1 or len(feats_fake) < k + 1:
        raise ValueError(f"need at least {k + 1} points per side")
    r_real = _knn_radii(feats_real, k)
    r_fake = _knn_radii(feats_fake, k)
    d_fr = _sq_dists(feats_fake, feats_real)
    precision = float((d_fr <= r_real[None, :]).any(axis=1).mean())
    recall = float((d_fr.T <= r_fake[None, :]).any(axis=1).mean())
    return precision, recall


def inception_score_analog(images, shape_classifier):
    """exp(E_x KL(p(y|x) || p(y))) with the sprite-shape classifier."""
    probs = shape_classifier.predict_proba(images)
    p_bar = probs.mean(axis=0)
    kl = np.where(probs > 0, probs * (np.log(np.maximum(probs, 1e-300)) - np.log(p_bar)),
                  0.0).sum(axis=1)
    return float(np.exp(kl.mean()))


class ShapeClassifier(Module):
    """Small CNN over the five sprite shapes (IS backbone)."""

    def __init__(self, rng, width=8, image_size=16, dtype=np.float32):
        self.conv1 = Conv2d(3, width, 3, rng, dtype=dtype)
        self.norm1 = GroupNorm(min(4, width), width, dtype=dtype)
        self.conv2 = Conv2d(width, 2 * width, 3, rng, dtype=dtype)
        self.norm2 = GroupNorm(min(4, 2 * width), 2 * width, dtype=dtype)
        self.head = Linear(2 * width * (image_size // 4) ** 2, len(SHAPES), rng,
                           dtype=dtype)

    def logits(self, x):
        h = eng.avg_pool2d(eng.silu(self.norm1(self.conv1(x))), 2)
        h = eng.avg_pool2d(eng.silu(self.norm2(self.conv2(h))), 2)
        return self.head(h.reshape(h.shape[0], -1))

    def predict_proba(self, images):
        with eng.no_grad():
            logits = self.logits(Tensor(np.asarray(images, dtype=np.float32)))
            return eng.softmax(logits, axis=-1).data

    def accuracy(self, images, labels):
        pred = self.predict_proba(images).argmax(axis=1)
        return float((pred == np.asarray(labels)).mean())


def shape_label(scene):
    return SHAPES.index(scene.objects[0].shape)


def train_shape_classifier(corpus, iterations=600, batch_size=32, lr=3e-3, seed=0):
    """Fit the classifier on single-object sprites; returns (model, accuracy)."""
    singles = [(img, scene) for img, _, scene in corpus if len(scene.objects) == 1]
    if not singles:
        raise ValueError("corpus has no single-object sprites")
    images = np.stack([img for img, _ in singles]).astype(np.float32)
    labels = np.array([shape_label(s) for _, s in singles])
    rng = np.random.default_rng(seed)
    model = ShapeClassifier(rng, image_size=images.shape[-1])
    opt = eng.Adam(model.parameters(), lr=lr)
    for _ in range(iterations):
        idx = rng.integers(0, len(images), size=batch_size)
        loss = eng.cross_entropy(model.logits(Tensor(images[idx])), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model, model.accuracy(images, labels)
