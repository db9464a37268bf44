"""Safety-filter pipeline: crop/mean-pool feature extraction from the
contrastive image encoder, an RBF-kernel SVM trained by hinge-loss
subgradient descent, bias tuning to a target false-negative rate, one
boundary-relabeling round, and corpus filtering.

Positives mean "contains the person glyph"; decision is
sign(sum_i alpha_i K(x_i, x) + b).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import engine as eng
from ..engine import Tensor


def three_crops(image):
    """Square crops at the endpoints and middle along the longer side."""
    _, h, w = image.shape
    side = min(h, w)
    if h == w:
        return [image, image, image]
    span = max(h, w) - side
    out = []
    for offset in (0, span // 2, span):
        if h > w:
            out.append(image[:, offset:offset + side, :])
        else:
            out.append(image[:, :, offset:offset + side])
    return out


def _resize(image, size):
    if image.shape[-1] == size:
        return image
    m = eng.bicubic_matrix(image.shape[-1], size, np.float64)
    n = eng.bicubic_matrix(image.shape[-2], size, np.float64)
    return np.einsum("oh,chw,pw->cop", n, image.astype(np.float64), m).astype(np.float32)


def extract_filter_features(image, clip_model):
    """Mean-pooled embedding of the three crops."""
    size = clip_model.config.image_size
    crops = np.stack([_resize(c, size) for c in three_crops(np.asarray(image))])
    with eng.no_grad():
        emb = clip_model.encode_image(crops, None).data
    return emb.mean(axis=0)


@dataclass
class FilterModel:
    train_x: np.ndarray   # (N, D) kernel expansion points, standardized space
    alpha: np.ndarray     # (N,)
    bias: float
    gamma: float
    mean: np.ndarray      # feature standardization
    scale: np.ndarray

    def _standardize(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.mean) / self.scale

    def scores(self, x):
        k = _rbf(self.train_x, self._standardize(x), self.gamma)
        return self.alpha @ k + self.bias

    def predict(self, x):
        return self.scores(x) > 0

    def to_npz(self, path):
        np.savez(path, train_x=self.train_x, alpha=self.alpha,
                 bias=np.array([self.bias]), gamma=np.array([self.gamma]),
                 mean=self.mean, scale=self.scale)

    @staticmethod
    def from_npz(path):
        z = np.load(path)
        return FilterModel(z["train_x"], z["alpha"], float(z["bias"][0]),
                           float(z["gamma"][0]), z["mean"], z["scale"])


def _rbf(a, b, gamma):
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * a @ b.T)
    return np.exp(-gamma * np.maximum(d2, 0.0))


def _fit_svm(x, y, gamma, c, iters=800, t0=50):
    """Kernelized hinge-loss subgradient descent (batch Pegasos) on
    (lambda/2) a^T K a + (1/n) sum hinge(1 - y_i f(x_i)), lambda = 1/(C n).

    Each step projects back onto the ||f|| <= 1/sqrt(lambda) ball, which the
    1/(lambda t) step schedule needs to stay stable. The intercept stays 0
    during the fit; the decision bias is tuned afterwards against the FNR
    target.
    """
    n = len(x)
    k = _rbf(x, x, gamma)
    lam = 1.0 / (c * n)
    alpha = np.zeros(n)
    for step in range(1, iters + 1):
        f = k @ alpha
        violated = y * f < 1.0
        g = lam * f - (k[:, violated] @ y[violated]) / n
        alpha -= g / (lam * (step + t0))
        norm_sq = float(alpha @ (k @ alpha))
        if norm_sq > 1.0 / lam:
            alpha *= 1.0 / np.sqrt(lam * norm_sq)
    return alpha, 0.0


def tune_bias(scores, labels, target_fnr):
    """Bias shift making held-out FNR strictly below target.

    Raising the shift only raises scores, so FNR is monotone in it; the
    threshold lands just below the lowest positive score we must still catch.
    """
    pos = np.sort(scores[np.asarray(labels, dtype=bool)])
    if len(pos) == 0:
        raise ValueError("bias tuning needs positive examples")
    allowed = max(0, int(np.ceil(target_fnr * len(pos))) - 1)
    return -pos[allowed] + 1e-9


def fnr_fpr(scores, labels, shift=0.0):
    pred = scores + shift > 0
    pos = labels.astype(bool)
    fnr = float((~pred[pos]).mean()) if pos.any() else 0.0
    fpr = float(pred[~pos].mean()) if (~pos).any() else 0.0
    return fnr, fpr


def fit_safety_filter(features, labels, target_fnr=0.01, gamma=None, c=10.0,
                      heldout_frac=0.3, seed=0, iters=1500):
    """Fit the RBF SVM and sweep the bias until held-out FNR < target_fnr.

    Features are standardized per dimension before the kernel; gamma defaults
    to 1/dim in that space. Returns (FilterModel, report) where the report
    carries held-out FNR/FPR.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.where(np.asarray(labels).astype(bool), 1.0, -1.0)
    if len(np.unique(y)) < 2:
        raise ValueError("both classes required to fit the filter")
    mean = x.mean(axis=0)
    scale = np.maximum(x.std(axis=0), 1e-8)
    xs = (x - mean) / scale
    if gamma is None:
        gamma = 1.0 / xs.shape[1]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_held = max(2, int(len(x) * heldout_frac))
    held, train = order[:n_held], order[n_held:]
    if len(np.unique(y[train])) < 2 or not (y[held] > 0).any():
        raise ValueError("split left a class empty; provide more data")

    alpha, bias = _fit_svm(xs[train], y[train], gamma, c, iters=iters)
    model = FilterModel(xs[train], alpha, bias, gamma, mean, scale)
    shift = tune_bias(model.scores(x[held]), y[held] > 0, target_fnr)
    model.bias += shift
    fnr, fpr = fnr_fpr(model.scores(x[held]), y[held] > 0)
    report = {"heldout_fnr": fnr, "heldout_fpr": fpr, "gamma": gamma,
              "n_train": len(train), "n_heldout": len(held)}
    return model, report


def boundary_relabel_round(model, pool_features, pool_labels, base_features,
                           base_labels, k=64, **fit_kwargs):
    """One active-learning round: pull the pool points nearest the decision
    boundary, attach their (oracle) labels, and refit."""
    scores = model.scores(pool_features)
    pick = np.argsort(np.abs(scores))[:k]
    feats = np.concatenate([base_features, np.asarray(pool_features)[pick]])
    labels = np.concatenate([np.asarray(base_labels), np.asarray(pool_labels)[pick]])
    return fit_safety_filter(feats, labels, **fit_kwargs), pick


def filter_dataset(corpus, model, clip_model):
    """Drop corpus entries the filter flags; returns (kept, report).

    `corpus` is a list of (image, caption, scene) triples.
    """
    feats = np.stack([extract_filter_features(img, clip_model)
                      for img, _, _ in corpus])
    flagged = model.predict(feats)
    kept = [item for item, bad in zip(corpus, flagged) if not bad]
    report = {"total": len(corpus), "removed": int(flagged.sum()),
              "kept": len(kept)}
    return kept, report
