"""Toy CLIP tests: loss closed forms, normalization, gradient probes."""

import numpy as np
import pytest

import spritediff.engine as eng
from spritediff.contrastive import (
    ClipConfig, EmbeddingModel, clip_gradient, clip_score, clip_score_from_dots,
    contrastive_loss, contrastive_loss_from_logits,
)
from spritediff.engine import Tensor
from spritediff.models import tokenize


def small_model(seed=0, dtype="float32", image_size=8):
    cfg = ClipConfig(image_size=image_size, width=4, embed_dim=8, text_width=8,
                     text_layers=1, text_heads=2, time_width=8, dtype=dtype)
    return EmbeddingModel(cfg, np.random.default_rng(seed))


def test_loss_single_pair_is_zero():
    logits = Tensor(np.array([[3.7]]))
    assert contrastive_loss_from_logits(logits).item() == pytest.approx(0.0, abs=1e-12)


def test_loss_sharp_identity_goes_to_zero():
    logits = Tensor(50.0 * np.eye(4))
    assert contrastive_loss_from_logits(logits).item() < 1e-12


def test_loss_two_pair_closed_form():
    # unit dots [[1,0],[0,1]] at scale 1: -ln(e/(e+1)) both ways
    logits = Tensor(np.eye(2))
    expect = -np.log(np.e / (np.e + 1.0))
    assert contrastive_loss_from_logits(logits).item() == pytest.approx(expect, abs=1e-6)
    assert expect == pytest.approx(0.3133, abs=1e-4)


def test_embeddings_are_unit_norm():
    m = small_model()
    rng = np.random.default_rng(1)
    imgs = rng.normal(size=(5, 3, 8, 8)).astype(np.float32)
    f = m.encode_image(imgs, t=3)
    g = m.encode_text([tokenize("a red square")] * 5)
    assert np.allclose(np.linalg.norm(f.data, axis=1), 1.0, atol=1e-6)
    assert np.allclose(np.linalg.norm(g.data, axis=1), 1.0, atol=1e-6)


def test_loss_permutation_equivariant():
    # float64: the 1e-10 bound is below float32 resolution at this loss scale
    m = small_model(dtype="float64")
    rng = np.random.default_rng(2)
    imgs = rng.normal(size=(6, 3, 8, 8))
    toks = [tokenize(c) for c in ("a red square", "a blue circle", "a green cross",
                                  "a yellow triangle", "a purple square", "a red person")]
    t = np.arange(6) * 5
    base = contrastive_loss(imgs, toks, m, t).item()
    perm = np.random.default_rng(3).permutation(6)
    shuffled = contrastive_loss(imgs[perm], [toks[i] for i in perm], m, t[perm]).item()
    assert shuffled == pytest.approx(base, abs=1e-10)


def test_loss_rejects_length_mismatch():
    m = small_model()
    with pytest.raises(ValueError):
        contrastive_loss(np.zeros((2, 3, 8, 8), np.float32), [tokenize("a")], m)
    with pytest.raises(ValueError):
        clip_score(np.zeros((2, 3, 8, 8), np.float32), [tokenize("a")], m)


def test_clip_score_closed_forms():
    assert clip_score_from_dots([0.0, 0.0]) == 0.0
    assert clip_score_from_dots([0.2, 0.4]) == pytest.approx(30.0, abs=1e-9)


def test_logit_scale_clamped_at_100():
    m = small_model()
    m.logit_scale_log.data = np.array([10.0], dtype=np.float32)
    assert m.logit_scale().item() <= 100.0
    assert m.logit_scale().item() == pytest.approx(np.exp(4.6), rel=1e-5)


def test_clip_gradient_zero_weight_probe():
    m = small_model()
    m.image.head.w.data = np.zeros_like(m.image.head.w.data)
    m.image.head.b.data = np.ones_like(m.image.head.b.data)  # constant f
    x = np.random.default_rng(4).normal(size=(2, 3, 8, 8)).astype(np.float32)
    g = clip_gradient(x, 5, [tokenize("a red square")] * 2, m)
    assert g.shape == x.shape
    assert np.abs(g).max() == 0.0


def test_clip_gradient_bilinear_in_text_embedding():
    m = small_model()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
    emb = rng.normal(size=(1, 8)).astype(np.float32)
    g1 = clip_gradient(x, 2, None, m, text_emb=emb)
    g2 = clip_gradient(x, 2, None, m, text_emb=2.0 * emb)
    assert np.allclose(g2, 2.0 * g1, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_clip_gradient_matches_finite_differences(seed):
    m = small_model(seed=seed, dtype="float64")
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(1, 3, 8, 8))
    toks = [tokenize("a blue circle")]
    got = clip_gradient(x, 7, toks, m)

    def dot(arr):
        with eng.no_grad():
            f = m.encode_image(arr, 7)
            g = m.encode_text(toks)
            return float((f.data * g.data).sum())

    h = 1e-6
    idxs = [np.unravel_index(i, x.shape)
            for i in rng.choice(x.size, size=12, replace=False)]
    for idx in idxs:
        hi = x.copy()
        hi[idx] += h
        lo = x.copy()
        lo[idx] -= h
        fd = (dot(hi) - dot(lo)) / (2 * h)
        denom = max(abs(fd), np.abs(got).max(), 1e-12)
        assert abs(got[idx] - fd) / denom < 1e-6


def test_unnoised_model_ignores_t():
    cfg = ClipConfig(image_size=8, width=4, embed_dim=8, text_width=8,
                     text_layers=1, text_heads=2, time_width=8, noised=False)
    m = EmbeddingModel(cfg, np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(2, 3, 8, 8)).astype(np.float32)
    a = m.encode_image(x, t=0).data
    b = m.encode_image(x, t=50).data
    assert np.array_equal(a, b)
