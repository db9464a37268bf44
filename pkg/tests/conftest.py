"""Shared fixtures. The trained desk stack is expensive (~15 min CPU) and is
built once per session, only when a test actually requests it."""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import spritediff.diffusion as dfn
from spritediff.datagen import generate_sprites
from spritediff.trainer import (
    SpriteDataset, TrainConfig, finetune_cfg, finetune_inpaint, train_base,
    train_clip,
)

DESK = dict(base_width=16, text_width=32, text_layers=2, text_heads=4,
            time_width=32, attn_heads=4, res_blocks=2)
CLIP_DESK = dict(width=16, embed_dim=32, text_width=32, text_layers=2,
                 text_heads=4, time_width=32)
DESK_T = 1000


@pytest.fixture(scope="session")
def trained_stack():
    """Corpus + noised contrastive model + base denoiser (cfg fine-tuned) +
    inpainting fine-tune, trained at the desk acceptance scale."""
    t0 = time.monotonic()
    schedule = dfn.make_schedule("cosine", DESK_T)
    train_ds = SpriteDataset.from_corpus(
        generate_sprites(1280, seed=100, include_person=False))
    held_ds = SpriteDataset.from_corpus(
        generate_sprites(256, seed=200, include_person=False))

    clip_cfg = TrainConfig(stage="clip", iterations=800, batch_size=64, lr=1e-3,
                           seed=11, T=DESK_T, model=dict(CLIP_DESK))
    clip_model, clip_metrics = train_clip(train_ds, schedule, clip_cfg)

    base_cfg = TrainConfig(stage="base", iterations=1200, batch_size=16,
                           lr=3e-4, seed=12, T=DESK_T, model=dict(DESK))
    base, base_metrics = train_base(train_ds, base_cfg, schedule)

    cfg_cfg = TrainConfig(stage="cfg_finetune", iterations=640, batch_size=16,
                          lr=3e-4, seed=13, T=DESK_T, model=dict(DESK))
    base, _, empty_fraction = finetune_cfg(base, train_ds, cfg_cfg, schedule)

    inp_cfg = TrainConfig(stage="inpaint_finetune", iterations=800,
                          batch_size=16, lr=3e-4, seed=14, T=DESK_T,
                          model=dict(DESK))
    inpaint_model, _ = finetune_inpaint(base, train_ds, inp_cfg, schedule)

    return {
        "schedule": schedule,
        "train_ds": train_ds,
        "held_ds": held_ds,
        "clip": clip_model,
        "clip_metrics": clip_metrics,
        "model": base,
        "base_metrics": base_metrics,
        "base_config": base_cfg,
        "empty_fraction": empty_fraction,
        "empty_draws": cfg_cfg.iterations * cfg_cfg.batch_size,
        "inpaint": inpaint_model,
        "train_seconds": time.monotonic() - t0,
    }


@pytest.fixture(scope="session")
def safety_stack(trained_stack):
    """Person-bearing corpus, a person-aware filter encoder, the fitted filter
    (with one boundary-relabeling round), and a model trained on the filtered
    corpus (the red-team subject)."""
    from spritediff.datagen import (boundary_relabel_round, contains_person,
                                    extract_filter_features, filter_dataset,
                                    fit_safety_filter)

    schedule = trained_stack["schedule"]
    # the filter's encoder must know persons; the generation stack's corpus
    # deliberately does not contain them
    enc_ds = SpriteDataset.from_corpus(
        generate_sprites(1280, seed=150, include_person=True))
    enc_cfg = TrainConfig(stage="clip", iterations=1500, batch_size=64, lr=1e-3,
                          seed=21, T=DESK_T,
                          model=dict(CLIP_DESK, noised=False))
    filter_clip, _ = train_clip(enc_ds, schedule, enc_cfg)

    corpus = generate_sprites(1200, seed=400, include_person=True)
    feats = np.stack([extract_filter_features(img, filter_clip)
                      for img, _, _ in corpus])
    labels = np.array([contains_person(s) for _, _, s in corpus])
    n_lab = 800
    filt, _ = fit_safety_filter(feats[:n_lab], labels[:n_lab], target_fnr=0.01,
                                seed=5, c=10.0)
    (filt, report), _ = boundary_relabel_round(
        filt, feats[n_lab:], labels[n_lab:], feats[:n_lab], labels[:n_lab],
        k=128, target_fnr=0.01, seed=5, c=10.0)
    kept, removal = filter_dataset(corpus, filt, filter_clip)
    filtered_ds = SpriteDataset.from_corpus(kept)
    f_cfg = TrainConfig(stage="base", iterations=500, batch_size=16, lr=3e-4,
                        seed=16, T=DESK_T, model=dict(DESK))
    f_model, _ = train_base(filtered_ds, f_cfg, schedule)
    return {
        "corpus": corpus,
        "labels": labels,
        "filter": filt,
        "filter_clip": filter_clip,
        "report": report,
        "removal": removal,
        "filtered_ds": filtered_ds,
        "filtered_model": f_model,
        "residual_persons": sum(1 for _, _, s in kept if contains_person(s)),
    }
