"""Third calibration: FiLM architecture + filter-encoder corpus + lr decay."""

import time

import numpy as np

import spritediff.diffusion as dfn
from spritediff.datagen import (contains_person, extract_filter_features,
                                filter_dataset, fit_safety_filter,
                                generate_scene, generate_sprites, render)
from spritediff.datagen.sprites import SpriteScene
from spritediff.sampler import (UPSAMPLER_SEGMENT_COUNTS, ancestral_sample,
                                inpaint_finetuned, respaced)
from spritediff.trainer import (SpriteDataset, TrainConfig, box_downsample,
                                finetune_cfg, finetune_inpaint, save_clip,
                                save_denoiser, train_base, train_clip,
                                train_upsampler)

T0 = time.monotonic()


def clock(msg):
    print(f"[{time.monotonic()-T0:7.1f}s] {msg}", flush=True)


DESK = dict(base_width=16, text_width=32, text_layers=2, text_heads=4,
            time_width=32, attn_heads=4, res_blocks=2)
T = 1000
schedule = dfn.make_schedule("cosine", T)


def single_object_corpus(n, seed, person_fraction=0.5):
    """Curated labeled set for the filter encoder: single objects, persons
    oversampled so the contrastive model must encode them."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        scene = generate_scene(rng, include_person=True)
        if len(scene.objects) != 1:
            continue
        want_person = (len(out) % 2 == 0) if person_fraction == 0.5 else \
            (rng.random() < person_fraction)
        if (scene.objects[0].shape == "person") != want_person:
            continue
        out.append((render(scene), scene.caption(), scene))
    return out


clock("filter encoder corpus + clip (unnoised)")
enc_corpus = single_object_corpus(1280, seed=500)
enc_ds = SpriteDataset.from_corpus(enc_corpus)
enc_cfg = TrainConfig(stage="clip", iterations=1500, batch_size=64, lr=1e-3,
                      seed=21, T=T,
                      model=dict(width=16, embed_dim=32, text_width=32,
                                 text_layers=2, text_heads=4, time_width=32,
                                 noised=False))
filter_clip, m = train_clip(enc_ds, schedule, enc_cfg)
save_clip("/root/pkg/.calib_filter_clip.gldm", filter_clip, enc_cfg)
clock(f"filter clip loss {m[0]['loss']:.2f}->{m[-1]['loss']:.2f}")

corpus = generate_sprites(1200, seed=400, include_person=True)
labels = np.array([contains_person(s) for _, _, s in corpus])
feats = np.stack([extract_filter_features(img, filter_clip) for img, _, _ in corpus])


def auc(scores, labels):
    order = np.argsort(scores)
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(len(scores))
    pos = ranks[labels]
    n_pos, n_neg = labels.sum(), (~labels).sum()
    return (pos.sum() - n_pos * (n_pos - 1) / 2) / (n_pos * n_neg)


mu_p, mu_n = feats[labels].mean(0), feats[~labels].mean(0)
clock(f"class-mean AUC={auc(feats @ (mu_p - mu_n), labels):.4f}")
for c in (10.0, 30.0):
    filt, rep = fit_safety_filter(feats, labels, target_fnr=0.01, seed=5, c=c)
    kept, removal = filter_dataset(corpus, filt, filter_clip)
    residual = sum(contains_person(sc) for _, _, sc in kept)
    clock(f"C={c}: fnr={rep['heldout_fnr']:.4f} fpr={rep['heldout_fpr']:.4f} "
          f"svm AUC={auc(filt.scores(feats), labels):.4f} "
          f"removed={removal['removed']}/1200 residual={residual}")

clock("base+cfg with FiLM")
train_ds = SpriteDataset.from_corpus(generate_sprites(1280, seed=100, include_person=False))
held_ds = SpriteDataset.from_corpus(generate_sprites(256, seed=200, include_person=False))
base_cfg = TrainConfig(stage="base", iterations=1200, batch_size=16, lr=3e-4,
                       seed=12, T=T, model=dict(DESK))
base, bm = train_base(train_ds, base_cfg, schedule)
clock(f"base loss {bm[0]['loss']:.1f}->{np.mean([x['loss'] for x in bm[-50:]]):.1f}")
cfg_cfg = TrainConfig(stage="cfg_finetune", iterations=640, batch_size=16,
                      lr=3e-4, seed=13, T=T, model=dict(DESK))
base, _, frac = finetune_cfg(base, train_ds, cfg_cfg, schedule)
save_denoiser("/root/pkg/.calib3_base.gldm", base, cfg_cfg)
clock(f"empty fraction {frac:.4f}")


def inpaint_eval(model, steps=100, n=16):
    test = held_ds.images[:n]
    mask = np.ones((n, 1, 16, 16), np.float32)
    mask[:, :, 4:12, 4:12] = 0.0
    _, pre = inpaint_finetuned(model, None, respaced(schedule, steps), test, mask,
                               [held_ds.tokens[i] for i in range(n)],
                               np.random.default_rng(800), return_pre_restore=True)
    known = np.broadcast_to(mask, test.shape) > 0
    return float(np.abs(pre - test)[known].mean())


clock("inpaint finetune with FiLM, lr decay 5e-4 -> 1e-4 over 3000")
from spritediff.trainer import _train_denoiser
from spritediff.datagen.masks import random_mask


def make_extras(x0, idx, rng):
    masks = np.stack([random_mask(rng, x0.shape[-1])[0] for _ in idx])
    return {"context_rgb": x0 * masks, "mask": masks}


inp_cfg = TrainConfig(stage="inpaint_finetune", iterations=1000, batch_size=16,
                      lr=5e-4, lr_final=3.7e-4, seed=14, T=T, model=dict(DESK))
model_inp, _ = finetune_inpaint(base, train_ds, inp_cfg, schedule)
clock(f"@1000: mae={inpaint_eval(model_inp):.4f}")
for k, (lr0, lr1) in enumerate([(3.7e-4, 2.3e-4), (2.3e-4, 1e-4)], start=2):
    cont = TrainConfig(stage="inpaint_finetune", iterations=1000, batch_size=16,
                       lr=lr0, lr_final=lr1, seed=14 + k, T=T, model=dict(DESK))
    _train_denoiser(model_inp, train_ds, cont, schedule, batch_extras=make_extras)
    clock(f"@{k}000: mae={inpaint_eval(model_inp):.4f}")
save_denoiser("/root/pkg/.calib3_inpaint.gldm", model_inp, inp_cfg)

clock("upsampler with FiLM (1600 it)")
hi_corpus = [(render(s, 32), c, s) for _, c, s in generate_sprites(512, seed=300, include_person=False)]
hi_ds = SpriteDataset.from_corpus(hi_corpus)
hi_held = [(render(s, 32), c, s) for _, c, s in generate_sprites(16, seed=301, include_person=False)]
hi_held_ds = SpriteDataset.from_corpus(hi_held)
lo_held = box_downsample(hi_held_ds.images)
from spritediff.engine import Tensor, upsample_bicubic2d

bic = np.clip(upsample_bicubic2d(Tensor(lo_held), 32, 32).data, -1, 1)


def psnr(a, b):
    mse = np.mean((a - b) ** 2, axis=(1, 2, 3))
    return float((10 * np.log10(4.0 / np.maximum(mse, 1e-12))).mean())


def up_eval(model, steps):
    sched = respaced(schedule, steps)
    out = ancestral_sample(model, None, sched, (16, 3, 32, 32),
                           [hi_held_ds.tokens[i] for i in range(16)],
                           np.random.default_rng(900),
                           extras={"low_res": lo_held}, dtype=np.float32)
    return psnr(out, hi_held_ds.images)


UP = dict(base_width=16, text_width=16, text_layers=1, text_heads=2,
          time_width=16, attn_heads=2, res_blocks=1, image_size=32)
up_cfg = TrainConfig(stage="upsampler", iterations=1600, batch_size=8, lr=5e-4,
                     lr_final=1e-4, seed=15, T=T, model=dict(UP))
upsampler, um = train_upsampler(hi_ds, up_cfg, schedule)
save_denoiser("/root/pkg/.calib3_up.gldm", upsampler, up_cfg)
clock(f"up loss {um[0]['loss']:.1f}->{np.mean([x['loss'] for x in um[-30:]]):.1f} "
      f"bicubic={psnr(bic, hi_held_ds.images):.2f}")
for steps in (list(UPSAMPLER_SEGMENT_COUNTS), 100, 250):
    clock(f"up psnr steps={steps}: {up_eval(upsampler, steps):.2f}")
clock("done")
