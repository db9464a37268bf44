"""Second calibration: SVM fixes, inpaint-MAE vs iterations, upsampler PSNR."""

import time

import numpy as np

import spritediff.diffusion as dfn
from spritediff.datagen import (contains_person, extract_filter_features,
                                filter_dataset, fit_safety_filter,
                                generate_sprites, render)
from spritediff.models import EMPTY
from spritediff.sampler import (UPSAMPLER_SEGMENT_COUNTS, ancestral_sample,
                                inpaint_finetuned, respaced)
from spritediff.trainer import (SpriteDataset, TrainConfig, box_downsample,
                                finetune_cfg, finetune_inpaint, train_base,
                                train_clip, train_upsampler, save_denoiser, save_clip)

T0 = time.monotonic()


def clock(msg):
    print(f"[{time.monotonic()-T0:7.1f}s] {msg}", flush=True)


DESK = dict(base_width=16, text_width=32, text_layers=2, text_heads=4,
            time_width=32, attn_heads=4, res_blocks=2)
CLIP_DESK = dict(width=16, embed_dim=32, text_width=32, text_layers=2,
                 text_heads=4, time_width=32)
T = 1000
schedule = dfn.make_schedule("cosine", T)

train_ds = SpriteDataset.from_corpus(generate_sprites(1280, seed=100, include_person=False))
held_ds = SpriteDataset.from_corpus(generate_sprites(256, seed=200, include_person=False))

clock("clip")
clip_cfg = TrainConfig(stage="clip", iterations=800, batch_size=64, lr=1e-3,
                       seed=11, T=T, model=dict(CLIP_DESK))
clip_model, _ = train_clip(train_ds, schedule, clip_cfg)
save_clip("/root/pkg/.calib_clip.gldm", clip_model, clip_cfg)

# ---- SVM diagnostics -------------------------------------------------------
clock("svm features")
person_corpus = generate_sprites(1200, seed=400, include_person=True)
feats = np.stack([extract_filter_features(img, clip_model) for img, _, _ in person_corpus])
labels = np.array([contains_person(s) for _, _, s in person_corpus])
clock(f"positives {labels.sum()}")

for c in (10.0, 30.0, 100.0):
    filt, rep = fit_safety_filter(feats, labels, target_fnr=0.01, seed=5, c=c)
    scores = filt.scores(feats)
    sep = (scores[labels].min(), scores[~labels].max())
    kept, removal = filter_dataset(person_corpus, filt, clip_model)
    residual = sum(contains_person(s) for _, _, s in kept)
    clock(f"C={c}: fnr={rep['heldout_fnr']:.4f} fpr={rep['heldout_fpr']:.4f} "
          f"pos_min={sep[0]:.3f} neg_max={sep[1]:.3f} removed={removal['removed']} "
          f"residual={residual}")

# ---- base + cfg (needed for inpaint) ---------------------------------------
clock("base 1200")
base_cfg = TrainConfig(stage="base", iterations=1200, batch_size=16, lr=3e-4,
                       seed=12, T=T, model=dict(DESK))
base, _ = train_base(train_ds, base_cfg, schedule)
cfg_cfg = TrainConfig(stage="cfg_finetune", iterations=640, batch_size=16,
                      lr=3e-4, seed=13, T=T, model=dict(DESK))
base, _, _ = finetune_cfg(base, train_ds, cfg_cfg, schedule)
base.supports_empty = True
save_denoiser("/root/pkg/.calib_base.gldm", base, cfg_cfg)


def inpaint_eval(model, steps=100, n=16):
    test = held_ds.images[:n]
    mask = np.ones((n, 1, 16, 16), np.float32)
    mask[:, :, 4:12, 4:12] = 0.0
    sched = respaced(schedule, steps)
    _, pre = inpaint_finetuned(model, None, sched, test, mask,
                               [held_ds.tokens[i] for i in range(n)],
                               np.random.default_rng(800), return_pre_restore=True)
    known = np.broadcast_to(mask, test.shape) > 0
    return float(np.abs(pre - test)[known].mean())


def eps_probe(model, n=32):
    # accuracy of eps prediction inside the known region vs outside
    rng = np.random.default_rng(7)
    x0 = held_ds.images[:n]
    mask = np.ones((n, 1, 16, 16), np.float32)
    mask[:, :, 4:12, 4:12] = 0.0
    errs_known, errs_unknown = [], []
    for t in (50, 300, 700):
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = dfn.q_sample(x0, t, eps, schedule).astype(np.float32)
        out = model.predict(x_t, t, [held_ds.tokens[i] for i in range(n)],
                            context_rgb=x0 * mask, mask=mask)
        err = np.abs(out.eps - eps)
        kb = np.broadcast_to(mask, x0.shape) > 0
        errs_known.append(float(err[kb].mean()))
        errs_unknown.append(float(err[~kb].mean()))
    return errs_known, errs_unknown


clock("inpaint finetune 3000 (eval at 1000/2000/3000)")
import copy
from spritediff.service.checkpoint import read_checkpoint

inp_cfg = TrainConfig(stage="inpaint_finetune", iterations=1000, batch_size=16,
                      lr=5e-4, seed=14, T=T, model=dict(DESK))
model_inp, _ = finetune_inpaint(base, train_ds, inp_cfg, schedule)
k, u = eps_probe(model_inp)
clock(f"@1000: mae={inpaint_eval(model_inp):.4f} eps known={k} unknown={u}")
for round_idx in (2, 3):
    cont_cfg = TrainConfig(stage="inpaint_finetune", iterations=1000, batch_size=16,
                           lr=5e-4, seed=14 + round_idx, T=T, model=dict(DESK))
    from spritediff.trainer import _train_denoiser
    from spritediff.datagen.masks import random_mask

    def make_extras(x0, idx, rng):
        masks = np.stack([random_mask(rng, x0.shape[-1])[0] for _ in idx])
        return {"context_rgb": x0 * masks, "mask": masks}

    _train_denoiser(model_inp, train_ds, cont_cfg, schedule, batch_extras=make_extras)
    k, u = eps_probe(model_inp)
    clock(f"@{round_idx}000: mae={inpaint_eval(model_inp):.4f} eps known={k} unknown={u}")
save_denoiser("/root/pkg/.calib_inpaint.gldm", model_inp, inp_cfg)
clock(f"full-T mae @3000: {inpaint_eval(model_inp, steps=None)}")

# ---- upsampler --------------------------------------------------------------
clock("upsampler 2500 width 16")
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


def up_eval(model):
    sched27 = respaced(schedule, list(UPSAMPLER_SEGMENT_COUNTS))
    out = ancestral_sample(model, None, sched27, (16, 3, 32, 32),
                           [hi_held_ds.tokens[i] for i in range(16)],
                           np.random.default_rng(900),
                           extras={"low_res": lo_held}, dtype=np.float32)
    return psnr(out, hi_held_ds.images)


UP = dict(base_width=16, text_width=16, text_layers=1, text_heads=2,
          time_width=16, attn_heads=2, res_blocks=1, image_size=32)
up_cfg = TrainConfig(stage="upsampler", iterations=800, batch_size=8, lr=5e-4,
                     seed=15, T=T, model=dict(UP))
upsampler, m = train_upsampler(hi_ds, up_cfg, schedule)
clock(f"up@800: loss {m[0]['loss']:.1f}->{np.mean([x['loss'] for x in m[-30:]]):.1f} "
      f"psnr {up_eval(upsampler):.2f} (bicubic {psnr(bic, hi_held_ds.images):.2f})")
lows = box_downsample(hi_ds.images).astype(np.float32)
for round_idx in (2, 3):
    cont = TrainConfig(stage="upsampler", iterations=800, batch_size=8, lr=5e-4,
                       seed=15 + round_idx, T=T, model=dict(UP))
    from spritediff.trainer import _train_denoiser

    def up_extras(x0, idx, rng):
        return {"low_res": lows[idx]}

    m = _train_denoiser(upsampler, hi_ds, cont, schedule, batch_extras=up_extras)
    clock(f"up@{800*round_idx}: loss->{np.mean([x['loss'] for x in m[-30:]]):.1f} "
          f"psnr {up_eval(upsampler):.2f}")
save_denoiser("/root/pkg/.calib_up.gldm", upsampler, up_cfg)
clock("done")
