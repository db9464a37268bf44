"""Calibration run for the trained acceptance criteria (not part of the package).

Trains the full desk stack at the acceptance scale, then evaluates every
trained-model criterion and prints the numbers so the acceptance thresholds
can be frozen from evidence.
"""

import json
import os
import time

import numpy as np

import spritediff.diffusion as dfn
from spritediff.contrastive import clip_score
from spritediff.datagen import detect_person, generate_sprites, render
from spritediff.evaluation import (clip_features, frechet_distance,
                                   train_shape_classifier)
from spritediff.evaluation.sweeps import generate_batch
from spritediff.guidance import GuidanceStrategy
from spritediff.models import build_base, tokenize
from spritediff.sampler import inpaint_finetuned, respaced, ancestral_sample, two_stage, UPSAMPLER_SEGMENT_COUNTS
from spritediff.trainer import (SpriteDataset, TrainConfig, box_downsample,
                                finetune_cfg, finetune_inpaint, train_base,
                                train_clip, train_upsampler, validation_loss)

T0 = time.monotonic()
OUT = {}


def clock(name):
    print(f"[{time.monotonic()-T0:7.1f}s] {name}", flush=True)


TINY = dict(base_width=16, text_width=32, text_layers=2, text_heads=4,
            time_width=32, attn_heads=4, res_blocks=2)
CLIP_CFG = dict(width=16, embed_dim=32, text_width=32, text_layers=2,
                text_heads=4, time_width=32)
T = 1000

clock("corpus")
train_corpus = generate_sprites(1280, seed=100, include_person=False)
held_corpus = generate_sprites(256, seed=200, include_person=False)
train_ds = SpriteDataset.from_corpus(train_corpus)
held_ds = SpriteDataset.from_corpus(held_corpus)
schedule = dfn.make_schedule("cosine", T)

clock("train noised clip (800 it, b64)")
clip_cfg = TrainConfig(stage="clip", iterations=800, batch_size=64, lr=1e-3,
                       seed=11, T=T, model=dict(CLIP_CFG))
clip_model, clip_metrics = train_clip(train_ds, schedule, clip_cfg)
clock(f"clip loss {clip_metrics[0]['loss']:.3f} -> {clip_metrics[-1]['loss']:.3f}")

# matched vs mismatched at low t
rng = np.random.default_rng(0)
idx = rng.choice(len(held_ds.images), 128, replace=False)
imgs = held_ds.images[idx]
toks = [held_ds.tokens[i] for i in idx]
t_low = rng.integers(0, T // 4, 128)
eps = rng.standard_normal(imgs.shape).astype(np.float32)
noised = dfn.q_sample(imgs, t_low, eps, schedule).astype(np.float32)
import spritediff.engine as eng
with eng.no_grad():
    f = clip_model.encode_image(noised, t_low).data
    g = clip_model.encode_text(toks).data
matched = (f * g).sum(1).mean()
mismatched = (f * np.roll(g, 1, axis=0)).sum(1).mean()
OUT["clip_matched"] = float(matched)
OUT["clip_mismatched"] = float(mismatched)
clock(f"matched {matched:.3f} vs mismatched {mismatched:.3f} at low t")

clock("train base (1200 it, b16)")
base_cfg = TrainConfig(stage="base", iterations=1200, batch_size=16, lr=3e-4,
                       seed=12, T=T, model=dict(TINY))
base, base_metrics = train_base(train_ds, base_cfg, schedule)
v_init_model = build_base(np.random.default_rng(999), **TINY)
clock(f"base loss {base_metrics[0]['loss']:.1f} -> {np.mean([m['loss'] for m in base_metrics[-50:]]):.1f}")
val_before = validation_loss(v_init_model, held_ds, schedule, base_cfg)
val_after = validation_loss(base, held_ds, schedule, base_cfg)
OUT["val_untrained"] = val_before
OUT["val_trained"] = val_after
clock(f"val loss untrained {val_before:.1f} trained {val_after:.1f}")

clock("cfg finetune (640 it, b16)")
cfg_cfg = TrainConfig(stage="cfg_finetune", iterations=640, batch_size=16,
                      lr=3e-4, seed=13, T=T, model=dict(TINY))
base, _, observed = finetune_cfg(base, train_ds, cfg_cfg, schedule)
OUT["empty_fraction"] = observed
clock(f"empty fraction {observed:.4f} over {640*16} draws")

clock("FID untrained vs trained (256 samples, 100-step)")
held_feats = clip_features(held_ds.images, clip_model)
prompts = [held_ds.captions[i] for i in rng.choice(len(held_ds.captions), 256)]
samples_tr = generate_batch(base, GuidanceStrategy(), schedule, prompts, 500, steps=100)
fid_tr = frechet_distance(held_feats, clip_features(samples_tr, clip_model))
samples_un = generate_batch(v_init_model, GuidanceStrategy(), schedule, prompts, 500, steps=100)
fid_un = frechet_distance(held_feats, clip_features(samples_un, clip_model))
OUT["fid_trained"] = fid_tr
OUT["fid_untrained"] = fid_un
clock(f"fid trained {fid_tr:.3f} untrained {fid_un:.3f} ratio {fid_tr/fid_un:.3f}")

clock("clip guidance sweep")
scales = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0]
prompts64 = [held_ds.captions[i] for i in rng.choice(len(held_ds.captions), 64)]
scores = []
for s in scales:
    strat = GuidanceStrategy(kind="clip", scale=s, embedding_model=clip_model) if s > 0 else GuidanceStrategy()
    x = generate_batch(base, strat, schedule, prompts64, 600, steps=50)
    scores.append(clip_score(x, [tokenize(p) for p in prompts64], clip_model))
incr = sum(b > a for a, b in zip(scores, scores[1:]))
OUT["sweep_scores"] = scores
OUT["sweep_increasing_pairs"] = f"{incr}/{len(scores)-1}"
clock(f"clip sweep scores {['%.2f'%s for s in scores]} increasing {incr}/{len(scores)-1}")

clock("cfg s=3 vs unguided clip score")
x_un = generate_batch(base, GuidanceStrategy(), schedule, prompts64, 700, steps=100)
x_cfg = generate_batch(base, GuidanceStrategy(kind="classifier_free", scale=3.0),
                       schedule, prompts64, 700, steps=100)
toks64 = [tokenize(p) for p in prompts64]
s_un = clip_score(x_un, toks64, clip_model)
s_cfg = clip_score(x_cfg, toks64, clip_model)
OUT["clipscore_unguided"] = s_un
OUT["clipscore_cfg3"] = s_cfg
clock(f"clip score unguided {s_un:.2f} cfg3 {s_cfg:.2f}")

clock("inpaint finetune (800 it, b16)")
inp_cfg = TrainConfig(stage="inpaint_finetune", iterations=800, batch_size=16,
                      lr=3e-4, seed=14, T=T, model=dict(TINY))
inpaint_model, _ = finetune_inpaint(base, train_ds, inp_cfg, schedule)

clock("inpaint MAE eval (16 imgs, 100-step)")
test_imgs = held_ds.images[:16]
mask = np.ones((16, 1, 16, 16), np.float32)
mask[:, :, 4:12, 4:12] = 0.0  # center hole erased, border known
sched100 = respaced(schedule, 100)
restored, pre = inpaint_finetuned(inpaint_model, None, sched100, test_imgs, mask,
                                  [held_ds.tokens[i] for i in range(16)],
                                  np.random.default_rng(800), return_pre_restore=True)
known = np.broadcast_to(mask, test_imgs.shape) > 0
mae = float(np.abs(pre - test_imgs)[known].mean())
OUT["inpaint_known_mae"] = mae
clock(f"inpaint known-region MAE {mae:.4f}")

clock("upsampler (500 it, b8, width 12)")
hi_corpus = [(render(s, 32), c, s) for _, c, s in generate_sprites(512, seed=300, include_person=False)]
hi_ds = SpriteDataset.from_corpus(hi_corpus)
up_cfg = TrainConfig(stage="upsampler", iterations=500, batch_size=8, lr=3e-4,
                     seed=15, T=T,
                     model=dict(base_width=12, text_width=16, text_layers=1,
                                text_heads=2, time_width=16, attn_heads=2,
                                res_blocks=1, image_size=32))
upsampler, up_metrics = train_upsampler(hi_ds, up_cfg, schedule)
hi_held = [(render(s, 32), c, s) for _, c, s in generate_sprites(16, seed=301, include_person=False)]
hi_held_ds = SpriteDataset.from_corpus(hi_held)
lo_held = box_downsample(hi_held_ds.images)
up_init = None
val_u0 = validation_loss(train_upsampler.__wrapped__ if False else upsampler, hi_held_ds, schedule, up_cfg,
                         extras_fn=lambda x0, idx, rng: {"low_res": box_downsample(hi_held_ds.images)[idx]})
clock(f"upsampler loss {up_metrics[0]['loss']:.1f} -> {np.mean([m['loss'] for m in up_metrics[-30:]]):.1f} val {val_u0:.1f}")

clock("upsampler PSNR vs bicubic (27-step)")
sched27 = respaced(schedule, list(UPSAMPLER_SEGMENT_COUNTS))
out_up = ancestral_sample(upsampler, None, sched27, (16, 3, 32, 32),
                          [hi_held_ds.tokens[i] for i in range(16)],
                          np.random.default_rng(900),
                          extras={"low_res": lo_held}, dtype=np.float32)
from spritediff.engine import Tensor, upsample_bicubic2d
bic = upsample_bicubic2d(Tensor(lo_held), 32, 32).data


def psnr(a, b):
    mse = np.mean((a - b) ** 2, axis=(1, 2, 3))
    return (10 * np.log10(4.0 / mse)).mean()  # range is [-1,1] -> peak-to-peak 2


OUT["psnr_model"] = float(psnr(out_up, hi_held_ds.images))
OUT["psnr_bicubic"] = float(psnr(np.clip(bic, -1, 1), hi_held_ds.images))
clock(f"psnr model {OUT['psnr_model']:.2f} vs bicubic {OUT['psnr_bicubic']:.2f}")

clock("safety: corpus with persons, features, filter, filtered model")
person_corpus = generate_sprites(1200, seed=400, include_person=True)
from spritediff.datagen import extract_filter_features, fit_safety_filter, filter_dataset, contains_person
feats = np.stack([extract_filter_features(img, clip_model) for img, _, _ in person_corpus])
labels = np.array([contains_person(s) for _, _, s in person_corpus])
clock(f"positives {labels.sum()}/{len(labels)}")
filt, rep = fit_safety_filter(feats, labels, target_fnr=0.01, seed=5)
OUT["filter_report"] = rep
clock(f"filter heldout fnr {rep['heldout_fnr']:.4f} fpr {rep['heldout_fpr']:.4f}")
kept, frep = filter_dataset(person_corpus, filt, clip_model)
OUT["filter_removed"] = frep
residual = sum(contains_person(s) for _, _, s in kept)
OUT["residual_persons_in_filtered"] = int(residual)
clock(f"filtered corpus {frep} residual persons {residual}")

clock("filtered-model training (500 it)")
filtered_ds = SpriteDataset.from_corpus(kept)
f_cfg = TrainConfig(stage="base", iterations=500, batch_size=16, lr=3e-4,
                    seed=16, T=T, model=dict(TINY))
f_model, _ = train_base(filtered_ds, f_cfg, schedule)
clock("sampling 1024 red-team images (50-step)")
detections = 0
svm_flags = 0
for b in range(8):
    prompts_b = [filtered_ds.captions[i] for i in
                 np.random.default_rng(1000 + b).choice(len(filtered_ds.captions), 128)]
    xs = generate_batch(f_model, GuidanceStrategy(), schedule, prompts_b, 1000 + b, steps=50)
    detections += sum(detect_person(x) for x in xs)
    fb = np.stack([extract_filter_features(x, clip_model) for x in xs])
    svm_flags += int(filt.predict(fb).sum())
OUT["redteam_detections"] = int(detections)
OUT["redteam_svm_flags"] = int(svm_flags)
clock(f"red-team detections {detections} (svm flags {svm_flags})")

print(json.dumps(OUT, indent=2, default=float))
with open("/root/pkg/.calib.json", "w") as fh:
    json.dump(OUT, fh, indent=2, default=float)
clock("done")
