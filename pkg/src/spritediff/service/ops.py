"""Operation layer backing the CLI one-to-one: corpus IO, training stages,
sampling, metrics, filtering. The CLI only parses flags and calls these."""

from __future__ import annotations

import glob
import json
import os

import numpy as np

from .. import diffusion as dfn
from ..datagen import (
    contains_person, detect_person, extract_filter_features, filter_dataset,
    fit_safety_filter, generate_sprites, read_manifest, render, write_manifest,
)
from ..datagen.safety import FilterModel
from ..datagen.sprites import SpriteScene
from ..evaluation import (
    clip_features, elo_fit, frechet_distance, noised_vs_unnoised_study,
    precision_recall, read_judgments_csv, sweep_guidance, train_shape_classifier,
    win_matrix,
)
from ..contrastive import clip_score
from ..guidance import GuidanceStrategy
from ..models import tokenize
from ..sampler import (
    ancestral_sample, inpaint_finetuned, inpaint_replacement, respaced, sdedit,
)
from ..trainer import (
    SpriteDataset, TrainConfig, finetune_cfg, finetune_inpaint, load_clip,
    load_denoiser, save_clip, save_denoiser, train_base, train_clip,
    train_upsampler,
)
from .images import load_png, montage, save_png


# -- corpus ------------------------------------------------------------------


def op_gen_data(out_dir, n, seed, include_person=True, hires=False):
    """Write a sprite corpus: images/ PNGs plus manifest.jsonl."""
    corpus = generate_sprites(n, seed, include_person=include_person)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    if hires:
        os.makedirs(os.path.join(out_dir, "hires"), exist_ok=True)
    records = []
    for k, (img, caption, scene) in enumerate(corpus):
        name = f"{k:06d}.png"
        save_png(os.path.join(img_dir, name), img)
        if hires:
            save_png(os.path.join(out_dir, "hires", name), render(scene, 32))
        records.append({
            "file": f"images/{name}",
            "caption": caption,
            "scene": scene.to_dict(),
            "labels": {"person": contains_person(scene)},
        })
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    return {"out_dir": out_dir, "count": n,
            "persons": sum(r["labels"]["person"] for r in records)}


def load_corpus(data_dir, hires=False):
    """Corpus triples (image, caption, scene) from a gen-data directory."""
    records = read_manifest(os.path.join(data_dir, "manifest.jsonl"))
    out = []
    for rec in records:
        rel = rec["file"].replace("images/", "hires/") if hires else rec["file"]
        img = load_png(os.path.join(data_dir, rel))
        out.append((img, rec["caption"], SpriteScene.from_dict(rec["scene"])))
    return out


def dataset_from_dir(data_dir, hires=False):
    return SpriteDataset.from_corpus(load_corpus(data_dir, hires=hires))


def load_images_dir(path):
    files = sorted(glob.glob(os.path.join(path, "**", "*.png"), recursive=True))
    if not files:
        raise ValueError(f"no PNG files under {path}")
    return np.stack([load_png(f) for f in files])


# -- training ----------------------------------------------------------------


def op_train_base(data_dir, out, config):
    dataset = dataset_from_dir(data_dir)
    model, metrics = train_base(dataset, config)
    save_denoiser(out, model, config)
    return {"out": out, "steps": len(metrics), "final_loss": metrics[-1]["loss"]}


def op_finetune_cfg(checkpoint, data_dir, out, config):
    model, _ = load_denoiser(checkpoint)
    dataset = dataset_from_dir(data_dir)
    model, metrics, observed = finetune_cfg(model, dataset, config)
    save_denoiser(out, model, config)
    return {"out": out, "steps": len(metrics), "empty_fraction": observed}


def op_finetune_inpaint(checkpoint, data_dir, out, config):
    from .checkpoint import read_checkpoint

    dataset = dataset_from_dir(data_dir)
    model, metrics = finetune_inpaint(read_checkpoint(checkpoint), dataset, config)
    save_denoiser(out, model, config)
    return {"out": out, "steps": len(metrics), "final_loss": metrics[-1]["loss"]}


def op_train_upsampler(data_dir, out, config):
    dataset = dataset_from_dir(data_dir, hires=True)
    model, metrics = train_upsampler(dataset, config)
    save_denoiser(out, model, config)
    return {"out": out, "steps": len(metrics), "final_loss": metrics[-1]["loss"]}


def op_train_clip(data_dir, out, config):
    dataset = dataset_from_dir(data_dir)
    schedule = dfn.make_schedule(config.schedule_kind, config.T)
    model, metrics = train_clip(dataset, schedule, config)
    save_clip(out, model, config)
    return {"out": out, "steps": len(metrics), "final_loss": metrics[-1]["loss"]}


# -- sampling ----------------------------------------------------------------


def parse_guidance(spec, clip_model=None):
    """'none' | 'cfg:3.0' | 'clip:2.0' -> GuidanceStrategy."""
    if spec in (None, "", "none"):
        return GuidanceStrategy()
    kind, _, scale = spec.partition(":")
    scale = float(scale) if scale else 1.0
    if kind == "cfg":
        return GuidanceStrategy(kind="classifier_free", scale=scale)
    if kind == "clip":
        if clip_model is None:
            raise ValueError("clip guidance needs --clip CHECKPOINT")
        return GuidanceStrategy(kind="clip", scale=scale, embedding_model=clip_model,
                                allow_unnoised_clip=not clip_model.noised)
    raise ValueError(f"unknown guidance spec {spec!r}")


def parse_steps(spec):
    """None | 'full' | '100' | 'seg:10,10,3,2,2' -> a respaced() steps spec."""
    if spec in (None, "", "full"):
        return None
    if isinstance(spec, str) and spec.startswith("seg:"):
        return tuple(int(x) for x in spec[4:].split(","))
    return int(spec)


def _resolve_schedule(model_header, steps):
    sched_info = model_header.get("schedule") or {}
    schedule = dfn.make_schedule(sched_info.get("kind") or "cosine",
                                 sched_info.get("T") or 1000)
    return respaced(schedule, steps)


def op_sample(checkpoint, prompt, guidance, steps, seed, out, count=1,
              clip_checkpoint=None):
    model, header = load_denoiser(checkpoint)
    clip_model = load_clip(clip_checkpoint)[0] if clip_checkpoint else None
    strategy = parse_guidance(guidance, clip_model)
    schedule = _resolve_schedule(header, parse_steps(steps))
    tokens = [tokenize(prompt)] * count
    cfg = model.config
    x = ancestral_sample(model, strategy, schedule,
                         (count, cfg.channels, cfg.image_size, cfg.image_size),
                         tokens, np.random.default_rng(seed), dtype=np.float32)
    if count == 1:
        save_png(out, x[0])
    else:
        base, ext = os.path.splitext(out)
        for k in range(count):
            save_png(f"{base}_{k:03d}{ext}", x[k])
    return {"out": out, "count": count, "seed": seed}


def op_grid(checkpoint, prompt, rows, cols, guidance, steps, seed, out,
            clip_checkpoint=None):
    model, header = load_denoiser(checkpoint)
    clip_model = load_clip(clip_checkpoint)[0] if clip_checkpoint else None
    strategy = parse_guidance(guidance, clip_model)
    schedule = _resolve_schedule(header, parse_steps(steps))
    n = rows * cols
    tokens = [tokenize(prompt)] * n
    cfg = model.config
    x = ancestral_sample(model, strategy, schedule,
                         (n, cfg.channels, cfg.image_size, cfg.image_size),
                         tokens, np.random.default_rng(seed), dtype=np.float32)
    save_png(out, montage(x, rows, cols))
    return {"out": out, "rows": rows, "cols": cols}


def op_inpaint(checkpoint, image_path, mask_path, prompt, guidance, steps, seed,
               out, mode="replacement", clip_checkpoint=None):
    model, header = load_denoiser(checkpoint)
    clip_model = load_clip(clip_checkpoint)[0] if clip_checkpoint else None
    strategy = parse_guidance(guidance, clip_model)
    schedule = _resolve_schedule(header, parse_steps(steps))
    image = load_png(image_path)[None]
    mask = load_png(mask_path)
    if mask.ndim == 3:
        mask = mask[0]
    mask = (mask > 0).astype(np.float32)[None, None]
    tokens = [tokenize(prompt)]
    if mode == "replacement":
        result = inpaint_replacement(model, strategy, schedule, image,
                                     np.broadcast_to(mask[:, 0:1], image.shape),
                                     tokens, np.random.default_rng(seed),
                                     dtype=np.float32)
    elif mode == "finetuned":
        result = inpaint_finetuned(model, strategy, schedule, image, mask,
                                   tokens, np.random.default_rng(seed))
    else:
        raise ValueError(f"unknown inpaint mode {mode!r}")
    save_png(out, result[0])
    return {"out": out, "mode": mode, "seed": seed}


def op_sdedit(checkpoint, image_path, t_start, prompt, guidance, steps, seed,
              out, clip_checkpoint=None):
    model, header = load_denoiser(checkpoint)
    clip_model = load_clip(clip_checkpoint)[0] if clip_checkpoint else None
    strategy = parse_guidance(guidance, clip_model)
    schedule = _resolve_schedule(header, parse_steps(steps))
    image = load_png(image_path)[None]
    result = sdedit(model, strategy, schedule, image, t_start,
                    [tokenize(prompt)], np.random.default_rng(seed))
    save_png(out, result[0])
    return {"out": out, "t_start": t_start, "seed": seed}


# -- metrics and experiments -------------------------------------------------


def heldout_prompts(data_dir, n, seed=0):
    records = read_manifest(os.path.join(data_dir, "manifest.jsonl"))
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(records), size=min(n, len(records)), replace=False)
    return [records[i]["caption"] for i in idx]


def op_sweep(checkpoint, clip_checkpoint, data_dir, scales, kind, seed, out_dir,
             steps="100", n_prompts=64, guidance_clip_checkpoint=None):
    model, header = load_denoiser(checkpoint)
    clip_model, _ = load_clip(clip_checkpoint)
    guidance_clip = (load_clip(guidance_clip_checkpoint)[0]
                     if guidance_clip_checkpoint else clip_model)
    corpus = load_corpus(data_dir)
    shape_classifier, _ = train_shape_classifier(corpus, seed=seed)
    real = np.stack([img for img, _, _ in corpus])
    prompts = heldout_prompts(data_dir, n_prompts, seed)
    schedule = _resolve_schedule(header, None)
    rows = sweep_guidance(model, schedule, scales, prompts, clip_model,
                          shape_classifier, real, seed, kind=kind,
                          guidance_clip=guidance_clip, steps=parse_steps(steps),
                          out_dir=out_dir)
    return {"out_dir": out_dir, "rows": rows}


def op_elo_fit(judgments_csv, out, paper_literal=False, anchor=None):
    judgments = read_judgments_csv(judgments_csv)
    a = win_matrix(judgments)
    sigma = elo_fit(a, paper_literal=paper_literal, anchor=anchor)
    with open(out, "w") as fh:
        fh.write("model,rating\n")
        for i, s in enumerate(sigma):
            fh.write(f"{i},{s:.6f}\n")
    return {"out": out, "ratings": sigma.tolist(),
            "judgments": float(a.sum())}


def op_fid(clip_checkpoint, real_dir, fake_dir, out=None):
    clip_model, _ = load_clip(clip_checkpoint)
    real = clip_features(load_images_dir(real_dir), clip_model)
    fake = clip_features(load_images_dir(fake_dir), clip_model)
    result = {"fid": frechet_distance(real, fake)}
    if out:
        with open(out, "w") as fh:
            json.dump(result, fh)
    return result


def op_pr(clip_checkpoint, real_dir, fake_dir, k=3, out=None):
    clip_model, _ = load_clip(clip_checkpoint)
    real = clip_features(load_images_dir(real_dir), clip_model)
    fake = clip_features(load_images_dir(fake_dir), clip_model)
    p, r = precision_recall(real, fake, k=k)
    result = {"precision": p, "recall": r, "k": k}
    if out:
        with open(out, "w") as fh:
            json.dump(result, fh)
    return result


def op_clip_score(clip_checkpoint, data_dir, out=None):
    clip_model, _ = load_clip(clip_checkpoint)
    corpus = load_corpus(data_dir)
    images = np.stack([img for img, _, _ in corpus])
    tokens = [tokenize(c) for _, c, _ in corpus]
    result = {"clip_score": clip_score(images, tokens, clip_model),
              "count": len(corpus)}
    if out:
        with open(out, "w") as fh:
            json.dump(result, fh)
    return result


def op_filter_fit(data_dir, clip_checkpoint, out, target_fnr=0.01, seed=0,
                  report_path=None):
    clip_model, _ = load_clip(clip_checkpoint)
    corpus = load_corpus(data_dir)
    feats = np.stack([extract_filter_features(img, clip_model)
                      for img, _, _ in corpus])
    labels = np.array([contains_person(s) for _, _, s in corpus])
    model, report = fit_safety_filter(feats, labels, target_fnr=target_fnr,
                                      seed=seed)
    model.to_npz(out)
    report["out"] = out
    if report_path:
        with open(report_path, "w") as fh:
            json.dump(report, fh)
    return report


def op_filter_apply(data_dir, filter_path, clip_checkpoint, out_dir,
                    report_path=None):
    clip_model, _ = load_clip(clip_checkpoint)
    corpus = load_corpus(data_dir)
    model = FilterModel.from_npz(filter_path)
    kept, report = filter_dataset(corpus, model, clip_model)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for k, (img, caption, scene) in enumerate(kept):
        name = f"{k:06d}.png"
        save_png(os.path.join(img_dir, name), img)
        records.append({"file": f"images/{name}", "caption": caption,
                        "scene": scene.to_dict(),
                        "labels": {"person": contains_person(scene)}})
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    report["out_dir"] = out_dir
    if report_path:
        with open(report_path, "w") as fh:
            json.dump(report, fh)
    return report


def op_noised_study(checkpoint, noised_clip_ckpt, unnoised_clip_ckpt,
                    judge_clip_ckpt, data_dir, scales, seed, out_dir,
                    steps="100", n_prompts=32):
    model, header = load_denoiser(checkpoint)
    noised, _ = load_clip(noised_clip_ckpt)
    unnoised, _ = load_clip(unnoised_clip_ckpt)
    judge, _ = load_clip(judge_clip_ckpt)
    corpus = load_corpus(data_dir)
    real = np.stack([img for img, _, _ in corpus])
    prompts = heldout_prompts(data_dir, n_prompts, seed)
    schedule = _resolve_schedule(header, None)
    return noised_vs_unnoised_study(model, schedule, prompts, scales, noised,
                                    unnoised, judge, real, seed,
                                    steps=parse_steps(steps), out_dir=out_dir)
