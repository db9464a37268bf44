"""Experiment harnesses: guidance-scale sweeps and the noised-vs-unnoised
guidance comparison. Each emits delimited rows plus matplotlib figures and
sample grids when an output directory is given."""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .. import engine as eng
from ..contrastive import clip_score
from ..guidance import GuidanceStrategy
from ..models import tokenize
from ..sampler import ancestral_sample, respaced
from ..service.images import montage, save_png
from .metrics import frechet_distance, inception_score_analog, precision_recall


def clip_features(images, clip_model, batch=256):
    """Image-encoder features at t=0 (the FID/PR feature space)."""
    chunks = []
    with eng.no_grad():
        for lo in range(0, len(images), batch):
            chunks.append(clip_model.encode_image(images[lo:lo + batch], None).data)
    return np.concatenate(chunks)


def generate_batch(denoiser, strategy, schedule, prompts, seed, steps=None):
    """One image per prompt under the strategy; deterministic per seed."""
    tokens = [tokenize(p) if isinstance(p, str) else p for p in prompts]
    sched = respaced(schedule, steps)
    cfg = denoiser.config
    shape = (len(tokens), cfg.channels, cfg.image_size, cfg.image_size)
    return ancestral_sample(denoiser, strategy, sched, shape, tokens,
                            np.random.default_rng(seed), dtype=np.float32)


def evaluate_samples(samples, prompts, clip_model, shape_classifier, real_feats,
                     k=3):
    tokens = [tokenize(p) if isinstance(p, str) else p for p in prompts]
    feats = clip_features(samples, clip_model)
    out = {
        "fid": frechet_distance(real_feats, feats),
        "clip_score": clip_score(samples, tokens, clip_model),
    }
    if shape_classifier is not None:
        out["is"] = inception_score_analog(samples, shape_classifier)
    else:
        out["is"] = float("nan")
    prec, rec = precision_recall(real_feats, feats, k=k)
    out["precision"], out["recall"] = prec, rec
    return out


def _strategy_for(kind, scale, guidance_clip=None, allow_unnoised=False):
    if kind == "classifier_free":
        return GuidanceStrategy(kind="classifier_free", scale=scale)
    if kind == "clip":
        return GuidanceStrategy(kind="clip", scale=scale,
                                embedding_model=guidance_clip,
                                allow_unnoised_clip=allow_unnoised)
    if kind == "none":
        return GuidanceStrategy()
    raise ValueError(f"unknown sweep kind {kind!r}")


def sweep_guidance(denoiser, schedule, scales, prompts, clip_model,
                   shape_classifier, real_images, seed, kind="classifier_free",
                   guidance_clip=None, steps=None, out_dir=None, grid_cols=8):
    """Per-scale metric rows {scale, fid, is, precision, recall, clip_score}.

    The same seed is reused across scales so curves differ only by guidance.
    """
    real_feats = clip_features(real_images, clip_model)
    rows = []
    for scale in scales:
        strategy = _strategy_for(kind, scale, guidance_clip,
                                 allow_unnoised=not getattr(guidance_clip, "noised", True))
        samples = generate_batch(denoiser, strategy, schedule, prompts, seed,
                                 steps=steps)
        row = {"scale": float(scale)}
        row.update(evaluate_samples(samples, prompts, clip_model,
                                    shape_classifier, real_feats))
        rows.append(row)
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            rows_n = (len(samples) + grid_cols - 1) // grid_cols
            save_png(os.path.join(out_dir, f"{kind}_scale_{scale:g}.png"),
                     montage(samples, rows_n, grid_cols))
    if out_dir:
        write_sweep_csv(rows, os.path.join(out_dir, f"{kind}_sweep.csv"))
        plot_sweep(rows, os.path.join(out_dir, f"{kind}_sweep"))
    return rows


SWEEP_COLUMNS = ["scale", "fid", "is", "precision", "recall", "clip_score"]


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in SWEEP_COLUMNS})


def read_sweep_csv(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def plot_sweep(rows, out_prefix):
    """The three trade-off panels; returns the written figure paths."""
    scales = [r["scale"] for r in rows]
    paths = []

    def panel(x, y, xlabel, ylabel, name):
        fig, ax = plt.subplots(figsize=(4.2, 3.4))
        ax.plot(x, y, "o-")
        for sx, sy, s in zip(x, y, scales):
            ax.annotate(f"{s:g}", (sx, sy), fontsize=7,
                        textcoords="offset points", xytext=(3, 3))
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        path = f"{out_prefix}_{name}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)

    panel([r["recall"] for r in rows], [r["precision"] for r in rows],
          "recall", "precision", "pr")
    panel([r["is"] for r in rows], [r["fid"] for r in rows],
          "inception score (shape analog)", "frechet distance", "is_fid")
    panel([r["clip_score"] for r in rows], [r["fid"] for r in rows],
          "contrastive score", "frechet distance", "clip_fid")
    return paths


def noised_vs_unnoised_study(denoiser, schedule, prompts, scales, noised_clip,
                             unnoised_clip, judge_clip, real_images, seed,
                             steps=None, out_dir=None):
    """Guide with a noise-aware vs a clean-image contrastive model and judge
    both with a third, held-out model. Returns the full report dict."""
    real_feats = clip_features(real_images, judge_clip)
    conditions = {"noised": noised_clip, "unnoised": unnoised_clip}
    report = {"seed": seed, "scales": [float(s) for s in scales], "rows": []}
    tokens = [tokenize(p) if isinstance(p, str) else p for p in prompts]
    for name, guide in conditions.items():
        for scale in scales:
            strategy = _strategy_for("clip", scale, guide,
                                     allow_unnoised=(name == "unnoised"))
            samples = generate_batch(denoiser, strategy, schedule, prompts,
                                     seed, steps=steps)
            feats = clip_features(samples, judge_clip)
            row = {
                "condition": name,
                "scale": float(scale),
                "judge_clip_score": clip_score(samples, tokens, judge_clip),
                "fid": frechet_distance(real_feats, feats),
            }
            report["rows"].append(row)
            if out_dir:
                os.makedirs(out_dir, exist_ok=True)
                cols = min(8, len(samples))
                grid_rows = (len(samples) + cols - 1) // cols
                save_png(os.path.join(out_dir, f"study_{name}_{scale:g}.png"),
                         montage(samples, grid_rows, cols))
    if out_dir:
        with open(os.path.join(out_dir, "noised_study.json"), "w") as fh:
            json.dump(report, fh, indent=2)
        with open(os.path.join(out_dir, "noised_study.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["condition", "scale",
                                                    "judge_clip_score", "fid"])
            writer.writeheader()
            writer.writerows(report["rows"])
    return report
