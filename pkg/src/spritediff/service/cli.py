"""Command-line entry point. Every subcommand parses flags, calls one ops.*
function, prints its JSON result, and exits 0; usage errors exit 2 and
runtime failures exit 1 with a structured diagnostic on stderr."""

from __future__ import annotations

import argparse
import json
import sys

from ..trainer import TrainConfig


def _train_flags(p, stage, iterations):
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--iterations", type=int, default=iterations)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schedule", default="cosine", choices=["cosine", "linear"])
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--eval-cadence", type=int, default=0)
    p.add_argument("--model-config", default=None,
                   help="JSON dict of model config overrides")
    p.set_defaults(stage=stage)


def _sample_flags(p, prompt_required=True):
    p.add_argument("--model", required=True, help="denoiser checkpoint")
    p.add_argument("--prompt", required=prompt_required, default="")
    p.add_argument("--guidance", default="none", help="none | cfg:S | clip:S")
    p.add_argument("--clip", default=None, help="contrastive checkpoint for clip guidance")
    p.add_argument("--steps", default="full", help="full | N | seg:a,b,c,...")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def build_parser():
    ap = argparse.ArgumentParser(prog="spritediff",
                                 description="desk-scale text-guided sprite diffusion")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a captioned sprite corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-person", action="store_true")
    p.add_argument("--hires", action="store_true", help="also write 32x32 renders")

    _train_flags(sub.add_parser("train-base", help="pre-train the base denoiser"),
                 "base", 2000)
    p = sub.add_parser("finetune-cfg", help="fine-tune with caption dropping")
    _train_flags(p, "cfg_finetune", 500)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--p-drop", type=float, default=0.2)
    p = sub.add_parser("finetune-inpaint", help="fine-tune the inpainting variant")
    _train_flags(p, "inpaint_finetune", 800)
    p.add_argument("--checkpoint", required=True)
    _train_flags(sub.add_parser("train-upsampler", help="train the 16->32 upsampler"),
                 "upsampler", 1000)
    _train_flags(sub.add_parser("train-clip", help="train the contrastive model"),
                 "clip", 1000)
    sub.choices["train-clip"].add_argument("--unnoised", action="store_true")

    _sample_flags(sub.add_parser("sample", help="generate images"))
    sub.choices["sample"].add_argument("--count", type=int, default=1)

    p = sub.add_parser("grid", help="sample a montage grid")
    _sample_flags(p)
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)

    p = sub.add_parser("inpaint", help="inpaint a masked image")
    _sample_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True, help="PNG; white = keep")
    p.add_argument("--mode", default="replacement", choices=["replacement", "finetuned"])

    p = sub.add_parser("sdedit", help="partially noise and re-denoise an image")
    _sample_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--t-start", type=int, required=True)

    p = sub.add_parser("sweep", help="guidance-scale metric sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--guidance-clip", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--scales", required=True, help="comma-separated")
    p.add_argument("--kind", default="classifier_free",
                   choices=["classifier_free", "clip"])
    p.add_argument("--steps", default="100")
    p.add_argument("--n-prompts", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("elo-fit", help="fit Elo ratings from judgments")
    p.add_argument("--in", dest="judgments", required=True, help="CSV i,j,outcome")
    p.add_argument("--out", required=True)
    p.add_argument("--paper-literal", action="store_true")
    p.add_argument("--anchor", type=int, default=None)

    for name in ("fid", "pr"):
        p = sub.add_parser(name, help=f"compute {name} between two image dirs")
        p.add_argument("--clip", required=True)
        p.add_argument("--real", required=True)
        p.add_argument("--fake", required=True)
        p.add_argument("--out", default=None)
        if name == "pr":
            p.add_argument("--k", type=int, default=3)

    p = sub.add_parser("clip-score", help="mean scaled dot product over a corpus")
    p.add_argument("--clip", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("filter-fit", help="fit the safety filter")
    p.add_argument("--data", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-fnr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)

    p = sub.add_parser("filter-apply", help="filter a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--filter", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--report", default=None)

    p = sub.add_parser("noised-study", help="noised vs unnoised guidance study")
    p.add_argument("--model", required=True)
    p.add_argument("--noised-clip", required=True)
    p.add_argument("--unnoised-clip", required=True)
    p.add_argument("--judge-clip", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scales", required=True)
    p.add_argument("--steps", default="100")
    p.add_argument("--n-prompts", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("serve", help="run the HTTP generation service")
    p.add_argument("--base", required=True)
    p.add_argument("--inpaint-model", default=None)
    p.add_argument("--upsampler", default=None)
    p.add_argument("--clip", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--queue-size", type=int, default=16)
    p.add_argument("--concurrency", type=int, default=2)
    return ap


def _config_from(args):
    model = json.loads(args.model_config) if args.model_config else {}
    return TrainConfig(stage=args.stage, iterations=args.iterations,
                       batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       p_drop=getattr(args, "p_drop", None),
                       schedule_kind=args.schedule, T=args.timesteps,
                       checkpoint_dir=args.checkpoint_dir,
                       eval_cadence=args.eval_cadence, model=model)


def _dispatch(args):
    from . import ops

    cmd = args.command
    if cmd == "gen-data":
        return ops.op_gen_data(args.out, args.n, args.seed,
                               include_person=not args.no_person, hires=args.hires)
    if cmd == "train-base":
        return ops.op_train_base(args.data, args.out, _config_from(args))
    if cmd == "finetune-cfg":
        return ops.op_finetune_cfg(args.checkpoint, args.data, args.out,
                                   _config_from(args))
    if cmd == "finetune-inpaint":
        return ops.op_finetune_inpaint(args.checkpoint, args.data, args.out,
                                       _config_from(args))
    if cmd == "train-upsampler":
        return ops.op_train_upsampler(args.data, args.out, _config_from(args))
    if cmd == "train-clip":
        config = _config_from(args)
        if args.unnoised:
            config.model["noised"] = False
        return ops.op_train_clip(args.data, args.out, config)
    if cmd == "sample":
        return ops.op_sample(args.model, args.prompt, args.guidance, args.steps,
                             args.seed, args.out, count=args.count,
                             clip_checkpoint=args.clip)
    if cmd == "grid":
        return ops.op_grid(args.model, args.prompt, args.rows, args.cols,
                           args.guidance, args.steps, args.seed, args.out,
                           clip_checkpoint=args.clip)
    if cmd == "inpaint":
        return ops.op_inpaint(args.model, args.image, args.mask, args.prompt,
                              args.guidance, args.steps, args.seed, args.out,
                              mode=args.mode, clip_checkpoint=args.clip)
    if cmd == "sdedit":
        return ops.op_sdedit(args.model, args.image, args.t_start, args.prompt,
                             args.guidance, args.steps, args.seed, args.out,
                             clip_checkpoint=args.clip)
    if cmd == "sweep":
        scales = [float(s) for s in args.scales.split(",")]
        return ops.op_sweep(args.model, args.clip, args.data, scales, args.kind,
                            args.seed, args.out_dir, steps=args.steps,
                            n_prompts=args.n_prompts,
                            guidance_clip_checkpoint=args.guidance_clip)
    if cmd == "elo-fit":
        return ops.op_elo_fit(args.judgments, args.out,
                              paper_literal=args.paper_literal, anchor=args.anchor)
    if cmd == "fid":
        return ops.op_fid(args.clip, args.real, args.fake, out=args.out)
    if cmd == "pr":
        return ops.op_pr(args.clip, args.real, args.fake, k=args.k, out=args.out)
    if cmd == "clip-score":
        return ops.op_clip_score(args.clip, args.data, out=args.out)
    if cmd == "filter-fit":
        return ops.op_filter_fit(args.data, args.clip, args.out,
                                 target_fnr=args.target_fnr, seed=args.seed,
                                 report_path=args.report)
    if cmd == "filter-apply":
        return ops.op_filter_apply(args.data, args.filter, args.clip,
                                   args.out_dir, report_path=args.report)
    if cmd == "noised-study":
        scales = [float(s) for s in args.scales.split(",")]
        return ops.op_noised_study(args.model, args.noised_clip,
                                   args.unnoised_clip, args.judge_clip,
                                   args.data, scales, args.seed, args.out_dir,
                                   steps=args.steps, n_prompts=args.n_prompts)
    if cmd == "serve":
        from .api import serve

        return serve(args)
    raise ValueError(f"unhandled command {cmd}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        result = _dispatch(args)
    except (ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return 1
    if result is not None:
        print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
