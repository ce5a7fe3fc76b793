"""Command-line interface: ``debus synth | train | eval | infer | bench``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import jsonschema
import numpy as np

from . import BACKEND, metrics
from . import tensor as T
from .checkpoint import load_model, parameter_count
from .data import SynthConfig, load_clips, read_manifest, synth_generate
from .detr import ModelConfig, SVDETR, flops_estimate
from .temporal import propagate_clip, streaming_step
from .training import TrainConfig, ground_truth, predict_clips, train_debus, train_supervised

log = logging.getLogger("debus")

REFERENCE_HPARAMS = {"lr": 5e-7, "epochs": 300, "decay_every": 120}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": {"type": "integer", "minimum": 4},
                "heads": {"type": "integer", "minimum": 1},
                "encoder_applications": {"type": "integer", "minimum": 0},
                "decoder_applications": {"type": "integer", "minimum": 1},
                "num_queries": {"type": "integer", "minimum": 1},
                "image_size": {"type": "integer", "minimum": 16},
                "ffn_dim": {"type": "integer", "minimum": 1},
                "num_classes": {"type": "integer", "minimum": 1},
                "backbone_channels": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "backbone_strides": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "tie_encoder": {"type": "boolean"},
                "tie_decoder": {"type": "boolean"},
                "use_diffusion": {"type": "boolean"},
                "schedule": {"enum": ["linear", "cosine"]},
                "diffusion_steps": {"type": "integer", "minimum": 1},
                "sampling_steps": {"type": "integer", "minimum": 0},
                "topk": {"type": ["integer", "null"], "minimum": 0},
                "filter_by": {"enum": ["confidence", "attention"]},
                "use_context": {"type": "boolean"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "betas": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "clip_norm": {"type": ["number", "null"]},
                "batch_clips": {"type": "integer", "minimum": 1},
                "decay_every": {"type": "integer", "minimum": 0},
                "decay_factor": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
                "eval_every": {"type": "integer", "minimum": 0},
                "checkpoint_every": {"type": "integer", "minimum": 0},
                "augment": {"type": "object"},
                "mask_ramp_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                "lambda_u": {"type": "number", "minimum": 0},
                "ramp_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "alignment": {"type": "array", "items": {"enum": ["backbone", "encoder", "decoder"]},
                              "minItems": 1},
                "unlabeled_per_step": {"type": "integer", "minimum": 0},
            },
        },
    },
}


def load_config(path) -> dict:
    """Read and schema-check a JSON run config; missing sections default to {}."""
    if path is None:
        return {"model": {}, "train": {}}
    with open(path) as fh:
        cfg = json.load(fh)
    jsonschema.validate(cfg, CONFIG_SCHEMA)
    cfg.setdefault("model", {})
    cfg.setdefault("train", {})
    return cfg


def _train_config(args, cfg: dict) -> TrainConfig:
    kw = dict(cfg["train"])
    if args.paper_hparams:
        kw.update(REFERENCE_HPARAMS)
    for name in ("epochs", "lr"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    kw["seed"] = args.seed
    valid = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in kw.items() if k in valid})


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# -- commands ------------------------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = SynthConfig(clips=args.clips, image_size=args.image_size, max_lesions=args.max_lesions,
                      label_fraction=args.label_frac)
    manifest = synth_generate(cfg, args.seed, args.out)
    clips = manifest["clips"]
    summary = {"root": str(args.out), "clips": len(clips), "labeled": sum(c["labeled"] for c in clips)}
    for split in ("train", "val", "test"):
        summary[split] = sum(c["split"] == split for c in clips)
    _emit(summary)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = _train_config(args, cfg)
    manifest = read_manifest(args.data)
    train = load_clips(manifest, "train")
    val = load_clips(manifest, "val")
    labeled = [c for c in train if c.labeled]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.init:
        model, _ = load_model(args.init)
    else:
        model = SVDETR(ModelConfig(**cfg["model"]), seed=args.seed)
    if args.mode == "debus" and not args.init and args.warmup_epochs <= 0:
        log.error("debus mode needs --init (a supervised checkpoint) or --warmup-epochs > 0")
        return 1
    with open(out / "run_config.json", "w") as fh:
        json.dump({"model": model.cfg.to_dict(), "train": tcfg.to_dict(), "mode": args.mode}, fh,
                  indent=1, sort_keys=True)
    log_path = out / "train_log.jsonl"
    if args.mode == "supervised":
        res = train_supervised(model, labeled, tcfg, val_clips=val, out_dir=out, log_path=log_path,
                               time_budget=args.time_budget)
    else:
        if args.warmup_epochs > 0 and not args.init:
            warm = TrainConfig(**{**tcfg.to_dict(), "epochs": args.warmup_epochs})
            train_supervised(model, labeled, warm, val_clips=val, out_dir=out / "warmup",
                             log_path=out / "warmup_log.jsonl")
        unlabeled = [c for c in train if not c.labeled]
        res = train_debus(model, labeled, unlabeled, tcfg, val_clips=val, out_dir=out, log_path=log_path,
                          time_budget=args.time_budget)
    _emit({"steps": res["steps"], "best_val_ap50": res["best_val_ap50"],
           "final": res["records"][-1] if res["records"] else None, "checkpoint": str(out / "last.ckpt")})
    return 0


def _model_for_eval(args):
    which = "student" if getattr(args, "use_student", False) else "model"
    expect = None
    if getattr(args, "config", None):
        expect = ModelConfig(**load_config(args.config)["model"])
    return load_model(args.checkpoint, which, expect)


def cmd_eval(args) -> int:
    model, _ = _model_for_eval(args)
    manifest = read_manifest(args.data)
    clips = load_clips(manifest, args.split)
    if not clips:
        log.error("split %s is empty", args.split)
        return 1
    preds = predict_clips(model, clips, use_context=False if args.no_context else None, seed=args.seed)
    result = metrics.evaluate(preds, ground_truth(clips))
    print(metrics.format_table(result))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(result, fh, indent=1, sort_keys=True)
    if args.predictions:
        metrics.save_predictions(preds, args.predictions)
    return 0


def cmd_infer(args) -> int:
    model, _ = _model_for_eval(args)
    manifest = read_manifest(args.data)
    clips = load_clips(manifest, args.split)
    preds = predict_clips(model, clips, seed=args.seed)
    metrics.save_predictions(preds, args.out)
    _emit({"frames": len(preds), "predictions": str(args.out)})
    return 0


def bench_model(model: SVDETR, mode: str = "clip", with_diffusion: bool = True, repeats: int = 5,
                seed: int = 0, frames: int = 5) -> dict:
    """Wall-clock and analytic cost of clip or streaming inference on random frames."""
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    clip = rng.random((1, frames, cfg.image_size, cfg.image_size)).astype(np.float32)
    n_ctx = cfg.num_queries if cfg.topk is None else min(cfg.topk, cfg.num_queries)
    flops = flops_estimate(cfg, context=n_ctx if cfg.use_context else 0, with_diffusion=with_diffusion)
    first = flops_estimate(cfg, context=0, with_diffusion=with_diffusion)
    clip_flops = first["per_frame"] + first["diffusion"] + (frames - 1) * flops["per_frame"]
    times = []
    with T.no_grad():
        if mode == "clip":
            for _ in range(repeats + 1):
                t0 = time.perf_counter()
                propagate_clip(model, clip, rng=np.random.default_rng(seed), use_diffusion=with_diffusion)
                times.append(time.perf_counter() - t0)
            sec_clip = float(np.median(times[1:]))
            sec_frame = sec_clip / frames
            frame_flops = clip_flops / frames
        elif mode == "stream":
            state = None
            init = None
            if not with_diffusion:
                init = model.learned_queries(1)
            _, state = streaming_step(model, state, clip[0, 0], np.random.default_rng(seed), init)
            for i in range(repeats + 1):
                t0 = time.perf_counter()
                _, state = streaming_step(model, state, clip[0, (i % (frames - 1)) + 1])
                times.append(time.perf_counter() - t0)
            sec_frame = float(np.median(times[1:]))
            sec_clip = sec_frame * frames
            frame_flops = flops["per_frame"]
        else:
            raise ValueError(f"unknown bench mode {mode!r}")
    return {"mode": mode, "with_diffusion": with_diffusion, "backend": BACKEND,
            "params": model.num_parameters(with_diffusion), "sec_per_clip": sec_clip, "sec_per_frame": sec_frame,
            "fps": 1.0 / sec_frame, "flops_per_frame": int(frame_flops), "flops_per_clip": int(clip_flops),
            "gflops_per_clip": clip_flops / 1e9}


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, header = load_model(args.checkpoint)
        stored = parameter_count(header)
    else:
        model = SVDETR(ModelConfig(), seed=args.seed)
        stored = model.num_parameters(True)
    report = bench_model(model, args.mode, args.with_diffusion, args.repeats, args.seed)
    report["checkpoint_params"] = stored
    _emit(report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="debus", description="Video lesion detection with temporal DETR.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = common(sub.add_parser("synth", help="generate the synthetic dataset"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--clips", type=int, default=400)
    sp.add_argument("--label-frac", type=float, default=0.25)
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--max-lesions", type=int, default=1)
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("train", help="train a detector"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=["supervised", "debus"], default="supervised")
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--paper-hparams", action="store_true",
                    help="lr 5e-7, 300 epochs, x0.1 decay every 120 epochs")
    sp.add_argument("--init", help="checkpoint to start from (required by debus mode without warmup)")
    sp.add_argument("--warmup-epochs", type=int, default=0)
    sp.add_argument("--time-budget", type=float, help="stop after the epoch that crosses this many seconds")
    sp.set_defaults(func=cmd_train)

    for name, fn in (("eval", cmd_eval), ("infer", cmd_infer)):
        sp = common(sub.add_parser(name, help=f"{name} a checkpoint on a split"))
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--split", default="test", choices=["train", "val", "test"])
        sp.add_argument("--config", help="run config; a model hash mismatch is reported")
        sp.add_argument("--use-student", action="store_true", help="use the SSL student instead of the teacher")
        if name == "eval":
            sp.add_argument("--out", help="write metrics JSON here")
            sp.add_argument("--predictions", help="write predictions JSON here")
            sp.add_argument("--no-context", action="store_true", help="disable temporal propagation")
        else:
            sp.add_argument("--out", required=True)
        sp.set_defaults(func=fn)

    sp = common(sub.add_parser("bench", help="time clip or streaming inference"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--mode", choices=["clip", "stream"], default="clip")
    sp.add_argument("--with-diffusion", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--repeats", type=int, default=5)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, jsonschema.ValidationError, FloatingPointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
