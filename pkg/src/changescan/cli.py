"""Command-line surface: synth | train | eval | infer | bench.

Every command resolves its configuration in three layers (builtin
defaults, then a --config file, then explicitly passed flags), writes a
manifest.json snapshot into the output directory before doing any real
work, and exits nonzero when any documented error fires.  A previous
run's manifest.json is itself a valid --config file, so a run can be
repeated from its own record.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from . import train as training
from .checkpoint import (CheckpointError, ConfigError, load_model_config,
                         restore, save_checkpoint)
from .data import (DEFAULT_SUBDIRS, SynthConfig, generate_synthetic,
                   load_dataset, load_pair, write_dataset)
from .decoder import predict_labels
from .encoder import EncoderConfig
from .metrics import ConfusionCounts, confusion, metrics
from .model import ModelConfig, build_model
from .scan2d import fit_loglog_slope, time_scan
from .tensor import Tensor
from .train import DivergedError, LabelError, TrainConfig
from .viz import IoError, emit_flow_visualization, save_mask, save_overlay

_CONTRACT_ERRORS = (IoError, OSError, ValueError, ArithmeticError,
                    DivergedError, LabelError, CheckpointError, ConfigError)


# ---------------------------------------------------------------------------
# configuration resolution

def _parse_scalar(text: str):
    low = text.strip()
    if low.lower() in ("true", "false"):
        return low.lower() == "true"
    for cast in (int, float):
        try:
            return cast(low)
        except ValueError:
            pass
    return low


def read_config_file(path) -> dict:
    """Either key = value lines (# comments) or a manifest/config JSON."""
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError as exc:
        raise IoError(f"cannot read config file: {exc}") from exc
    if str(path).endswith(".json"):
        payload = json.loads(text)
        return payload.get("config", payload)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = body.split("=", 1)
        out[key.strip().replace("-", "_")] = _parse_scalar(value)
    return out


def resolve_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < flags the user actually passed."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if key not in merged:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = value
    for key in defaults:
        given = getattr(args, key, None)
        if given is not None:
            merged[key] = given
    return merged


def write_manifest(out_dir, command: str, config: dict,
                   artifacts: dict) -> str:
    """Record the resolved run before any long-running work starts."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump({"tool": "changescan", "version": __version__,
                       "command": command, "config": config,
                       "artifacts": artifacts}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest: {exc}") from exc
    return path


def _subdirs(config) -> tuple:
    parts = tuple(str(config["subdirs"]).split(","))
    if len(parts) != 3:
        raise ValueError(
            f"--subdirs wants three comma-separated names, got {parts}")
    return parts


def _model_config(config: dict) -> ModelConfig:
    enc = EncoderConfig(base_channels=config["base_channels"],
                        state_dim=config["state_dim"],
                        conv_mode=config["conv_mode"])
    return ModelConfig(encoder=enc, decoder_width=config["decoder_width"],
                       use_flow=config["use_flow"],
                       use_2ds=config["use_2ds"])


# ---------------------------------------------------------------------------
# synth

SYNTH_DEFAULTS = dict(count=20, size=64, min_shapes=1, max_shapes=3,
                      static_shapes=2, jitter=0.1, noise=0.05, seed=0,
                      subdirs=",".join(DEFAULT_SUBDIRS))


def cmd_synth(args) -> int:
    config = resolve_config(SYNTH_DEFAULTS, args)
    scfg = SynthConfig(count=config["count"], height=config["size"],
                       width=config["size"], min_shapes=config["min_shapes"],
                       max_shapes=config["max_shapes"],
                       static_shapes=config["static_shapes"],
                       jitter=config["jitter"], noise=config["noise"],
                       seed=config["seed"])
    write_manifest(args.out, "synth", config, {"dataset": str(args.out)})
    pairs = generate_synthetic(scfg)
    write_dataset(args.out, pairs, subdirs=_subdirs(config))
    changed = sum(p.label.sum() for p in pairs)
    print(f"wrote {len(pairs)} pairs under {args.out} "
          f"({changed} changed pixels total)")
    return 0


# ---------------------------------------------------------------------------
# train

TRAIN_DEFAULTS = dict(lr=1e-4, batch_size=2, steps=2000, ce_weight=1.0,
                      dice_weight=1.0, seed=0, eval_every=250,
                      use_flow=True, use_2ds=True, base_channels=16,
                      state_dim=8, decoder_width=32, conv_mode="3x3",
                      subdirs=",".join(DEFAULT_SUBDIRS))


def cmd_train(args) -> int:
    config = resolve_config(TRAIN_DEFAULTS, args)
    ckpt = os.path.join(args.out, "model.ckpt")
    log = os.path.join(args.out, "metrics.csv")
    write_manifest(args.out, "train", config,
                   {"checkpoint": ckpt, "metrics": log,
                    "dataset": str(args.data)})
    subdirs = _subdirs(config)
    dataset = load_dataset(args.data, subdirs=subdirs)
    eval_set = (load_dataset(args.eval_data, subdirs=subdirs)
                if args.eval_data else dataset)
    tcfg = TrainConfig(lr=config["lr"], batch_size=config["batch_size"],
                       steps=config["steps"], ce_weight=config["ce_weight"],
                       dice_weight=config["dice_weight"], seed=config["seed"],
                       eval_every=config["eval_every"],
                       use_flow=config["use_flow"], use_2ds=config["use_2ds"])
    mcfg = _model_config(config)
    model = build_model(mcfg, seed=config["seed"])

    def progress(step, loss, mres):
        extra = f"  f1 {mres.f1:.4f}" if mres else ""
        print(f"step {step + 1}/{tcfg.steps}  loss {loss:.4f}{extra}",
              flush=True)

    result = training.train(model, dataset, tcfg, eval_set=eval_set,
                            log_path=log, progress=progress)
    save_checkpoint(ckpt, model.named_parameters(), mcfg)
    final = result.final_metrics
    if final is not None:
        print(f"finished {tcfg.steps} steps in {result.seconds:.0f}s; "
              f"eval f1 {final.f1:.4f} iou {final.iou:.4f}")
    else:
        print(f"finished {tcfg.steps} steps in {result.seconds:.0f}s")
    print(f"checkpoint: {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# eval

EVAL_DEFAULTS = dict(seed=0, overlays=False,
                     subdirs=",".join(DEFAULT_SUBDIRS))

METRIC_KEYS = ("oa", "precision", "recall", "f1", "iou", "kc")


def _load_model(checkpoint, seed=0):
    mcfg = load_model_config(checkpoint)
    if mcfg is None:
        raise ConfigError(
            f"{checkpoint} has no config sidecar; cannot rebuild the model")
    model = build_model(mcfg, seed=seed)
    restore(model, checkpoint)
    return model, mcfg


def cmd_eval(args) -> int:
    config = resolve_config(EVAL_DEFAULTS, args)
    table = os.path.join(args.out, "per_image.csv")
    write_manifest(args.out, "eval", config,
                   {"table": table, "checkpoint": str(args.checkpoint),
                    "dataset": str(args.data)})
    model, _ = _load_model(args.checkpoint, seed=config["seed"])
    dataset = load_dataset(args.data, subdirs=_subdirs(config))
    overlay_dir = os.path.join(args.out, "overlays")
    if config["overlays"]:
        os.makedirs(overlay_dir, exist_ok=True)
    total = ConfusionCounts(0, 0, 0, 0)
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("id", "tp", "tn", "fp", "fn") + METRIC_KEYS)

        def emit(tag, counts):
            m = metrics(counts).as_dict()
            writer.writerow([tag, counts.tp, counts.tn, counts.fp, counts.fn]
                            + [f"{m[k]:.6f}" for k in METRIC_KEYS])
            return m

        for pair in dataset:
            probs, _ = model(Tensor(pair.img_t1), Tensor(pair.img_t2))
            pred = predict_labels(probs)
            counts = confusion(pred, pair.label)
            total = total + counts
            emit(pair.id, counts)
            if config["overlays"]:
                save_overlay(pred, pair.label,
                             os.path.join(overlay_dir, pair.id + ".png"))
        agg = emit("aggregate", total)
    print("aggregate  " + "  ".join(f"{k} {agg[k]:.4f}" for k in METRIC_KEYS))
    return 0


# ---------------------------------------------------------------------------
# infer

INFER_DEFAULTS = dict(seed=0, emit_flow=False)


def cmd_infer(args) -> int:
    config = resolve_config(INFER_DEFAULTS, args)
    change_png = os.path.join(args.out, "change.png")
    write_manifest(args.out, "infer", config,
                   {"change_map": change_png,
                    "checkpoint": str(args.checkpoint)})
    model, _ = _load_model(args.checkpoint, seed=config["seed"])
    pair = load_pair(args.t1, args.t2)
    probs, flows = model(Tensor(pair.img_t1), Tensor(pair.img_t2))
    labels = predict_labels(probs)
    save_mask(labels, change_png)
    if config["emit_flow"]:
        if any(f is None for f in flows):
            raise ConfigError(
                "checkpoint was trained without flow; nothing to visualize")
        for level, flow in enumerate(flows, start=1):
            emit_flow_visualization(
                flow.data, os.path.join(args.out, f"flow_level{level}.png"))
    frac = labels.mean()
    print(f"wrote {change_png} ({frac:.2%} of pixels flagged as change)")
    return 0


# ---------------------------------------------------------------------------
# bench

BENCH_DEFAULTS = dict(sizes="64,128,256,512", variants="seq,par",
                      dtype="f32", channels=16, state_dim=8, repeats=3,
                      seed=0)


def cmd_bench(args) -> int:
    config = resolve_config(BENCH_DEFAULTS, args)
    table = os.path.join(args.out, "bench.csv")
    write_manifest(args.out, "bench", config, {"table": table})
    sizes = [int(s) for s in str(config["sizes"]).split(",")]
    variants = str(config["variants"]).split(",")
    dtype = {"f32": np.float32, "f64": np.float64}[config["dtype"]]
    rng = np.random.default_rng(config["seed"])
    slopes = {}
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("size", "variant", "precision", "millis"))
        for variant in variants:
            millis = []
            for side in sizes:
                ms = time_scan(side, variant, dtype=dtype,
                               channels=config["channels"],
                               state_dim=config["state_dim"],
                               repeats=config["repeats"], rng=rng)
                millis.append(ms)
                writer.writerow((side, variant, config["dtype"],
                                 f"{ms:.3f}"))
                print(f"{variant:6s} {side:4d}^2  {ms:9.3f} ms", flush=True)
            slopes[variant] = fit_loglog_slope(
                [s * s for s in sizes], millis)
    for variant, slope in slopes.items():
        print(f"slope {variant} {slope:.3f}")
    return 0


# ---------------------------------------------------------------------------
# wiring

def _add_common(p, out_required=True):
    p.add_argument("--out", required=out_required,
                   help="output directory (manifest lands here)")
    p.add_argument("--config", help="key = value file or a manifest.json")
    p.add_argument("--seed", type=int, help="root seed for all randomness")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="changescan",
        description="Bi-temporal change detection on a scanned state-space "
                    "backbone.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(sp)
    sp.add_argument("--count", type=int)
    sp.add_argument("--size", type=int, help="square extent, multiple of 32")
    sp.add_argument("--min-shapes", type=int, dest="min_shapes")
    sp.add_argument("--max-shapes", type=int, dest="max_shapes")
    sp.add_argument("--static-shapes", type=int, dest="static_shapes")
    sp.add_argument("--jitter", type=float)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--subdirs")
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="train on a dataset directory")
    _add_common(tp)
    tp.add_argument("--data", required=True)
    tp.add_argument("--eval-data", dest="eval_data")
    tp.add_argument("--lr", type=float)
    tp.add_argument("--batch-size", type=int, dest="batch_size")
    tp.add_argument("--steps", type=int)
    tp.add_argument("--ce-weight", type=float, dest="ce_weight")
    tp.add_argument("--dice-weight", type=float, dest="dice_weight")
    tp.add_argument("--eval-every", type=int, dest="eval_every")
    tp.add_argument("--no-flow", dest="use_flow", action="store_const",
                    const=False, help="ablation: plain bilinear upsampling")
    tp.add_argument("--no-2ds", dest="use_2ds", action="store_const",
                    const=False, help="ablation: row-major 1D scan")
    tp.add_argument("--base-channels", type=int, dest="base_channels")
    tp.add_argument("--state-dim", type=int, dest="state_dim")
    tp.add_argument("--decoder-width", type=int, dest="decoder_width")
    tp.add_argument("--conv-mode", dest="conv_mode", choices=("3x3", "1x3"))
    tp.add_argument("--subdirs")
    tp.set_defaults(fn=cmd_train)

    ep = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _add_common(ep)
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--overlays", action="store_const", const=True,
                    help="write white/black/red/blue agreement PNGs")
    ep.add_argument("--subdirs")
    ep.set_defaults(fn=cmd_eval)

    ip = sub.add_parser("infer", help="predict a change map for one pair")
    _add_common(ip)
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--t1", required=True, help="first-epoch PNG")
    ip.add_argument("--t2", required=True, help="second-epoch PNG")
    ip.add_argument("--emit-flow", dest="emit_flow", action="store_const",
                    const=True, help="write one flow rendering per level")
    ip.set_defaults(fn=cmd_infer)

    bp = sub.add_parser("bench", help="time the grid scan across sizes")
    _add_common(bp)
    bp.add_argument("--sizes", help="comma-separated side lengths")
    bp.add_argument("--variants", help="subset of seq,par,oracle")
    bp.add_argument("--dtype", choices=("f32", "f64"))
    bp.add_argument("--channels", type=int)
    bp.add_argument("--state-dim", type=int, dest="state_dim")
    bp.add_argument("--repeats", type=int)
    bp.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _CONTRACT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
