"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from . import bench, curation, diffusion, imaging
from .model import init_model
from .numerics import GradCheckError, NonFiniteError, load_params, save_params
from .stydit import ParameterError
from .tokenizer import ConfigError, ModelConfig

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("styleflow")

MODEL_FLAGS = {
    "d": int, "patch_px": int, "base_resolution": int, "n_patches": int,
    "heads": int, "blocks": int, "channels": int, "text_tokens": int,
}


class UsageFailure(Exception):
    pass


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageFailure(f"config file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageFailure(f"config file {p} is not valid JSON: {exc}") from exc


def merged(config, section, args, keys, defaults):
    """Config section values overridden by any flag the user actually set."""
    out = dict(defaults)
    out.update({k: v for k, v in config.get(section, {}).items() if k in keys})
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def model_config(config, args):
    valid = {f.name for f in fields(ModelConfig)}
    values = merged(config, "model", args, MODEL_FLAGS, {})
    values.update({k: v for k, v in config.get("model", {}).items() if k in valid and k not in values})
    try:
        return ModelConfig(**values)
    except (ConfigError, TypeError) as exc:
        raise UsageFailure(f"invalid model config: {exc}") from exc


def sidecar(checkpoint):
    return Path(str(checkpoint) + ".json")


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise UsageFailure(f"checkpoint not found: {path}")
    meta = sidecar(path)
    if not meta.is_file():
        raise UsageFailure(f"checkpoint config not found: {meta}")
    cfg = ModelConfig(**json.loads(meta.read_text(encoding="utf-8")))
    return load_params(path), cfg


def save_checkpoint(params, cfg, path):
    save_params(params, path)
    sidecar(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_train_manifest(path, cfg, seed):
    path = Path(path)
    items = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            img_path = Path(obj["image_path"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise UsageFailure(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
        if not img_path.is_absolute():
            img_path = path.parent / img_path
        try:
            img = imaging.read_png(img_path)
        except (OSError, imaging.ImageError) as exc:
            raise UsageFailure(f"{path}:{lineno}: cannot read {img_path}: {exc}") from exc
        items.append(diffusion.make_train_item(img, obj.get("prompt", ""), cfg, seed=seed + lineno,
                                               item_id=str(obj.get("id", lineno))))
    if not items:
        raise UsageFailure(f"{path}: manifest has no items")
    return items


# ---------------------------------------------------------------- subcommands

TRAIN_KEYS = ("steps", "step_size", "momentum", "seed", "manifest_path", "checkpoint_path", "log_path",
              "batch_repeat")


def cmd_train(args, config):
    opts = merged(config, "train", args, TRAIN_KEYS, {
        "steps": 2000, "step_size": diffusion.DEFAULT_STEP_SIZE, "momentum": diffusion.DEFAULT_MOMENTUM,
        "seed": 0, "batch_repeat": 1, "log_path": None,
    })
    for key in ("manifest_path", "checkpoint_path"):
        if not opts.get(key):
            raise UsageFailure(f"train: --{key.split('_')[0]} is required")
    manifest = Path(opts["manifest_path"])
    if not manifest.is_file():
        raise UsageFailure(f"train: manifest not found: {manifest}")
    if opts["steps"] < 0:
        raise UsageFailure("train: steps must be >= 0")
    cfg = model_config(config, args)
    items = read_train_manifest(manifest, cfg, opts["seed"])
    params = init_model(cfg, seed=opts["seed"])

    log_file = open(opts["log_path"], "w", newline="", encoding="utf-8") if opts["log_path"] else None
    writer = csv.writer(log_file, lineterminator="\n") if log_file else None
    if writer:
        writer.writerow(["step", "loss", "wall_ms"])

    def record(step, loss, wall_ms):
        if writer:
            writer.writerow([step, f"{loss:.8f}", f"{wall_ms:.3f}" if args.wall_clock else "0"])

    try:
        diffusion.train(items * int(opts["batch_repeat"]), params, cfg, int(opts["steps"]),
                        step_size=float(opts["step_size"]), momentum=float(opts["momentum"]),
                        seed=int(opts["seed"]), callback=record)
    finally:
        if log_file:
            log_file.close()
    save_checkpoint(params, cfg, opts["checkpoint_path"])
    print(f"trained {opts['steps']} steps on {len(items)} items; checkpoint {opts['checkpoint_path']}")
    return EXIT_OK


STYLIZE_KEYS = ("lam", "sample_steps", "seed")


def cmd_stylize(args, config):
    opts = merged(config, "stylize", args, STYLIZE_KEYS, {"lam": 1.0, "sample_steps": 20, "seed": 0})
    if opts["sample_steps"] < 1:
        raise UsageFailure("stylize: --sample-steps must be >= 1")
    params, cfg = load_checkpoint(args.checkpoint)
    try:
        content = imaging.read_png(args.content)
        style = imaging.read_png(args.style)
    except (OSError, imaging.ImageError) as exc:
        raise UsageFailure(f"stylize: {exc}") from exc
    try:
        out = diffusion.stylize(content, style, params, cfg, lam=opts["lam"], prompt=args.prompt,
                                steps=int(opts["sample_steps"]), seed=int(opts["seed"]))
    except ParameterError as exc:
        raise UsageFailure(f"stylize: {exc}") from exc
    imaging.write_png(out, args.out)
    print(f"lambda={opts['lam']} steps={opts['sample_steps']} seed={opts['seed']} -> {args.out}")
    return EXIT_OK


def cmd_canny(args, config):
    try:
        img = imaging.read_png(args.input)
        edges = imaging.canny(img, args.low, args.high)
    except (OSError, imaging.ImageError, ValueError) as exc:
        raise UsageFailure(f"canny: {exc}") from exc
    imaging.write_edges(edges, args.output)
    print(f"{int(edges.sum())} edge pixels -> {args.output}")
    return EXIT_OK


def cmd_eval(args, config):
    try:
        a, b = imaging.read_png(args.a), imaging.read_png(args.b)
        value = imaging.ssim(a, b)
    except (OSError, imaging.ImageError) as exc:
        raise UsageFailure(f"eval: {exc}") from exc
    print(f"{value:.4f}")
    return EXIT_OK


def cmd_grad_check(args, config):
    cfg = diffusion.gradcheck_config()
    t0 = time.perf_counter()
    try:
        report = diffusion.grad_check_model(cfg, seed=args.seed, tol=args.tol)
    except GradCheckError as exc:
        print(f"FAIL {exc}")
        return EXIT_NUMERIC
    for group, err in report.errors.items():
        print(f"{group:<16} max_rel_err={err:.3e}")
    print(f"PASS {report.checked} scalars, worst {report.worst[0]} {report.worst[1]:.3e} "
          f"< {args.tol:g} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_bench(args, config):
    rows = bench.cost_table(args.lengths, args.patches, d=args.d, heads=args.heads, seed=args.seed)
    print(bench.format_table(rows))
    return EXIT_OK


def curate_bindings(config, args):
    spec = config.get("curate", {}).get("bindings", {})
    bindings = []
    for stage in curation.STAGES:
        entry = dict(spec.get(stage, {}))
        cmd = getattr(args, f"{stage}_command", None)
        thr = getattr(args, f"{stage}_threshold", None)
        if cmd:
            entry.update(mode="command", command=cmd)
        if thr is not None:
            entry["threshold"] = thr
        try:
            bindings.append(curation.ScorerBinding(stage, **entry))
        except (TypeError, ValueError) as exc:
            raise UsageFailure(f"curate: bad binding for {stage}: {exc}") from exc
    return bindings


def cmd_curate(args, config):
    src = Path(args.input)
    if not src.is_file():
        raise UsageFailure(f"curate: manifest not found: {src}")
    parallelism = args.parallelism or config.get("curate", {}).get("parallelism", 1)
    summary = curation.curate_files(src, args.output, args.summary, curate_bindings(config, args), parallelism)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="styleflow", description="Style-conditioned toy diffusion transformer.")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a JSONL manifest of style images")
    t.add_argument("--manifest", dest="manifest_path")
    t.add_argument("--checkpoint", dest="checkpoint_path")
    t.add_argument("--log", dest="log_path", help="CSV training log (step,loss,wall_ms)")
    t.add_argument("--steps", type=int)
    t.add_argument("--step-size", dest="step_size", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-repeat", dest="batch_repeat", type=int,
                   help="noise draws per item per step")
    t.add_argument("--no-wall-clock", dest="wall_clock", action="store_false",
                   help="write 0 in the wall_ms column so logs are byte-reproducible")
    for name, typ in MODEL_FLAGS.items():
        t.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("stylize", help="render a content image in a style")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--content", required=True)
    s.add_argument("--style", required=True)
    s.add_argument("--prompt", default="")
    s.add_argument("--out", required=True)
    s.add_argument("--lam", "--lambda", dest="lam", type=float, help="edge strength in [0, 1] (default 1.0)")
    s.add_argument("--sample-steps", dest="sample_steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_stylize)

    c = sub.add_parser("canny", help="write the Canny edge map of a PNG")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--low", type=float, default=imaging.CANNY_LOW)
    c.add_argument("--high", type=float, default=imaging.CANNY_HIGH)
    c.set_defaults(func=cmd_canny)

    e = sub.add_parser("eval", help="print the SSIM of two equally sized PNGs")
    e.add_argument("a")
    e.add_argument("b")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grad-check", help="finite-difference check of the full model")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)

    b = sub.add_parser("bench", help="attention cost: style modulator vs naive joint attention")
    b.add_argument("--lengths", type=int, nargs="+", default=list(bench.DEFAULT_LENGTHS))
    b.add_argument("--patches", type=int, nargs="+", default=list(bench.DEFAULT_PATCHES))
    b.add_argument("--d", type=int, default=32)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    q = sub.add_parser("curate", help="filter a JSONL image manifest")
    q.add_argument("--input", required=True)
    q.add_argument("--output", required=True)
    q.add_argument("--summary")
    q.add_argument("--parallelism", type=int)
    for stage in curation.STAGES:
        q.add_argument(f"--{stage}-command", dest=f"{stage}_command",
                       help=f"external scorer for the {stage} stage")
        q.add_argument(f"--{stage}-threshold", dest=f"{stage}_threshold", type=float)
    q.set_defaults(func=cmd_curate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except UsageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
