"""Command-line interface: ``unwrapforge <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .baseline import ingest_conditioning, quality_map, unwrap_quality_guided
from .denoiser import DenoiserConfig, build_denoiser, load_checkpoint
from .diffusion import schedule_from_dict
from .errors import ConfigError, UnwrapForgeError
from .evaluate import evaluate_run, format_table
from .pipeline import STAGES, run_pipeline
from .raster import read_grid, write_grid
from .scene import GeneratorConfig, generate_dataset
from .tiling import InferConfig, infer_resized, infer_tiled
from .training import TrainConfig, train_from_dataset

log = logging.getLogger("unwrapforge")


def _read_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def cmd_synth(args):
    doc = _read_json(args.config)
    if "synth" in doc:  # accept a pipeline config too
        doc = doc["synth"].get("generator", {})
    cfg = GeneratorConfig.from_dict(doc)
    man = generate_dataset(cfg, args.seed if args.seed is not None else 0, args.out, args.count, args.train_count)
    print(f"wrote {man['total'] - len(man['skipped'])} scenes ({man['train']} train / {man['test']} test) "
          f"to {args.out}; scale {man['normalization_scale']:.4f}")


def cmd_baseline(args):
    wrapped = read_grid(args.inp)
    if args.external:
        shape = (args.height, args.width) if args.width and args.height else wrapped.shape
        cond = ingest_conditioning(args.external, shape, wrapped.meta)
    else:
        cond = unwrap_quality_guided(wrapped, quality_map(wrapped))
    write_grid(cond, args.out)


def cmd_train(args):
    doc = _read_json(args.config)
    tdoc = dict(doc.get("train", {}))
    for key in ("steps", "batch", "lr"):
        if getattr(args, key) is not None:
            tdoc[key] = getattr(args, key)
    if args.seed is not None:
        tdoc["seed"] = args.seed
    cfg = TrainConfig.from_dict(tdoc)
    net = build_denoiser(DenoiserConfig.from_dict(doc.get("model", {})), seed=doc.get("model_seed", 0))
    sched = schedule_from_dict(doc.get("diffusion", {"T": 1000}))
    trace = train_from_dataset(args.data, args.out, net, sched, cfg,
                               progress=lambda s, l: print(f"step {s} loss {l:.5f}", flush=True))
    if trace:
        print(f"final loss {np.mean(trace[-min(len(trace), 100):]):.5f}")


def cmd_infer(args):
    net, header, _ = load_checkpoint(args.ckpt)
    sched = schedule_from_dict(header.get("schedule", {"T": 1000}))
    cfg = InferConfig(tile_size=args.tile, overlap=args.overlap, eta=args.eta, steps=args.steps,
                      seed=args.seed or 0, workers=args.threads or 1, align=not args.no_align, snap=args.snap)
    fn = infer_tiled if args.mode == "tiled" else infer_resized
    pred = fn(read_grid(args.wrapped), read_grid(args.cond), net, sched, cfg, header["normalization_scale"])
    write_grid(pred, args.out)


def cmd_eval(args):
    rep = evaluate_run(args.data, args.pred, args.mode, args.split, remove_offset=not args.keep_offset)
    if args.out:
        rep.save(args.out)
    print(format_table([rep]))
    if not rep.complete:
        return 3
    return 0


def cmd_pipeline(args):
    stages = args.stages.split(",") if args.stages else None
    return run_pipeline(args.config, args.run_dir, stages, args.threads, args.force)


def cmd_togray(args):
    g = read_grid(args.inp)
    vals = g.values
    valid = g.valid & np.isfinite(vals)
    img = np.zeros(g.shape, dtype=np.uint8)
    if valid.any():
        lo, hi = vals[valid].min(), vals[valid].max()
        span = hi - lo if hi > lo else 1.0
        img[valid] = np.round(255 * (vals[valid] - lo) / span).astype(np.uint8)
    Path(args.out).write_bytes(f"P5\n{g.width} {g.height}\n255\n".encode() + img.tobytes())


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON configuration file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="unwrapforge", description=__doc__)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--verbose", "-v", action="store_true", default=False)
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--train-count", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("baseline", parents=[common], help="unwrap or ingest conditioning")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--external", default=None, help="external unwrapped raster (PGRD or raw f32)")
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--height", type=int, default=None)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("train", parents=[common], help="train the denoiser")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--batch", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="refine an interferogram with a checkpoint")
    s.add_argument("--wrapped", required=True)
    s.add_argument("--cond", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", choices=["tiled", "resize"], default="tiled")
    s.add_argument("--tile", type=int, default=256)
    s.add_argument("--overlap", type=int, default=128)
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--no-align", action="store_true")
    s.add_argument("--snap", action="store_true", help="snap output to values congruent with the observation")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="score predictions against a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--mode", default="tiled")
    s.add_argument("--split", default="test")
    s.add_argument("--keep-offset", action="store_true", help="do not remove the mean offset")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common], help="run synth/baseline/train/infer/eval")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--stages", default=None, help=f"comma-separated subset of {','.join(STAGES)}")
    s.add_argument("--force", action="store_true", help="rerun stages already marked complete")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("togray", parents=[common], help="dump a grid as an 8-bit PGM")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_togray)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    env = os.environ.get("UNWRAPFORGE_THREADS")
    if env:
        args.threads = int(env)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "pipeline" and not args.config:
        print("error: pipeline needs --config", file=sys.stderr)
        return 2
    try:
        return args.func(args) or 0
    except UnwrapForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
