"""``vlt`` command line: train, track, eval, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import VltError


def _cmd_train(args) -> int:
    from .harness import checkpoint
    from .harness.config import Config, load
    from .harness.train import train

    cfg = load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    params, history = train(cfg, progress=True)
    checkpoint.save(args.out, params, cfg)
    last = history.steps[-1]
    print(f"trained {cfg.steps} steps in {history.seconds:.1f}s, final loss {last['loss']:.4f} -> {args.out}")
    return 0


def _cmd_track(args) -> int:
    from .harness import checkpoint
    from .harness.data import frame_for, world_for
    from .harness.ppm import dump_frame
    from .harness.tracker import init_tracker, track_step

    params, cfg = checkpoint.load(args.ckpt)
    world = world_for(cfg, args.seq_seed)
    lang = world.language().ids if args.mode != "bbox" else None
    init_box = world.box(0) if args.mode != "nl" else None
    state = init_tracker(params, cfg, args.mode, frame_for(cfg, args.seq_seed, 0), init_box=init_box,
                         lang_ids=lang, srf=args.srf, memory_reset=args.memory_reset, gt_box=world.box(0))
    for t in range(1, world.n_frames):
        track_step(state, frame_for(cfg, args.seq_seed, t), world.box(t))
    with open(args.out, "w") as fh:
        for rec in state.records:
            fh.write(json.dumps(rec.to_json()) + "\n")
    if args.dump_ppm:
        out_dir = Path(args.dump_ppm)
        out_dir.mkdir(parents=True, exist_ok=True)
        preds = {r.frame: r.box for r in state.records}
        for t in range(world.n_frames):
            pred = preds.get(t, world.box(0) if t == 0 and args.mode != "nl" else None)
            dump_frame(out_dir / f"frame_{t:04d}.ppm", frame_for(cfg, args.seq_seed, t), world.box(t), pred)
    mean = sum(r.iou for r in state.records) / len(state.records)
    print(f"{len(state.records)} frames, mean IoU {mean:.3f} -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .harness import checkpoint
    from .harness.evaluate import evaluate, split_seeds
    from .harness.model import MODES

    params, cfg = checkpoint.load(args.ckpt)
    seeds = split_seeds(cfg, args.split)
    report = {"split": args.split, "modes": {}}
    for mode in MODES:
        m = evaluate(params, cfg, seeds, mode, srf=args.srf)
        report["modes"][mode] = m.to_json()
        print(f"{mode:8s} mean IoU {m.mean_iou:.3f}  AUC {m.auc:.3f}  norm. precision {m.norm_precision:.3f}  "
              f"{1000 * m.seconds_per_frame:.1f} ms/frame")
    Path(args.report).write_text(json.dumps(report, indent=2))
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_all

    failures = run_all(verbose=True)
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train on generated sequences and write a checkpoint")
    t.add_argument("--config", help="flat key = value config file (defaults if omitted)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    k = sub.add_parser("track", help="track one generated sequence and write JSONL records")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--mode", choices=("bbox", "nl", "nl-bbox"), default="nl-bbox")
    k.add_argument("--srf", action="store_true", help="semi-reference-free: references only on frame 0")
    k.add_argument("--memory-reset", action="store_true", help="ablation: zero the stored scan states before every frame")
    k.add_argument("--seq-seed", type=int, required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--dump-ppm", metavar="DIR")
    k.set_defaults(func=_cmd_track)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split in every mode")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="heldout")
    e.add_argument("--srf", action="store_true")
    e.add_argument("--report", required=True)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.set_defaults(func=_cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except VltError as exc:
        print(f"vlt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
