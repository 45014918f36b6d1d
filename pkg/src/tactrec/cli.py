"""Command line front end: train, evaluate, sweep, replay, catalog."""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError
from .harness import evaluate, load_config, noise_sweep, replay, train, validate_config


def _add_common(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--method", help="override method name")
    p.add_argument("--trials", type=int, help="override trial count")
    p.add_argument("--seed", type=int, help="override master seed")
    p.add_argument("--workers", type=int, help="override worker count")
    p.add_argument("--noise-contact", type=float,
                   help="override spurious-contact rate")
    p.add_argument("--noise-localization-mm", type=float,
                   help="override localization noise in millimeters")
    p.add_argument("--checkpoint", help="override checkpoint path")
    p.add_argument("--objects", help="comma-separated object id subset")
    p.add_argument("--out", help="override output directory")


def _build_config(args) -> dict:
    cfg = load_config(args.config) if args.config else validate_config({})
    if args.method:
        cfg["method"] = args.method
    if args.trials is not None:
        cfg["trials"] = args.trials
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        cfg["workers"] = args.workers
    if args.checkpoint:
        cfg["checkpoint"] = args.checkpoint
    if args.objects:
        cfg["objects"] = [int(x) for x in args.objects.split(",")]
    if args.out:
        cfg["out_dir"] = args.out
    if args.noise_contact is not None or args.noise_localization_mm is not None:
        from .harness import resolve_noise
        base = resolve_noise(cfg)
        cfg["noise"] = {
            "contact_rate": args.noise_contact if args.noise_contact is not None
            else base.contact_rate,
            "localization_m": args.noise_localization_mm / 1000.0
            if args.noise_localization_mm is not None else base.localization_level,
            "normal_angle_deg": base.normal_angle_deg,
        }
    return validate_config(cfg)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tactrec",
        description="Active tactile recognition experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a method, write a checkpoint")
    _add_common(p_train)

    p_eval = sub.add_parser("evaluate", help="run seeded evaluation trials")
    _add_common(p_eval)

    p_sweep = sub.add_parser("sweep", help="evaluate across noise levels")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", choices=("contact", "localization"),
                         required=True)
    p_sweep.add_argument("--levels", required=True,
                         help="comma-separated levels (rate or meters)")

    p_replay = sub.add_parser("replay", help="flatten an episode trace to CSV")
    p_replay.add_argument("trace")
    p_replay.add_argument("--out", required=True)

    p_cat = sub.add_parser("catalog", help="list catalog objects")
    p_cat.add_argument("--config")

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            cfg = _build_config(args)

            def log_fn(row, dt):
                print(json.dumps({k: round(v, 4) if isinstance(v, float) else v
                                  for k, v in row.items()}), flush=True)

            path, _ = train(cfg, log_fn=log_fn)
            print(f"checkpoint: {path}")
        elif args.command == "evaluate":
            cfg = _build_config(args)
            summary, _ = evaluate(cfg)
            print(json.dumps(summary, indent=2))
        elif args.command == "sweep":
            cfg = _build_config(args)
            levels = [float(x) for x in args.levels.split(",")]
            rows = noise_sweep(cfg, args.axis, levels)
            for row in rows:
                print(json.dumps(row))
        elif args.command == "replay":
            header, poses, contacts = replay(args.trace, args.out)
            print(f"object {header['object_id']} ({header.get('object_name')}); "
                  f"{len(poses)} poses, {len(contacts)} contacts -> {args.out}")
        elif args.command == "catalog":
            from .harness import load_config as lc, resolve_catalog
            cfg = lc(args.config) if args.config else validate_config({})
            for obj in resolve_catalog(cfg):
                print(f"{obj.id:2d}  {obj.name:10s} parts={len(obj.parts):2d} "
                      f"height={obj.height:.3f}m "
                      f"{'concave' if obj.concave else 'convex'}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
