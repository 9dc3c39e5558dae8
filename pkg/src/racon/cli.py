"""Command line entrypoint: gen-data, build-db, inspect-db, train, eval, serve,
print-config. Exit codes: 0 success, 1 validation error, 2 runtime error.
Diagnostics go to stderr; data goes to stdout or --out."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

STYLE_ID_STRIDE = 1_000_000


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="racon",
        description="Retrieval-augmented locomotion control toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic gait clip files")
    p.add_argument("--styles", required=True, help="comma list, e.g. walk,turn,zombie")
    p.add_argument("--count", type=int, default=1000, help="clips per style")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("build-db", help="build a retrieval database from a clip file")
    p.add_argument("--in", dest="inp", required=True, help="clip file path")
    p.add_argument("--name", required=True, help="database name")
    p.add_argument("--out", required=True, help="database file path")

    p = sub.add_parser("inspect-db", help="summarize a database file")
    p.add_argument("--db", required=True)
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True, help="config file (JSON)")
    p.add_argument("--out", default=None, help="output directory for logs/checkpoints")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--iterations", type=int, default=None, help="override iteration count")
    p.add_argument("--env-count", type=int, default=None, help="override environment count")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--db", required=True, help="comma list of database files")
    p.add_argument("--out", required=True, help="report file path")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--ticks", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-db", default=None, help="database name to evaluate on")

    p = sub.add_parser("serve", help="run the interactive steering server")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dbs", required=True, help="comma list of database files")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None, help="default: $RACON_PORT or 8090")
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("print-config", help="print the default training config as JSON")
    return parser


def _cmd_gen_data(args) -> int:
    from .gaits import STYLE_NAMES, generate_synthetic_clips
    from .motion import save_clips

    styles = [s.strip() for s in args.styles.split(",") if s.strip()]
    for style in styles:
        if style not in STYLE_NAMES:
            print(f"error: unknown style {style!r}; known: {', '.join(STYLE_NAMES)}", file=sys.stderr)
            return 1
    os.makedirs(args.out, exist_ok=True)
    for style in styles:
        offset = STYLE_NAMES.index(style) * STYLE_ID_STRIDE
        clips = generate_synthetic_clips(style, args.count, args.seed, id_start=offset)
        path = os.path.join(args.out, f"{style}.clips.json")
        save_clips(clips, path)
        print(f"wrote {len(clips)} {style} clips to {path}", file=sys.stderr)
    return 0


def _cmd_build_db(args) -> int:
    from .motion import load_clips
    from .retrieval import build_database, save_database

    clips = load_clips(args.inp)
    if not clips:
        print("error: clip file contains no clips", file=sys.stderr)
        return 1
    db = build_database(clips, args.name)
    save_database(db, args.out)
    print(f"built database {args.name!r}: {len(db)} clips, dim {db.dim} -> {args.out}", file=sys.stderr)
    return 0


def _cmd_inspect_db(args) -> int:
    from .retrieval import load_database

    db = load_database(args.db)
    ids = sorted(db.clip_ids())
    styles = sorted({c.style_tag for c in db.clips})
    speeds = [c.mean_horizontal_speed() for c in db.clips]
    info = {
        "name": db.name,
        "clips": len(db),
        "key_dim": db.dim,
        "frames_per_clip": len(db.clips[0].frames),
        "fps": db.clips[0].fps,
        "styles": styles,
        "id_range": [ids[0], ids[-1]],
        "mean_speed": float(np.mean(speeds)),
        "speed_range": [float(np.min(speeds)), float(np.max(speeds))],
    }
    if args.json:
        print(json.dumps(info, indent=2))
    else:
        for key, value in info.items():
            print(f"{key}: {value}")
    return 0


def _cmd_train(args) -> int:
    from .training import TrainConfig, train

    with open(args.config, "r", encoding="utf-8") as fh:
        cfg_dict = json.load(fh)
    cfg = TrainConfig.from_dict(cfg_dict)
    # Flags beat the config file, which beats the defaults.
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.env_count is not None:
        cfg.env_count = args.env_count

    def log(record):
        if not args.quiet:
            print(
                f"iter {record['iteration']:4d}  goal_return {record['goal_return']:.3f}  "
                f"trate {record['trate']:.1f}%  disc {record['disc_real']:.2f}/{record['disc_fake']:.2f}",
                file=sys.stderr,
            )

    result = train(cfg, out_dir=args.out, log_fn=log)
    final = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"final": final, "checkpoint": result.checkpoint_path}))
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import emit_report, evaluate_checkpoint_metrics
    from .retrieval import RetrievalEnv, load_database
    from .training import load_checkpoint

    bundle = load_checkpoint(args.checkpoint)
    databases = {}
    for path in args.db.split(","):
        db = load_database(path.strip())
        databases[db.name] = db
    retr_env = RetrievalEnv(databases, period=bundle.config.retrieval_period)
    db_name = args.eval_db if args.eval_db is not None else sorted(databases)[0]
    if db_name not in databases:
        print(f"error: unknown database {db_name!r}", file=sys.stderr)
        return 1
    metrics = evaluate_checkpoint_metrics(
        bundle.nets,
        retr_env,
        bundle.config.env,
        bundle.config.reward,
        db_name,
        episodes=args.episodes,
        ticks=args.ticks,
        seed=args.seed,
        goal_speed_max=bundle.config.goal_speed_max,
    )
    emit_report(metrics, args.out)
    print(json.dumps(metrics))
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    serve(
        args.checkpoint,
        [p.strip() for p in args.dbs.split(",")],
        host=args.host,
        port=args.port,
        seed=args.seed,
    )
    return 0


def _cmd_print_config() -> int:
    from .training import TrainConfig

    print(json.dumps(TrainConfig().to_dict(), indent=2, sort_keys=True))
    return 0


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems; those are validation errors here
        return 0 if not exc.code else 1
    handlers = {
        "gen-data": lambda: _cmd_gen_data(args),
        "build-db": lambda: _cmd_build_db(args),
        "inspect-db": lambda: _cmd_inspect_db(args),
        "train": lambda: _cmd_train(args),
        "eval": lambda: _cmd_eval(args),
        "serve": lambda: _cmd_serve(args),
        "print-config": _cmd_print_config,
    }
    try:
        return handlers[args.command]()
    except (ValueError, KeyError, FileNotFoundError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
