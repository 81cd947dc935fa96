"""Command-line entry point: ``semifss generate | train | eval``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import DATA_ROOT_ENV, SCHEMA, dump_run_config, load_run_config
from .errors import ConfigError, SemiFSSError

log = logging.getLogger("semifss")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

KEYS_HELP = "configuration keys (use with --set section.key=value):\n  " + "\n  ".join(SCHEMA)


class UsageError(Exception):
    pass


def _size(text):
    parts = text.lower().replace("x", ",").split(",")
    try:
        dims = [int(p) for p in parts if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return tuple(dims)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semifss", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic shapes corpus")
    g.add_argument("--classes", type=int, required=True, help="number of classes (<= 32)")
    g.add_argument("--per-class", type=int, required=True, help="image/mask pairs per class")
    g.add_argument("--size", type=_size, required=True, help="side length or HxW")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output root (one subdirectory per class)")
    g.add_argument("--channels", type=int, choices=(1, 3), default=3)
    g.add_argument("--distractors", type=int, default=0, help="clutter shapes per image")
    g.add_argument("--pool-out", help="also write mask-free images here (unlabeled pool)")
    g.add_argument("--pool-per-class", type=int, default=10)

    t = sub.add_parser("train", help="train a model from a .cfg file",
                       epilog=KEYS_HELP + f"\n\n{DATA_ROOT_ENV} overrides data.root.",
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", required=True, help="path to a .cfg file, or a preset name (paper, tiny)")
    t.add_argument("--mode", choices=("episodic", "regular"))
    t.add_argument("--k", type=int)
    t.add_argument("--u", type=int, help="unlabeled images per episode")
    t.add_argument("--lambda", dest="lam", type=float, help="surrogate loss weight")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--data-root")
    t.add_argument("--pool-dir")
    t.add_argument("--checkpoint-dir", help="default: runs/<config name>")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration key (repeatable)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")

    e = sub.add_parser("eval", help="score a checkpoint on N episodes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--k", type=int, default=1)
    e.add_argument("--episodes", type=int, default=500)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--data-root", help="default: the data root recorded in the checkpoint")
    e.add_argument("--classes", choices=("test", "train", "all"), default="test")
    e.add_argument("--fixed-support", action="store_true", help="one fixed support set per class")
    e.add_argument("--out", help="report directory (default: next to the checkpoint)")
    e.add_argument("--label", default="")
    e.add_argument("--overlays", type=int, default=0, help="write this many overlay images")
    e.add_argument("--workers", type=int, default=1)
    return parser


def cmd_generate(args) -> int:
    from .dataset import class_names, generate_shapes_dataset, generate_unlabeled_pool

    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    ds = generate_shapes_dataset(args.classes, args.per_class, args.size, args.seed, args.out,
                                 channels=args.channels, distractors=args.distractors)
    n = sum(ds.n_entries(c) for c in ds.classes)
    print(f"wrote {n} pairs: {len(ds.classes)} classes x {args.per_class} at "
          f"{args.size[0]}x{args.size[1]} (seed {args.seed}) to {args.out}")
    if args.pool_out:
        paths = generate_unlabeled_pool(range(len(class_names(args.classes))), args.pool_per_class, args.size,
                                        args.seed, args.pool_out, channels=args.channels,
                                        distractors=args.distractors)
        print(f"wrote {len(paths)} unlabeled images to {args.pool_out}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    flags = {"train.mode": args.mode, "train.k": args.k, "train.u": args.u, "train.lambda": args.lam,
             "train.iterations": args.iterations, "train.seed": args.seed, "data.root": args.data_root,
             "surrogate.pool_dir": args.pool_dir, "train.checkpoint_dir": args.checkpoint_dir}
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return overrides


def cmd_train(args) -> int:
    from dataclasses import replace

    from .trainer import train

    rc = load_run_config(args.config, _train_overrides(args))
    cfg = rc.train
    if not cfg.checkpoint_dir:
        cfg = replace(cfg, checkpoint_dir=str(Path("runs") / Path(args.config).stem))
    if not cfg.log_path:
        cfg = replace(cfg, log_path=str(Path(cfg.checkpoint_dir) / "train_log.jsonl"))
    rc = replace(rc, train=cfg)
    if args.dry_run:
        print(dump_run_config(rc), end="")
        return EXIT_OK
    if not cfg.data_root or not Path(cfg.data_root).is_dir():
        raise FileNotFoundError(f"data root {cfg.data_root} does not exist")
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_run_config(rc))
    final = train(cfg, resume_from=args.resume)
    print(f"trained {cfg.iterations} iterations ({cfg.mode}, k={cfg.k}, u={cfg.u}, lambda={cfg.lam}); "
          f"checkpoint {final}; log {cfg.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_class_dataset
    from .episodes import EpisodeStream, derive_seed, write_manifest
    from .evaluation import evaluate, save_overlays, summary_table
    from .network import load_checkpoint

    if args.k < 1 or args.episodes < 1:
        raise UsageError("--k and --episodes must be >= 1")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt = load_checkpoint(path)
    train_cfg = ckpt.meta.get("train_config", {})
    root = args.data_root or train_cfg.get("data_root")
    if not root:
        raise UsageError("no --data-root given and none recorded in the checkpoint")
    dataset = load_class_dataset(root, ckpt.config.input_size, ckpt.config.in_channels)
    if args.classes == "all" or "test_classes" not in ckpt.meta:
        classes = dataset.classes
    else:
        classes = ckpt.meta[f"{args.classes}_classes"]
    report = evaluate(ckpt.model, dataset, classes, args.k, args.episodes, seed=args.seed,
                      checkpoint_id=path.name, fixed_support=args.fixed_support, workers=args.workers)
    report.label = args.label or f"{train_cfg.get('mode', 'model')} {args.k}-shot"
    u = train_cfg.get("u") if train_cfg.get("lam") else 0
    report.additional_samples = u or None
    out = Path(args.out) if args.out else path.parent / f"eval_{path.stem}"
    stem = f"k{args.k}_n{args.episodes}_seed{args.seed}"
    report.write(out / f"report_{stem}.json")
    table = summary_table([report])
    (out / f"summary_{stem}.txt").write_text(table + "\n")
    stream = EpisodeStream(dataset, classes, args.k, base_seed=derive_seed(args.seed, 4),
                           length=args.episodes, fixed_support=args.fixed_support)
    write_manifest(stream, out / f"episodes_{stem}.jsonl", dataset)
    if args.overlays:
        save_overlays(ckpt.model, dataset, classes, args.k, min(args.overlays, args.episodes), args.seed,
                      out / f"overlays_{stem}")
    print(table)
    if report.n_unscorable:
        print(f"{report.n_unscorable} unscorable episodes excluded")
    print(f"report written to {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"semifss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SemiFSSError, OSError, ValueError, KeyError) as exc:
        print(f"semifss {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
