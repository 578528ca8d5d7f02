"""Command-line entry point: ``fpconv {train,eval,gradcheck,analyze,bench}``.

Exit codes: 0 success, 1 usage/config/IO error, 2 diverged training,
3 gradient tolerance not met.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

from fpconv.config import from_kv, read_kv
from fpconv.errors import DivergedLoss, FPConvError

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_TOLERANCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class DataConfig:
    """Dataset keys accepted in a training config next to the TrainConfig keys.

    ``data`` names a manifest (relative to the config file); without it a
    synthetic set is generated: primitive shapes for classification, rooms
    for segmentation.
    """

    data: Optional[str] = None
    n_per_class: int = 100
    train_scenes: int = 16
    test_scenes: int = 4
    scene_points: int = 40000
    data_seed: int = 0


def _split_config(values: Dict[str, str]):
    from fpconv.trainer import TrainConfig

    data_keys = {f.name for f in dataclasses.fields(DataConfig)}
    data = {k: v for k, v in values.items() if k in data_keys}
    rest = {k: v for k, v in values.items() if k not in data_keys}
    return from_kv(TrainConfig, rest), from_kv(DataConfig, data)


def _build_dataset(train_cfg, data_cfg: DataConfig, base: Path):
    from fpconv.data import load_dataset, make_room_dataset, make_shape_dataset

    if data_cfg.data:
        path = Path(data_cfg.data)
        path = path if path.is_absolute() else base / path
        return load_dataset(path, train_cfg.task, train_cfg.num_classes)
    if train_cfg.task == "classification":
        return make_shape_dataset(data_cfg.n_per_class, train_cfg.points, data_cfg.data_seed)
    return make_room_dataset(data_cfg.train_scenes, data_cfg.test_scenes, data_cfg.data_seed, data_cfg.scene_points)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from fpconv.trainer import train

    cfg_path = Path(args.config)
    values = read_kv(cfg_path)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.deterministic:
        values["deterministic"] = "true"
    if args.data is not None:
        values["data"] = str(Path(args.data).resolve())
    train_cfg, data_cfg = _split_config(values)
    dataset = _build_dataset(train_cfg, data_cfg, cfg_path.parent)
    out = Path(args.out)

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec['epoch']:>3}  lr {rec['lr']:.5f}  loss {rec['loss']:.4f}  train_oA {rec['train_oA']:.4f}", flush=True)

    result = train(train_cfg, dataset, out, progress)
    print(f"checkpoint: {result.checkpoint}")
    print(f"log: {result.log_path}")
    return EXIT_OK


def _load_for_eval(args):
    from fpconv.data import load_dataset
    from fpconv.trainer import load_model

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    overrides = {"num_classes": str(args.num_classes)} if args.num_classes is not None else None
    model, config = load_model(ckpt, overrides)
    dataset = load_dataset(args.data, config.task, config.num_classes)
    return model, config, dataset


def cmd_eval(args) -> int:
    from fpconv.trainer import evaluate

    model, config, dataset = _load_for_eval(args)
    report = evaluate(model, dataset, args.split, config)
    text = report.to_csv()
    sys.stdout.write(text)
    if args.metrics_out:
        from fpconv.nn.checkpoint import atomic_write

        atomic_write(args.metrics_out, text.encode())
    return EXIT_OK


def cmd_analyze(args) -> int:
    from fpconv.trainer import analyze_curvature

    if args.radius <= 0:
        raise UsageError(f"--radius must be positive, got {args.radius}")
    if args.bins < 1:
        raise UsageError(f"--bins must be >= 1, got {args.bins}")
    model, config, dataset = _load_for_eval(args)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    result = analyze_curvature(model, dataset, args.radius, args.bins, args.split, config, out)
    sys.stdout.write(result.curve_csv())
    print(f"wrote {out / 'curvature_curve.csv'} and {out / 'curvature_hist.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from fpconv.gradsuite import CASES, format_report, run_suite

    names = None
    if args.ops:
        names = [n.strip() for n in args.ops.split(",") if n.strip()]
        unknown = [n for n in names if n not in CASES]
        if unknown:
            raise UsageError(f"unknown op {unknown[0]!r}; choose from: {', '.join(CASES)}")
    results = run_suite(names, tolerance=args.tol, h=args.h, seed=args.seed)
    print(format_report(results))
    failed = [r.name for r in results if not r.report.passed]
    if failed:
        print(f"{len(failed)} op(s) above tolerance {args.tol:g}: {', '.join(failed)}")
        return EXIT_TOLERANCE
    print(f"all {len(results)} op(s) below tolerance {args.tol:g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from fpconv.bench import run_bench

    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    if args.n_points < 1 or args.plane < 1:
        raise UsageError("--n-points and --plane must be positive")
    result = run_bench(args.kernel, args.n_points, args.plane, args.iters, args.channels, args.seed)
    print(result.format())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpconv", description="Learned local flattening point convolution toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="runs/latest", help="output directory for checkpoint and log")
    p.add_argument("--data", help="dataset manifest (overrides the config's data key)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise-reproducible run")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    p.set_defaults(func=cmd_train)

    def eval_args(q):
        q.add_argument("--checkpoint", required=True, help="model.fpck (its .cfg sidecar must sit next to it)")
        q.add_argument("--data", required=True, help="dataset manifest")
        q.add_argument("--split", default="test", choices=("train", "test"), help="manifest split to use")
        q.add_argument("--num-classes", type=int, help="expected class count; must match the checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    eval_args(p)
    p.add_argument("--metrics-out", help="also write the metrics CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="curvature versus cumulative accuracy")
    eval_args(p)
    p.add_argument("--bins", type=int, default=10, help="number of quantile thresholds and histogram bins")
    p.add_argument("--radius", type=float, default=0.1, help="curvature estimation radius")
    p.add_argument("--out", help="directory for the two CSVs (default: checkpoint directory)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed")
    p.add_argument("--ops", help="comma-separated op names (default: all)")
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--seed", type=int, default=0, help="seed for random inputs")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time a fused kernel against its naive loop form")
    p.add_argument("--kernel", required=True, choices=("fpconv", "project", "normalize"))
    p.add_argument("--n-points", type=int, default=16, help="points per neighborhood")
    p.add_argument("--plane", type=int, default=6, help="grid plane side length")
    p.add_argument("--iters", type=int, default=20, help="timed repetitions")
    p.add_argument("--channels", type=int, default=16, help="feature channels")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedLoss as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FPConvError, OSError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
