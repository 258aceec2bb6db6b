"""Command-line entry points.

Heavy imports happen inside the handlers: --deterministic must pin BLAS
and OpenMP thread counts before numpy first loads, or the pinning does
nothing.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import SplitbackError  # numpy-free, safe to import early

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _pin_threads() -> None:
    if "numpy" in sys.modules:
        print("warning: numpy already imported; thread pinning may not take effect", file=sys.stderr)
    for var in _THREAD_VARS:
        os.environ[var] = "1"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a YAML experiment config")
    parser.add_argument("--preset", help="name of a built-in configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        help="single-threaded math and sequential execution for byte-stable outputs",
    )


def _load_config(args):
    from .config import parse_config, preset

    if args.config and args.preset:
        raise SystemExit("pass either --config or --preset, not both")
    if args.config:
        cfg = parse_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise SystemExit("one of --config or --preset is required")
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    return Path("runs") / f"{cfg.name}-seed{cfg.seed}"


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    from .experiment import run_experiment

    manifest = run_experiment(cfg, _out_dir(args, cfg), deterministic=args.deterministic)
    print(json.dumps(manifest.summary, sort_keys=True))
    print(f"artifacts in {manifest.out_dir}")
    return 0


def _parse_values(text: str) -> list:
    values = []
    for part in text.split(","):
        part = part.strip()
        try:
            values.append(int(part))
        except ValueError:
            values.append(float(part))
    return values


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    from .experiment import run_sweep

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    result = run_sweep(
        cfg,
        args.axis,
        _parse_values(args.values),
        _out_dir(args, cfg),
        seeds=seeds,
        deterministic=args.deterministic,
    )
    done = sum(1 for m in result.manifests if m is not None)
    print(f"{done}/{len(result.manifests)} runs finished; table at {result.table_path}")
    for label, message in result.errors.items():
        print(f"failed {label}: {message}", file=sys.stderr)
    return 0 if not result.errors else 1


def _cmd_verify_bound(args) -> int:
    from .config import preset
    from .experiment import verify_bound

    if args.config:
        from .config import parse_config

        cfg = parse_config(args.config)
    else:
        cfg = preset(args.preset or "toy-bound")
    if args.seed is not None:
        cfg.seed = args.seed
    results = verify_bound(
        cfg, args.out or Path("runs") / "bound", trials=args.trials, deterministic=args.deterministic
    )
    held = sum(r["holds"] for r in results)
    benign_zero = all(r["benign_delta"] == 0.0 for r in results)
    print(f"bound held in {held}/{len(results)} trials; benign delta exactly zero: {benign_zero}")
    return 0 if held == len(results) and benign_zero else 1


def _cmd_plot(args) -> int:
    from . import plots

    run_dir = Path(args.run)
    metrics = run_dir / "metrics.jsonl"
    if not metrics.exists():
        raise SystemExit(f"no metrics.jsonl under {run_dir}")
    rounds, evals = [], []
    with open(metrics, "r", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("kind") == "round":
                rounds.append(rec)
            elif rec.get("kind") == "eval":
                evals.append(rec)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    emitted = []
    if evals:
        emitted.append(plots.plot_training_curves(evals, out / f"curves.{args.format}"))
    if rounds:
        emitted.append(plots.plot_loss_curve(rounds, out / f"loss.{args.format}"))
    for path in emitted:
        print(path)
    return 0


def _cmd_gradcheck(args) -> int:
    from .experiment import gradient_check_suite

    report = gradient_check_suite(seed=args.seed if args.seed is not None else 0)
    worst = max(report.values())
    for name, err in sorted(report.items()):
        print(f"{name}: relative error {err:.3e}")
    ok = worst < 1e-4
    print("all gradients verified" if ok else "GRADIENT CHECK FAILED")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitback",
        description="Split-training backdoor simulator: runs, sweeps, bound checks, plots.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured experiment")
    _add_common(p_run)
    p_run.set_defaults(handler=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run one config across an axis of values")
    _add_common(p_sweep)
    p_sweep.add_argument(
        "--axis",
        required=True,
        choices=["gamma", "adversary-count", "connectivity", "margin", "latent-dim", "beta"],
    )
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds (multi-seed mode)")
    p_sweep.set_defaults(handler=_cmd_sweep)

    p_bound = sub.add_parser("verify-bound", help="check the degradation bound on toy trials")
    _add_common(p_bound)
    p_bound.add_argument("--trials", type=int, default=10)
    p_bound.set_defaults(handler=_cmd_verify_bound)

    p_plot = sub.add_parser("plot", help="re-emit plots from a finished run directory")
    p_plot.add_argument("--run", required=True, help="run directory holding metrics.jsonl")
    p_plot.add_argument("--out", default=None)
    p_plot.add_argument("--format", default="png", choices=["png", "svg"])
    p_plot.set_defaults(handler=_cmd_plot, deterministic=False)

    p_grad = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p_grad.add_argument("--seed", type=int, default=None)
    p_grad.set_defaults(handler=_cmd_gradcheck, deterministic=False)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "deterministic", False):
        _pin_threads()
    try:
        return args.handler(args)
    except SplitbackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())
