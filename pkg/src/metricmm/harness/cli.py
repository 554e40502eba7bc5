"""Command-line entry point: ``metricmm {train,eval,metric-report,ablate}``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from metricmm.errors import ConfigurationError
from metricmm.harness.config import (
    EvalSpec,
    TrainConfig,
    parse_corruption,
    read_config_file,
)

log = logging.getLogger("metricmm")

ABLATION_VARIANTS = ("metricmm", "metricmm_no_inv", "metricmm_no_metric")


class UsageFailure(Exception):
    pass


def _common(p: argparse.ArgumentParser, config_required: bool) -> None:
    p.add_argument("--config", required=config_required, help="INI-style run configuration")
    p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", action="store_true", help="single worker, fixed RNG streams")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metricmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more seeds")
    _common(p, True)

    p = sub.add_parser("eval", help="evaluate checkpoints under observation corruption")
    _common(p, False)
    p.add_argument("--checkpoint", nargs="+", help="checkpoint file(s), one per seed")
    p.add_argument("--corruption", action="append", default=[], metavar="KIND:P[:K[:T1+T2]]")
    p.add_argument("--episodes", type=int, default=50)

    p = sub.add_parser("metric-report", help="latent vs BFS distance report for a gridworld checkpoint")
    _common(p, False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, default=500)

    p = sub.add_parser("ablate", help="train and evaluate the three metric variants back to back")
    _common(p, True)
    p.add_argument("--episodes", type=int, default=50)
    return parser


def _load_config(args) -> tuple[TrainConfig, list]:
    if args.config is None:
        return TrainConfig(), []
    cfg, corruptions = read_config_file(args.config)
    changes = {}
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.deterministic:
        changes["deterministic"] = True
    return (cfg.replace(**changes) if changes else cfg), corruptions


def _out_dir(args, cfg: TrainConfig) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> None:
    from metricmm.harness.train import run_train

    cfg, _ = _load_config(args)
    _out_dir(args, cfg)
    for res in run_train(cfg):
        print(f"seed {res.seed}: {res.checkpoint} {res.curve}")


def cmd_eval(args) -> None:
    from metricmm.harness.evaluate import run_eval

    if not args.checkpoint:
        raise UsageFailure("eval: --checkpoint is required")
    for path in args.checkpoint:
        if not Path(path).is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
    cfg, corruptions = _load_config(args)
    corruptions = list(corruptions) + [parse_corruption(c) for c in args.corruption]
    out = _out_dir(args, cfg)
    spec = EvalSpec(tuple(args.checkpoint), tuple(corruptions), args.episodes, str(out / "eval.csv"),
                    seed=args.seed or 0)
    run_eval(spec)
    print(spec.out_path)


def cmd_metric_report(args) -> None:
    from metricmm.harness.report import run_metric_report

    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metric_report.csv"
    row = run_metric_report(args.checkpoint, path, args.pairs, args.seed or 0)
    print(f"{path}: spearman={row['spearman']:.3f} adjacent_dev_mean={row['adjacent_dev_mean']:.3f}")


def cmd_ablate(args) -> None:
    from metricmm.harness.evaluate import run_eval
    from metricmm.harness.train import run_train

    cfg, corruptions = _load_config(args)
    if cfg.env != "pendulum":
        raise ConfigurationError("env: ablation runs need the pendulum environment")
    out = _out_dir(args, cfg)
    checkpoints = []
    for variant in ABLATION_VARIANTS:
        checkpoints += [str(r.checkpoint) for r in run_train(cfg.replace(estimator=variant, out_dir=str(out)))]
    spec = EvalSpec(tuple(checkpoints), tuple(corruptions), args.episodes, str(out / "ablation_eval.csv"))
    run_eval(spec)
    print(spec.out_path)


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "metric-report": cmd_metric_report, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageFailure, ConfigurationError, FileNotFoundError) as exc:
        print(f"metricmm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("runtime failure")
        print(f"metricmm {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
