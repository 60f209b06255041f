"""Command line entry point: ``rpm-marl <subcommand> ...``.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .checkpoint import load_checkpoint
from .config import load_config
from .errors import ArchMismatch, ConfigError, RpmError
from .evaluation import get_scenario, run_evaluation
from .nets import ActorNet
from .orchestrator import METRICS_HEADER, read_metrics, run_training, summarize_rpm_index

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("rpm_marl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; that code is reserved for runtime failures here
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> _Parser:
    parser = _Parser(prog="rpm-marl", description="Ranked policy memory for multi-agent PPO")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a shared policy")
    p.add_argument("--config", required=True, help="YAML config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--run-dir", help="output directory (defaults to train.run_dir or runs/<substrate>_<sampler>_<seed>)")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a scenario")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--greedy", action="store_true")

    p = sub.add_parser("inspect-rpm", help="summarise a run's policy memory as CSV")
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("export-metrics", help="validate and export a run's metrics CSV")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", help="write here instead of stdout")
    p.add_argument("--columns", help="comma-separated subset of columns")

    p = sub.add_parser("sweep", help="train over a sampler x psi grid and emit a result table")
    p.add_argument("--config", help="base YAML config (defaults apply when omitted)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--samplers", default="rpm,random,off")
    p.add_argument("--psis", type=_float_list, default=[0.5, 1.0, 2.0])
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--out-dir", help="keep per-run directories here")
    p.add_argument("--out", help="write the table here instead of stdout")
    return parser


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.override)
    run_dir = args.run_dir or cfg["train.run_dir"]
    if run_dir is None:
        run_dir = f"runs/{cfg.substrate_name}_{cfg.sampler}_{cfg['train.seed']}"

    def progress(row: dict) -> None:
        if row["eval_mean_focal_return"] is not None:
            log.info("step %d train_return %.3f eval %.3f keys %d",
                     row["step"], row["train_return"], row["eval_mean_focal_return"], row["rpm_key_count"])

    result = run_training(cfg, run_dir=run_dir, progress=progress)
    print(f"run_dir: {result.run_dir}")
    print(f"env_steps: {result.env_steps}")
    print(f"mean_focal_return: {result.last_eval.mean_focal_return:.6f}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    scenario = get_scenario(args.scenario)
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    try:
        actor = ActorNet.from_descriptor(ckpt.architecture, ckpt.params)
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchMismatch(f"checkpoint architecture is unusable: {exc}") from exc
    if args.episodes is not None and args.episodes < 1:
        raise ConfigError("--episodes must be positive")
    report = run_evaluation(actor, scenario, greedy=args.greedy, episodes=args.episodes)
    print(f"scenario: {report.scenario}")
    print(f"episodes: {len(report.per_episode)}")
    print(f"mean_focal_return: {report.mean_focal_return:.6f}")
    return EXIT_OK


def cmd_inspect_rpm(args: argparse.Namespace) -> int:
    index = Path(args.run_dir) / "rpm_index.csv"
    if not index.is_file():
        raise ConfigError(f"no rpm_index.csv in {args.run_dir}")
    sys.stdout.write(summarize_rpm_index(index))
    return EXIT_OK


def cmd_export_metrics(args: argparse.Namespace) -> int:
    import csv
    import io

    path = Path(args.run_dir) / "metrics.csv"
    if not path.is_file():
        raise ConfigError(f"no metrics.csv in {args.run_dir}")
    rows = read_metrics(path)
    columns = list(METRICS_HEADER)
    if args.columns:
        columns = [c.strip() for c in args.columns.split(",") if c.strip()]
        unknown = [c for c in columns if c not in METRICS_HEADER]
        if unknown:
            raise ConfigError(f"unknown metrics columns: {unknown}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([row[c] for c in columns])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    from .sweep import rows_to_csv, run_sweep

    base = load_config(args.config, args.override)
    samplers = [s.strip() for s in args.samplers.split(",") if s.strip()]

    def on_row(row: dict) -> None:
        log.info("sweep %s psi=%s seed=%s eval=%s", row["sampler"], row["psi"], row["seed"],
                 row["eval_mean_focal_return"])

    rows = run_sweep(base, samplers, args.psis, args.seeds, out_dir=args.out_dir, on_row=on_row)
    _emit(rows_to_csv(rows), args.out)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "inspect-rpm": cmd_inspect_rpm,
    "export-metrics": cmd_export_metrics,
    "sweep": cmd_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ArchMismatch) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RpmError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
