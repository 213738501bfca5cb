"""``invrisk`` command line.

Exit codes: 0 success, 2 configuration error, 3 stage failure (the run can
be resumed), 4 interpretation backend unavailable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from invrisk.errors import BackendUnavailable, ConfigError, InputError, StageError
from invrisk.orchestrator.config import ExperimentConfig, expand_sweep, validate_config
from invrisk.orchestrator.pipeline import Pipeline, resume
from invrisk.orchestrator.report import sweep_summary

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_BACKEND = 0, 2, 3, 4

STAGE_COMMANDS = ("train-target", "train-gan", "attack", "caption", "evaluate", "report")

logger = logging.getLogger("invrisk")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--run-dir", type=Path, help="run directory (default: <output_root>/<run id>)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--workers", type=int, help="override the worker count")
    common.add_argument("--stub-backends", action="store_true", help="use the deterministic stub backends")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="invrisk", description="Model inversion risk assessment pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check a config and print it with defaults applied")
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage (and nothing downstream)")
    run = sub.add_parser("run", parents=[common], help="run every stage, skipping completed ones")
    run.add_argument("--stop-after", help="stop once this stage marker is written, e.g. reconstructions:0")
    sub.add_parser("resume", parents=[common], help="continue an interrupted run from --run-dir")
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = validate_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg.workers = args.workers
    if args.stub_backends:
        cfg.backends.mode = "stub"
    return cfg


def _cells(args: argparse.Namespace, cfg: ExperimentConfig) -> list[tuple[str, Pipeline]]:
    cells = expand_sweep(cfg)
    if args.run_dir is not None and len(cells) > 1:
        return [(cid, Pipeline(c, args.run_dir / cid.split("/", 1)[-1])) for cid, c in cells]
    if args.run_dir is not None:
        return [(cells[0][0], Pipeline(cells[0][1], args.run_dir))]
    return [(cid, Pipeline(c)) for cid, c in cells]


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "resume":
        if args.run_dir is None:
            raise ConfigError("resume needs --run-dir")
        report = resume(args.run_dir)
        print(f"{args.run_dir}: risk level {report.bin.level.value.upper()}, WCAL {report.wcal.mean:.4f}")
        return EXIT_OK
    cfg = _load(args)
    if args.command == "validate":
        sys.stdout.write(cfg.to_json())
        return EXIT_OK
    cells = _cells(args, cfg)
    if args.command == "run":
        done = []
        for cell_id, pipe in cells:
            report = pipe.run(stop_after=args.stop_after)
            if report is None:
                print(f"{pipe.run_dir}: stopped after {args.stop_after}")
                continue
            done.append((cell_id, report))
            print(f"{pipe.run_dir}: risk level {report.bin.level.value.upper()}, WCAL {report.wcal.mean:.4f}")
        if len(done) > 1:
            root = cells[0][1].run_dir.parent
            (root / "sweep_summary.md").write_text(sweep_summary(done), encoding="utf-8")
        return EXIT_OK
    for _, pipe in cells:
        pipe.run_stage(args.command)
        print(json.dumps({"run_dir": str(pipe.run_dir), "completed": pipe.state.order}))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendUnavailable as exc:
        print(f"backend unavailable: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except StageError as exc:
        print(f"stage failed (resumable): {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    raise SystemExit(main())
