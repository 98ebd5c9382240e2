"""Command line entry point: ``cdac run | compare | sweep``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import (ConfigError, ExperimentConfig, SchemaError, ablation_configs, compare, load_config,
                         write_run)
from .trainer import TrainingDivergence

log = logging.getLogger("cdac")


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def _attach_log(run_dir: Path) -> logging.Handler:
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger("cdac").addHandler(handler)
    logging.getLogger("cdac").setLevel(logging.INFO)
    return handler


def _run_one(cfg: ExperimentConfig, out_dir: Path) -> int:
    handler = _attach_log(out_dir)
    try:
        log.info("run %s arm=%s seed=%d -> %s", cfg["run.name"], cfg.arm, cfg["run.seed"], out_dir)
        metrics = write_run(cfg, out_dir)
        log.info("final accuracy %.4f best %.4f", metrics.final_accuracy, metrics.best_accuracy)
        print(f"{out_dir}: final {metrics.final_accuracy:.4f} best {metrics.best_accuracy:.4f}")
        return 0
    except TrainingDivergence as err:
        log.error("training aborted: %s", err)
        print(f"error: training aborted in {out_dir}: {err}", file=sys.stderr)
        return 3
    finally:
        logging.getLogger("cdac").removeHandler(handler)
        handler.close()


def _with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return cfg.with_values(run__seed=seed, data__seed=seed)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    root = cfg.output_root() / cfg["run.name"]
    if args.seeds is None:
        return _run_one(cfg, root)
    status = 0
    for seed in args.seeds:
        status = max(status, _run_one(_with_seed(cfg, seed), root / f"seed{seed}"))
    return status


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if not args.ablations:
        print("error: sweep needs --ablations", file=sys.stderr)
        return 2
    root = cfg.output_root() / cfg["run.name"]
    seeds = args.seeds if args.seeds is not None else [None]
    status = 0
    for label, row_cfg in ablation_configs(cfg):
        for seed in seeds:
            target = root / label if seed is None else root / label / f"seed{seed}"
            status = max(status, _run_one(row_cfg if seed is None else _with_seed(row_cfg, seed), target))
    return status


def cmd_compare(args) -> int:
    result = compare(args.files)
    sys.stdout.write(result.text())
    if args.csv:
        Path(args.csv).write_text(result.csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdac", description="Cross-domain adaptive clustering experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one config and write metrics")
    p.add_argument("config", help="key = value config file")
    p.add_argument("--seeds", type=_parse_seeds, help="comma-separated seeds; each sets run.seed and data.seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the ablation grid of a base config")
    p.add_argument("config")
    p.add_argument("--ablations", action="store_true", help="SSDA/UDA x loss-combination rows")
    p.add_argument("--seeds", type=_parse_seeds)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="tabulate final/best accuracy across metrics files")
    p.add_argument("files", nargs="+", help="metrics.csv files")
    p.add_argument("--csv", help="also write the table as CSV here")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
