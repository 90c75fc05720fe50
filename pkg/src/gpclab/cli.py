"""Command-line entry point: ``gpclab <command> ...``.

    collect       --config c.json --out runs/
    train         --runs runs/ --model m.gp
    evaluate      --model m.gp --envs test --runs runs/
    compare       --runs runs/ --out report/
    export-plots  --runs runs/ --out plots/ [--model m.gp]
    recipe        --config c.json --out out/

``collect`` copies the configuration into the runs directory; the later
commands read it from there unless ``--config`` is given.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig, load_config, save_config

CONFIG_NAME = "config.json"


def _config(args, runs: Path | None = None) -> ExperimentConfig:
    if args.config:
        return load_config(args.config)
    if runs is not None and (runs / CONFIG_NAME).exists():
        return load_config(runs / CONFIG_NAME)
    return ExperimentConfig()


def _envs(config: ExperimentConfig, which: str):
    train, test = harness.experiment_environments(config)
    pairs = {"train": [(e, "train") for e in train], "test": [(e, "test") for e in test]}
    if which == "all":
        return pairs["train"] + pairs["test"]
    return pairs[which]


def cmd_collect(args) -> int:
    config = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / CONFIG_NAME)
    paths = harness.collect(config, out, _envs(config, args.envs))
    print(f"wrote {len(paths)} episode logs to {out}")
    return 0


def cmd_train(args) -> int:
    runs = Path(args.runs)
    config = _config(args, runs)
    trained = harness.train(config, harness.training_episodes(runs), args.model,
                            harness.load_runs(runs, "mpc", "train"))
    print(f"trained on {trained.n_train} samples; switch threshold "
          f"{trained.stats.threshold:.6g}; model saved to {args.model}")
    return 0


def cmd_evaluate(args) -> int:
    runs = Path(args.runs)
    config = _config(args, runs)
    trained = harness.load_trained(args.model)
    paths = harness.evaluate(config, trained, runs, _envs(config, args.envs))
    print(f"wrote {sum(len(v) for v in paths.values())} episode logs to {runs}")
    return 0


def cmd_compare(args) -> int:
    runs = Path(args.runs)
    config = _config(args, runs)
    logs = {c: harness.load_runs(runs, c) for c in harness.CONTROLLERS}
    report = harness.compare({c: v for c, v in logs.items() if v}, args.bucket_ms, config.seed)
    for p in harness.write_report(report, args.out):
        print(p)
    return 0


def cmd_export_plots(args) -> int:
    model = harness.load_trained(args.model).model if args.model else None
    written = harness.export_plots(args.runs, args.out, model)
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def cmd_recipe(args) -> int:
    config = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / CONFIG_NAME)
    report = harness.run_recipe(config, out)
    for env_id in report.env_ids():
        print(env_id, " ".join(f"{c}={report.cost(env_id, c):.6g}" for c in harness.CONTROLLERS))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpclab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="run MPC episodes and persist their logs")
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.add_argument("--envs", choices=("train", "test", "all"), default="all")
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="fit the GP policy and switch statistics")
    t.add_argument("--runs", required=True)
    t.add_argument("--model", required=True)
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="run pure-GPC and supervised episodes")
    e.add_argument("--model", required=True)
    e.add_argument("--envs", choices=("train", "test", "all"), default="test")
    e.add_argument("--runs", default="runs")
    e.add_argument("--config")
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("compare", help="aggregate logs into CSV tables")
    m.add_argument("--runs", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--bucket-ms", type=float, default=1.0)
    m.add_argument("--config")
    m.set_defaults(func=cmd_compare)

    x = sub.add_parser("export-plots", help="write plot-ready CSV series")
    x.add_argument("--runs", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--model")
    x.set_defaults(func=cmd_export_plots)

    r = sub.add_parser("recipe", help="collect, train, evaluate and compare in one go")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_recipe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
