"""Command-line entry point: ``mrdebias run|sweep|synthesize|bias-oracle``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .errors import ConfigError, MrDebiasError
from .experiment import (
    ExperimentConfig,
    bias_oracle,
    emit_report,
    prepare_data,
    run_sweep,
    run_table,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("mrdebias")


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers: {text!r}") from exc


def _load_config(args):
    overrides = list(args.set or [])
    if getattr(args, "seeds", None):
        overrides.append(("seeds", _parse_seeds(args.seeds)))
    if getattr(args, "out", None):
        overrides.append(("output", args.out))
    return ExperimentConfig.load(args.config, overrides)


def cmd_run(args):
    config = _load_config(args)
    reports = run_table(config)
    path = emit_report(reports, args.format, config.tree["output"])
    log.info("wrote %s", path)
    for r in reports:
        agg = " ".join(f"{k}={m:.4f}" for k, (m, _) in r.aggregate().items())
        print(f"{r.method} level={r.level} {agg}")
    return EXIT_OK


def cmd_sweep(args):
    config = _load_config(args)
    if not config.tree.get("grid"):
        raise ConfigError("sweep needs a non-empty grid section")
    result = run_sweep(config)
    out = Path(config.tree["output"])
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.jsonl").open("w") as fh:
        for k, (assignment, report) in enumerate(result.points):
            rec = {
                "point": assignment,
                "validation": report.mean_validation(),
                "selected": k == result.best_index,
                "aggregate": {m: v[0] for m, v in report.aggregate().items()},
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    assignment, best = result.best
    emit_report([best], args.format, out)
    print(f"best {json.dumps(assignment, sort_keys=True)} validation={best.mean_validation():.4f}")
    return EXIT_OK


def cmd_synthesize(args):
    config = _load_config(args)
    out = Path(config.tree["output"])
    for level in config.levels:
        data = prepare_data(config.single(config.methods[0], level))
        target = out / f"level{level}" if len(config.levels) > 1 else out
        data_mod.save_synthetic(data.train, target)
        data_mod.save_ratings(data.test, target / "test.tsv", "triplet_tsv")
        data_mod.save_ratings(data.validation, target / "validation.tsv", "triplet_tsv")
        print(f"level {level}: {data.train.num_observed} observed ratings -> {target}")
    return EXIT_OK


def cmd_bias_oracle(args):
    config = _load_config(args)
    report = bias_oracle(config, args.estimator, args.trials, seed=config.seeds[0])
    rec = report.to_record()
    out = Path(config.tree["output"])
    out.mkdir(parents=True, exist_ok=True)
    (out / f"bias_{args.estimator}.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: rec[k] for k in ("estimator", "bias", "stderr", "trials")}, sort_keys=True))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mrdebias", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fmt=True):
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
        if fmt:
            p.add_argument("--format", choices=("json", "csv"), default="csv")

    common(sub.add_parser("run", help="train and evaluate the configured methods"))
    common(sub.add_parser("sweep", help="grid search over the config's grid section"))
    common(sub.add_parser("synthesize", help="write semi-synthetic data"), fmt=False)
    p = sub.add_parser("bias-oracle", help="Monte-Carlo bias of one estimator")
    common(p, fmt=False)
    p.add_argument("--estimator", default="mr",
                   choices=("naive", "eib", "ips", "snips", "dr", "mr"))
    p.add_argument("--trials", type=int, default=200)
    return parser


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "synthesize": cmd_synthesize, "bias-oracle": cmd_bias_oracle}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MrDebiasError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
