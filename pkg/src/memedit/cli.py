"""Command-line entry point: ``memedit {gen,edit,sweep,verify,report}``.

Every ExperimentConfig field can be overridden with ``--field=value``;
nested fields use dots, e.g. ``--geometry.kappa=1e4``. Values are parsed as
JSON when possible and taken as strings otherwise.

Exit codes: 0 success, 2 failed invariant in ``verify``, 3 bad config,
4 numerical failure during an edit.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (EditFailure, ExperimentConfig, aggregate_rows, emit_results, read_results,
                      run_experiment, summary_path, verify_all)
from .memory import gen_model, save_model

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("memedit")


class ConfigError(ValueError):
    pass


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens):
    """``["--a.b=1", "--c", "x"]`` -> ``{("a", "b"): 1, ("c",): "x"}``."""
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        name = tok[2:]
        if "=" in name:
            name, raw = name.split("=", 1)
        else:
            raw = next(it, None)
            if raw is None:
                raise ConfigError(f"missing value for --{name}")
        out[tuple(name.replace("-", "_").split("."))] = _parse_value(raw)
    return out


def load_config(path=None, overrides=None, seed=None) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    for keys, value in (overrides or {}).items():
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--{'.'.join(keys)}: {k} is not a nested section")
        node[keys[-1]] = value
    if seed is not None:
        data["seed"] = seed
    try:
        return ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def _print_json(obj):
    print(json.dumps(obj, indent=2))


def cmd_gen(args, cfg):
    model = gen_model(cfg.geometry)
    save_model(model, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_edit(args, cfg):
    record = run_experiment(cfg)
    emit_results(record, args.out)
    _print_json(record.summary())
    return EXIT_OK


def _floats(text):
    return [float(x) for x in text.split(",") if x]


def cmd_sweep(args, cfg):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = args.methods.split(",")
    rows = []
    for kappa, mass, method in itertools.product(_floats(args.kappa), _floats(args.protected_mass), methods):
        try:
            cell = replace(cfg, method=method,
                           geometry=replace(cfg.geometry, kappa=kappa, protected_mass=mass))
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err
        record = run_experiment(cell)
        name = f"kappa={kappa:g}_mass={mass:g}_{method}.csv"
        emit_results(record, out_dir / name)
        rows.append([kappa, mass, method, record.efficacy, record.generalization, record.specificity])
        log.info("%s efficacy=%.3f", name, record.efficacy)
    with (out_dir / "sweep.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kappa", "protected_mass", "method", "efficacy", "generalization", "specificity"])
        writer.writerows([[repr(r[0]), repr(r[1]), r[2]] + [repr(x) for x in r[3:]] for r in rows])
    print(out_dir / "sweep.csv")
    return EXIT_OK


def cmd_verify(args, cfg):
    report = verify_all(cfg)
    for c in report["checks"]:
        log.info("%-13s %s", c["status"].upper(), c["name"])
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    else:
        _print_json(report)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_report(args, cfg):
    out = []
    for path in args.results:
        rows = read_results(path)
        agg = aggregate_rows(rows)
        entry = {"path": str(path), **agg}
        sp = summary_path(path)
        if sp.exists():
            summary = json.loads(sp.read_text())
            entry["matches_summary"] = all(
                abs(agg[m] - summary[m]) <= 1e-12 for m in ("efficacy", "generalization", "specificity"))
        out.append(entry)
    _print_json(out)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are config errors; 2 is reserved for verify failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="memedit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required=False):
        p.add_argument("--config", help="ExperimentConfig JSON file")
        p.add_argument("--seed", type=int, required=seed_required, help="experiment seed")

    p = sub.add_parser("gen", help="write a generated model as JSON")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("edit", help="run one edit suite")
    common(p, seed_required=True)
    p.add_argument("--out", required=True, help="results CSV; summary JSON goes alongside")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("sweep", help="grid over kappa x protected_mass x method")
    common(p, seed_required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kappa", default="1,100,10000", help="comma-separated values")
    p.add_argument("--protected-mass", default="0.5,0.99", help="comma-separated values")
    p.add_argument("--methods", default="metake,static_baseline,ridge_only,projection_only")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the invariant battery")
    common(p)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="re-aggregate results CSVs")
    p.add_argument("results", nargs="+")
    p.set_defaults(func=cmd_report, config=None, seed=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if extra and args.command == "report":
            raise ConfigError(f"report takes no overrides: {extra}")
        cfg = load_config(args.config, parse_overrides(extra), args.seed)
        return args.func(args, cfg)
    except ConfigError as err:
        print(f"memedit: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except EditFailure as err:
        print(f"memedit: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"memedit: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
