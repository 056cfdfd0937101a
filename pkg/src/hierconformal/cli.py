"""Command-line interface.

Subcommands::

    hierconformal generate --config C --out D      synthetic data -> D/data.csv + schema
    hierconformal ingest --csv F --schema S        validate a CSV and print a summary
    hierconformal run --config C --out D           cross-validated experiment
    hierconformal report --in D [--format text|csv] [--by ATTR]
    hierconformal sweep --config C --param P --values V [V ...]

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data error, 4 convergence gate failed.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import yaml

from .data import Schema, SyntheticConfig, generate_synthetic, icc_decomposition, load_csv, write_csv
from .exceptions import (ConfigError, ConvergenceGateError, DataError, DecompositionError,
                         HierConformalError)
from .pipeline import (ExperimentConfig, IntervalTable, load_report, parse_override,
                       run_experiment, subgroup_report, summary_rows, sweep, write_artifacts)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_GATE = 0, 1, 2, 3, 4


def _load_config(args):
    cfg = ExperimentConfig.from_file(args.config)
    overrides = dict(parse_override(o) for o in args.set or ())
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "allow_unconverged", False):
        overrides["allow_unconverged"] = True
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_generate(args):
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError("generator config must be a mapping")
        # accept either a bare generator config or a full experiment config
        if "data" in raw:
            raw = (raw["data"] or {}).get("synthetic")
            if raw is None:
                raise ConfigError("experiment config has no data.synthetic section")
        sc = SyntheticConfig.from_dict(raw)
    else:
        sc = SyntheticConfig()
    if args.seed is not None:
        sc = SyntheticConfig.from_dict({**sc.to_dict(), "seed": args.seed})
    data = generate_synthetic(sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = write_csv(data, out / "data.csv")
    (out / "schema.yaml").write_text(yaml.safe_dump(schema.to_dict(), sort_keys=True),
                                     encoding="utf-8")
    (out / "generator.yaml").write_text(yaml.safe_dump(sc.to_dict(), sort_keys=True),
                                        encoding="utf-8")
    print(f"wrote {len(data)} rows, {data.hospitals.size} hospitals, "
          f"{data.regions.size} regions to {out}")
    return EXIT_OK


def cmd_ingest(args):
    data = load_csv(args.csv, Schema.from_file(args.schema))
    print(f"rows: {len(data)}")
    print(f"features: {data.n_features}")
    print(f"hospitals: {data.hospitals.size}")
    print(f"regions: {data.regions.size}")
    print(f"missing feature values: {int((data.X != data.X).sum())}")
    try:
        icc = icc_decomposition(data)
        print(f"variance shares (patient/hospital/region): {icc.patient:.3f}/"
              f"{icc.hospital:.3f}/{icc.region:.3f}")
    except DecompositionError as exc:
        print(f"variance shares: unavailable ({exc})")
    return EXIT_OK


def cmd_run(args):
    cfg = _load_config(args)
    out = args.out or cfg.out
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    report = run_experiment(cfg)
    write_artifacts(report, out)
    for f in report.folds:
        if f.failed:
            print(f"fold {f.index} failed: {f.error}", file=sys.stderr)
    _print_summary(load_report(out))
    return EXIT_OK


def _print_summary(d, file=None):
    file = file or sys.stdout
    if "aggregate" not in d:
        print(f"status: {d['status']} (metrics withheld)", file=file)
        return
    print(f"{'method':<10} {'alpha':>6} {'coverage':>16} {'width':>16} {'adapt':>14}", file=file)
    for method, per in sorted(d["aggregate"].items()):
        for alpha, m in sorted(per.items(), key=lambda kv: float(kv[0])):
            cells = [_pm(m[k]) for k in ("coverage", "mean_width", "adaptation_ratio")]
            print(f"{method:<10} {alpha:>6} {cells[0]:>16} {cells[1]:>16} {cells[2]:>14}",
                  file=file)


def _pm(v):
    if v["mean"] is None:
        return "nan"
    return f"{v['mean']:.3f}+/-{(v['sd'] or 0):.3f}"


def cmd_report(args):
    d = load_report(args.in_dir)
    if args.by:
        path = Path(args.in_dir) / "intervals.csv"
        if not path.exists():
            raise DataError(f"{path} not found (metrics withheld or run incomplete)")
        table = IntervalTable.read(path)
        min_size = d["config"].get("min_group_size", 30)
        rows = subgroup_report(table, args.by, args.method, args.alpha, min_size)
        if args.format == "csv":
            w = csv.writer(sys.stdout, lineterminator="\n")
            w.writerow([args.by, "n", "coverage", "mean_width", "small_sample"])
            for r in rows:
                w.writerow([r.group, r.n, repr(r.coverage), repr(r.mean_width), int(r.small)])
        else:
            print(f"{args.method} at alpha={args.alpha} by {args.by}")
            for r in rows:
                flag = "  (small sample)" if r.small else ""
                print(f"{r.group:<12} n={r.n:<6} coverage={r.coverage:.3f} "
                      f"width={r.mean_width:.3f}{flag}")
        return EXIT_OK
    if args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["method", "alpha", "metric", "mean", "sd"])
        for row in summary_rows(d):
            w.writerow(["" if v is None else v for v in row])
    else:
        print(f"status: {d['status']}; folds: {len(d['folds'])}; "
              f"failed: {d['failed_folds'] or 'none'}")
        _print_summary(d)
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load_config(args)
    values = [yaml.safe_load(v) for v in args.values]
    results = sweep(cfg, args.param, values)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["value", "method", "alpha", "coverage", "mean_width", "gate_passed"])
    gate_ok = True
    for value, report in results:
        gate_ok &= report.gate_passed
        if not report.gate_passed:
            w.writerow([value, "", "", "", "", 0])
            continue
        agg = report.aggregate()
        for method, per in agg.items():
            for alpha, m in per.items():
                w.writerow([value, method, alpha, repr(m["coverage"]["mean"]),
                            repr(m["mean_width"]["mean"]), 1])
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        for i, (_, report) in enumerate(results):
            Path(args.out, f"sweep_{i}.json").write_text(
                report.to_json(include_metrics=report.gate_passed), encoding="utf-8")
    if not gate_ok:
        raise ConvergenceGateError("convergence gate failed for some sweep values")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="hierconformal",
                                description="Hybrid Bayesian-conformal intervals for "
                                            "hierarchically clustered outcomes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", help="generator (or experiment) config YAML")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("ingest", help="validate and summarise a CSV")
    i.add_argument("--csv", required=True)
    i.add_argument("--schema", required=True)
    i.set_defaults(func=cmd_ingest)

    def experiment_args(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. bayes.draws=500 (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--allow-unconverged", action="store_true",
                        help="report metrics even when MCMC diagnostics fail")

    r = sub.add_parser("run", help="run a cross-validated experiment")
    experiment_args(r)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="summarise a finished run")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--format", choices=("text", "csv"), default="text")
    rep.add_argument("--by", help="subgroup attribute (hospital, region, bed_size, ...)")
    rep.add_argument("--method", default="hybrid")
    rep.add_argument("--alpha", type=float, default=0.05)
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep", help="repeat a run over values of one parameter")
    experiment_args(s)
    s.add_argument("--param", required=True, help="'alpha' or a dotted config key")
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConvergenceGateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except HierConformalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
