"""Command line front-end.

Subcommands::

    fedci run --config SCENARIO.yaml [--seed N] [--out DIR] [--jobs J] [--format csv|json]
    fedci report REPORT.json [REPORT.json ...] [--out DIR] [--format csv|json]
    fedci dump-data --config SCENARIO.yaml [--seed N] [--out DIR] [--replicate R]
    fedci list-scenarios

``--config`` accepts a path or the name of a bundled scenario. Exit codes:
0 when every verdict passes, 1 on a verdict or estimator failure, 2 on a
usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import yaml

from .config import bundled_scenarios, check_estimators, load_config, scenario_path
from .dgp import gen_linear_sites, gen_survival_sites, replicate_seed, write_samples_csv
from .errors import ConfigError
from .mc import SCHEMA_VERSION, check_theorems, default_claims, run_mc
from .mc.harness import fmt

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

MERGED_METRICS = ("bias", "variance", "mse", "predicted_variance")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="fedci", description="Federated causal inference experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a Monte Carlo scenario and check the claims")
    r.add_argument("--config", required=True, help="YAML config or bundled scenario name")
    r.add_argument("--seed", type=int, help="master seed (overrides FEDCI_SEED and the config)")
    r.add_argument("--out", help="output directory (overrides FEDCI_OUT and the config)")
    r.add_argument("--jobs", type=int, help="worker processes; never changes the numbers")
    r.add_argument("--format", choices=("csv", "json"), action="append", help="report format (repeatable)")

    m = sub.add_parser("report", help="merge report.json files into a comparison table")
    m.add_argument("reports", nargs="+", help="report.json files or run directories")
    m.add_argument("--out", help="directory for merged.csv / merged.txt (default: print only)")
    m.add_argument("--format", choices=("csv", "json"), action="append")

    d = sub.add_parser("dump-data", help="write one replicate's site data as CSV")
    d.add_argument("--config", required=True)
    d.add_argument("--seed", type=int)
    d.add_argument("--out")
    d.add_argument("--replicate", type=int, default=0)

    sub.add_parser("list-scenarios", help="list the bundled scenarios")
    return p


# --------------------------------------------------------------------------
# run


def _write_logs(report, out_dir):
    names = sorted(report.logs)
    with open(os.path.join(out_dir, "roundlog.json"), "w") as fh:
        json.dump({n: report.logs[n] for n in names}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "roundlog.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "protocol", "round", "label", "site", "up", "down", "p2p"])
        for n in names:
            log = report.logs[n]
            for rec in log["rounds"]:
                for s, u, v, q in zip(log["site_ids"], rec["up"], rec["down"], rec["p2p"]):
                    w.writerow([n, log["protocol"], rec["round"], rec["label"], s, u, v, q])


def _header(cfg, report):
    truth = ", ".join(fmt(t) for t in report.truth)
    return [
        f"# scenario: {cfg.scenario}",
        f"# family: {report.family}",
        f"# target: {report.target} = [{truth}]",
        f"# replicates: {report.replicates}, seed: {report.seed}",
    ]


def _dump(spec, family, seed, r, out_dir):
    s = replicate_seed(seed, r)
    samples = gen_linear_sites(spec, s) if family == "linear" else gen_survival_sites(spec, s)
    path = os.path.join(out_dir, f"data_replicate{r}.csv")
    write_samples_csv(samples, path)
    return path


def cmd_run(args):
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    check_estimators(cfg)
    mc = cfg.mc_config(jobs=args.jobs)
    formats = tuple(args.format) if args.format else tuple(cfg.output.formats)
    out_dir = cfg.output.dir
    os.makedirs(out_dir, exist_ok=True)

    report = run_mc(mc)
    report.write(out_dir, formats)
    _write_logs(report, out_dir)
    if cfg.output.dump_data:
        _dump(mc.spec, mc.family, mc.seed, 0, out_dir)

    claims = cfg.mc.claims if cfg.mc.claims is not None else default_claims(report)
    verdicts = check_theorems(report, tolerances=cfg.tolerances(), claims=claims)
    lines = _header(cfg, report)
    failed = False
    for name in report.samples:
        fails = report.failures[name]
        if fails:
            failed = True
            lines.append(f"FAIL {name} estimator failures: {len(fails)}/{report.replicates} replicates (first: {fails[0][1]})")
    for v in verdicts:
        lines.append(v.line())
        failed = failed or not v.passed
    if not verdicts:
        lines.append("# no claims apply to this estimator set")
    lines.append(f"# overall: {'FAIL' if failed else 'PASS'}")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "verdicts.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_FAIL if failed else EXIT_OK


# --------------------------------------------------------------------------
# report


def _load_report(path):
    if os.path.isdir(path):
        path = os.path.join(path, "report.json")
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read report {path!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a JSON report ({exc})") from None
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version {data.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    return data


def _metric_columns(data):
    """``(column, index)`` pairs for the scalar metrics of a report."""
    comps = data["components"]
    cols = []
    for m in MERGED_METRICS:
        for i, c in enumerate(comps):
            cols.append((m if len(comps) == 1 else f"{m}[{c}]", m, i))
    return cols


def merge_reports(reports):
    """Side-by-side table: one row per estimator, a column group per input.

    Each group has bias, variance, MSE and predicted variance per component,
    then ``Comm. Rounds`` and ``Comm. Scalars`` from the round logs. With two
    or more inputs a final ``max |diff|`` row gives, per column, the largest
    difference from the first input over all estimators.
    """
    families = {r["family"] for r in reports}
    if len(families) > 1:
        raise ConfigError(f"cannot merge reports of different families: {sorted(families)}")
    cols = _metric_columns(reports[0])
    names = []
    for r in reports:
        for n in r["estimators"]:
            if n not in names:
                names.append(n)
    header = ["estimator"]
    for i, r in enumerate(reports):
        tag = f"r{i + 1}"
        header += [f"{tag}:{c}" for c, _, _ in cols] + [f"{tag}:Comm. Rounds", f"{tag}:Comm. Scalars"]
    rows = []
    values = {}
    for n in names:
        row = [n]
        for i, r in enumerate(reports):
            est = r["estimators"].get(n, {})
            comm = (r.get("communication") or {}).get(n)
            for c, m, j in cols:
                v = est.get(m, {}).get("value", [None] * (j + 1))[j]
                values[(n, i, c)] = v
                row.append("" if v is None else fmt(v))
            row += ["" if comm is None else str(comm["rounds"]), "" if comm is None else str(comm["scalars"])]
        rows.append(row)
    if len(reports) > 1:
        diff = ["max |diff|"]
        for i in range(len(reports)):
            for c, _, _ in cols:
                ds = [
                    abs(values[(n, i, c)] - values[(n, 0, c)])
                    for n in names
                    if values.get((n, i, c)) is not None and values.get((n, 0, c)) is not None
                ]
                diff.append(fmt(max(ds)) if ds else "")
            diff += ["", ""]
        rows.append(diff)
    return header, rows


def _text_table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt_row = lambda r: "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()
    lines = [fmt_row(header), fmt_row(["-" * w for w in widths])]
    lines += [fmt_row(r) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(args):
    reports = [_load_report(p) for p in args.reports]
    header, rows = merge_reports(reports)
    text = _text_table(header, rows)
    sys.stdout.write(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        formats = args.format or ["csv", "json"]
        with open(os.path.join(args.out, "merged.txt"), "w") as fh:
            fh.write(text)
        if "csv" in formats:
            with open(os.path.join(args.out, "merged.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
        if "json" in formats:
            with open(os.path.join(args.out, "merged.json"), "w") as fh:
                json.dump({"schema_version": SCHEMA_VERSION, "header": header, "rows": rows}, fh, indent=2)
                fh.write("\n")
    return EXIT_OK


# --------------------------------------------------------------------------


def cmd_dump_data(args):
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    mc = cfg.mc_config()
    if args.replicate < 0:
        raise ConfigError("--replicate must be nonnegative")
    os.makedirs(cfg.output.dir, exist_ok=True)
    print(_dump(mc.spec, mc.family, mc.seed, args.replicate, cfg.output.dir))
    return EXIT_OK


def cmd_list_scenarios(args):
    for name in bundled_scenarios():
        with open(scenario_path(name)) as fh:
            desc = (yaml.safe_load(fh) or {}).get("description", "")
        print(f"{name}\t{desc}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "report": cmd_report,
    "dump-data": cmd_dump_data,
    "list-scenarios": cmd_list_scenarios,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
