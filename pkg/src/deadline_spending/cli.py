"""Command-line entry point.

Every run reads one JSON config; ``--set a.b=value`` overrides a field
(the value is parsed as JSON when possible).  Outputs are CSV/JSON files
carrying the config hash and package version, and never a timestamp, so
identical configs reproduce identical files.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (PROPERTY_IDS, default_battery, format_table, verify_all)
from .errors import DomainError, PreconditionError, SolverError
from .policy import (cutoffs, lambda_misperception_policy, misperceived_theta,
                     saving_rule_from_row)
from .simulator import (CorrelatedBernoulli, batch_to_csv, config_hash,
                        double_payment_value, simulate_batch)
from .utility import UtilitySpec, is_more_concave, zeta_from_dict
from .value_solver import ModelParams, TwoPaymentSpec, solve, solve_two_payment

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def load_config(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc


def apply_overrides(config, assignments):
    config = copy.deepcopy(config)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config


def _section(config, name):
    if name not in config:
        raise ConfigError(f"config lacks the '{name}' section")
    return config[name]


def _spec(config):
    return UtilitySpec.from_dict(_section(config, "utility"))


def _params(config):
    return ModelParams.from_dict(_section(config, "model"))


def _header(config, command):
    return {"command": command, "config_hash": config_hash(config), "version": __version__}


def _write(out, name, text):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _csv(header, columns, rows):
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_solve(config, out, args):
    spec, params = _spec(config), _params(config)
    grid = solve(spec, params)
    h = _header(config, "solve")
    _write(out, "value_grid.csv", grid.to_csv(h))
    _write(out, "value_grid.json", grid.to_json(h) + "\n")
    return EXIT_OK


def cmd_cutoffs(config, out, args):
    spec, params = _spec(config), _params(config)
    if params.n < 1:
        raise ConfigError("cutoffs need model.n >= 1")
    table = cutoffs(solve(spec, params), spec)
    _write(out, "cutoffs.csv", table.to_csv(_header(config, "cutoffs")))
    return EXIT_OK


def cmd_simulate(config, out, args):
    spec, params = _spec(config), _params(config)
    sim = _section(config, "simulate")
    n_paths = int(sim.get("n_paths", 100000))
    if n_paths < 1:
        raise ConfigError("simulate.n_paths must be positive")
    x0 = int(sim.get("x0", params.n))
    t0 = float(sim.get("t0", params.t_min))
    if not params.t_min <= t0 <= params.T:
        raise ConfigError("simulate.t0 must lie in [model.t_min, model.T]")
    grid = solve(spec, params)
    res = simulate_batch(grid, spec, x0, t0, n_paths, args.seed, threads=args.threads)
    h = _header(config, "simulate")
    v = grid.value(t0, x0)
    summary = {**res.summary(), **h, "seed": args.seed, "x0": x0, "t0": t0, "value": v,
               "z_score": (res.mean - v) / res.stderr if res.stderr > 0 else 0.0}
    _write(out, "summary.json", _json(summary))
    if sim.get("write_traces", False):
        _write(out, "traces.csv", batch_to_csv(res, {**h, "seed": args.seed}))
    return EXIT_OK


def cmd_two_payment(config, out, args):
    spec, params = _spec(config), _params(config)
    tp_cfg = _section(config, "two_payment")
    tp = TwoPaymentSpec(params, int(tp_cfg.get("x", 1)), int(tp_cfg.get("x_bar", 1)),
                        float(tp_cfg["t_bar"]))
    v_grid = solve(spec, params)
    vt = solve_two_payment(spec, tp, v_grid)
    h = _header(config, "two-payment")
    _write(out, "two_payment_grid.csv", vt.to_csv(h))
    corr = config.get("correlation")
    if corr is None:
        return EXIT_OK
    p1, p2 = float(corr["p1"]), float(corr["p2"])
    lo, hi = CorrelatedBernoulli.c_range(p1, p2)
    cs = corr.get("c", list(np.linspace(lo, hi, int(corr.get("c_points", 5)))))
    dists = [CorrelatedBernoulli(p1, p2, float(c)) for c in cs]
    n_t = int(corr.get("t_points", 50))
    ts = np.linspace(params.t_min, tp.t_bar, n_t + 1)[:-1]
    rows = []
    for t in ts:
        for d in dists:
            e, de = double_payment_value(v_grid, vt, tp, d, t)
            rows.append((float(t), d.c, e, de, int(de > 0)))
    _write(out, "correlation_sweep.csv", _csv(h, ["t", "c", "E", "dE_dc", "dE_dc_positive"], rows))
    return EXIT_OK


def cmd_procrastinate(config, out, args):
    spec, params = _spec(config), _params(config)
    pc = _section(config, "procrastinate")
    points = int(pc.get("lattice", 50))
    x_max = min(int(pc.get("x_max", params.n)), params.n)
    kappa = float(pc.get("kappa", 1.0))
    grid = solve(spec, params)
    believed = None
    if "believed_zeta" in pc:
        believed = UtilitySpec(zeta_from_dict(pc["believed_zeta"]), spec.mu)
        if not is_more_concave(spec, believed):
            raise ConfigError("procrastinate.believed_zeta must be strictly more concave than the true zeta")
        b_grid = solve(believed, params)
    # the lambda-misperceiving agent needs times T + kappa (t - T) on the grid
    t_lo = params.T - (params.T - params.t_min) / kappa
    thetas = np.linspace(0.0, 1.0, points)
    times = np.linspace(t_lo, params.T, points)
    rows = []
    for t in times:
        row = grid.row(t)
        b_row = b_grid.row(t) if believed else None
        for th in thetas:
            th_b = misperceived_theta(spec, believed, th) if believed else None
            for x in range(1, x_max + 1):
                acc = saving_rule_from_row(spec, row, th, x)
                zt = saving_rule_from_row(believed, b_row, th_b, x) if believed else ""
                lt = lambda_misperception_policy(spec, grid, kappa, th, t, x)
                rows.append((float(t), float(th), x, acc, zt, lt))
    _write(out, "policies.csv", _csv(_header(config, "procrastinate"),
                                     ["t", "theta", "x", "accurate", "zeta_tilde", "lambda_tilde"], rows))
    return EXIT_OK


def _battery(config):
    vc = config.get("verify", {})
    bat = vc.get("battery", "default")
    if bat == "default":
        return default_battery()
    if not isinstance(bat, list) or not bat:
        raise ConfigError("verify.battery must be 'default' or a non-empty list")
    return [(UtilitySpec.from_dict(b["utility"]), ModelParams.from_dict(b["model"])) for b in bat]


def cmd_verify(config, out, args):
    vc = config.get("verify", {})
    props = vc.get("properties")
    for p in props or ():
        if p not in PROPERTY_IDS:
            raise ConfigError(f"unknown property id {p!r}")
    reports = verify_all(_battery(config), tolerances=vc.get("tolerances"), properties=props,
                         fault=vc.get("inject_fault"), workers=max(1, args.threads))
    h = _header(config, "verify")
    failed = [r for r in reports if r.status == "fail"]
    doc = {**h, "n_reports": len(reports), "n_failed": len(failed),
           "reports": [r.to_dict() for r in reports]}
    _write(out, "report.json", _json(doc))
    _write(out, "report.txt", format_table(reports) + "\n")
    print(f"{len(reports)} checks, {len(failed)} failed")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "cutoffs": cmd_cutoffs,
    "simulate": cmd_simulate,
    "two-payment": cmd_two_payment,
    "procrastinate": cmd_procrastinate,
    "verify": cmd_verify,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="deadline-spending", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. model.n=3")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        config = apply_overrides(load_config(args.config), args.set)
        return COMMANDS[args.command](config, Path(args.out), args)
    except (ConfigError, DomainError, PreconditionError, KeyError, TypeError, ValueError) as exc:
        msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
