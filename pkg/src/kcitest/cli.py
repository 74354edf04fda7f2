"""Command-line runner: ``kcitest <subcommand> [--config cfg.json] ...``.

The JSON config may hold ``scenario`` (ScenarioConfig fields), ``test``
(TestConfig fields), ``errors`` (RegressionErrorSpec), and per-command
sections ``sweep`` / ``oracle`` / ``bounds`` / ``generate``. Exit codes: 0 on
success, 2 for configuration errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .calibration import bootstrap_alignment_bound, cantelli_normal_threshold
from .errors import ConfigError, NumericalError
from .pipeline import TestConfig, rows_to_csv, run_experiment, run_methods, sweep
from .synthetic import (Dataset, RegressionErrorSpec, ScenarioConfig, generate, oracle_noisy_kci,
                        oracle_noisy_variance, oracle_snr_curve, oracle_variance)

log = logging.getLogger("kcitest")


def _load(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _scenario(cfg: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.from_dict(cfg.get("scenario", {}))
    except TypeError as exc:
        raise ConfigError(f"bad scenario section: {exc}") from exc


def _test_config(cfg: dict, args) -> TestConfig:
    section = dict(cfg.get("test", {}))
    if args.seed is not None:
        section["master_seed"] = args.seed
    try:
        return TestConfig.from_dict(section)
    except TypeError as exc:
        raise ConfigError(f"bad test section: {exc}") from exc


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _summary_rows(summaries) -> list[dict]:
    return [{"schema": 1, "method": s.method, "repetitions": s.repetitions, "rate": s.rate, "se": s.se}
            for s in summaries.values()]


def cmd_generate(args, cfg):
    n = int(cfg.get("generate", {}).get("n", args.n))
    data = generate(_scenario(cfg), n, args.seed or 0)
    if args.out is None:
        data.to_csv(sys.stdout)
    else:
        data.to_csv(args.out)


def cmd_test(args, cfg):
    tcfg = _test_config(cfg, args)
    scenario = _scenario(cfg)
    source = Dataset.from_csv(args.data) if args.data else scenario
    methods = args.method or [tcfg.method]
    results = run_methods(source, tcfg, methods, scenario=scenario)
    payload = {m: r.to_dict() for m, r in results.items()}
    if len(methods) == 1:
        payload = payload[methods[0]]
    _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)


def cmd_experiment(args, cfg):
    tcfg = _test_config(cfg, args)
    reps = args.repetitions or int(cfg.get("repetitions", 100))
    summaries = run_experiment(tcfg, _scenario(cfg), reps, args.method or None, args.threads)
    _emit(rows_to_csv(_summary_rows(summaries), ("schema", "method", "repetitions", "rate", "se")), args.out)


def cmd_sweep(args, cfg):
    tcfg = _test_config(cfg, args)
    section = cfg.get("sweep", {})
    axis = args.axis or section.get("axis")
    values = args.values or section.get("values")
    if axis is None or not values:
        raise ConfigError("sweep needs an axis and values")
    reps = args.repetitions or int(section.get("repetitions", 100))
    rows = sweep(tcfg, _scenario(cfg), axis, values, reps, args.method or None, args.threads)
    _emit(rows_to_csv(rows), args.out)


def cmd_oracle(args, cfg):
    scenario = _scenario(cfg)
    section = cfg.get("oracle", {})
    grid = section.get("grid", list(np.logspace(-2, 2, 20)))
    n = int(section.get("n", 200))
    if "errors" in cfg:
        err = RegressionErrorSpec.from_dict(cfg["errors"])
        rows = []
        for L in grid:
            mom = oracle_noisy_variance(err, scenario.tau, L, n)
            rows.append({"schema": 1, "ell_sq": L, "kci": oracle_noisy_kci(err, L), "var": mom.var_un, "snr": ""})
    else:
        beta = scenario.beta if scenario.hypothesis == "alternative" else 0.0
        if beta == 0.0:
            # no signal: KCI and its leading variance vanish, so the SNR is undefined
            rows = []
            for L in grid:
                mom = oracle_variance(scenario.tau, 0.0, L, n)
                rows.append({"schema": 1, "ell_sq": L, "kci": mom.u_mean, "var": mom.var_un, "snr": ""})
        else:
            curve = oracle_snr_curve(scenario.tau, beta, grid, n)
            rows = [{"schema": 1, **r} for r in curve.to_rows()]
    _emit(rows_to_csv(rows, ("schema", "ell_sq", "kci", "var", "snr")), args.out)


def cmd_bounds(args, cfg):
    section = cfg.get("bounds", {})
    report = {}
    if "threshold" in section:
        t = section["threshold"]
        q1, q2 = cantelli_normal_threshold(t["kci_hat"], t["var_kci_n"], int(t["n"]), t.get("rho", 0.05))
        report["threshold"] = {"q_cantelli": q1, "q_normal": q2}
    if "alignment" in section:
        a = section["alignment"]
        H = np.loadtxt(a["h_path"], delimiter=",", ndmin=2) if "h_path" in a else np.asarray(a["h"], dtype=float)
        report["alignment"] = bootstrap_alignment_bound(H, a["kci_hat"], a["var_kci_n"]).to_dict()
    if not report:
        raise ConfigError("bounds section needs 'threshold' and/or 'alignment'")
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)


COMMANDS = {
    "generate": cmd_generate,
    "test": cmd_test,
    "experiment": cmd_experiment,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "bounds": cmd_bounds,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kcitest", description="Kernel conditional independence testing")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output path (default: stdout)")
        p.add_argument("--repetitions", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "generate":
            p.add_argument("--n", type=int, default=400)
        if name in ("test", "experiment", "sweep"):
            p.add_argument("--method", action="append", help="repeatable; defaults to the config's method")
        if name == "test":
            p.add_argument("--data", help="CSV dataset instead of generating from the scenario")
        if name == "sweep":
            p.add_argument("--axis", choices=("ell_sq", "beta", "train_size"))
            p.add_argument("--values", type=float, nargs="+")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, _load(args.config))
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
