"""Command-line front end: configuration, phase orchestration and report I/O."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .errors import ConfigurationError, LevyscaleError, ScheduleError
from .harness import (
    ErrorReport,
    ErrorRow,
    ExperimentConfig,
    analytic_drifts,
    run_strong_experiment,
    run_weak_experiment,
    tabulate_drift,
)
from .model import DEFAULT_SCHEDULES, make_model, make_schedule
from .stats import RateFit

#: Every configurable key with its default.  Echoed into each RunManifest.
DEFAULTS = {
    "model": "linear",
    "model_params": {},
    "regime": "R1",
    "e": None,  # None: the regime's default schedule
    "g": None,
    "b": None,
    "eps_grid": [2.0**-k for k in range(3, 9)],
    "T": 1.0,
    "p": 1.0,
    "phi_list": ["cos", "tanh"],
    "reps": 2000,
    "mom_groups": 30,
    "kappa_cfl": 20.0,
    "seed": 0,
    "checkpoints": [0.25, 0.5, 0.75, 1.0],
    "x0": 0.5,
    "y0": 0.5,
    "threads": 1,
    "refine": True,
    "drift_source": "analytic",
    "alpha": 1.5,
    "v": None,  # None: v = alpha1
}

CSV_HEADER = ("eps", "error", "spread", "predictor", "regime", "stat")
JSON_KEYS = ("kind", "regime", "rows", "fits", "predictor_slope", "meta")
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def resolve_config(doc: dict) -> dict:
    """Fill defaults into a configuration mapping and reject unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigurationError("configuration must be a JSON object", key=None)
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ConfigurationError(f"unknown configuration key {unknown[0]!r}", key=unknown[0])
    cfg = json.loads(json.dumps(DEFAULTS))
    cfg.update(doc)
    return cfg


def parse_config(text) -> ExperimentConfig:
    """Parse a JSON document into a validated :class:`ExperimentConfig`."""
    try:
        doc = json.loads(text) if isinstance(text, (str, bytes)) else text
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"malformed configuration: {exc}", key=None) from exc
    cfg = resolve_config(doc)
    return config_from_dict(cfg)


def config_from_dict(cfg: dict) -> ExperimentConfig:
    regime = cfg["regime"]
    if regime not in DEFAULT_SCHEDULES:
        raise ConfigurationError(f"unknown regime {regime!r}", key="regime")
    params = dict(cfg["model_params"])
    alpha = float(cfg["alpha"])
    params.setdefault("alpha1", alpha)
    params.setdefault("alpha2", alpha)
    v = params["alpha1"] if cfg["v"] is None else float(cfg["v"])
    params.setdefault("v", v)
    p = float(cfg["p"])
    if not p < min(params["alpha1"], params["alpha2"]):
        raise ConfigurationError("p must be < min(alpha1, alpha2)", key="p")
    groups = int(cfg["mom_groups"])
    if groups < 1:
        raise ConfigurationError("mom_groups must be at least 1", key="mom_groups")
    # median-of-means needs equal groups: round replicates up to the next multiple
    reps = -(-int(cfg["reps"]) // groups) * groups
    cfg["reps"] = reps
    defaults = DEFAULT_SCHEDULES[regime]
    e, g, b = (defaults[i] if cfg[k] is None else float(cfg[k]) for i, k in enumerate(("e", "g", "b")))
    schedule = make_schedule(regime, e, g, b, alpha2=params["alpha2"], v=v)
    return ExperimentConfig(
        model=cfg["model"],
        regime=regime,
        schedule=schedule,
        eps_grid=tuple(cfg["eps_grid"]),
        model_params=params,
        T=float(cfg["T"]),
        p=p,
        phi_list=tuple(cfg["phi_list"]),
        reps=reps,
        mom_groups=groups,
        kappa_cfl=float(cfg["kappa_cfl"]),
        seed=int(cfg["seed"]),
        checkpoints=tuple(cfg["checkpoints"]),
        x0=float(cfg["x0"]),
        y0=float(cfg["y0"]),
        threads=int(cfg["threads"]),
        refine=bool(cfg["refine"]),
        drift_source=str(cfg["drift_source"]),
    )


# ---------------------------------------------------------------------------
# Report I/O


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_report(report: ErrorReport, path, fmt=None):
    """Write a report as CSV (rows only) or JSON (everything); floats use repr."""
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_HEADER)
                for r in report.rows:
                    w.writerow([repr(float(r.eps)), repr(float(r.error)), repr(float(r.spread)),
                                repr(float(r.predictor)), r.regime, r.stat])
        elif fmt == "json":
            doc = {
                "kind": report.kind,
                "regime": report.regime,
                "rows": [asdict(r) for r in report.rows],
                "fits": {k: asdict(v) for k, v in report.fits.items()},
                "predictor_slope": report.predictor_slope,
                "meta": report.meta,
            }
            with open(path, "w") as fh:
                json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
                fh.write("\n")
        else:
            raise ConfigurationError(f"unknown report format {fmt!r}", key="format")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def read_report(path, fmt=None) -> ErrorReport:
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    if fmt == "csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ConfigurationError(f"unexpected CSV header {header}", key="header")
            rows = [ErrorRow(float(a), float(b), float(c), float(d), e, f) for a, b, c, d, e, f in reader]
        regime = rows[0].regime if rows else ""
        return ErrorReport("", regime, rows, {}, float("nan"), {})
    with open(path) as fh:
        doc = json.load(fh)
    missing = set(JSON_KEYS) - set(doc)
    if missing:
        raise ConfigurationError(f"report lacks keys {sorted(missing)}", key=sorted(missing)[0])
    rows = [ErrorRow(**r) for r in doc["rows"]]
    fits = {k: RateFit(v["slope"], v["intercept"], v["r2"], tuple(v["ci"]), v["n_points"]) for k, v in doc["fits"].items()}
    return ErrorReport(doc["kind"], doc["regime"], rows, fits, doc["predictor_slope"], doc["meta"])


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    defaults: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULTS)))
    artifacts: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    version: str = __version__
    phases: dict = field(default_factory=dict)

    def phase(self, name):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.phases[name] = time.perf_counter() - self.t0

        return _Timer()

    def write(self, out_dir):
        path = os.path.join(out_dir, "manifest.json")
        self.artifacts.append(path)
        doc = asdict(self)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


# ---------------------------------------------------------------------------
# Commands


def _threads(args):
    if args.threads is not None:
        return int(args.threads)
    env = os.environ.get("LEVYSCALE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(f"LEVYSCALE_THREADS must be an integer, got {env!r}", key="threads")
    return None


def _load_cfg(args):
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}", key="config")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"malformed configuration: {exc}", key=None) from exc
    for key, val in (("model", args.model), ("regime", args.regime), ("seed", args.seed)):
        if val is not None:
            doc[key] = val
    threads = _threads(args)
    if threads is not None:
        doc["threads"] = threads
    return resolve_config(doc)


def _out(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True, default=_json_default) + "\n")


def cmd_validate(args, cfg, manifest):
    from .model import validate_structural_conditions
    from .noise import RngStream

    model = make_model(cfg["model"], **cfg["model_params"])
    with manifest.phase("validate"):
        report = validate_structural_conditions(model, rng=RngStream(int(cfg["seed"])))
    doc = report.as_dict()
    _emit(doc)
    return EXIT_OK if not any(c["flag"] == "fail" for c in doc["checks"]) else EXIT_RUNTIME


def cmd_noise_test(args, cfg, manifest):
    from .noise import RngStream, empirical_cf_check, stable_increment_1d

    n = 10**6
    out = {}
    with manifest.phase("noise-test"):
        for i, alpha in enumerate((1.2, 1.5, 1.8)):
            s = stable_increment_1d(alpha, 1.0, 1.0, RngStream(int(cfg["seed"])).child(i), size=n)
            dev = empirical_cf_check(s, [0.25, 0.5, 1.0, 2.0], alpha, 1.0)
            out[str(alpha)] = {"max_deviation": dev, "tolerance": 5.0 / math.sqrt(n), "pass": dev <= 5.0 / math.sqrt(n)}
    _emit(out)
    return EXIT_OK if all(v["pass"] for v in out.values()) else EXIT_RUNTIME


def cmd_simulate(args, cfg, manifest):
    from .integrator import choose_step, simulate_coupled

    config = config_from_dict(cfg)
    model = config.build_model()
    eps = config.eps_grid[0]
    out = _out(args)
    with manifest.phase("simulate"):
        h = choose_step(eps, config.schedule, config.kappa_cfl)
        n = int(math.ceil(config.T / h - 1e-9))
        path = simulate_coupled(model, config.schedule, eps, config.x0, config.y0, config.T, config.T / n, config.seed)
    target = os.path.join(out, "path.csv")
    with open(target, "w") as fh:
        fh.write("t,x,y\n")
        for t, x, y in zip(path.times, path.xs[:, 0], path.ys[:, 0]):
            fh.write(",".join(repr(float(v)) for v in (t, x, y)) + "\n")
    manifest.artifacts.append(target)
    return EXIT_OK


def cmd_invariant(args, cfg, manifest):
    from .ergodics import contraction_diagnostic, sample_invariant

    model = make_model(cfg["model"], **cfg["model_params"])
    x = float(cfg["x0"])
    out = _out(args)
    with manifest.phase("contraction"):
        con = contraction_diagnostic(model, x, 0.0, 1.0, rng=int(cfg["seed"]))
    with manifest.phase("invariant"):
        ens = sample_invariant(model, x, rng=int(cfg["seed"]), rate=con.rate)
    target = os.path.join(out, "ensemble.csv")
    ens.to_csv(target)
    manifest.artifacts.append(target)
    _emit({"x": x, "rate": con.rate, "beta_hat": con.beta_hat, "n": ens.n, "burn_in": ens.burn_in})
    return EXIT_OK


def cmd_corrector(args, cfg, manifest):
    from .corrector import cached_estimate_u
    from .ergodics import estimate_rate

    model = make_model(cfg["model"], **cfg["model_params"])
    x = float(cfg["x0"])
    with manifest.phase("contraction"):
        beta_hat = 2.0 * estimate_rate(model, x, rng=int(cfg["seed"]))
    ys = np.linspace(-4.0, 4.0, 9).reshape(-1, 1)
    cache = args.cache or os.path.join(_out(args), "cache")
    with manifest.phase("corrector"):
        est = cached_estimate_u(cache, model, "H", 0.0, x, ys, beta_hat=beta_hat, rng=int(cfg["seed"]))
    out = _out(args)
    target = os.path.join(out, "corrector.csv")
    with open(target, "w") as fh:
        fh.write("y,u,se,trunc_bound\n")
        for y, u, s, tb in zip(ys[:, 0], est.u_value[:, 0], est.se[:, 0], est.trunc_bound[:, 0]):
            fh.write(",".join(repr(float(v)) for v in (y, u, s, tb)) + "\n")
    manifest.artifacts.append(target)
    return EXIT_OK


def _drifts_for(config, model, manifest):
    if config.drift_source == "analytic":
        return analytic_drifts(model, config.regime)
    if config.drift_source != "tabulated":
        raise ConfigurationError("drift_source must be 'analytic' or 'tabulated'", key="drift_source")
    from .integrator import REGIME_DRIFTS

    t_grid = np.linspace(0.0, config.T, 5)
    x_grid = np.linspace(-6.0, 6.0, 17)
    out = {}
    with manifest.phase("drift-tabulation"):
        for i, kind in enumerate(sorted(REGIME_DRIFTS[config.regime])):
            out[kind] = tabulate_drift(model, kind, t_grid, x_grid, rng=config.seed + i)
    return out


def _cmd_rate(kind):
    def run(args, cfg, manifest):
        config = config_from_dict(cfg)
        if kind == "strong" and config.regime not in ("R1", "R2"):
            from .harness import STRONG_IMPOSSIBLE

            raise ConfigurationError(STRONG_IMPOSSIBLE.format(regime=config.regime), key="regime")
        model = config.build_model()
        drifts = _drifts_for(config, model, manifest)
        with manifest.phase(f"{kind}-rate"):
            runner = run_strong_experiment if kind == "strong" else run_weak_experiment
            report = runner(config, drifts=drifts, model=model)
        report.meta.pop("wall_time", None)
        out = _out(args)
        for fmt in ("csv", "json"):
            target = os.path.join(out, f"{kind}_{config.regime}.{fmt}")
            write_report(report, target, fmt)
            manifest.artifacts.append(target)
        manifest.seeds = {"seed": config.seed}
        _emit({"kind": kind, "regime": config.regime, "predictor_slope": report.predictor_slope,
               "slopes": {k: v.slope for k, v in report.fits.items()}})
        return EXIT_OK

    return run


COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "invariant": cmd_invariant,
    "corrector": cmd_corrector,
    "strong-rate": _cmd_rate("strong"),
    "weak-rate": _cmd_rate("weak"),
    "noise-test": cmd_noise_test,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="levyscale", description="Averaging experiments for Levy-driven slow-fast systems.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--model", help="built-in model name")
    parser.add_argument("--regime", help="regime tag R1..R4")
    parser.add_argument("--seed", type=int, help="64-bit seed")
    parser.add_argument("--threads", type=int, help="worker threads (default: LEVYSCALE_THREADS or 1)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--cache", help="cache directory for corrector estimates")
    return parser


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(message)


def run_command(argv=None):
    """Run one CLI command; returns ``(exit_status, manifest or None)``."""
    parser = build_parser()
    parser.__class__ = _Parser
    try:
        args = parser.parse_args(argv)
    except _ArgError as exc:
        _emit({"error": "ConfigurationError", "message": str(exc), "key": None})
        return EXIT_CONFIG, None
    manifest = None
    try:
        cfg = _load_cfg(args)
        manifest = RunManifest(command=args.command, config=cfg)
        status = COMMANDS[args.command](args, cfg, manifest)
        if args.out and status == EXIT_OK:
            manifest.write(args.out)
        return status, manifest
    except (ConfigurationError, ScheduleError) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc), "key": getattr(exc, "key", None)})
        return EXIT_CONFIG, manifest
    except (LevyscaleError, OSError, ValueError, ArithmeticError) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return EXIT_RUNTIME, manifest


def main(argv=None):
    status, _ = run_command(argv)
    return status


if __name__ == "__main__":
    sys.exit(main())
