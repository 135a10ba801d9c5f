"""Scenario runner: ``pulsedrf run <config.ini>``.

A config is an INI file with a ``[run]`` section naming the scenario, one
section carrying that scenario's physical parameters and an optional
``[numerics]`` section::

    [run]
    scenario = pn-vs-area
    seed = 1

    [pn-vs-area]
    theta_pi = 0:10:0.05
    tau_d = 0.1

Lists are comma separated; ``start:stop:step`` is an inclusive range. Pulse
areas are given in units of pi, every other quantity in units of the emitter
decay rate. Results go to ``<out>/<scenario>/<name>.csv`` together with
``<out>/manifest.json``.

Exit status: 0 on success (also when a result is only flagged as
unconverged), 2 for an invalid configuration, 3 when a solve fails.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .correlators import g2_frequency_point, spectrum
from .counting import (
    bin_moments_one_mode,
    intensity_moments_one_mode,
    pmn_from_moments,
    pn_from_moments,
    purities,
    scan_pmn_filtered,
    scan_pmn_one_mode,
)
from .engine import DEFAULT_ATOL, DEFAULT_RTOL, TAIL_TOLERANCE
from .model import make_model
from .sweep import SweepError, sweep_parallel
from .trajectories import (
    DEFAULT_CHUNK,
    TIME_TOLERANCE,
    estimate_probabilities,
    make_unraveling,
    run_ensemble,
)

log = logging.getLogger("pulsedrf")

SCHEMA_VERSION = 1
WORKERS_ENV = "PULSEDRF_WORKERS"

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing


def parse_values(text: str) -> list[float]:
    """``"1, 2.5"`` or the inclusive range ``"start:stop:step"``."""
    text = text.strip()
    if not text:
        raise ConfigError("empty value list")
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3:
            raise ConfigError(f"range must be start:stop:step, got {text!r}")
        start, stop, step = parts
        if step <= 0 or stop < start:
            raise ConfigError(f"bad range {text!r}")
        n = int(round((stop - start) / step)) + 1
        return list(np.linspace(start, start + (n - 1) * step, n))
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"not a number list: {text!r}") from exc


# key -> (kind, default); kind is "float", "int", "list" or "str"
COMMON = {
    "tau_d": ("float", 0.1),
    "detuning": ("float", 0.0),
    "coupling": ("float", 1e-3),
}
SCENARIOS = {
    "pn-vs-area": {"theta_pi": ("list", None), "n_max": ("int", 4)},
    "pmn-vs-T": {"theta_pi": ("float", None), "T": ("list", None), "linewidth": ("float", 0.0),
                 "filter_detuning": ("float", 0.0), "n_max": ("int", 4),
                 "method": ("str", "auto")},
    "spectrum-map": {"theta_pi": ("list", None), "omega": ("list", "auto"),
                     "n_omega": ("int", 401), "dtau": ("float", 0.0)},
    "g2-frequency-map": {"theta_pi": ("float", None), "linewidth": ("float", None),
                         "omega": ("list", "auto"), "n_omega": ("int", 41)},
    "timebin-purities": {"theta_pi": ("list", None), "T": ("list", None),
                         "linewidth": ("float", 0.0), "filter_detuning": ("float", 0.0)},
    "mc-validate": {"theta_pi": ("float", None), "T": ("list", None), "linewidth": ("float", 0.0),
                    "filter_detuning": ("float", 0.0), "trajectories": ("int", 100000),
                    "n_max": ("int", 4), "method": ("str", "auto")},
}
NUMERICS = {"rtol": ("float", DEFAULT_RTOL), "atol": ("float", DEFAULT_ATOL),
            "chunk": ("int", DEFAULT_CHUNK)}
RUN = {"scenario": ("str", None), "name": ("str", ""), "seed": ("int", 0), "workers": ("int", 1)}


def _convert(kind, raw, key):
    try:
        if kind == "float":
            return float(raw)
        if kind == "int":
            v = float(raw)
            if v != int(v):
                raise ValueError
            return int(v)
        if kind == "list":
            return parse_values(raw)
        return raw.strip()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from exc


def _read_section(parser, section, schema) -> dict:
    raw = dict(parser.items(section)) if parser.has_section(section) else {}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    out = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            out[key] = _convert(kind, raw[key], key)
        elif default is None:
            raise ConfigError(f"[{section}] missing required key {key!r}")
        else:
            out[key] = default
    return out


@dataclass
class ScenarioConfig:
    scenario: str
    name: str
    seed: int
    workers: int
    params: dict
    numerics: dict
    echo: dict = field(default_factory=dict)


def load_config(path) -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    echo = {s: dict(parser.items(s)) for s in parser.sections()}
    run = _read_section(parser, "run", RUN)
    scen = run["scenario"]
    if scen not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scen!r}; choose from {', '.join(SCENARIOS)}")
    extra = set(parser.sections()) - {"run", "numerics", scen}
    if extra:
        raise ConfigError(f"unexpected sections: {', '.join(sorted(extra))}")
    params = _read_section(parser, scen, {**COMMON, **SCENARIOS[scen]})
    numerics = _read_section(parser, "numerics", NUMERICS)
    cfg = ScenarioConfig(scen, run["name"] or _DEFAULT_NAMES[scen], run["seed"], run["workers"],
                         params, numerics, echo)
    validate(cfg)
    return cfg


def _positive(params, *keys):
    for k in keys:
        v = params[k]
        vals = v if isinstance(v, list) else [v]
        if not all(np.isfinite(x) and x > 0 for x in vals):
            raise ConfigError(f"{k} must be positive")


def validate(cfg: ScenarioConfig) -> None:
    """Check the parameter subset of the scenario before anything is solved."""
    p = cfg.params
    _positive(p, "tau_d", "coupling")
    _positive(cfg.numerics, "rtol", "atol", "chunk")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    for k, v in p.items():
        vals = v if isinstance(v, list) else [v]
        if any(isinstance(x, float) and not math.isfinite(x) for x in vals):
            raise ConfigError(f"{k} must be finite")
    thetas = p["theta_pi"] if isinstance(p["theta_pi"], list) else [p["theta_pi"]]
    if any(t < 0 for t in thetas):
        raise ConfigError("pulse areas must be non-negative")
    if "T" in p and any(t < 0 for t in p["T"]):
        raise ConfigError("bin splits must be non-negative")
    if "n_max" in p and not 2 <= p["n_max"] <= 8:
        raise ConfigError("n_max must lie in 2..8")
    if "linewidth" in p and p["linewidth"] < 0:
        raise ConfigError("linewidth must be non-negative")
    if cfg.scenario == "g2-frequency-map":
        _positive(p, "linewidth")
        if p["n_omega"] < 1:
            raise ConfigError("n_omega must be >= 1")
    if cfg.scenario == "spectrum-map" and p["n_omega"] < 2:
        raise ConfigError("n_omega must be >= 2")
    if "method" in p:
        if p["method"] not in ("auto", "2pa", "mandel"):
            raise ConfigError("method must be auto, 2pa or mandel")
        if p["method"] == "mandel" and p.get("linewidth", 0) > 0:
            raise ConfigError("the full Mandel expansion is only available without a filter")
    if cfg.scenario == "mc-validate" and p["trajectories"] < 1:
        raise ConfigError("trajectories must be >= 1")


_DEFAULT_NAMES = {
    "pn-vs-area": "pn",
    "pmn-vs-T": "pmn",
    "spectrum-map": "spectrum",
    "g2-frequency-map": "g2_map",
    "timebin-purities": "purities",
    "mc-validate": "mc_validate",
}


# ---------------------------------------------------------------------------
# task functions (module level so worker processes can import them)


def _model(p, theta_pi, sensors=()):
    return make_model(theta_pi * math.pi, p["tau_d"], p["detuning"], sensors=sensors,
                      coupling=p["coupling"])


def _twin(p, theta_pi):
    s = (p["filter_detuning"], p["linewidth"])
    return _model(p, theta_pi, sensors=[s, s])


def _pn_task(args):
    p, num, theta_pi = args
    model = _model(p, theta_pi)
    mom = intensity_moments_one_mode(model, 0, n_max=p["n_max"], rtol=num["rtol"],
                                     atol=num["atol"])
    return pn_from_moments(mom, N=p["n_max"])


def _pmn_task(args):
    p, num, theta_pi, T = args
    kw = dict(rtol=num["rtol"], atol=num["atol"])
    if p["linewidth"] > 0:
        return scan_pmn_filtered(_twin(p, theta_pi), T, **kw)
    model = _model(p, theta_pi)
    if _method(p) == "mandel":
        return [pmn_from_moments(m, 0, N=p["n_max"])
                for m in bin_moments_one_mode(model, 0, T, n_max=p["n_max"], **kw)]
    return scan_pmn_one_mode(model, T, 0, **kw)


def _method(p):
    m = p.get("method", "2pa")
    if m == "auto":
        return "2pa" if p.get("linewidth", 0) > 0 else "mandel"
    return m


def _spectrum_task(args):
    p, num, theta_pi, omegas, dtau = args
    return spectrum(_model(p, theta_pi), omegas, dtau=dtau or None).S


def _g2_task(args):
    p, num, wa, wb = args
    return g2_frequency_point(p["theta_pi"] * math.pi, p["tau_d"], p["detuning"], wa, wb,
                              p["linewidth"], p["coupling"])


def sideband_window(p, theta_pi) -> float:
    """Half-width of the default frequency window: peak Rabi frequency plus 5."""
    peak = theta_pi * math.pi / (math.sqrt(2 * math.pi) * p["tau_d"])
    return peak + 5.0


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Outcome:
    tables: dict  # name -> (header, rows)
    flags: list
    resolved: dict


def _pmn_columns(N):
    return [(m, n - m) for n in range(N + 1) for m in range(n, -1, -1)]


def _flag(task, res):
    return {"task": task, "converged": bool(res.converged), "clamp_residual": res.residual,
            "clamp_exceeded": bool(res.clamp_exceeded)}


def run_pn_vs_area(cfg, workers):
    p, num = cfg.params, cfg.numerics
    N = p["n_max"]
    results = sweep_parallel(_pn_task, [(p, num, th) for th in p["theta_pi"]], workers)
    rows, flags = [], []
    for th, res in zip(p["theta_pi"], results):
        rows.append([th * math.pi] + [res.pn[n] for n in range(N + 1)]
                    + [res.converged, res.residual])
        flags.append(_flag(f"theta_pi={th:g}", res))
    header = ["theta"] + [f"P{n}" for n in range(N + 1)] + ["converged", "clamp_residual"]
    return Outcome({cfg.name: (header, rows)}, flags, {})


def run_pmn_vs_T(cfg, workers):
    p, num = cfg.params, cfg.numerics
    method = _method(p)
    N = p["n_max"] if method == "mandel" else 2
    results = _pmn_task((p, num, p["theta_pi"], p["T"]))
    cols = _pmn_columns(N)
    rows, flags = [], []
    for T, res in zip(p["T"], results):
        rows.append([T] + [res.pmn.get(c, 0.0) for c in cols] + [res.converged, res.residual])
        flags.append(_flag(f"T={T:g}", res))
    header = ["T"] + [f"P{m}{n}" for m, n in cols] + ["converged", "clamp_residual"]
    return Outcome({cfg.name: (header, rows)}, flags,
                   {"method": method, "order": N, "filtered": p["linewidth"] > 0})


def _omega_grid(p, theta_pi):
    if p["omega"] != "auto":
        return np.asarray(p["omega"], dtype=float), None
    w = sideband_window(p, theta_pi)
    return np.linspace(-w, w, p["n_omega"]), w


def run_spectrum_map(cfg, workers):
    p, num = cfg.params, cfg.numerics
    tasks, windows = [], {}
    for th in p["theta_pi"]:
        om, w = _omega_grid(p, th)
        windows[f"{th:g}"] = w
        tasks.append((p, num, th, om, p["dtau"]))
    results = sweep_parallel(_spectrum_task, tasks, workers)
    rows = []
    for (_, _, th, om, _), S in zip(tasks, results):
        rows += [[th * math.pi, w, s] for w, s in zip(om, S)]
    return Outcome({cfg.name: (["theta", "omega", "S"], rows)}, [],
                   {"omega_half_width": windows})


def run_g2_map(cfg, workers):
    p, num = cfg.params, cfg.numerics
    om, w = _omega_grid(p, p["theta_pi"])
    n = om.size
    # g2_ab is symmetric in the two sensors; solve the upper triangle only
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    vals = sweep_parallel(_g2_task, [(p, num, om[i], om[j]) for i, j in pairs], workers)
    grid = np.empty((n, n))
    for (i, j), v in zip(pairs, vals):
        grid[i, j] = grid[j, i] = v
    rows = [[om[i], om[j], grid[i, j]] for i in range(n) for j in range(n)]
    return Outcome({cfg.name: (["omega_a", "omega_b", "g2"], rows)}, [],
                   {"omega_half_width": w, "tiles_solved": len(pairs)})


PURITY_KEYS = [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]


def _purity_task(args):
    p, num, th = args
    kw = dict(rtol=num["rtol"], atol=num["atol"])
    if p["linewidth"] > 0:
        return scan_pmn_filtered(_twin(p, th), p["T"], **kw)
    return scan_pmn_one_mode(_model(p, th), p["T"], 0, **kw)


def run_purities(cfg, workers):
    p, num = cfg.params, cfg.numerics
    results = sweep_parallel(_purity_task, [(p, num, th) for th in p["theta_pi"]], workers)
    rows, flags = [], []
    for th, scan in zip(p["theta_pi"], results):
        for T, res in zip(p["T"], scan):
            pur = purities(res)
            rows.append([th * math.pi, T, p["linewidth"]] + [pur.get(k, 0.0) for k in PURITY_KEYS]
                        + [res.residual])
            flags.append(_flag(f"theta_pi={th:g},T={T:g}", res))
    header = ["theta", "T", "linewidth"] + [f"pi{m}{n}" for m, n in PURITY_KEYS] \
        + ["clamp_residual"]
    return Outcome({cfg.name: (header, rows)}, flags, {"filtered": p["linewidth"] > 0})


def run_mc_validate(cfg, workers):
    p, num = cfg.params, cfg.numerics
    method = _method(p)
    N = p["n_max"] if method == "mandel" else 2
    theory = _pmn_task((p, num, p["theta_pi"], p["T"]))
    if p["linewidth"] > 0:
        unr = make_unraveling(_model(p, p["theta_pi"]), "filter", linewidth=p["linewidth"],
                              detuning=p["filter_detuning"])
    else:
        unr = make_unraveling(_model(p, p["theta_pi"]), "bare")
    ens = run_ensemble(unr, p["trajectories"], cfg.seed, workers=workers, chunk=num["chunk"])
    rows, flags = [], []
    for T, res in zip(p["T"], theory):
        hist = estimate_probabilities(ens, T)
        for m, n in _pmn_columns(N):
            ref = res.pmn.get((m, n), 0.0)
            pm, se = hist.p((m, n)), hist.se((m, n))
            rows.append([T, f"P{m}{n}", ref, pm, se, (pm - ref) / se])
        flags.append(_flag(f"T={T:g}", res))
    header = ["T", "outcome", "p_theory", "p_mc", "se_mc", "z"]
    over = int(ens.overflow.sum())
    return Outcome({cfg.name: (header, rows)}, flags,
                   {"method": method, "order": N, "unraveling": unr.kind,
                    "overflowed_trajectories": over, "t_end": unr.t_end})


RUNNERS = {
    "pn-vs-area": run_pn_vs_area,
    "pmn-vs-T": run_pmn_vs_T,
    "spectrum-map": run_spectrum_map,
    "g2-frequency-map": run_g2_map,
    "timebin-purities": run_purities,
    "mc-validate": run_mc_validate,
}


# ---------------------------------------------------------------------------
# output


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    x = float(v)
    if x == 0.0:
        return "0"
    return format(x, ".17g")


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format_value(v) for v in r])


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def resolve_workers(flag: int | None, cfg_workers: int = 1) -> int:
    """Command-line flag first, then the environment, then the config."""
    if flag is not None:
        return flag
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from exc
    return cfg_workers


def run_scenario(config_path, out_dir="results", *, workers=None, seed=None) -> int:
    """Run one config end to end; returns the exit status."""
    out = Path(out_dir)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config_path": str(config_path),
        "started": _now(),
    }
    t0 = time.perf_counter()
    status, code = "ok", EXIT_OK
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg.seed = int(seed)
        n_workers = resolve_workers(workers, cfg.workers)
        if n_workers < 1:
            raise ConfigError("workers must be >= 1")
        manifest.update(scenario=cfg.scenario, name=cfg.name, config=cfg.echo,
                        parameters=cfg.params, seed=cfg.seed, workers=n_workers,
                        tolerances={**{k: cfg.numerics[k] for k in ("rtol", "atol")},
                                    "tail_tolerance": TAIL_TOLERANCE,
                                    "jump_time_tolerance": TIME_TOLERANCE})
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        status, code = "invalid-config", EXIT_CONFIG
        manifest["error"] = {"type": "ConfigError", "message": str(exc)}
    if code == EXIT_OK:
        log.info("running %s (%s) on %d worker(s)", cfg.scenario, cfg.name, n_workers)
        try:
            result = RUNNERS[cfg.scenario](cfg, n_workers)
        except SweepError as exc:
            log.error("solver failure in task %d: %s", exc.index, exc.cause)
            status, code = "solver-error", EXIT_SOLVER
            manifest["error"] = {"type": type(exc.cause).__name__, "message": str(exc.cause),
                                 "failed_task": exc.index, "failed_tile": repr(exc.task[2:])}
        except Exception as exc:  # noqa: BLE001 - every solve failure maps to one exit code
            log.error("solver failure: %s: %s", type(exc).__name__, exc)
            status, code = "solver-error", EXIT_SOLVER
            manifest["error"] = {"type": type(exc).__name__, "message": str(exc)}
        else:
            outputs = []
            for name, (header, rows) in result.tables.items():
                path = out / cfg.scenario / f"{name}.csv"
                write_csv(path, header, rows)
                outputs.append(str(path.relative_to(out)))
            manifest["outputs"] = outputs
            manifest["tasks"] = result.flags
            manifest["resolved"] = result.resolved
            warn = [f["task"] for f in result.flags
                    if not f["converged"] or f["clamp_exceeded"]]
            manifest["warnings"] = warn
            if warn:
                status = "ok-flagged"
                log.warning("%d task(s) flagged as unconverged or clamped", len(warn))
    manifest["status"] = status
    manifest["exit_code"] = code
    manifest["finished"] = _now()
    manifest["wall_seconds"] = round(time.perf_counter() - t0, 3)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True)
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pulsedrf",
                                 description="Photon statistics of pulsed resonance fluorescence")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario config")
    run.add_argument("config", help="INI file describing the scenario")
    run.add_argument("--workers", type=int, default=None,
                     help=f"worker processes (default: ${WORKERS_ENV}, then the config)")
    run.add_argument("--out", default="results", help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--quiet", action="store_true", help="only report warnings and errors")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    return run_scenario(args.config, args.out, workers=args.workers, seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
