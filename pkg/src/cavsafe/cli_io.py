"""Command-line front end: scenario files, single runs, seeded sweeps and output tables.

Scenario files are INI documents with four optional sections::

    [scenario]    n_vehicles, positions, speeds, p_0, duration, seed,
                  perturbation, l_c, d_f, controller, departures
    [hdv]         alpha, beta, v_d, rho, s_0            (nominal OVM)
    [controller]  horizon, tau, u_min, u_max, v_min, v_max, rho, s_0,
                  w_ep, w_ev, w_u, w_slack, qp_tol, qp_max_iter
    [estimator]   gamma0, p0, xi

Lists are comma separated; ``departures`` is a list of ``id@time`` items.
Every key is optional and unknown keys are rejected.

Each run writes into its own directory:

- ``trajectory.csv``: t, id, p, v, u, delta_p, delta_v, ahead
- ``cav.csv``: t, e_p, e_v, s1, slack, solver_status, solve_time, iterations, kkt_max, fallback
- ``estimates.csv``: t, hdv_id, gamma1, gamma2, gamma3, eta, nu, rho, residual
- ``metrics.txt``: flat ``key=value`` summary
- ``scenario.ini``: the resolved scenario, re-parseable
- ``plots/``: wide position, speed and headway tables (one column per vehicle)
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .estimator import EstimatorConfig
from .hdv_models import OvmParams
from .mpc_controller import MpcConfig, MpcWeights
from .sim import (
    Metrics,
    ScenarioConfig,
    SimTrace,
    VIOLATION_SLACK,
    run_simulation,
)
from .vehicle_core import DomainError, HeadwayPolicy, Limits

log = logging.getLogger(__name__)

SIGNIFICANT_DIGITS = 12

TRAJECTORY_COLUMNS = ("t", "id", "p", "v", "u", "delta_p", "delta_v", "ahead")
CAV_COLUMNS = (
    "t", "e_p", "e_v", "s1", "slack", "solver_status", "solve_time", "iterations", "kkt_max", "fallback",
)
ESTIMATE_COLUMNS = ("t", "hdv_id", "gamma1", "gamma2", "gamma3", "eta", "nu", "rho", "residual")
RUN_COLUMNS = (
    "run", "seed", "n_vehicles", "status", "collision", "stopped", "violation_count", "max_slack",
    "min_gap", "min_safety_margin", "final_cav_gap", "fallback_count", "bounds_ok", "steps",
    "final_time", "solve_time_median", "solve_time_p95",
)


class ScenarioError(ValueError):
    """Malformed or out-of-domain scenario document; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# section -> key -> value kind
_SCHEMA: Dict[str, Dict[str, str]] = {
    "scenario": {
        "n_vehicles": "int", "positions": "floats", "speeds": "floats", "p_0": "float",
        "duration": "float", "seed": "int", "perturbation": "float", "l_c": "float",
        "d_f": "float", "controller": "str", "departures": "departures",
    },
    "hdv": {k: "float" for k in ("alpha", "beta", "v_d", "rho", "s_0")},
    "controller": {
        "horizon": "int", "tau": "float", "u_min": "float", "u_max": "float", "v_min": "float",
        "v_max": "float", "rho": "float", "s_0": "float", "w_ep": "float", "w_ev": "float",
        "w_u": "float", "w_slack": "float", "qp_tol": "float", "qp_max_iter": "int",
    },
    "estimator": {"gamma0": "floats", "p0": "float", "xi": "float"},
}


def _convert(kind: str, raw: str):
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        x = float(raw)
        if math.isnan(x):
            raise ValueError("nan is not allowed")
        return x
    if kind == "str":
        return raw
    if kind == "floats":
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if kind == "departures":
        out = []
        for item in raw.split(","):
            if not item.strip():
                continue
            vid, _, when = item.partition("@")
            if not _:
                raise ValueError(f"expected id@time, got {item.strip()!r}")
            out.append((int(vid), float(when)))
        return tuple(out)
    raise AssertionError(kind)


def _blame(section: str, message: str, candidates: Iterable[str]) -> str:
    """First key of ``candidates`` mentioned in ``message``, else the section."""
    hits = [(m.start(), k) for k in candidates for m in [re.search(rf"\b{re.escape(k)}\b", message)] if m]
    return f"{section}.{min(hits)[1]}" if hits else section


def scenario_from_mapping(doc: Dict[str, Dict[str, str]]) -> ScenarioConfig:
    """Validate a ``{section: {key: text}}`` mapping and build the scenario."""
    values: Dict[str, Dict[str, object]] = {}
    for section, entries in doc.items():
        if section not in _SCHEMA:
            raise ScenarioError(section, f"unknown section (expected one of {sorted(_SCHEMA)})")
        schema = _SCHEMA[section]
        values[section] = {}
        for key, raw in entries.items():
            if key not in schema:
                raise ScenarioError(f"{section}.{key}", "unknown key")
            try:
                values[section][key] = _convert(schema[key], raw)
            except ValueError as exc:
                raise ScenarioError(f"{section}.{key}", f"cannot parse {raw!r}: {exc}") from None

    def build(section, fn):
        got = values.get(section, {})
        try:
            return fn(got)
        except (DomainError, ValueError, TypeError) as exc:
            raise ScenarioError(_blame(section, str(exc), got or _SCHEMA[section]), str(exc)) from None

    ctl = values.get("controller", {})
    limits = build("controller", lambda c: Limits(**{k: c[k] for k in ("u_min", "u_max", "v_min", "v_max", "tau") if k in c}))
    policy = build("controller", lambda c: HeadwayPolicy(**{k: c[k] for k in ("rho", "s_0") if k in c}))
    weights = build("controller", lambda c: MpcWeights(**{k: c[k] for k in ("w_ep", "w_ev", "w_u", "w_slack") if k in c}))
    mpc_kw = {k: ctl[k] for k in ("horizon", "qp_tol", "qp_max_iter") if k in ctl}
    mpc = build("controller", lambda c: MpcConfig(limits=limits, policy=policy, weights=weights, **mpc_kw))
    if mpc.qp_tol <= 0.0:
        raise ScenarioError("controller.qp_tol", "must be positive")
    if mpc.qp_max_iter < 1:
        raise ScenarioError("controller.qp_max_iter", "must be at least 1")
    hdv = build("hdv", lambda c: OvmParams(**c))
    est = build("estimator", lambda c: EstimatorConfig(**c))
    return build("scenario", lambda c: ScenarioConfig(hdv=hdv, mpc=mpc, estimator=est, **c))


def parse_scenario_text(text: str, source: str = "<string>") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ScenarioError(source, f"malformed document: {exc}") from None
    if parser.defaults():
        raise ScenarioError("DEFAULT", "the [DEFAULT] section is not supported")
    return scenario_from_mapping({s: dict(parser.items(s)) for s in parser.sections()})


def parse_scenario(path) -> ScenarioConfig:
    """Read and validate a scenario file; see the module docstring for the format."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(str(path), f"cannot read: {exc.strerror or exc}") from None
    return parse_scenario_text(text, str(path))


def _fmt_value(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def format_scenario(config: ScenarioConfig) -> str:
    """Serialize every field so that ``parse_scenario_text(format_scenario(c)) == c``."""
    lim, pol, w = config.mpc.limits, config.mpc.policy, config.mpc.weights
    positions, speeds = config.layout()
    sections = {
        "scenario": {
            "n_vehicles": config.n_vehicles,
            "positions": ", ".join(_fmt_value(p) for p in positions) if config.positions is not None else None,
            "speeds": ", ".join(_fmt_value(v) for v in speeds) if config.speeds is not None else None,
            "p_0": config.p_0, "duration": config.duration, "seed": config.seed,
            "perturbation": config.perturbation, "l_c": config.l_c, "d_f": config.d_f,
            "controller": config.controller,
            "departures": ", ".join(f"{vid}@{_fmt_value(float(t))}" for vid, t in config.departures) or None,
        },
        "hdv": dataclasses.asdict(config.hdv),
        "controller": {
            "horizon": config.mpc.horizon, "tau": lim.tau, "u_min": lim.u_min, "u_max": lim.u_max,
            "v_min": lim.v_min, "v_max": lim.v_max, "rho": pol.rho, "s_0": pol.s_0,
            "w_ep": w.w_ep, "w_ev": w.w_ev, "w_u": w.w_u, "w_slack": w.w_slack,
            "qp_tol": config.mpc.qp_tol, "qp_max_iter": config.mpc.qp_max_iter,
        },
        "estimator": {
            "gamma0": ", ".join(_fmt_value(float(g)) for g in config.estimator.gamma0),
            "p0": config.estimator.p0, "xi": config.estimator.xi,
        },
    }
    lines = []
    for name, entries in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt_value(v)}" for k, v in entries.items() if v is not None)
        lines.append("")
    return "\n".join(lines)


def write_scenario(config: ScenarioConfig, path) -> None:
    Path(path).write_text(format_scenario(config))


def format_number(x) -> str:
    """Fixed-point text with ``SIGNIFICANT_DIGITS`` significant digits; integers verbatim."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    if not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if x == 0.0:
        return "0." + "0" * (SIGNIFICANT_DIGITS - 1)
    return np.format_float_positional(x, precision=SIGNIFICANT_DIGITS, unique=False, fractional=False, trim="k")


def _write_table(path: Path, columns: Sequence[str], rows: Iterable[Sequence]) -> int:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    count = 0
    for row in rows:
        writer.writerow([format_number(x) for x in row])
        count += 1
    _write_text(path, buf.getvalue())
    return count


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _metrics_text(items: Dict[str, object]) -> str:
    return "".join(f"{k}={format_number(v)}\n" for k, v in items.items())


def _wide_tables(trace: SimTrace) -> Dict[str, Tuple[List[str], List[List]]]:
    """Position, speed and headway over time with one column per vehicle (blank once it has left)."""
    ids = sorted({r.id for r in trace.vehicles}, reverse=True)
    col = {vid: j for j, vid in enumerate(ids)}
    rows: Dict[float, List[List]] = {}
    for r in trace.vehicles:
        slot = rows.setdefault(r.t, [[""] * len(ids) for _ in range(3)])
        j = col[r.id]
        slot[0][j], slot[1][j] = r.p, r.v
        slot[2][j] = r.delta_p if r.ahead > 0 else ""
    header = ["t"] + [f"veh_{vid}" for vid in ids]
    out = {}
    for k, name in enumerate(("positions", "speeds", "headways")):
        out[name] = (header, [[t] + slots[k] for t, slots in rows.items()])
    return out


@dataclass
class RunManifest:
    """What to run and where to put it."""

    out_dir: Path
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    scenario_path: Optional[Path] = None
    seeds: Tuple[int, ...] = ()
    vehicle_counts: Tuple[int, ...] = ()
    deterministic: bool = False
    jobs: int = 1

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if self.jobs < 1:
            raise ValueError(f"jobs must be at least 1, got {self.jobs}")


def write_outputs(trace: SimTrace, metrics: Metrics, manifest: RunManifest, config: Optional[ScenarioConfig] = None) -> Dict[str, int]:
    """Write all tables of one run into ``manifest.out_dir``; returns data-row counts per table.

    With ``manifest.deterministic`` every wall-clock quantity is written as
    zero so that reruns are byte-identical.
    """
    if not trace.cav:
        raise ValueError("empty trace")
    out = manifest.out_dir
    try:
        (out / "plots").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror or exc}") from exc
    cav_rows = trace.cav
    flat = metrics.flat()
    if manifest.deterministic:
        cav_rows = [r._replace(solve_time=0.0) for r in cav_rows]
        flat.update(solve_time_median=0.0, solve_time_p95=0.0)
    counts = {
        "trajectory": _write_table(out / "trajectory.csv", TRAJECTORY_COLUMNS, trace.vehicles),
        "cav": _write_table(out / "cav.csv", CAV_COLUMNS, cav_rows),
        "estimates": _write_table(out / "estimates.csv", ESTIMATE_COLUMNS, trace.estimates),
    }
    for name, (header, rows) in _wide_tables(trace).items():
        _write_table(out / "plots" / f"{name}.csv", header, rows)
    _write_text(out / "metrics.txt", _metrics_text(flat))
    _write_text(out / "events.txt", "".join(e + "\n" for e in trace.events))
    _write_text(out / "scenario.ini", format_scenario(config or manifest.scenario))
    return counts


def run_single(config: ScenarioConfig, out_dir, deterministic: bool = False) -> Metrics:
    trace, metrics = run_simulation(config)
    write_outputs(trace, metrics, RunManifest(out_dir, config, deterministic=deterministic), config)
    return metrics


def _sweep_worker(args) -> Dict[str, object]:
    index, config, out_dir, deterministic = args
    row: Dict[str, object] = {"run": index, "seed": config.seed, "n_vehicles": config.n_vehicles}
    try:
        trace, metrics = run_simulation(config)
        write_outputs(trace, metrics, RunManifest(out_dir, config, deterministic=deterministic), config)
    except Exception as exc:  # recorded per run, the sweep carries on
        log.error("run %d (seed %d) failed: %s", index, config.seed, exc)
        row["status"] = f"error: {type(exc).__name__}: {exc}"
        row["solve_times"] = []
        return row
    times = [r.solve_time for r in trace.cav if r.solver_status not in ("ovm", "cruise")]
    row.update(
        status="ok", collision=metrics.collision, stopped=metrics.stopped,
        violation_count=metrics.violation_count, max_slack=metrics.max_slack,
        min_gap=metrics.min_gap, min_safety_margin=metrics.min_safety_margin,
        final_cav_gap=metrics.final_cav_gap, fallback_count=metrics.fallback_count,
        bounds_ok=metrics.bounds_ok, steps=metrics.steps, final_time=metrics.final_time,
        solve_time_median=0.0 if deterministic else metrics.solve_time_median,
        solve_time_p95=0.0 if deterministic else metrics.solve_time_p95,
        solve_times=[] if deterministic else times,
    )
    return row


def sweep_configs(manifest: RunManifest) -> List[ScenarioConfig]:
    """One scenario per seed; vehicle counts, if given, are cycled over the seeds."""
    if not manifest.seeds:
        raise ValueError("a sweep needs at least one seed")
    configs = []
    for i, seed in enumerate(manifest.seeds):
        cfg = replace(manifest.scenario, seed=seed)
        if manifest.vehicle_counts:
            cfg = replace(cfg, n_vehicles=manifest.vehicle_counts[i % len(manifest.vehicle_counts)],
                          positions=None, speeds=None)
        configs.append(cfg)
    return configs


def aggregate(rows: Sequence[Dict[str, object]]) -> Dict[str, object]:
    ok = [r for r in rows if r["status"] == "ok"]
    gaps = [r["min_gap"] for r in ok if not math.isnan(r["min_gap"])]
    finals = [r["final_cav_gap"] for r in ok]
    times = [t for r in ok for t in r["solve_times"]]
    pct = lambda xs, q: float(np.percentile(xs, q)) if xs else math.nan
    return {
        "runs": len(rows),
        "completed": len(ok),
        "failed": len(rows) - len(ok),
        "collisions": sum(bool(r["collision"]) for r in ok),
        "violation_count": sum(int(r["violation_count"]) for r in ok),
        "violation_threshold": VIOLATION_SLACK,
        "max_slack": max((r["max_slack"] for r in ok), default=math.nan),
        "all_stopped": all(r["stopped"] for r in ok),
        "all_bounds_ok": all(r["bounds_ok"] for r in ok),
        "fallback_count": sum(int(r["fallback_count"]) for r in ok),
        "min_gap_min": min(gaps, default=math.nan),
        "min_gap_median": pct(gaps, 50),
        "min_gap_max": max(gaps, default=math.nan),
        "min_safety_margin": min((r["min_safety_margin"] for r in ok), default=math.nan),
        "final_cav_gap_min": min(finals, default=math.nan),
        "final_cav_gap_max": max(finals, default=math.nan),
        "solve_time_median": pct(times, 50) if times else 0.0,
        "solve_time_p95": pct(times, 95) if times else 0.0,
        "solve_time_max": max(times) if times else 0.0,
    }


def run_sweep(manifest: RunManifest) -> Tuple[Dict[str, object], List[Dict[str, object]]]:
    """Run every seed, each into ``out_dir/run_XXX``, and write ``runs.csv`` and ``aggregate.txt``."""
    configs = sweep_configs(manifest)
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [
        (i, cfg, manifest.out_dir / f"run_{i:03d}_seed_{cfg.seed}", manifest.deterministic)
        for i, cfg in enumerate(configs)
    ]
    if manifest.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=manifest.jobs) as pool:
            rows = list(pool.map(_sweep_worker, tasks))
    else:
        rows = [_sweep_worker(t) for t in tasks]
    _write_table(
        manifest.out_dir / "runs.csv", RUN_COLUMNS,
        ([r.get(c, "") for c in RUN_COLUMNS] for r in rows),
    )
    report = aggregate(rows)
    _write_text(manifest.out_dir / "aggregate.txt", _metrics_text(report))
    return report, rows


def _int_list(text: str) -> Tuple[int, ...]:
    """``"1,2,5"``, ``"0-49"`` or a mix of both."""
    out: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if sep and lo:
            a, b = int(lo), int(hi)
            if b < a:
                raise argparse.ArgumentTypeError(f"empty range {part!r}")
            out.extend(range(a, b + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cavsafe", description="CAV safety MPC at a red light: simulate, sweep, validate.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--scenario", type=Path, help="scenario INI file (defaults apply when omitted)")
        p.add_argument("--vehicles", type=_int_list, help="vehicle count including the CAV; a list is cycled in sweeps")
        p.add_argument("--horizon", type=int, help="prediction horizon in steps")
        p.add_argument("--duration", type=float, help="maximum simulated time in seconds")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")
            p.add_argument("--deterministic", action="store_true",
                           help="write wall-clock columns as zero so reruns are byte-identical")

    run = sub.add_parser("run", help="simulate one scenario")
    common(run)
    run.add_argument("--seed", type=int, help="seed for the HDV parameter perturbation")

    sweep = sub.add_parser("sweep", help="simulate a batch of seeded scenarios")
    common(sweep)
    sweep.add_argument("--seeds", type=_int_list, required=True, help="seed list, e.g. 0-49 or 1,4,7")
    sweep.add_argument("--jobs", type=int, default=1, help="concurrent runs")

    check = sub.add_parser("check", help="validate a scenario file and print the resolved configuration")
    common(check, out=False)
    check.add_argument("--seed", type=int)
    return ap


def _resolve(args) -> ScenarioConfig:
    cfg = parse_scenario(args.scenario) if args.scenario else ScenarioConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.horizon is not None:
        if args.horizon < 1:
            raise ScenarioError("--horizon", "must be at least 1")
        cfg = replace(cfg, mpc=replace(cfg.mpc, horizon=args.horizon))
    if args.duration is not None:
        cfg = replace(cfg, duration=args.duration)
    if args.vehicles is not None and len(args.vehicles) == 1:
        cfg = replace(cfg, n_vehicles=args.vehicles[0], positions=None, speeds=None)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Exit status: 0 when every run completed without bumper contact, 1 otherwise, 2 on bad input."""
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
    except (ScenarioError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "check":
        sys.stdout.write(format_scenario(cfg))
        return 0

    if args.command == "run":
        if args.vehicles is not None and len(args.vehicles) > 1:
            print("error: --vehicles: run takes a single count", file=sys.stderr)
            return 2
        try:
            metrics = run_single(cfg, args.out, args.deterministic)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(_metrics_text(metrics.flat()), end="")
        return 1 if metrics.collision else 0

    manifest = RunManifest(
        args.out, cfg, args.scenario, args.seeds,
        tuple(args.vehicles) if args.vehicles and len(args.vehicles) > 1 else (),
        args.deterministic, max(1, args.jobs),
    )
    try:
        report, _ = run_sweep(manifest)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(_metrics_text(report), end="")
    return 0 if report["failed"] == 0 and report["collisions"] == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
