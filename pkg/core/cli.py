from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core import __version__, config
from core.errors import ConfigError, FarmError, InvalidInputError
from core.indices import IndexTable, e0_upper_bound, fluid_fit, solve_e0, solve_indices
from core.markov import availability_A
from core.model import (FarmInstance, check_unimodal, generate_scenario1, offered_traffic, preset_appendixK,
                        validate_instance)
from core.oracle import counts_state_count, dinkelbach_optimal_ratio
from core.policies import POLICIES, TieBreak, attractor_point
from core.sim import (Metrics, PolicySpec, SimConfig, compute_relative_difference, replicate_until_ci,
                      synthetic_diurnal_trace, trace_stream)
from core.storage import SCHEMAS, load_instance, read_index_table, write_csv, write_index_table, write_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2


class InvalidInstance(Exception):
    def __init__(self, violations: List[str]) -> None:
        super().__init__("; ".join(violations))
        self.violations = violations


# ----------------------------------------------------------------- helpers

def resolve_instance(spec: str) -> FarmInstance:
    """Instance file path, or a generator spec: `appendix-k[:C[:h]]`, `scenario1:SEED:RHO`."""
    if spec.startswith("appendix-k"):
        parts = spec.split(":")
        capacity = int(parts[1]) if len(parts) > 1 else 10
        scaling = int(parts[2]) if len(parts) > 2 else 1250
        inst = preset_appendixK(capacity=capacity, scaling=scaling)
    elif spec.startswith("scenario1:"):
        try:
            _, seed, rho = spec.split(":")
            inst = generate_scenario1(int(seed), float(rho))
        except ValueError:
            raise ConfigError(f"bad generator spec {spec!r}; expected scenario1:SEED:RHO")
    else:
        inst = load_instance(spec)
    violations = validate_instance(inst)
    if violations:
        raise InvalidInstance(violations)
    return inst


def _settings(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {k: getattr(args, k, None) for k in config.DEFAULTS}
    return config.resolve_settings(flags, config.load_config_file(getattr(args, "config", None)))


def _sim_config(settings: Dict[str, Any], **overrides: Any) -> SimConfig:
    cfg = SimConfig(
        horizon=float(settings["horizon"]),
        warmup=float(settings["warmup"]),
        seed=int(settings["seed"]),
        sizes=settings["sizes"],
        tiebreak=TieBreak.parse(settings["tiebreak"]),
        min_replications=int(settings["min_replications"]),
        max_replications=int(settings["max_replications"]),
        ci_target=float(settings["ci_target"]),
        workers=int(settings["workers"]),
        bin_seconds=float(settings["bin_seconds"]),
        track_z=bool(settings["track_z"]),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def _criterion(instance: FarmInstance, e_arg: Optional[str], settings: Dict[str, Any]) -> float:
    if e_arg is None or str(e_arg).lower() == "auto":
        e = solve_e0(instance, epsilon=settings["epsilon"], limit_h=settings["h_limit"])
        gamma = fluid_fit(instance, e, limit_h=settings["h_limit"], epsilon=settings["epsilon"]).gamma
        print(f"e0 = {e:.12g}  Gamma(e0) = {gamma:.12g}")
        return e
    try:
        return float(e_arg)
    except ValueError:
        raise ConfigError(f"--e must be a number or 'auto', got {e_arg!r}")


def _policy_spec(name: str, instance: FarmInstance, settings: Dict[str, Any], e: Optional[float],
                 table: Optional[IndexTable] = None) -> PolicySpec:
    tb = TieBreak.parse(settings["tiebreak"])
    if name != "mpmp":
        return PolicySpec(name=name, tiebreak=tb)
    if table is None:
        table = solve_indices(instance, e, h=instance.scaling, epsilon=settings["epsilon"])
    return PolicySpec(name=name, tiebreak=tb, table=table)


def metrics_row(m: Metrics, rd: Optional[float] = None) -> Dict[str, Any]:
    return {
        "policy": m.policy,
        "replications": m.replications,
        "cap_hit": bool(m.cap_hit),
        "L": m.L,
        "L_ci": m.ci_halfwidth.get("L", np.nan),
        "E": m.E,
        "E_ci": m.ci_halfwidth.get("E", np.nan),
        "efficiency": m.efficiency,
        "efficiency_ci": m.ci_halfwidth.get("efficiency", np.nan),
        "completion_throughput": m.completion_throughput,
        "total_blocking": m.total_blocking,
        "blocking_by_class": ";".join(f"{b:.12g}" for b in m.blocking_prob),
        "z_deviation": np.nan if m.z_deviation is None else m.z_deviation,
        "relative_difference": np.nan if rd is None else rd,
    }


def _manifest(command: str, args: argparse.Namespace, settings: Dict[str, Any], **extra: Any) -> Dict[str, Any]:
    out = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "settings": settings,
    }
    out.update(extra)
    return out


def _out_path(base: str, name: str) -> str:
    return os.path.join(base, name) if base else name


def empirical_cdf(values: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.sort(np.asarray(values, dtype=float))
    return x, np.arange(1, len(x) + 1) / max(len(x), 1)


# ----------------------------------------------------------------- commands

def cmd_indices(args: argparse.Namespace) -> int:
    settings = _settings(args)
    instance = resolve_instance(args.instance)
    e = _criterion(instance, args.e, settings)
    h = instance.scaling if args.h is None else args.h
    table = solve_indices(instance, e, h=h, epsilon=settings["epsilon"])
    for d in table.diagnostics:
        print(f"warning: {d}")
    write_index_table(table, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_efit(args: argparse.Namespace) -> int:
    settings = _settings(args)
    instance = resolve_instance(args.instance)
    hi = e0_upper_bound(instance) if args.e_max is None else args.e_max
    grid = np.linspace(args.e_min, hi, args.points)
    gamma = [fluid_fit(instance, e, limit_h=settings["h_limit"], epsilon=settings["epsilon"]).gamma for e in grid]
    df = pd.DataFrame({"e": grid, "gamma": gamma})
    write_csv(df, args.out, "efit", _manifest("efit", args, settings, instance=args.instance))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_estar(args: argparse.Namespace) -> int:
    settings = _settings(args)
    instance = resolve_instance(args.instance)
    e0 = _criterion(instance, "auto", settings)
    print(f"offered traffic rho = {np.array2string(offered_traffic(instance), precision=6)}")
    A, heavy = availability_A(instance)
    print(f"availability A = {np.array2string(A, precision=6)}  heavy traffic: {heavy}")
    states = counts_state_count(instance)
    if states <= int(settings["state_cap"]):
        res = dinkelbach_optimal_ratio(instance, state_cap=int(settings["state_cap"]))
        gap = (res.e_star - e0) / res.e_star if res.e_star > 0 else float("nan")
        print(f"e* (exact, h={instance.scaling}) = {res.e_star:.12g}  after {res.iterations} iterations;"
              f"  (e* - e0)/e* = {gap:.6g}")
        if not res.converged:
            print("warning: Dinkelbach iteration stalled before the gain reached the tolerance")
    else:
        print(f"exact e* skipped: {states} states exceed the cap {settings['state_cap']}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    settings = _settings(args)
    instance = resolve_instance(args.instance)
    names = [args.policy] + ([args.compare] if args.compare else [])
    table = read_index_table(args.table, instance) if args.table else None
    e = table.e if table is not None else None
    if e is None and ("mpmp" in names or args.z_out or settings["track_z"]):
        e = _criterion(instance, args.e, settings)
    arrivals = trace_stream(args.trace, instance) if args.trace else None
    z_target = None
    if args.z_out or settings["track_z"]:
        z_target = attractor_point(fluid_fit(instance, e, limit_h=settings["h_limit"],
                                             epsilon=settings["epsilon"]), instance)
    cfg = _sim_config(settings, track_z=z_target is not None, z_target=z_target, record_z=bool(args.z_out))

    results: List[Metrics] = []
    for name in names:
        spec = _policy_spec(name, instance, settings, e, table)
        results.append(replicate_until_ci(instance, spec, cfg, arrivals=arrivals))

    rows = [metrics_row(results[0], compute_relative_difference(results[0], results[1]) if len(results) > 1 else None)]
    rows += [metrics_row(m) for m in results[1:]]
    manifest = _manifest("simulate", args, settings, instance=args.instance, policies=names,
                         outputs=[args.out, args.plot_out, args.z_out])
    write_csv(pd.DataFrame(rows), args.out, "metrics", manifest)
    if args.plot_out:
        frames = [m.bins.assign(policy=m.policy) for m in results if m.bins is not None]
        write_csv(pd.concat(frames, ignore_index=True), args.plot_out, "plot", manifest)
    if args.z_out:
        samples = results[0].per_replication[0].z_samples or []
        df = pd.DataFrame({"time": [t for t, _ in samples],
                           "deviation": [float(np.linalg.norm(z - z_target)) for _, z in samples]})
        write_csv(df, args.z_out, "zpath", manifest)
    for r in rows:
        print(f"{r['policy']:>10}  efficiency={r['efficiency']:.6g} +/- {r['efficiency_ci']:.3g}  "
              f"blocking={r['total_blocking']:.4g}  reps={r['replications']}"
              + (f"  rd={r['relative_difference']:.6g}" if not np.isnan(r["relative_difference"]) else ""))
    return EXIT_OK


def cmd_scenario1(args: argparse.Namespace) -> int:
    settings = _settings(args)
    seeds = range(args.seed_start, args.seed_start + args.count)
    rows: List[Dict[str, Any]] = []
    rd: Dict[str, List[Tuple[int, float]]] = {f"{p}->pas": [] for p in args.policies if p != "pas"}
    failures = 0
    unimodal_clusters = 0
    total_clusters = 0
    for seed in seeds:
        try:
            inst = generate_scenario1(seed, args.rho)
            flags = [check_unimodal(c)[0] for c in inst.clusters]
            unimodal_clusters += sum(flags)
            total_clusters += len(flags)
            _, heavy = availability_A(inst)
            e = solve_e0(inst, epsilon=settings["epsilon"], limit_h=settings["h_limit"])
            by_policy: Dict[str, Metrics] = {}
            for name in sorted(set(args.policies) | {"pas"}):
                spec = _policy_spec(name, inst, settings, e)
                m = replicate_until_ci(inst, spec, _sim_config(settings, seed=seed))
                by_policy[name] = m
                rows.append({"seed": seed, "rho": args.rho, "policy": m.policy, "efficiency": m.efficiency,
                             "efficiency_ci": m.ci_halfwidth["efficiency"], "replications": m.replications,
                             "cap_hit": m.cap_hit, "unimodal": all(flags), "heavy_traffic": heavy})
            for pair in rd:
                rd[pair].append((seed, compute_relative_difference(by_policy[pair.split("->")[0]], by_policy["pas"])))
        except (FarmError, ArithmeticError, ValueError) as e:
            failures += 1
            logger.error("seed %d failed: %s", seed, e)

    cdf_rows = []
    for pair, values in rd.items():
        ordered = sorted(values, key=lambda sv: (sv[1], sv[0]))
        _, probs = empirical_cdf([v for _, v in ordered])
        cdf_rows += [{"pair": pair, "seed": s, "relative_difference": v, "cdf": p}
                     for (s, v), p in zip(ordered, probs)]
    manifest = _manifest("scenario1", args, settings, rho=args.rho, seeds=list(seeds), failures=failures,
                         unimodal_fraction=unimodal_clusters / total_clusters if total_clusters else float("nan"))
    write_csv(pd.DataFrame(rows, columns=SCHEMAS["scenario1"][1]), _out_path(args.out, "scenario1_runs.csv"), "scenario1", manifest)
    write_csv(pd.DataFrame(cdf_rows, columns=SCHEMAS["cdf"][1]),
              _out_path(args.out, "scenario1_cdf.csv"), "cdf", manifest)
    for pair, values in rd.items():
        if values:
            v = np.array([x for _, x in values])
            print(f"{pair}: n={len(v)} median={np.median(v):.4g} q80={np.quantile(v, 0.8):.4g} "
                  f"positive={np.mean(v > 0):.3f}")
    if failures:
        print(f"{failures} seed(s) failed; see log")
    return EXIT_FAILED if failures else EXIT_OK


def cmd_scenario2(args: argparse.Namespace) -> int:
    settings = _settings(args)
    # preset rates are in an arbitrary time unit; one unit per bin unless configured
    if args.bin_seconds is None and "bin_seconds" not in config.load_config_file(args.config):
        settings["bin_seconds"] = 1.0
    rows: List[Dict[str, Any]] = []
    frames: List[pd.DataFrame] = []
    for capacity in args.capacity:
        inst = preset_appendixK(capacity=capacity, scaling=args.scaling)
        if args.trace:
            arrivals = trace_stream(args.trace, inst)
        else:
            arrivals = synthetic_diurnal_trace(inst, hours=args.hours, bin_seconds=settings["bin_seconds"],
                                               mean_load=args.mean_load, amplitude=args.amplitude,
                                               seed=int(settings["seed"]))
            if args.write_trace:
                write_trace(arrivals, _out_path(args.out, f"diurnal_trace_C{capacity}.csv"))
        horizon = args.hours * settings["bin_seconds"]
        if arrivals:
            horizon = max(horizon, arrivals[-1][0])
        warmup = float(args.warmup) if args.warmup is not None else 0.0
        cfg = _sim_config(settings, horizon=horizon, warmup=warmup)
        e = solve_e0(inst, epsilon=settings["epsilon"], limit_h=settings["h_limit"])
        results: Dict[str, Metrics] = {}
        for name in args.policies:
            results[name] = replicate_until_ci(inst, _policy_spec(name, inst, settings, e), cfg, arrivals=arrivals)
        base = results.get("pas")
        for name, m in results.items():
            rd = compute_relative_difference(m, base) if base is not None and name != "pas" else np.nan
            rows.append({"capacity": capacity, "policy": m.policy, "efficiency": m.efficiency,
                         "efficiency_ci": m.ci_halfwidth["efficiency"], "L": m.L, "E": m.E,
                         "total_blocking": m.total_blocking, "relative_difference": rd})
            if m.bins is not None:
                frames.append(m.bins.assign(policy=f"{m.policy}@C{capacity}"))
    manifest = _manifest("scenario2", args, settings, capacities=args.capacity, scaling=args.scaling,
                         trace=args.trace or "synthetic-diurnal")
    write_csv(pd.DataFrame(rows), _out_path(args.out, "scenario2.csv"), "scenario2", manifest)
    if frames:
        write_csv(pd.concat(frames, ignore_index=True), _out_path(args.out, "scenario2_hourly.csv"), "plot", manifest)
    for r in rows:
        print(f"C={r['capacity']:>3} {r['policy']:>10} efficiency={r['efficiency']:.6g} "
              f"blocking={r['total_blocking']:.4g} rd={r['relative_difference']:.4g}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    from core.acceptance import run_checks

    settings = _settings(args)
    report = run_checks(args.level, settings, only=args.only)
    text = json.dumps([r.as_dict() for r in report], indent=2, default=str)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    for r in report:
        print(f"[{r.status.upper():>7}] {r.id:>2} {r.name} ({r.seconds:.1f}s) {r.summary}")
    return EXIT_FAILED if any(r.status == "fail" for r in report) else EXIT_OK


# ----------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with setting overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--h-limit", dest="h_limit", type=float)
    p.add_argument("--log-level", dest="log_level")
    p.add_argument("--state-cap", dest="state_cap", type=int)


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--horizon", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--sizes", help="exponential|deterministic|pareto-f|pareto-inf|mixed")
    p.add_argument("--tiebreak", choices=[t.value for t in TieBreak])
    p.add_argument("--ci-target", dest="ci_target", type=float)
    p.add_argument("--min-replications", dest="min_replications", type=int)
    p.add_argument("--max-replications", dest="max_replications", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--bin-seconds", dest="bin_seconds", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpmp", description="Energy-efficient job assignment in server farms")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("indices", help="index table for a criterion value")
    p.add_argument("instance")
    p.add_argument("--e", default="auto")
    p.add_argument("--h", type=float)
    p.add_argument("--out", default="indices.txt")
    _common(p)
    p.set_defaults(func=cmd_indices)

    p = sub.add_parser("efit", help="Gamma(e) over an e-grid")
    p.add_argument("instance")
    p.add_argument("--e-min", dest="e_min", type=float, default=0.0)
    p.add_argument("--e-max", dest="e_max", type=float)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--out", default="efit.csv")
    _common(p)
    p.set_defaults(func=cmd_efit)

    p = sub.add_parser("estar", help="e0 estimate, and exact e* on desk-scale instances")
    p.add_argument("instance")
    _common(p)
    p.set_defaults(func=cmd_estar)

    p = sub.add_parser("simulate", help="simulate one policy (optionally against another)")
    p.add_argument("instance")
    p.add_argument("--policy", choices=POLICIES, default="mpmp")
    p.add_argument("--compare", choices=POLICIES)
    p.add_argument("--e", default="auto")
    p.add_argument("--table", help="index table file to use instead of solving")
    p.add_argument("--trace")
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--plot-out", dest="plot_out")
    p.add_argument("--z-out", dest="z_out")
    _common(p)
    _sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("scenario1", help="random farms: CDF of relative differences")
    p.add_argument("--seed-start", dest="seed_start", type=int, default=1)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--rho", type=float, default=0.2)
    p.add_argument("--policies", nargs="+", choices=POLICIES, default=["mpmp", "jsq", "pas"])
    p.add_argument("--out", default="")
    _common(p)
    _sim_flags(p)
    p.set_defaults(func=cmd_scenario1)

    p = sub.add_parser("scenario2", help="preset farm under a trace or a synthetic diurnal day")
    p.add_argument("--capacity", type=int, nargs="+", default=[10])
    p.add_argument("--scaling", type=int, default=1250)
    p.add_argument("--trace")
    p.add_argument("--hours", type=int, default=24)
    p.add_argument("--mean-load", dest="mean_load", type=float, default=0.7)
    p.add_argument("--amplitude", type=float, default=0.5)
    p.add_argument("--write-trace", dest="write_trace", action="store_true")
    p.add_argument("--policies", nargs="+", choices=POLICIES, default=["mpmp", "jsq", "pas"])
    p.add_argument("--out", default="")
    _common(p)
    _sim_flags(p)
    p.set_defaults(func=cmd_scenario2)

    p = sub.add_parser("verify", help="acceptance checks")
    p.add_argument("--level", choices=["quick", "full"], default="quick")
    p.add_argument("--only", type=int, nargs="+")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config.configure_logging(getattr(args, "log_level", None) or config.LOG_LEVEL)
    try:
        return args.func(args)
    except InvalidInstance as e:
        print("invalid instance:", file=sys.stderr)
        for v in e.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, InvalidInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (FarmError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    raise SystemExit(main())
