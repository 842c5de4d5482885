"""Acceptance checks driven by `main.py verify`.

Each check returns a ``CheckResult``; ``quick`` runs reduced versions of
the cheap checks and skips the long simulation campaigns.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from core import config
from core.errors import FarmError
from core.indices import closed_form_index, e0_upper_bound, f_function, fluid_fit, solve_e0, solve_indices
from core.markov import availability_A
from core.model import (ClusterSpec, FarmInstance, JobClassSpec, check_unimodal, generate_closed_form_cluster,
                        generate_scenario1, generate_tiny, generate_two_power_mode, preset_appendixK)
from core.oracle import dinkelbach_optimal_ratio, exact_steady_state
from core.policies import FarmState, TieBreak, attractor_point, mpmp_dispatch, pas_dispatch, policy_function
from core.sim import (PolicySpec, SimConfig, compute_relative_difference, diurnal_rate, farm_peak_capacity,
                      replicate_until_ci, synthetic_diurnal_trace)

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    id: int
    name: str
    status: str  # pass | fail | skipped
    summary: str = ""
    details: Dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0

    def as_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "name": self.name, "status": self.status, "summary": self.summary,
                "details": self.details, "seconds": round(self.seconds, 3)}


def _result(cid: int, name: str, ok: bool, summary: str, **details: Any) -> CheckResult:
    return CheckResult(id=cid, name=name, status="pass" if ok else "fail", summary=summary, details=details)


def single_class_instance(cluster: ClusterSpec, arrival_rate: float, scaling: int = 1) -> FarmInstance:
    return FarmInstance(clusters=(cluster,), classes=(JobClassSpec(1, arrival_rate, (cluster.id,)),), scaling=scaling)


def hand_fixture() -> FarmInstance:
    c = ClusterSpec(id=1, capacity=1, service_rates=(0.0, 1.0), energy_rates=(0.0, 1.0))
    return single_class_instance(c, 2.0)


def heavy_unimodal_scenario1(seed_start: int, count: int, rho: float = 3.0, scaling: int = 1,
                             max_tries: int = 2000, **kw: Any) -> List[FarmInstance]:
    """Scenario-I farms whose clusters are all unimodal and whose classes all satisfy A <= 1."""
    out: List[FarmInstance] = []
    seed = seed_start
    while len(out) < count and seed < seed_start + max_tries:
        inst = generate_scenario1(seed, rho, scaling=scaling, **kw)
        seed += 1
        if not all(check_unimodal(c)[0] for c in inst.clusters):
            continue
        if not availability_A(inst)[1]:
            continue
        out.append(inst)
    return out


def _sim_cfg(settings: Dict[str, Any], **kw: Any) -> SimConfig:
    cfg = SimConfig(seed=int(settings["seed"]), ci_target=float(settings["ci_target"]),
                    min_replications=int(settings["min_replications"]),
                    max_replications=int(settings["max_replications"]), workers=int(settings["workers"]))
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


# ----------------------------------------------------------------- checks

def check_closed_form(level: str, settings: Dict[str, Any]) -> CheckResult:
    rng = np.random.default_rng(int(settings["seed"]))
    eps = float(settings["epsilon"])
    worst = 0.0
    failures = []
    for k in range(50):
        c = generate_closed_form_cluster(rng, cluster_id=1)
        lam = float(rng.uniform(0.5, 5.0))
        e = float(rng.uniform(0.0, c.peak_ratio))
        table = solve_indices(single_class_instance(c, lam), e, h=1.0, epsilon=eps)
        expected = closed_form_index(c, lam, e)
        tol = 10.0 * max(eps, 1e-13) * max(1.0, abs(expected))
        err = float(np.max(np.abs(table.eta0[0] - expected)))
        worst = max(worst, err / tol)
        if err > tol:
            failures.append(k)
    return _result(1, "closed-form index agreement", not failures,
                   f"{50 - len(failures)}/50 clusters within 10x precision", worst_ratio=worst, failed=failures)


def check_hand_fixture(level: str, settings: Dict[str, Any]) -> CheckResult:
    inst = hand_fixture()
    eps = float(settings["epsilon"])
    eta = float(solve_indices(inst, 0.5, h=1.0, epsilon=eps).eta0[0][0])
    gamma = fluid_fit(inst, 0.5, limit_h=settings["h_limit"], epsilon=eps).gamma
    e0 = solve_e0(inst, epsilon=eps, limit_h=settings["h_limit"])
    tol = 10.0 * max(eps, 1e-13)
    ok = abs(eta - 1.0) <= tol and abs(gamma - 0.5) <= 1e-9 and abs(e0 - 1.0) <= tol
    return _result(2, "hand-solved fixture", ok, f"eta0={eta:.15g} Gamma(0.5)={gamma:.15g} e0={e0:.15g}",
                   eta0=eta, gamma=gamma, e0=e0)


def check_f_properties(level: str, settings: Dict[str, Any]) -> CheckResult:
    inst = preset_appendixK()
    eps = float(settings["epsilon"])
    e = solve_e0(inst, epsilon=eps, limit_h=settings["h_limit"])
    table = solve_indices(inst, e, h=inst.scaling, epsilon=eps)
    bad = []
    for i, c in enumerate(inst.clusters):
        f = f_function(c, float(inst.lambda_hat0[i]), e, inst.scaling)
        for n in range(c.capacity):
            root = float(table.eta0[i][n])
            width = 0.5 * max(1.0, abs(root))
            grid = np.linspace(root - width, root + width, 100)
            vals = np.array([f(n, x) for x in grid])
            slopes = np.diff(vals) / np.diff(grid)
            lip = float(np.max(np.abs(slopes)))
            if not np.all(np.diff(vals) > 0) or abs(f(n, root)) > 1e-12 * max(lip, 1.0):
                bad.append((i + 1, n))
    return _result(3, "f strictly increasing, zero solved", not bad, f"{len(bad)} bad (cluster, state) pairs",
                   bad=bad, e=e)


def check_gamma_shape(level: str, settings: Dict[str, Any]) -> CheckResult:
    count, points = (3, 50) if level == "quick" else (20, 200)
    insts = heavy_unimodal_scenario1(1, count)
    eps = float(settings["epsilon"])
    bad = []
    for k, inst in enumerate(insts):
        grid = np.linspace(0.0, e0_upper_bound(inst), points)
        g = np.array([fluid_fit(inst, e, limit_h=settings["h_limit"], epsilon=eps).gamma for e in grid])
        increasing = np.any(np.diff(g) > 1e-9 * max(1.0, float(np.abs(g).max())))
        changes = int(np.sum((g[:-1] > 0) & (g[1:] <= 0)))
        if increasing or changes != 1:
            bad.append(k)
    ok = len(insts) == count and not bad
    return _result(4, "Gamma(e) non-increasing with one sign change", ok,
                   f"{len(insts)} instances, {len(bad)} bad", bad=bad)


def _mpmp_table(inst: FarmInstance, settings: Dict[str, Any]):
    e = solve_e0(inst, epsilon=float(settings["epsilon"]), limit_h=settings["h_limit"])
    return e, solve_indices(inst, e, h=inst.scaling, epsilon=float(settings["epsilon"]))


def check_sim_vs_chain(level: str, settings: Dict[str, Any]) -> CheckResult:
    count, horizon = (3, 5000.0) if level == "quick" else (20, 20000.0)
    bad = []
    rows = []
    for seed in range(1, count + 1):
        inst = generate_tiny(seed)
        _, table = _mpmp_table(inst, settings)
        for name in ("mpmp", "jsq", "pas"):
            spec = PolicySpec(name=name, table=table if name == "mpmp" else None)
            exact = exact_steady_state(inst, policy_function(name, inst, TieBreak.LLTB, table)).efficiency
            sim = replicate_until_ci(inst, spec, _sim_cfg(settings, horizon=horizon, seed=seed, ci_target=0.01))
            rd = compute_relative_difference(sim.efficiency, exact)
            rows.append((seed, name, exact, sim.efficiency, rd))
            if abs(rd) > 0.02:
                bad.append((seed, name, rd))
    return _result(5, "simulator matches exact chain", not bad, f"{len(rows)} runs, {len(bad)} off by > 2%",
                   bad=bad)


def near_optimality_fixture(scaling: int = 1) -> FarmInstance:
    clusters = (
        ClusterSpec(id=1, capacity=2, service_rates=(0.0, 1.0, 1.6), energy_rates=(0.2, 0.7, 1.0)),
        ClusterSpec(id=2, capacity=2, service_rates=(0.0, 0.8, 1.4), energy_rates=(0.1, 0.9, 1.5)),
    )
    return FarmInstance(clusters=clusters, classes=(JobClassSpec(1, 2.0, (1, 2)),), scaling=scaling)


def check_near_optimality(level: str, settings: Dict[str, Any]) -> CheckResult:
    gaps = []
    for h in (1, 2, 4):
        inst = near_optimality_fixture(h)
        e_star = dinkelbach_optimal_ratio(inst).e_star
        _, table = _mpmp_table(inst, settings)
        eff = exact_steady_state(inst, policy_function("mpmp", inst, TieBreak.LLTB, table)).efficiency
        gaps.append((e_star - eff) / e_star)
    monotone = all(b <= a + 1e-9 for a, b in zip(gaps, gaps[1:]))
    ok = monotone and gaps[-1] < 0.05
    return _result(6, "MPMP gap to e* shrinks with h", ok, "gaps " + ", ".join(f"{g:.4g}" for g in gaps), gaps=gaps)


def check_attractor(level: str, settings: Dict[str, Any]) -> CheckResult:
    if level == "quick":
        return CheckResult(id=7, name="global attractor", status="skipped", summary="full level only")
    inst = heavy_unimodal_scenario1(1, 1, num_clusters=3, capacity=3, num_classes=2)[0]
    e, _ = _mpmp_table(inst, settings)
    z = attractor_point(fluid_fit(inst, e, limit_h=settings["h_limit"]), inst)
    hs = [10, 50, 250]
    devs = []
    for h in hs:
        scaled = inst.with_scaling(h)
        table = solve_indices(scaled, e, h=h, epsilon=float(settings["epsilon"]))
        horizon = 2000.0 / h
        cfg = _sim_cfg(settings, horizon=horizon, track_z=True, z_target=z, min_replications=2, max_replications=2)
        devs.append(replicate_until_ci(scaled, PolicySpec("mpmp", table=table), cfg).z_deviation)
    fit = stats.linregress(hs, np.log(devs))
    ok = all(b < a for a, b in zip(devs, devs[1:])) and fit.rvalue ** 2 >= 0.8
    return _result(7, "global attractor", ok, "deviations " + ", ".join(f"{d:.4g}" for d in devs)
                   + f"; R^2={fit.rvalue ** 2:.3f}", deviations=devs, r2=fit.rvalue ** 2)


def _scenario1_rds(seeds: Sequence[int], rho: float, settings: Dict[str, Any], sizes: str = "exponential",
                   baseline: str = "pas") -> List[float]:
    out = []
    for seed in seeds:
        try:
            inst = generate_scenario1(seed, rho)
            _, table = _mpmp_table(inst, settings)
            cfg = _sim_cfg(settings, horizon=200.0, seed=seed, sizes=sizes, max_replications=10)
            m = replicate_until_ci(inst, PolicySpec("mpmp", table=table), cfg)
            b = replicate_until_ci(inst, PolicySpec(baseline), cfg)
            out.append(compute_relative_difference(m, b))
        except FarmError as e:
            logger.error("seed %d failed: %s", seed, e)
    return out


def check_scenario1_trend(level: str, settings: Dict[str, Any]) -> CheckResult:
    if level == "quick":
        return CheckResult(id=8, name="scenario I trend", status="skipped", summary="full level only")
    low = np.array(_scenario1_rds(range(1, 201), 0.2, settings))
    high = np.array(_scenario1_rds(range(1, 201), 0.5, settings))
    share = float(np.mean(low > 0))
    q80 = float(np.quantile(low, 0.8))
    ok = share >= 0.95 and q80 >= 0.10 and np.median(high) < np.median(low)
    return _result(8, "scenario I trend", ok, f"MPMP>PAS in {share:.1%}, q80={q80:.3f}, "
                   f"median {np.median(low):.3f} (rho=0.2) vs {np.median(high):.3f} (rho=0.5)",
                   share=share, q80=q80)


def check_two_power_mode(level: str, settings: Dict[str, Any]) -> CheckResult:
    count, samples = (5, 2000) if level == "quick" else (20, 10_000)
    rng = np.random.default_rng(int(settings["seed"]))
    mismatches = 0
    total = 0
    for seed in range(1, count + 1):
        inst = generate_two_power_mode(seed)
        _, table = _mpmp_table(inst, settings)
        caps = np.array([inst.clusters[i].capacity for i in inst.component_clusters])
        for _ in range(samples // count):
            occ = rng.integers(0, caps + 1)
            cls = int(rng.integers(inst.num_classes))
            state = FarmState(occupancy=occ)
            a = mpmp_dispatch(state, cls, table, inst).target.cluster
            b = pas_dispatch(state, cls, inst).target.cluster
            mismatches += int(a != b)
            total += 1
    return _result(9, "MPMP reduces to PAS with two power modes", mismatches == 0,
                   f"{mismatches}/{total} sampled states differ", mismatches=mismatches)


def check_sensitivity(level: str, settings: Dict[str, Any]) -> CheckResult:
    if level == "quick":
        return CheckResult(id=10, name="size-distribution sensitivity", status="skipped", summary="full level only")
    shares = {}
    for sizes in ("deterministic", "pareto-f", "pareto-inf", "mixed"):
        within = []
        for seed in range(1, 51):
            inst = generate_scenario1(seed, 0.35)
            _, table = _mpmp_table(inst, settings)
            base_cfg = _sim_cfg(settings, horizon=200.0, seed=seed, max_replications=10)
            base = replicate_until_ci(inst, PolicySpec("mpmp", table=table), base_cfg)
            alt_cfg = _sim_cfg(settings, horizon=200.0, seed=seed, max_replications=10, sizes=sizes)
            alt = replicate_until_ci(inst, PolicySpec("mpmp", table=table), alt_cfg)
            within.append(abs(compute_relative_difference(alt, base)) <= 0.05)
        shares[sizes] = float(np.mean(within))
    ok = all(v >= 0.9 for v in shares.values())
    return _result(10, "size-distribution sensitivity", ok,
                   ", ".join(f"{k}: {v:.0%}" for k, v in shares.items()), shares=shares)


def check_scenario2(level: str, settings: Dict[str, Any]) -> CheckResult:
    if level == "quick":
        return CheckResult(id=11, name="scenario II qualitative", status="skipped", summary="full level only")
    inst = preset_appendixK(capacity=10, scaling=1250)
    bin_seconds = 1.0
    arrivals = synthetic_diurnal_trace(inst, hours=24, bin_seconds=bin_seconds, seed=int(settings["seed"]))
    _, table = _mpmp_table(inst, settings)
    cfg = _sim_cfg(settings, horizon=24 * bin_seconds, warmup=0.0, bin_seconds=bin_seconds,
                   min_replications=1, max_replications=1)
    m = replicate_until_ci(inst, PolicySpec("mpmp", table=table), cfg, arrivals=arrivals)
    p = replicate_until_ci(inst, PolicySpec("pas"), cfg, arrivals=arrivals)
    rd = compute_relative_difference(m, p)
    mids = (m.bins["bin_start"] + m.bins["bin_end"]).to_numpy() / 2.0
    cap = farm_peak_capacity(inst)
    off_peak = diurnal_rate(mids, cap, bin_seconds) <= 0.7 * cap
    off_peak_blocks = int(m.bins["blocks"].to_numpy()[off_peak].sum())
    ok = rd >= 0.05 and off_peak_blocks == 0
    return _result(11, "scenario II qualitative", ok, f"rd={rd:.4f}, off-peak MPMP blocks={off_peak_blocks}",
                   rd=rd, off_peak_blocks=off_peak_blocks)


CHECKS: List[Callable[[str, Dict[str, Any]], CheckResult]] = [
    check_closed_form,
    check_hand_fixture,
    check_f_properties,
    check_gamma_shape,
    check_sim_vs_chain,
    check_near_optimality,
    check_attractor,
    check_scenario1_trend,
    check_two_power_mode,
    check_sensitivity,
    check_scenario2,
]


def run_checks(level: str = "quick", settings: Optional[Dict[str, Any]] = None,
               only: Optional[Sequence[int]] = None) -> List[CheckResult]:
    settings = settings or config.resolve_settings({})
    report: List[CheckResult] = []
    for cid, check in enumerate(CHECKS, start=1):
        if only and cid not in only:
            continue
        t0 = time.perf_counter()
        try:
            res = check(level, settings)
        except (FarmError, ArithmeticError, ValueError) as e:
            logger.exception("check %d raised", cid)
            res = CheckResult(id=cid, name=check.__name__, status="fail", summary=f"raised {e!r}")
        res.seconds = time.perf_counter() - t0
        logger.info("check %d %s: %s (%.1fs)", cid, res.name, res.status, res.seconds)
        report.append(res)
    return report
