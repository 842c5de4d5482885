"""Discrete-event simulation of the farm under a dispatch policy.

Service is egalitarian processor sharing: the n jobs on a component each
drain at mu(n)/n. Every component keeps a virtual clock (attained service
per job) and a heap of virtual finish times, so any size distribution is
handled exactly; rates are piecewise constant between events, so the
throughput and energy integrals are exact.
"""
from __future__ import annotations

import heapq
import logging
import math
import multiprocessing
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from core import config
from core.errors import ConfigError, InvalidInputError, SimulationError, TraceFormatError
from core.indices import IndexTable
from core.model import FarmInstance
from core.policies import REJECT, BucketDispatcher, TieBreak, make_dispatcher

logger = logging.getLogger(__name__)

SIZE_KINDS = ("exponential", "deterministic", "pareto-f", "pareto-inf")
PARETO_SHAPES = {"pareto-f": 2.001, "pareto-inf": 1.98}
MIXED_PRESET = ("deterministic", "exponential", "pareto-f", "pareto-inf")

Arrival = Tuple[float, int]  # (time, class position)
SeedLike = Union[int, np.random.SeedSequence]


@dataclass
class SimConfig:
    horizon: float = 2000.0
    warmup: Optional[float] = None
    seed: int = 1
    sizes: Union[str, Tuple[str, ...]] = "exponential"
    trace: Optional[str] = None
    tiebreak: TieBreak = TieBreak.LLTB
    min_replications: int = config.MIN_REPLICATIONS
    max_replications: int = config.MAX_REPLICATIONS
    ci_target: float = config.CI_TARGET
    workers: int = config.WORKERS
    bin_seconds: float = 3600.0
    track_z: bool = False
    z_target: Optional[np.ndarray] = None
    record_z: bool = False
    track_states: bool = False

    @property
    def effective_warmup(self) -> float:
        return 0.1 * self.horizon if self.warmup is None else float(self.warmup)

    def validate(self) -> None:
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if not 0 <= self.effective_warmup < self.horizon:
            raise ConfigError(f"warmup {self.effective_warmup} must lie in [0, horizon={self.horizon})")
        if self.min_replications < 1 or self.max_replications < self.min_replications:
            raise ConfigError("need 1 <= min_replications <= max_replications")
        if not self.ci_target > 0:
            raise ConfigError("ci_target must be positive")
        if not self.bin_seconds > 0:
            raise ConfigError("bin_seconds must be positive")
        if self.track_z and self.z_target is None:
            raise ConfigError("track_z needs z_target (the fluid attractor point)")

    def size_kinds(self, num_classes: int) -> Tuple[str, ...]:
        if isinstance(self.sizes, str):
            kind = self.sizes.lower()
            if kind == "mixed":
                return tuple(MIXED_PRESET[k % len(MIXED_PRESET)] for k in range(num_classes))
            kinds = (kind,) * num_classes
        else:
            kinds = tuple(str(k).lower() for k in self.sizes)
            if len(kinds) != num_classes:
                raise ConfigError(f"need one size distribution per class ({num_classes}), got {len(kinds)}")
        bad = [k for k in kinds if k not in SIZE_KINDS]
        if bad:
            raise ConfigError(f"unknown size distribution(s) {bad}; expected {', '.join(SIZE_KINDS + ('mixed',))}")
        return kinds


@dataclass
class PolicySpec:
    name: str
    tiebreak: TieBreak = TieBreak.LLTB
    table: Optional[IndexTable] = None
    priorities: Optional[Tuple[float, ...]] = None

    @property
    def label(self) -> str:
        return f"{self.name}-{TieBreak.parse(self.tiebreak).value}"

    def dispatcher(self, instance: FarmInstance) -> BucketDispatcher:
        return make_dispatcher(self.name, instance, self.tiebreak, self.table, self.priorities)


@dataclass
class Metrics:
    policy: str
    L: float
    E: float
    efficiency: float
    duration: float
    arrivals: np.ndarray
    blocks: np.ndarray
    completions: np.ndarray
    z_deviation: Optional[float] = None
    replications: int = 1
    cap_hit: bool = False
    ci_halfwidth: Dict[str, float] = field(default_factory=dict)
    bins: Optional[pd.DataFrame] = None
    z_samples: Optional[List[Tuple[float, np.ndarray]]] = None
    state_time: Optional[Dict[Tuple[int, ...], float]] = None
    per_replication: List["Metrics"] = field(default_factory=list)

    @property
    def blocking_prob(self) -> np.ndarray:
        a = self.arrivals.astype(float)
        out = np.zeros_like(a)
        np.divide(self.blocks, a, out=out, where=a > 0)
        return out

    @property
    def total_blocking(self) -> float:
        a = float(self.arrivals.sum())
        return float(self.blocks.sum()) / a if a > 0 else 0.0

    @property
    def completion_throughput(self) -> float:
        return float(self.completions.sum()) / self.duration if self.duration > 0 else 0.0


def _efficiency(L: float, E: float) -> float:
    return L / E if E > 0 else 0.0


# ----------------------------------------------------------------- randomness

def _seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        # fresh copy: spawn() advances the child counter of the original
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(int(seed))


class _Draws:
    """Chunked draws from one generator."""

    def __init__(self, rng: np.random.Generator, kind: str, chunk: int = 4096) -> None:
        self.rng = rng
        self.kind = kind
        self.chunk = chunk
        self._buf = np.empty(0)
        self._pos = 0

    def _fill(self) -> None:
        if self.kind == "exponential":
            self._buf = self.rng.exponential(1.0, size=self.chunk)
        elif self.kind == "deterministic":
            self._buf = np.ones(self.chunk)
        else:
            a = PARETO_SHAPES[self.kind]
            self._buf = (a - 1.0) / a * (1.0 + self.rng.pareto(a, size=self.chunk))
        self._pos = 0

    def next(self) -> float:
        if self._pos >= len(self._buf):
            self._fill()
        v = self._buf[self._pos]
        self._pos += 1
        return float(v)


def _class_arrivals(rate: float, rng: np.random.Generator, cls: int, horizon: float,
                    chunk: int = 4096) -> Iterator[Arrival]:
    if rate <= 0:
        return
    t = 0.0
    while True:
        times = t + np.cumsum(rng.exponential(1.0 / rate, size=chunk))
        for x in times:
            if x > horizon:
                return
            yield float(x), cls
        t = float(times[-1])


def poisson_stream(rates: Sequence[float], seed: SeedLike, horizon: float) -> Iterator[Arrival]:
    """Superposed per-class Poisson arrivals on [0, horizon], time-sorted.

    Each class draws from its own child of the seed sequence.
    """
    children = _seed_sequence(seed).spawn(len(rates))
    streams = [_class_arrivals(float(r), np.random.default_rng(ss), cls, horizon)
               for cls, (r, ss) in enumerate(zip(rates, children))]
    return heapq.merge(*streams)


def trace_stream(path: str, instance: Optional[FarmInstance] = None) -> List[Arrival]:
    """Arrivals from a `timestamp_seconds,class_id` file (class ids 1-based)."""
    out: List[Arrival] = []
    last = -math.inf
    num_classes = instance.num_classes if instance is not None else None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise TraceFormatError(f"expected 2 fields, got {len(parts)}", path, lineno)
            try:
                t = float(parts[0])
                cid = int(parts[1])
            except ValueError:
                if lineno == 1 and not out:
                    continue  # header
                raise TraceFormatError(f"cannot parse {line!r}", path, lineno)
            if not math.isfinite(t) or t < 0:
                raise TraceFormatError(f"timestamp {t!r} is not a finite non-negative number", path, lineno)
            if t < last:
                raise TraceFormatError(f"timestamp {t!r} decreases (previous {last!r})", path, lineno)
            if num_classes is not None and not 1 <= cid <= num_classes:
                raise TraceFormatError(f"unknown class id {cid} (instance has {num_classes})", path, lineno)
            last = t
            out.append((t, cid - 1))
    return out


def diurnal_rate(t: np.ndarray, peak_capacity: float, bin_seconds: float = 3600.0,
                 mean_load: float = 0.7, amplitude: float = 0.5) -> np.ndarray:
    day = 24.0 * bin_seconds
    return mean_load * peak_capacity * (1.0 + amplitude * np.sin(2.0 * np.pi * (np.asarray(t) / day - 0.25)))


def farm_peak_capacity(instance: FarmInstance) -> float:
    return float(sum(instance.component_count(i) * c.service_rates[-1] for i, c in enumerate(instance.clusters)))


def synthetic_diurnal_trace(instance: FarmInstance, hours: int = 24, bin_seconds: float = 3600.0,
                            mean_load: float = 0.7, amplitude: float = 0.5, seed: SeedLike = 1) -> List[Arrival]:
    """Non-homogeneous Poisson arrivals with a sinusoidal daily profile, by thinning.

    Trough at midnight, peak at midday; classes split in proportion to
    their base arrival rates.
    """
    if not 0 <= amplitude <= 1:
        raise InvalidInputError("amplitude must lie in [0, 1]")
    cap = farm_peak_capacity(instance)
    horizon = hours * bin_seconds
    lam_max = mean_load * cap * (1.0 + amplitude)
    rng = np.random.default_rng(_seed_sequence(seed))
    count = rng.poisson(lam_max * horizon)
    times = np.sort(rng.uniform(0.0, horizon, size=count))
    keep = rng.uniform(0.0, 1.0, size=count) * lam_max <= diurnal_rate(times, cap, bin_seconds, mean_load, amplitude)
    times = times[keep]
    weights = np.array([c.arrival_rate_base for c in instance.classes])
    classes = rng.choice(instance.num_classes, size=len(times), p=weights / weights.sum())
    return [(float(t), int(c)) for t, c in zip(times, classes)]


# ----------------------------------------------------------------- engine

def bin_count(horizon: float, bin_seconds: float) -> int:
    """Number of bins covering [0, horizon]; a last bin shorter than rounding noise is merged."""
    n = round(horizon / bin_seconds)
    if n >= 1 and abs(n * bin_seconds - horizon) <= 1e-9 * max(horizon, bin_seconds):
        return int(n)
    return max(1, int(math.ceil(horizon / bin_seconds)))


def run_simulation(instance: FarmInstance, policy: PolicySpec, cfg: SimConfig,
                   seed: Optional[SeedLike] = None, arrivals: Optional[Iterable[Arrival]] = None) -> Metrics:
    """One replication from the empty farm; metrics over [warmup, horizon]."""
    cfg.validate()
    horizon = float(cfg.horizon)
    warmup = cfg.effective_warmup
    L_cls = instance.num_classes
    ss = _seed_sequence(cfg.seed if seed is None else seed)
    arr_ss, size_ss = ss.spawn(2)
    if arrivals is None:
        if cfg.trace:
            arrivals = trace_stream(cfg.trace, instance)
        else:
            arrivals = poisson_stream(instance.scaling * np.array([c.arrival_rate_base for c in instance.classes]),
                                      arr_ss, horizon)
    kinds = cfg.size_kinds(L_cls)
    draws = [_Draws(np.random.default_rng(s), k) for s, k in zip(size_ss.spawn(L_cls), kinds)]
    dispatcher = policy.dispatcher(instance)

    J = instance.total_components
    cluster_of = [int(x) for x in instance.component_clusters]
    mu = [list(instance.clusters[i].service_rates) for i in range(instance.num_clusters)]
    eps = [list(instance.clusters[i].energy_rates) for i in range(instance.num_clusters)]
    cap = [c.capacity for c in instance.clusters]
    elig = [instance.eligible_positions(cls) for cls in range(L_cls)]

    N = [0] * J
    V = [0.0] * J
    tau = [0.0] * J
    version = [0] * J
    finish: List[List[Tuple[float, int, int]]] = [[] for _ in range(J)]
    free = [instance.component_count(i) for i in range(instance.num_clusters)]
    events: List[Tuple[float, int, int, int]] = []
    seq = 0

    rate_L = 0.0
    rate_E = float(sum(eps[cluster_of[j]][0] for j in range(J)))
    int_L = 0.0
    int_E = 0.0
    arr_w = np.zeros(L_cls, dtype=np.int64)
    blk_w = np.zeros(L_cls, dtype=np.int64)
    done_w = np.zeros(L_cls, dtype=np.int64)

    bw = cfg.bin_seconds
    nbins = bin_count(horizon, bw)
    starts = np.arange(nbins) * bw
    # right edge of every bin but the last, which runs to the horizon
    edges = [float(x) for x in starts[1:]] + [math.inf]
    cur = 0
    bin_L = np.zeros(nbins)
    bin_E = np.zeros(nbins)
    bin_arr = np.zeros(nbins, dtype=np.int64)
    bin_blk = np.zeros(nbins, dtype=np.int64)

    # Z(t): proportion of components in each (cluster, state) pair
    track_z = cfg.track_z
    if track_z:
        offsets = np.concatenate([[0], np.cumsum([c + 1 for c in cap])]).astype(int)
        z = np.asarray(cfg.z_target, dtype=float)
        if len(z) != offsets[-1]:
            raise ConfigError(f"z_target has {len(z)} entries, expected {offsets[-1]}")
        counts = np.zeros(len(z))
        for i in range(instance.num_clusters):
            counts[offsets[i]] = instance.component_count(i)
        diff = counts / J - z
        sq = float(diff @ diff)
        z_moves = 0
    int_z = 0.0
    z_samples: Optional[List[Tuple[float, np.ndarray]]] = [] if cfg.record_z and track_z else None
    state_time: Optional[Dict[Tuple[int, ...], float]] = {} if cfg.track_states else None

    clock = 0.0

    def advance(t: float) -> None:
        nonlocal clock, int_L, int_E, int_z, cur
        a, b = max(clock, warmup), t
        if b > a:
            int_L += rate_L * (b - a)
            int_E += rate_E * (b - a)
            if track_z:
                int_z += math.sqrt(max(sq, 0.0)) * (b - a)
            if state_time is not None:
                key = tuple(N)
                state_time[key] = state_time.get(key, 0.0) + (b - a)
        s = clock
        while edges[cur] <= t:
            bin_L[cur] += rate_L * (edges[cur] - s)
            bin_E[cur] += rate_E * (edges[cur] - s)
            s = edges[cur]
            cur += 1
        bin_L[cur] += rate_L * (t - s)
        bin_E[cur] += rate_E * (t - s)
        clock = t

    def touch(j: int, t: float) -> None:
        n = N[j]
        if n > 0:
            V[j] += (t - tau[j]) * mu[cluster_of[j]][n] / n
        tau[j] = t

    def schedule(j: int, t: float) -> None:
        nonlocal seq
        version[j] += 1
        n = N[j]
        if n > 0:
            F = finish[j][0][0]
            dt = max(F - V[j], 0.0) * n / mu[cluster_of[j]][n]
            seq += 1
            heapq.heappush(events, (t + dt, seq, j, version[j]))

    def move(j: int, old: int, new: int) -> None:
        nonlocal rate_L, rate_E, sq, z_moves
        i = cluster_of[j]
        N[j] = new
        rate_L += mu[i][new] - mu[i][old]
        rate_E += eps[i][new] - eps[i][old]
        if old == cap[i]:
            free[i] += 1
        if new == cap[i]:
            free[i] -= 1
        dispatcher.moved(j, old, new)
        if track_z:
            for k, delta in ((offsets[i] + old, -1.0 / J), (offsets[i] + new, 1.0 / J)):
                d = diff[k]
                diff[k] = d + delta
                sq += (d + delta) ** 2 - d * d
            z_moves += 1
            if z_moves % 10000 == 0:
                sq = float(diff @ diff)

    it = iter(arrivals)
    nxt = next(it, None)
    while True:
        while events and events[0][3] != version[events[0][2]]:
            heapq.heappop(events)
        t_dep = events[0][0] if events else math.inf
        t_arr = nxt[0] if nxt is not None else math.inf
        t_next = min(t_dep, t_arr)
        if t_next > horizon:
            advance(horizon)
            if z_samples is not None:
                z_samples.append((horizon, diff + z))
            break
        advance(t_next)
        if z_samples is not None and t_next >= warmup:
            z_samples.append((t_next, diff + z))

        if t_dep <= t_arr:
            _, _, j, _ = heapq.heappop(events)
            touch(j, t_next)
            F, _, cls = heapq.heappop(finish[j])
            n = N[j]
            move(j, n, n - 1)
            if n - 1 == 0:
                V[j] = 0.0
            else:
                V[j] = F
            if t_next >= warmup:
                done_w[cls] += 1
            schedule(j, t_next)
            continue

        cls = nxt[1]
        nxt = next(it, None)
        size = draws[cls].next()
        bin_arr[cur] += 1
        in_window = t_next >= warmup
        if in_window:
            arr_w[cls] += 1
        j = dispatcher.select(cls)
        if j == REJECT:
            if any(free[i] > 0 for i in elig[cls]):
                raise SimulationError(f"class {cls} rejected while an eligible slot was free", t_next)
            bin_blk[cur] += 1
            if in_window:
                blk_w[cls] += 1
            continue
        n = N[j]
        if n >= cap[cluster_of[j]]:
            raise SimulationError(f"dispatched to full component {j}", t_next)
        touch(j, t_next)
        seq += 1
        heapq.heappush(finish[j], (V[j] + size, seq, cls))
        move(j, n, n + 1)
        schedule(j, t_next)

    T = horizon - warmup
    L_avg = int_L / T
    E_avg = int_E / T
    ends = np.append(starts[1:], horizon)
    widths = ends - starts
    bins = pd.DataFrame({
        "bin_start": starts,
        "bin_end": ends,
        "throughput": bin_L / widths,
        "energy": bin_E / widths,
        "efficiency": np.divide(bin_L, bin_E, out=np.zeros(nbins), where=bin_E > 0),
        "arrivals": bin_arr,
        "blocks": bin_blk,
        "blocking_prob": np.divide(bin_blk, bin_arr, out=np.zeros(nbins), where=bin_arr > 0),
    })
    return Metrics(
        policy=policy.label,
        L=L_avg,
        E=E_avg,
        efficiency=_efficiency(L_avg, E_avg),
        duration=T,
        arrivals=arr_w,
        blocks=blk_w,
        completions=done_w,
        z_deviation=int_z / T if track_z else None,
        bins=bins,
        z_samples=z_samples,
        state_time=state_time,
    )


# ----------------------------------------------------------------- statistics

def compute_relative_difference(m1: Union[Metrics, float], m2: Union[Metrics, float]) -> float:
    """(eff1 - eff2) / eff2."""
    e1 = m1.efficiency if isinstance(m1, Metrics) else float(m1)
    e2 = m2.efficiency if isinstance(m2, Metrics) else float(m2)
    if not (math.isfinite(e2) and e2 > 0):
        raise InvalidInputError(f"reference efficiency must be positive, got {e2!r}")
    return (e1 - e2) / e2


def z_deviation_stats(samples: Sequence[Tuple[float, np.ndarray]], z: np.ndarray) -> float:
    """Time-average of ||Z(t) - z|| by the trapezoid rule over the sample epochs."""
    if not samples:
        return 0.0
    z = np.asarray(z, dtype=float)
    t = np.array([s[0] for s in samples], dtype=float)
    d = np.array([np.linalg.norm(np.asarray(s[1], dtype=float) - z) for s in samples])
    if len(t) == 1 or t[-1] <= t[0]:
        return float(d.mean())
    return float(np.trapezoid(d, t) / (t[-1] - t[0]))


def t_halfwidth(values: Sequence[float], confidence: float = 0.95) -> float:
    x = np.asarray(values, dtype=float)
    k = len(x)
    if k < 2:
        return math.inf
    sd = float(x.std(ddof=1))
    if sd == 0.0:
        return 0.0
    return float(stats.t.ppf(0.5 + confidence / 2.0, k - 1) * sd / math.sqrt(k))


def pool_metrics(runs: Sequence[Metrics]) -> Metrics:
    """Pooled view of independent replications (order-independent)."""
    if not runs:
        raise InvalidInputError("nothing to pool")
    L = float(np.mean([m.L for m in runs]))
    E = float(np.mean([m.E for m in runs]))
    eff = float(np.mean([m.efficiency for m in runs]))
    zs = [m.z_deviation for m in runs if m.z_deviation is not None]
    bins = None
    if all(m.bins is not None for m in runs):
        frames = pd.concat([m.bins for m in runs])
        bins = frames.groupby(["bin_start", "bin_end"], as_index=False).mean()
    return Metrics(
        policy=runs[0].policy,
        L=L,
        E=E,
        efficiency=eff,
        duration=float(sum(m.duration for m in runs)),
        arrivals=np.sum([m.arrivals for m in runs], axis=0),
        blocks=np.sum([m.blocks for m in runs], axis=0),
        completions=np.sum([m.completions for m in runs], axis=0),
        z_deviation=float(np.mean(zs)) if zs else None,
        replications=len(runs),
        ci_halfwidth={
            "efficiency": t_halfwidth([m.efficiency for m in runs]),
            "L": t_halfwidth([m.L for m in runs]),
            "E": t_halfwidth([m.E for m in runs]),
        },
        bins=bins,
        per_replication=list(runs),
    )


def _run_one(args) -> Metrics:
    instance, policy, cfg, ss, arrivals = args
    return run_simulation(instance, policy, cfg, seed=ss, arrivals=arrivals)


def replicate_until_ci(instance: FarmInstance, policy: PolicySpec, cfg: SimConfig,
                       arrivals: Optional[List[Arrival]] = None) -> Metrics:
    """Independent replications until the 95% half-width of efficiency is within ci_target of its mean.

    Replication k always uses child k of ``SeedSequence(cfg.seed)``, so
    results do not depend on the worker count; a run that reaches
    max_replications without meeting the target is flagged ``cap_hit``.
    """
    cfg.validate()
    children = _seed_sequence(cfg.seed).spawn(cfg.max_replications)
    runs: List[Metrics] = []
    workers = max(1, int(cfg.workers))
    pool = multiprocessing.Pool(workers) if workers > 1 else None
    try:
        while len(runs) < cfg.max_replications:
            need = cfg.min_replications - len(runs) if len(runs) < cfg.min_replications else 1
            batch = max(need, workers) if pool is not None else need
            batch = min(batch, cfg.max_replications - len(runs))
            jobs = [(instance, policy, cfg, children[len(runs) + k], arrivals) for k in range(batch)]
            results = pool.map(_run_one, jobs) if pool is not None else [_run_one(a) for a in jobs]
            for m in results:
                runs.append(m)
                if len(runs) >= cfg.min_replications and _ci_met(runs, cfg.ci_target):
                    break
            if len(runs) >= cfg.min_replications and _ci_met(runs, cfg.ci_target):
                break
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    pooled = pool_metrics(runs)
    pooled.cap_hit = not _ci_met(runs, cfg.ci_target)
    if pooled.cap_hit:
        logger.warning("%s: CI target %.3g not met after %d replications (half-width %.3g, mean %.6g)",
                       policy.label, cfg.ci_target, len(runs), pooled.ci_halfwidth["efficiency"], pooled.efficiency)
    else:
        logger.info("%s: efficiency %.6g +/- %.3g over %d replications", policy.label, pooled.efficiency,
                    pooled.ci_halfwidth["efficiency"], len(runs))
    return pooled


def _ci_met(runs: Sequence[Metrics], target: float) -> bool:
    eff = [m.efficiency for m in runs]
    half = t_halfwidth(eff)
    return half <= target * abs(float(np.mean(eff)))


def with_replications(cfg: SimConfig, n: int) -> SimConfig:
    """Fixed replication count (min = max = n)."""
    return replace(cfg, min_replications=n, max_replications=n)
