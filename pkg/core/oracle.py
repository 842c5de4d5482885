"""Exact desk-scale solves: stationary laws, optimal average reward, Dinkelbach ratio optimum.

Two state representations are supported. ``product`` keeps the occupancy of
every component (any label-dependent policy can be evaluated on it);
``counts`` keeps, per cluster, how many components sit at each occupancy
level, which is enough for the optimal solve because components of one
cluster are exchangeable.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from core import config
from core.errors import ConvergenceError, InvalidInputError, StateSpaceTooLargeError
from core.model import ClusterSpec, FarmInstance
from core.policies import REJECT

logger = logging.getLogger(__name__)

REPRESENTATIONS = ("product", "counts")
UNIFORMIZATION_SLACK = 1.01


@dataclass
class StateSpace:
    representation: str
    states: List[Tuple]
    index: Dict[Tuple, int]
    L_rate: np.ndarray
    E_rate: np.ndarray
    departures: sparse.csr_matrix           # off-diagonal departure rates
    arrival_rates: np.ndarray               # per class, h * lambda_l^0
    options: List[List[List[int]]]          # [class][state] -> admissible target states
    labels: List[List[List[object]]]        # [class][state] -> decision label per option (None = reject)
    blocked: np.ndarray                     # (L, S) True where class l has no free eligible slot

    @property
    def size(self) -> int:
        return len(self.states)


@dataclass
class SteadyState:
    space: StateSpace
    pi: np.ndarray
    L: float
    E: float
    blocking: np.ndarray

    @property
    def efficiency(self) -> float:
        return self.L / self.E if self.E > 0 else 0.0

    def as_dict(self) -> Dict[Tuple, float]:
        return {s: float(p) for s, p in zip(self.space.states, self.pi)}


@dataclass
class OraclePolicy:
    """Deterministic stationary policy: chosen target state per (class, state)."""
    space: StateSpace
    choice: List[np.ndarray]

    def decision(self, cls: int, state: Tuple) -> object:
        s = self.space.index[tuple(state)]
        k = self.space.options[cls][s].index(int(self.choice[cls][s]))
        return self.space.labels[cls][s][k]


@dataclass
class OptimalSolution:
    gain: float                 # normalized by h
    gain_total: float
    policy: OraclePolicy
    iterations: int
    span: float


@dataclass
class DinkelbachResult:
    e_star: float
    policy: OraclePolicy
    steady: SteadyState
    iterations: int
    history: List[Tuple[float, float]] = field(default_factory=list)  # (e, normalized gain)
    converged: bool = True


@dataclass
class ThresholdCheck:
    is_threshold: bool
    threshold: int            # last active state; -1 = never admit
    active: Tuple[bool, ...]  # optimal action in states 0..C-1
    gain: float


# ----------------------------------------------------------------- enumeration

def product_state_count(instance: FarmInstance) -> int:
    return math.prod((c.capacity + 1) ** instance.component_count(i) for i, c in enumerate(instance.clusters))


def counts_state_count(instance: FarmInstance) -> int:
    return math.prod(math.comb(instance.component_count(i) + c.capacity, c.capacity)
                     for i, c in enumerate(instance.clusters))


def _compositions(total: int, parts: int) -> Iterator[Tuple[int, ...]]:
    """All ways to spread ``total`` over ``parts`` levels; (total, 0, ..., 0) first."""
    if parts == 1:
        yield (total,)
        return
    for k in range(total, -1, -1):
        for rest in _compositions(total - k, parts - 1):
            yield (k,) + rest


def build_state_space(instance: FarmInstance, representation: str = "product",
                      state_cap: Optional[int] = None) -> StateSpace:
    if representation not in REPRESENTATIONS:
        raise InvalidInputError(f"unknown representation {representation!r}")
    cap = config.STATE_CAP if state_cap is None else int(state_cap)
    count = product_state_count(instance) if representation == "product" else counts_state_count(instance)
    if count > cap:
        raise StateSpaceTooLargeError(count, cap)
    if representation == "product":
        return _product_space(instance)
    return _counts_space(instance)


def _finish(instance: FarmInstance, representation: str, states: List[Tuple], L_rate, E_rate,
            dep_rows, dep_cols, dep_vals, options, labels) -> StateSpace:
    S = len(states)
    dep = sparse.csr_matrix((dep_vals, (dep_rows, dep_cols)), shape=(S, S))
    blocked = np.array([[lab == [None] for lab in labels[cls]] for cls in range(instance.num_classes)],
                       dtype=bool).reshape(instance.num_classes, S)
    return StateSpace(
        representation=representation,
        states=states,
        index={s: k for k, s in enumerate(states)},
        L_rate=np.asarray(L_rate, dtype=float),
        E_rate=np.asarray(E_rate, dtype=float),
        departures=dep,
        arrival_rates=instance.scaling * np.array([c.arrival_rate_base for c in instance.classes]),
        options=options,
        labels=labels,
        blocked=blocked,
    )


def _product_space(instance: FarmInstance) -> StateSpace:
    J = instance.total_components
    cl = [int(x) for x in instance.component_clusters]
    caps = [instance.clusters[i].capacity for i in cl]
    mu = [instance.clusters[i].service_rates for i in cl]
    eps = [instance.clusters[i].energy_rates for i in cl]
    states = list(itertools.product(*[range(c + 1) for c in caps]))
    index = {s: k for k, s in enumerate(states)}
    elig = [instance.eligible_components(cls) for cls in range(instance.num_classes)]

    L_rate, E_rate = [], []
    rows, cols, vals = [], [], []
    options = [[] for _ in range(instance.num_classes)]
    labels = [[] for _ in range(instance.num_classes)]
    for k, s in enumerate(states):
        L_rate.append(sum(mu[j][s[j]] for j in range(J)))
        E_rate.append(sum(eps[j][s[j]] for j in range(J)))
        for j in range(J):
            if s[j] > 0:
                t = list(s)
                t[j] -= 1
                rows.append(k)
                cols.append(index[tuple(t)])
                vals.append(mu[j][s[j]])
        for cls in range(instance.num_classes):
            opts, labs = [], []
            for j in elig[cls]:
                if s[j] < caps[j]:
                    t = list(s)
                    t[j] += 1
                    opts.append(index[tuple(t)])
                    labs.append(j)
            if not opts:
                opts, labs = [k], [None]
            options[cls].append(opts)
            labels[cls].append(labs)
    return _finish(instance, "product", states, L_rate, E_rate, rows, cols, vals, options, labels)


def _counts_space(instance: FarmInstance) -> StateSpace:
    clusters = instance.clusters
    per_cluster = [list(_compositions(instance.component_count(i), c.capacity + 1)) for i, c in enumerate(clusters)]
    states = list(itertools.product(*per_cluster))
    index = {s: k for k, s in enumerate(states)}
    elig = [instance.eligible_positions(cls) for cls in range(instance.num_classes)]

    def moved(s, i, n, step):
        block = list(s[i])
        block[n] -= 1
        block[n + step] += 1
        t = list(s)
        t[i] = tuple(block)
        return index[tuple(t)]

    L_rate, E_rate = [], []
    rows, cols, vals = [], [], []
    options = [[] for _ in range(instance.num_classes)]
    labels = [[] for _ in range(instance.num_classes)]
    for k, s in enumerate(states):
        L_rate.append(sum(cnt * clusters[i].service_rates[n] for i, block in enumerate(s) for n, cnt in enumerate(block)))
        E_rate.append(sum(cnt * clusters[i].energy_rates[n] for i, block in enumerate(s) for n, cnt in enumerate(block)))
        for i, block in enumerate(s):
            for n in range(1, clusters[i].capacity + 1):
                if block[n] > 0:
                    rows.append(k)
                    cols.append(moved(s, i, n, -1))
                    vals.append(block[n] * clusters[i].service_rates[n])
        for cls in range(instance.num_classes):
            opts, labs = [], []
            for i in sorted(elig[cls]):
                for n in range(clusters[i].capacity):
                    if s[i][n] > 0:
                        opts.append(moved(s, i, n, +1))
                        labs.append((i, n))
            if not opts:
                opts, labs = [k], [None]
            options[cls].append(opts)
            labels[cls].append(labs)
    return _finish(instance, "counts", states, L_rate, E_rate, rows, cols, vals, options, labels)


# ----------------------------------------------------------------- stationary laws

def _solve_stationary(Q: sparse.csr_matrix) -> np.ndarray:
    S = Q.shape[0]
    if S == 1:
        return np.ones(1)
    A = Q.T.tolil()
    A[S - 1, :] = np.ones(S)
    b = np.zeros(S)
    b[S - 1] = 1.0
    pi = spsolve(A.tocsc(), b)
    pi = np.clip(np.asarray(pi, dtype=float), 0.0, None)
    return pi / pi.sum()


def _generator(space: StateSpace, choice: Sequence[np.ndarray]) -> sparse.csr_matrix:
    S = space.size
    Q = space.departures.tocoo()
    rows, cols, vals = [Q.row], [Q.col], [Q.data]
    for cls, lam in enumerate(space.arrival_rates):
        target = np.asarray(choice[cls], dtype=int)
        move = target != np.arange(S)
        rows.append(np.nonzero(move)[0])
        cols.append(target[move])
        vals.append(np.full(int(move.sum()), float(lam)))
    off = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(S, S))
    return (off - sparse.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()


def steady_state_for_choice(space: StateSpace, choice: Sequence[np.ndarray]) -> SteadyState:
    pi = _solve_stationary(_generator(space, choice))
    return SteadyState(
        space=space,
        pi=pi,
        L=float(pi @ space.L_rate),
        E=float(pi @ space.E_rate),
        blocking=np.array([float(pi[space.blocked[cls]].sum()) for cls in range(len(space.arrival_rates))]),
    )


def exact_steady_state(instance: FarmInstance, policy: Callable[[np.ndarray, int], int],
                       state_cap: Optional[int] = None) -> SteadyState:
    """Stationary law of the farm under a fixed Markovian policy (exponential sizes).

    ``policy(occupancy, cls)`` returns a component label or ``REJECT``.
    """
    space = build_state_space(instance, "product", state_cap)
    choice = []
    for cls in range(instance.num_classes):
        target = np.empty(space.size, dtype=int)
        for k, s in enumerate(space.states):
            j = policy(np.array(s, dtype=int), cls)
            labs = space.labels[cls][k]
            if j == REJECT:
                if labs != [None]:
                    raise InvalidInputError(f"policy rejects class {cls + 1} in state {s} with free eligible slots")
                target[k] = k
                continue
            if j not in labs:
                raise InvalidInputError(f"policy sends class {cls + 1} to component {j} in state {s}, "
                                        f"which is full or not eligible")
            target[k] = space.options[cls][k][labs.index(j)]
        choice.append(target)
    return steady_state_for_choice(space, choice)


# ----------------------------------------------------------------- optimal control

def _uniformization(space: StateSpace) -> float:
    out_rates = np.asarray(space.departures.sum(axis=1)).ravel()
    return float((out_rates.max() + space.arrival_rates.sum()) * UNIFORMIZATION_SLACK)


def _padded(rows: List[List[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    return np.array([r + [r[0]] * (width - len(r)) for r in rows], dtype=int)


def _relative_value_iteration(reward: np.ndarray, P_dep: sparse.csr_matrix, stay: np.ndarray,
                              event_probs: Sequence[float], targets: Sequence[np.ndarray],
                              lumps: Sequence[Optional[np.ndarray]], rate: float,
                              reference: int = 0) -> Tuple[float, List[np.ndarray], int, float]:
    """Undiscounted RVI on the uniformized chain; returns (gain, argmax choices, iterations, span)."""
    V = np.zeros(len(reward))
    span = math.inf
    for it in range(1, config.RVI_MAX_ITER + 1):
        new = reward + P_dep @ V + stay * V
        for p, tgt, lump in zip(event_probs, targets, lumps):
            q = V[tgt] if lump is None else V[tgt] + lump
            new += p * q.max(axis=1)
        diff = new - V
        span = float(diff.max() - diff.min()) * rate
        V = new - new[reference]
        if span < config.RVI_TOL:
            gain = 0.5 * float(diff.max() + diff.min()) * rate
            choices = []
            for tgt, lump in zip(targets, lumps):
                q = V[tgt] if lump is None else V[tgt] + lump
                choices.append(np.take_along_axis(tgt, q.argmax(axis=1)[:, None], axis=1).ravel())
            return gain, choices, it, span
    raise ConvergenceError(f"relative value iteration did not converge in {config.RVI_MAX_ITER} iterations", span)


def exact_optimal_avg_reward(instance: FarmInstance, e: float, representation: str = "counts",
                             state_cap: Optional[int] = None) -> OptimalSolution:
    """Maximal long-run average of sum mu_j(N_j) - e * sum eps_j(N_j), normalized by h."""
    space = build_state_space(instance, representation, state_cap)
    rate = _uniformization(space)
    reward = (space.L_rate - e * space.E_rate) / rate
    out_rates = np.asarray(space.departures.sum(axis=1)).ravel()
    stay = 1.0 - (out_rates + space.arrival_rates.sum()) / rate
    P_dep = (space.departures / rate).tocsr()
    targets = [_padded(space.options[cls]) for cls in range(instance.num_classes)]
    gain, choices, it, span = _relative_value_iteration(
        reward, P_dep, stay, list(space.arrival_rates / rate), targets, [None] * len(targets), rate)
    logger.info("RVI converged in %d iterations (span %.2e, %d states, e=%.6g)", it, span, space.size, e)
    return OptimalSolution(gain=gain / instance.scaling, gain_total=gain,
                           policy=OraclePolicy(space=space, choice=choices), iterations=it, span=span)


def dinkelbach_optimal_ratio(instance: FarmInstance, representation: str = "counts", tol: float = 1e-9,
                             max_iter: int = 100, state_cap: Optional[int] = None) -> DinkelbachResult:
    """Ratio optimum e* = max L/E by Dinkelbach iteration starting from e = 0."""
    e = 0.0
    history: List[Tuple[float, float]] = []
    for it in range(1, max_iter + 1):
        sol = exact_optimal_avg_reward(instance, e, representation, state_cap)
        steady = steady_state_for_choice(sol.policy.space, sol.policy.choice)
        history.append((e, sol.gain))
        if abs(sol.gain) < tol:
            return DinkelbachResult(e_star=e, policy=sol.policy, steady=steady, iterations=it, history=history)
        e_next = steady.efficiency
        if e_next <= e:
            logger.warning("Dinkelbach stalled at e=%.15g with gain %.3e above tol %.1e", e, sol.gain, tol)
            return DinkelbachResult(e_star=max(e, e_next), policy=sol.policy, steady=steady,
                                    iterations=it, history=history, converged=False)
        e = e_next
    raise ConvergenceError(f"Dinkelbach iteration did not converge in {max_iter} steps", abs(history[-1][1]))


def verify_threshold_structure(cluster: ClusterSpec, e: float, nu: float, h: float = 1.0,
                               lambda_hat0: Optional[float] = None) -> ThresholdCheck:
    """Optimal admission control of one component paying h * nu * lambda_hat per unit active time.

    Arrivals come at rate h * lambda_hat0 while the component admits; the
    reward rate is mu(n) - e * eps(n).
    """
    lam = float(lambda_hat0 if lambda_hat0 is not None else 1.0)
    if lam <= 0:
        raise InvalidInputError("lambda_hat0 must be positive")
    C = cluster.capacity
    mu = np.asarray(cluster.service_rates, dtype=float)
    eps = np.asarray(cluster.energy_rates, dtype=float)
    birth = h * lam
    rate = (birth + mu.max()) * UNIFORMIZATION_SLACK
    S = C + 1
    P_dep = sparse.csr_matrix((mu[1:] / rate, (np.arange(1, S), np.arange(0, S - 1))), shape=(S, S))
    stay = 1.0 - (mu + birth) / rate
    # options per state: [admit -> n+1, refuse -> n]; full state only refuses
    targets = np.array([[min(n + 1, C), n] for n in range(S)], dtype=int)
    lumps = np.array([[-nu if n < C else -np.inf, 0.0] for n in range(S)])
    reward = (mu - e * eps) / rate
    gain, choices, _, _ = _relative_value_iteration(reward, P_dep, stay, [birth / rate], [targets], [lumps], rate)
    active = tuple(bool(choices[0][n] == n + 1) for n in range(C))
    m = -1
    while m + 1 < C and active[m + 1]:
        m += 1
    is_threshold = all(not a for a in active[m + 1:])
    return ThresholdCheck(is_threshold=is_threshold, threshold=m, active=active, gain=gain)
