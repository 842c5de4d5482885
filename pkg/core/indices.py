"""Index computation, fluid fit of Gamma(e) and the bisection for the criterion e0."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from core import config
from core.errors import NoSignChangeError, NumericFailureError
from core.markov import LIMIT, gamma_bar, threshold_profile
from core.model import ClusterSpec, FarmInstance

logger = logging.getLogger(__name__)


@dataclass
class IndexTable:
    e: float
    h: float
    epsilon: float
    eta0: Tuple[np.ndarray, ...]      # per cluster, states 0..C_i-1
    class_weights: np.ndarray         # (L, I): lambda_l^0 / lambda_hat_i^0, nan where not eligible
    diagnostics: List[str] = field(default_factory=list)

    def u(self, cls: int, i: int, n: int) -> float:
        return float(self.eta0[i][n] * self.class_weights[cls, i])

    def u_array(self, cls: int, i: int) -> np.ndarray:
        return self.eta0[i] * self.class_weights[cls, i]

    def scaled(self, factor: float) -> "IndexTable":
        return IndexTable(e=self.e, h=self.h, epsilon=self.epsilon,
                          eta0=tuple(a * factor for a in self.eta0),
                          class_weights=self.class_weights, diagnostics=list(self.diagnostics))


@dataclass
class FluidAllocation:
    q: np.ndarray       # per cluster fluid level
    u: np.ndarray       # per cluster fraction of components one level above q
    s: np.ndarray       # per class served fraction
    gamma: float
    e: float
    eta: Tuple[np.ndarray, ...] = ()


def class_weights(instance: FarmInstance) -> np.ndarray:
    lam = instance.lambda_hat0
    w = np.full((instance.num_classes, instance.num_clusters), np.nan)
    for cls, c in enumerate(instance.classes):
        for i in instance.eligible_positions(cls):
            w[cls, i] = c.arrival_rate_base / lam[i]
    return w


def f_function(cluster: ClusterSpec, lam: float, e: float, h: float) -> Callable[[int, float], float]:
    """f^h_{i,n} for one cluster as a closure (n, eta0) -> value, sharing the cached threshold profile."""
    P, Q, B = threshold_profile(cluster, h, float(lam))
    mu = np.asarray(cluster.service_rates, dtype=float)
    eps = np.asarray(cluster.energy_rates, dtype=float)
    base = P - e * Q

    def f(n: int, eta0: float) -> float:
        g = float(np.max(base - eta0 * B))
        tail = (g + e * eps[n + 1:]) / mu[n + 1:] - 1.0
        return eta0 + lam * float(tail.min())

    return f


def f_value(instance: FarmInstance, i: int, n: int, eta0: float, e: float, h: Optional[float] = None) -> float:
    """f^h_{i,n}(eta0); its zero is the aggregate index eta0_{i,n}.

    ``i`` is the cluster position, ``h`` defaults to the instance scaling
    (``markov.LIMIT`` selects the h -> infinity sub-process).
    """
    c = instance.clusters[i]
    if not 0 <= n <= c.capacity - 1:
        raise ValueError(f"state {n} outside 0..{c.capacity - 1}")
    h = instance.scaling if h is None else h
    lam = float(instance.lambda_hat0[i])
    g = gamma_bar(c, eta0, e, h, lam)
    mu = np.asarray(c.service_rates, dtype=float)[n + 1:]
    eps = np.asarray(c.energy_rates, dtype=float)[n + 1:]
    return float(eta0 + lam * np.min((g + e * eps) / mu - 1.0))


def _closed_form_eta(cluster: ClusterSpec, lam: float, e: float, n: int) -> float:
    mu, eps = cluster.service_rates, cluster.energy_rates
    return lam * (1.0 - e * (eps[n] - eps[0]) / mu[n])


def _eval(f: Callable[[int, float], float], i: int, n: int, x: float) -> float:
    v = f(n, x)
    if not math.isfinite(v):
        raise NumericFailureError(f"f is not finite at cluster {i + 1}, state {n}, eta0={x!r}",
                                  cluster=i + 1, state=n, eta0=x)
    return v


def _repair_bracket(f, i: int, n: int, lo: float, hi: float, diagnostics: List[str]) -> Tuple[float, float]:
    if lo > hi:
        lo, hi = hi, lo
    f_lo = _eval(f, i, n, lo)
    f_hi = _eval(f, i, n, hi)
    if f_lo <= 0 <= f_hi:
        return lo, hi
    msg = (f"cluster {i + 1} state {n}: bracket [{lo:.17g}, {hi:.17g}] has no sign change "
           f"(f={f_lo:.3g}, {f_hi:.3g}); widening")
    logger.warning(msg)
    diagnostics.append(msg)
    step = max(hi - lo, 1.0)
    for _ in range(config.MAX_DOUBLINGS):
        if f_lo > 0:
            hi, lo = lo, lo - step
            f_lo = _eval(f, i, n, lo)
        elif f_hi < 0:
            lo, hi = hi, hi + step
            f_hi = _eval(f, i, n, hi)
        else:
            return lo, hi
        step *= 2.0
    raise NumericFailureError(f"no bracket found for cluster {i + 1}, state {n} after "
                              f"{config.MAX_DOUBLINGS} doublings", cluster=i + 1, state=n, eta0=lo)


def _bisect(f, i: int, n: int, lo: float, hi: float, epsilon: float) -> float:
    while hi - lo > epsilon:
        mid = (lo + hi) / 2.0
        if mid <= lo or mid >= hi:
            break
        v = _eval(f, i, n, mid)
        if v < 0:
            lo = mid
        elif v > 0:
            hi = mid
        else:
            return mid
    return (lo + hi) / 2.0


def solve_indices(instance: FarmInstance, e: float, h: Optional[float] = None,
                  epsilon: Optional[float] = None) -> IndexTable:
    """Zeros of f^h_{i,n} for every cluster, sweeping n = C-1 down to 0."""
    h = instance.scaling if h is None else h
    epsilon = config.EPSILON if epsilon is None else epsilon
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    lam_hat = instance.lambda_hat0
    diagnostics: List[str] = []
    etas: List[np.ndarray] = []

    for i, c in enumerate(instance.clusters):
        C = c.capacity
        eta = np.zeros(C)
        lam = float(lam_hat[i])
        if lam <= 0:
            etas.append(eta)
            continue
        f = f_function(c, lam, e, h)

        step = 1.0
        upper = _closed_form_eta(c, lam, e, C)
        top = upper
        for _ in range(config.MAX_DOUBLINGS + 1):
            if _eval(f, i, C - 1, upper - step) <= 0:
                break
            upper -= step
            step *= 2.0
        else:
            raise NumericFailureError(f"lower bracket for cluster {i + 1} did not expand within "
                                      f"{config.MAX_DOUBLINGS} doublings", cluster=i + 1, state=C - 1,
                                      eta0=upper - step)
        lower = upper - step

        for n in range(C - 1, -1, -1):
            lo, hi = _repair_bracket(f, i, n, lower, upper, diagnostics)
            eta[n] = _bisect(f, i, n, lo, hi, epsilon)
            if n > 0:
                lower = eta[n]
                upper = max(_closed_form_eta(c, lam, e, n), top)
                top = upper
        etas.append(eta)

    return IndexTable(e=float(e), h=float(h), epsilon=float(epsilon), eta0=tuple(etas),
                      class_weights=class_weights(instance), diagnostics=diagnostics)


def closed_form_index(cluster: ClusterSpec, arrival_rate_base: float, e: float, rtol: float = 1e-12) -> Optional[float]:
    """lambda_l^0 (1 - e/r_i) when mu(n)/(eps(n)-eps(0)) is non-decreasing in n >= 1, else None."""
    mu, eps = cluster.service_rates, cluster.energy_rates
    ratios = [mu[n] / (eps[n] - eps[0]) for n in range(1, cluster.capacity + 1)]
    for a, b in zip(ratios, ratios[1:]):
        if b < a - rtol * max(abs(a), 1.0):
            return None
    return arrival_rate_base * (1.0 - e / cluster.peak_ratio)


def fluid_fit(instance: FarmInstance, e: float, limit_h: Optional[float] = None,
              epsilon: Optional[float] = None, table: Optional[IndexTable] = None) -> FluidAllocation:
    """Greedy fluid allocation over state-cluster pairs ranked by index."""
    limit_h = config.H_LIMIT if limit_h is None else limit_h
    if table is None:
        table = solve_indices(instance, e, h=limit_h, epsilon=epsilon)
    lam_hat = instance.lambda_hat0
    I, L = instance.num_clusters, instance.num_classes
    eligible_classes = [[cls for cls in range(L) if i in instance.eligible_positions(cls)] for i in range(I)]

    # eta_{i,n} = sum over eligible classes of u_{l,i}(n) = eta0_{i,n}
    pairs = [(i, n) for i in range(I) if eligible_classes[i] for n in range(instance.clusters[i].capacity)]
    pairs.sort(key=lambda p: (-table.eta0[p[0]][p[1]], p[0], p[1]))

    s = np.zeros(L)
    q = np.zeros(I, dtype=int)
    u = np.zeros(I)
    for i, n in pairs:
        if np.all(s >= 1.0):
            break
        elig = eligible_classes[i]
        x = min(elig, key=lambda cls: (1.0 - s[cls], cls))
        if s[x] >= 1.0:
            continue
        c = instance.clusters[i]
        dmu = c.component_count_base * (c.service_rates[n + 1] - c.service_rates[n])
        need = lam_hat[i] * (1.0 - s[x])
        if dmu >= need:
            gap = 1.0 - s[x]
            for cls in elig:
                s[cls] = min(1.0, s[cls] + gap)
            u[i] = need / dmu
            q[i] = n
        else:
            for cls in elig:
                s[cls] = min(1.0, s[cls] + dmu / lam_hat[i])
            u[i] = 0.0
            q[i] = n + 1

    gamma = 0.0
    for i, c in enumerate(instance.clusters):
        mu, eps = c.service_rates, c.energy_rates
        r1 = (mu[q[i]] - e * eps[q[i]]) * (1.0 - u[i])
        r2 = (mu[q[i] + 1] - e * eps[q[i] + 1]) * u[i] if q[i] < c.capacity else 0.0
        gamma += (r1 + r2) * c.component_count_base
    return FluidAllocation(q=q, u=u, s=s, gamma=float(gamma), e=float(e), eta=table.eta0)


def e0_upper_bound(instance: FarmInstance) -> float:
    total = 0.0
    for c in instance.clusters:
        best = max(c.service_rates[n] / c.energy_rates[n]
                   for n in range(c.capacity + 1) if c.energy_rates[n] > 0)
        total += c.component_count_base * best
    return total


def solve_e0(instance: FarmInstance, epsilon: Optional[float] = None, limit_h: Optional[float] = None) -> float:
    """Bisection on the sign of Gamma(e) over [0, sum_i M_i^0 max_n mu_i(n)/eps_i(n)]."""
    epsilon = config.EPSILON if epsilon is None else epsilon
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    def gamma(e: float) -> float:
        return fluid_fit(instance, e, limit_h=limit_h, epsilon=epsilon).gamma

    e1, e2 = 0.0, e0_upper_bound(instance)
    g1, g2 = gamma(e1), gamma(e2)
    if (g1 < 0 and g2 < 0) or (g1 > 0 and g2 > 0):
        raise NoSignChangeError(g1, g2, e1, e2)
    if g1 == 0:
        return e1
    if g2 == 0 and g1 < 0:
        return e2

    while e2 - e1 > epsilon:
        e = (e1 + e2) / 2.0
        if e <= e1 or e >= e2:
            break
        g = gamma(e)
        if g < 0:
            e2 = e
        elif g > 0:
            e1 = e
        else:
            logger.info("Gamma(e) is exactly zero at e=%.17g", e)
            return e
    e0 = (e1 + e2) / 2.0
    logger.info("e0 estimate %.15g (bracket width %.3g)", e0, e2 - e1)
    return e0


def solve_mpmp(instance: FarmInstance, e: Optional[float] = None, h: Optional[float] = None,
               epsilon: Optional[float] = None, limit_h: Optional[float] = None) -> Tuple[float, IndexTable]:
    """Criterion (solved for unless given) and the MPMP index table at that criterion."""
    if e is None:
        e = solve_e0(instance, epsilon=epsilon, limit_h=limit_h)
    return e, solve_indices(instance, e, h=h, epsilon=epsilon)


__all__ = [
    "IndexTable", "FluidAllocation", "LIMIT", "f_function", "f_value", "solve_indices", "closed_form_index",
    "fluid_fit", "solve_e0", "solve_mpmp", "e0_upper_bound", "class_weights",
]
