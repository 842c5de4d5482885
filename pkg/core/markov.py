"""Steady states of single-component birth-death sub-processes under threshold policies."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Tuple, Union

import numpy as np

from core.errors import InvalidInputError
from core.model import ClusterSpec, FarmInstance

# h marker for the h -> infinity limit of the sub-process.
LIMIT = math.inf


@dataclass(frozen=True)
class BirthDeathSpec:
    birth_rates: Tuple[float, ...]
    death_rates: Tuple[float, ...]


@dataclass(frozen=True)
class ThresholdPolicy:
    """Admit in states n <= m, reject above."""
    m: int


def _check_rates(values: Sequence[float], what: str) -> None:
    for n, v in enumerate(values):
        if v is None or not math.isfinite(v) or v < 0:
            raise InvalidInputError(f"{what}[{n}] = {v!r} is not a finite non-negative rate")


def bd_steady_state(spec: BirthDeathSpec) -> np.ndarray:
    """Stationary law of a birth-death chain started in state 0.

    Product-form ratios accumulated in log space; states above the first
    zero birth rate (or zero death rate) are unreachable and get mass 0.
    """
    births, deaths = spec.birth_rates, spec.death_rates
    if len(births) != len(deaths) or not births:
        raise InvalidInputError("birth and death vectors must be non-empty and of equal length")
    _check_rates(births, "birth_rates")
    _check_rates(deaths, "death_rates")

    size = len(births)
    logw = np.full(size, -np.inf)
    logw[0] = 0.0
    for n in range(size - 1):
        if births[n] <= 0 or deaths[n + 1] <= 0:
            break
        logw[n + 1] = logw[n] + math.log(births[n]) - math.log(deaths[n + 1])

    reach = np.isfinite(logw)
    w = np.zeros(size)
    w[reach] = np.exp(logw[reach] - logw[reach].max())
    total = float(np.sort(w[reach])[::-1].sum())
    return w / total


def _threshold_chain(cluster: ClusterSpec, m: int, h: float, lambda_hat0: float) -> BirthDeathSpec:
    C = cluster.capacity
    births = tuple(h * lambda_hat0 if n <= m and n < C else 0.0 for n in range(C + 1))
    return BirthDeathSpec(birth_rates=births, death_rates=tuple(cluster.service_rates))


def threshold_avg_reward(cluster: ClusterSpec, m: Union[int, ThresholdPolicy], eta0: float, e: float,
                         h: float, lambda_hat0: float) -> float:
    """Long-run average reward of one component admitting in states n <= m.

    Reward rate mu(n) - e*eps(n), minus the aggregate multiplier h*eta0 paid
    per unit time while the component is admitting.
    """
    if isinstance(m, ThresholdPolicy):
        m = m.m
    if not (math.isfinite(e) and math.isfinite(eta0)):
        raise InvalidInputError(f"e and eta0 must be finite (e={e!r}, eta0={eta0!r})")
    if not 0 <= m <= cluster.capacity - 1:
        raise InvalidInputError(f"threshold {m} outside 0..{cluster.capacity - 1}")
    pi = bd_steady_state(_threshold_chain(cluster, m, h, lambda_hat0))
    mu = np.asarray(cluster.service_rates)
    eps = np.asarray(cluster.energy_rates)
    return float(pi @ (mu - e * eps) - h * eta0 * pi[: m + 1].sum())


@lru_cache(maxsize=4096)
def threshold_profile(cluster: ClusterSpec, h: float, lambda_hat0: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-threshold coefficients (P, Q, B) with reward(m) = P[m] - e*Q[m] - eta0*B[m].

    In limit mode the chain under threshold m sits in state m+1 and the tax
    mass h*pi(m) tends to mu(m+1)/lambda_hat0.
    """
    C = cluster.capacity
    mu = np.asarray(cluster.service_rates, dtype=float)
    eps = np.asarray(cluster.energy_rates, dtype=float)
    if h == LIMIT:
        P = mu[1:].copy()
        Q = eps[1:].copy()
        B = mu[1:] / lambda_hat0
    else:
        P = np.empty(C)
        Q = np.empty(C)
        B = np.empty(C)
        for m in range(C):
            pi = bd_steady_state(_threshold_chain(cluster, m, h, lambda_hat0))
            P[m] = pi @ mu
            Q[m] = pi @ eps
            B[m] = h * pi[: m + 1].sum()
    for arr in (P, Q, B):
        arr.setflags(write=False)
    return P, Q, B


def gamma_bar(cluster: ClusterSpec, eta0: float, e: float, h: float, lambda_hat0: float) -> float:
    """Best threshold reward max_m over m in 0..C-1 (the never-admitting policy is not a candidate)."""
    if not (math.isfinite(e) and math.isfinite(eta0)):
        raise InvalidInputError(f"e and eta0 must be finite (e={e!r}, eta0={eta0!r})")
    P, Q, B = threshold_profile(cluster, h, float(lambda_hat0))
    return float(np.max(P - e * Q - eta0 * B))


def best_threshold(cluster: ClusterSpec, eta0: float, e: float, h: float, lambda_hat0: float) -> int:
    P, Q, B = threshold_profile(cluster, h, float(lambda_hat0))
    return int(np.argmax(P - e * Q - eta0 * B))


def availability_A(instance: FarmInstance) -> Tuple[np.ndarray, bool]:
    """Per-class availability under the admit-everything relaxation.

    Returns (A, heavy) where heavy is the flag "A_l <= 1 for every class".
    """
    h = instance.scaling
    lam = instance.lambda_hat0
    p_open = np.zeros(instance.num_clusters)
    for i, c in enumerate(instance.clusters):
        if lam[i] <= 0:
            p_open[i] = 1.0
            continue
        births = tuple(h * lam[i] if n < c.capacity else 0.0 for n in range(c.capacity + 1))
        pi = bd_steady_state(BirthDeathSpec(birth_rates=births, death_rates=tuple(c.service_rates)))
        p_open[i] = 1.0 - pi[c.capacity]
    A = np.array([
        sum(instance.component_count(i) * p_open[i] for i in instance.eligible_positions(cls))
        for cls in range(instance.num_classes)
    ])
    return A, bool(np.all(A <= 1.0))
