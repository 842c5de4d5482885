"""Dispatch rules: MPMP, JSQ and PAS.

The ``*_dispatch`` functions are the reference linear scans over the
eligible components. ``BucketDispatcher`` gives the same decisions
incrementally for the simulator: components are bucketed by
(cluster, occupancy) and every class walks a fixed ranking of buckets.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from core.errors import InvalidInputError
from core.indices import FluidAllocation, IndexTable
from core.model import ComponentRef, FarmInstance

REJECT = -1

# score(cls, cluster position, occupancy) -> comparable; larger wins
ScoreFn = Callable[[int, int, int], object]


class TieBreak(str, Enum):
    LLTB = "lltb"  # lowest label
    SQTB = "sqtb"  # shortest queue, then lowest label

    @classmethod
    def parse(cls, value) -> "TieBreak":
        if isinstance(value, TieBreak):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidInputError(f"unknown tie-break rule {value!r} (expected lltb or sqtb)")


@dataclass
class FarmState:
    occupancy: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class DispatchDecision:
    target: ComponentRef

    @property
    def rejected(self) -> bool:
        return self.target.virtual


def default_priorities(instance: FarmInstance) -> np.ndarray:
    return np.array([c.peak_ratio for c in instance.clusters])


def mpmp_score(table: IndexTable) -> ScoreFn:
    return lambda cls, i, n: table.u(cls, i, n)


def jsq_score() -> ScoreFn:
    return lambda cls, i, n: -n


def pas_score(priorities: Sequence[float]) -> ScoreFn:
    pr = [float(p) for p in priorities]
    # cluster ties go to the lower id, whatever the tie-break
    return lambda cls, i, n: (pr[i], -i)


def _check_class(instance: FarmInstance, cls: int) -> None:
    if not 0 <= cls < instance.num_classes:
        raise InvalidInputError(f"class position {cls} outside 0..{instance.num_classes - 1}")
    if not instance.classes[cls].eligible_clusters:
        raise InvalidInputError(f"class {cls + 1} has no eligible clusters")


def _scan(state: FarmState, instance: FarmInstance, cls: int, score: ScoreFn, tiebreak: TieBreak) -> DispatchDecision:
    _check_class(instance, cls)
    occ = state.occupancy
    best_key = None
    best_j = None
    for j in instance.eligible_components(cls):
        i = int(instance.component_clusters[j])
        n = int(occ[j])
        if n >= instance.clusters[i].capacity:
            continue
        tb = (-j,) if tiebreak is TieBreak.LLTB else (-n, -j)
        key = (score(cls, i, n), tb)
        if best_key is None or key > best_key:
            best_key, best_j = key, j
    if best_j is None:
        return DispatchDecision(instance.virtual_component(cls))
    return DispatchDecision(instance.component(best_j))


def mpmp_dispatch(state: FarmState, cls: int, table: IndexTable, instance: FarmInstance,
                  tiebreak: TieBreak = TieBreak.LLTB) -> DispatchDecision:
    """Highest u_{l,i}(N_j) among eligible non-full components; rejection when all are full."""
    return _scan(state, instance, cls, mpmp_score(table), TieBreak.parse(tiebreak))


def jsq_dispatch(state: FarmState, cls: int, instance: FarmInstance,
                 tiebreak: TieBreak = TieBreak.LLTB) -> DispatchDecision:
    return _scan(state, instance, cls, jsq_score(), TieBreak.parse(tiebreak))


def pas_dispatch(state: FarmState, cls: int, instance: FarmInstance, priorities: Optional[Sequence[float]] = None,
                 tiebreak: TieBreak = TieBreak.LLTB) -> DispatchDecision:
    """Any non-full eligible component of the highest-priority cluster (default priority r_i)."""
    pr = default_priorities(instance) if priorities is None else priorities
    if len(pr) != instance.num_clusters:
        raise InvalidInputError(f"need {instance.num_clusters} cluster priorities, got {len(pr)}")
    return _scan(state, instance, cls, pas_score(pr), TieBreak.parse(tiebreak))


def attractor_point(alloc: FluidAllocation, instance: FarmInstance) -> np.ndarray:
    """Fluid fixed point as proportions over ``instance.sc_pairs``."""
    pairs = instance.sc_pairs
    pos = {p: k for k, p in enumerate(pairs)}
    z = np.zeros(len(pairs))
    total = float(sum(c.component_count_base for c in instance.clusters))
    for i, c in enumerate(instance.clusters):
        w = c.component_count_base / total
        q, u = int(alloc.q[i]), float(alloc.u[i])
        z[pos[(i, q)]] += w * (1.0 - u)
        if u > 0:
            z[pos[(i, q + 1)]] += w * u
    return z


class BucketDispatcher:
    """Incremental form of ``_scan`` for one score function.

    Components of cluster i with occupancy n live in bucket (i, n); each
    bucket keeps a label heap with lazy deletion. Buckets are ranked per
    class once, grouped by equal score.
    """

    def __init__(self, instance: FarmInstance, score: ScoreFn, tiebreak: TieBreak = TieBreak.LLTB) -> None:
        self.instance = instance
        self.tiebreak = TieBreak.parse(tiebreak)
        self._cluster_of = instance.component_clusters
        self._capacity = [c.capacity for c in instance.clusters]
        self._members: Dict[Tuple[int, int], Set[int]] = {}
        self._heaps: Dict[Tuple[int, int], List[int]] = {}
        for i, c in enumerate(instance.clusters):
            for n in range(c.capacity):
                self._members[(i, n)] = set()
                self._heaps[(i, n)] = []
            labels = list(instance.components_of(i))
            self._members[(i, 0)] = set(labels)
            self._heaps[(i, 0)] = labels  # ascending, already a heap

        self._groups: List[List[List[Tuple[int, int]]]] = []
        for cls in range(instance.num_classes):
            _check_class(instance, cls)
            scored = [(score(cls, i, n), i, n)
                      for i in instance.eligible_positions(cls) for n in range(self._capacity[i])]
            scored.sort(key=lambda t: t[0], reverse=True)
            groups: List[List[Tuple[int, int]]] = []
            last = object()
            for s, i, n in scored:
                if not groups or s != last:
                    groups.append([])
                    last = s
                groups[-1].append((i, n))
            self._groups.append(groups)

    def _lowest(self, key: Tuple[int, int]) -> Optional[int]:
        members = self._members[key]
        if not members:
            return None
        heap = self._heaps[key]
        while heap[0] not in members:
            heapq.heappop(heap)
        return heap[0]

    def select(self, cls: int) -> int:
        """Global label of the chosen component, or REJECT."""
        sq = self.tiebreak is TieBreak.SQTB
        for group in self._groups[cls]:
            best = None
            for key in group:
                j = self._lowest(key)
                if j is None:
                    continue
                cand = (key[1], j) if sq else (j,)
                if best is None or cand < best:
                    best = cand
            if best is not None:
                return best[-1]
        return REJECT

    def moved(self, j: int, old: int, new: int) -> None:
        i = int(self._cluster_of[j])
        cap = self._capacity[i]
        if old < cap:
            self._members[(i, old)].discard(j)
        if new < cap:
            key = (i, new)
            self._members[key].add(j)
            heap = self._heaps[key]
            heapq.heappush(heap, j)
            if len(heap) > 2 * len(self._members[key]) + 32:
                self._heaps[key] = sorted(self._members[key])


POLICIES = ("mpmp", "jsq", "pas")


def score_for(name: str, instance: FarmInstance, table: Optional[IndexTable] = None,
              priorities: Optional[Sequence[float]] = None) -> ScoreFn:
    name = str(name).lower()
    if name == "mpmp":
        if table is None:
            raise InvalidInputError("mpmp needs an index table")
        return mpmp_score(table)
    if name == "jsq":
        return jsq_score()
    if name == "pas":
        return pas_score(default_priorities(instance) if priorities is None else priorities)
    raise InvalidInputError(f"unknown policy {name!r} (expected one of {', '.join(POLICIES)})")


def make_dispatcher(name: str, instance: FarmInstance, tiebreak: TieBreak = TieBreak.LLTB,
                    table: Optional[IndexTable] = None,
                    priorities: Optional[Sequence[float]] = None) -> BucketDispatcher:
    return BucketDispatcher(instance, score_for(name, instance, table, priorities), tiebreak)


def policy_function(name: str, instance: FarmInstance, tiebreak: TieBreak = TieBreak.LLTB,
                    table: Optional[IndexTable] = None,
                    priorities: Optional[Sequence[float]] = None) -> Callable[[np.ndarray, int], int]:
    """(occupancy, class) -> component label or REJECT; used by the exact oracle."""
    score = score_for(name, instance, table, priorities)
    tb = TieBreak.parse(tiebreak)

    def choose(occupancy: np.ndarray, cls: int) -> int:
        d = _scan(FarmState(occupancy=occupancy), instance, cls, score, tb)
        return REJECT if d.rejected else d.target.global_id

    return choose
