"""Server-farm instance types, rate-function checks and instance generators.

Cluster and class ids are 1-based labels (cluster ``i`` sits at position
``i - 1`` of ``FarmInstance.clusters``); every array-valued helper below is
indexed by position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ClusterSpec:
    id: int
    capacity: int
    service_rates: Tuple[float, ...]
    energy_rates: Tuple[float, ...]
    component_count_base: int = 1

    @property
    def peak_ratio(self) -> float:
        """r_i = mu(C) / (eps(C) - eps(0)); the PAS priority of the cluster."""
        return self.service_rates[-1] / (self.energy_rates[-1] - self.energy_rates[0])


@dataclass(frozen=True)
class JobClassSpec:
    id: int
    arrival_rate_base: float
    eligible_clusters: Tuple[int, ...]


@dataclass(frozen=True)
class ComponentRef:
    global_id: int
    cluster: int  # position of the cluster; -1 for a virtual component
    virtual: bool = False


@dataclass(frozen=True)
class FarmInstance:
    clusters: Tuple[ClusterSpec, ...]
    classes: Tuple[JobClassSpec, ...]
    scaling: int = 1

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def component_count(self, i: int) -> int:
        return self.clusters[i].component_count_base * self.scaling

    @property
    def total_components(self) -> int:
        return self.scaling * sum(c.component_count_base for c in self.clusters)

    def eligible_positions(self, cls: int) -> Tuple[int, ...]:
        return tuple(cid - 1 for cid in self.classes[cls].eligible_clusters)

    @cached_property
    def lambda_hat0(self) -> np.ndarray:
        """Aggregate base arrival rate offered to each cluster."""
        out = np.zeros(self.num_clusters)
        for c in self.classes:
            for cid in c.eligible_clusters:
                out[cid - 1] += c.arrival_rate_base
        return out

    @cached_property
    def component_clusters(self) -> np.ndarray:
        """Cluster position of every real component, labels grouped by cluster."""
        return np.repeat(np.arange(self.num_clusters), [self.component_count(i) for i in range(self.num_clusters)])

    @cached_property
    def cluster_offsets(self) -> np.ndarray:
        counts = [self.component_count(i) for i in range(self.num_clusters)]
        return np.concatenate([[0], np.cumsum(counts)]).astype(int)

    def components_of(self, i: int) -> range:
        return range(int(self.cluster_offsets[i]), int(self.cluster_offsets[i + 1]))

    def eligible_components(self, cls: int) -> List[int]:
        out: List[int] = []
        for i in sorted(self.eligible_positions(cls)):
            out.extend(self.components_of(i))
        return out

    def component(self, j: int) -> ComponentRef:
        J = self.total_components
        if j >= J:
            return ComponentRef(global_id=j, cluster=-1, virtual=True)
        return ComponentRef(global_id=j, cluster=int(self.component_clusters[j]))

    def virtual_component(self, cls: int) -> ComponentRef:
        return ComponentRef(global_id=self.total_components + cls, cluster=-1, virtual=True)

    def with_scaling(self, h: int) -> "FarmInstance":
        return FarmInstance(clusters=self.clusters, classes=self.classes, scaling=int(h))

    @cached_property
    def sc_pairs(self) -> List[Tuple[int, int]]:
        """Canonical (cluster, state) order used for occupancy proportions."""
        return [(i, n) for i, c in enumerate(self.clusters) for n in range(c.capacity + 1)]


# ----------------------------------------------------------------- validation

def _finite_nonneg(values: Sequence[float]) -> bool:
    return all(isinstance(v, (int, float)) and math.isfinite(v) and v >= 0 for v in values)


def validate_cluster(c: ClusterSpec) -> List[str]:
    out: List[str] = []
    tag = f"cluster {c.id}"
    if c.capacity < 1:
        out.append(f"{tag}: capacity must be a positive integer")
        return out
    if c.component_count_base < 1:
        out.append(f"{tag}: component_count_base must be a positive integer")
    mu, eps = c.service_rates, c.energy_rates
    if len(mu) != c.capacity + 1:
        out.append(f"{tag}: service_rates has length {len(mu)}, expected {c.capacity + 1}")
    if len(eps) != c.capacity + 1:
        out.append(f"{tag}: energy_rates has length {len(eps)}, expected {c.capacity + 1}")
    if out:
        return out
    if not _finite_nonneg(mu):
        out.append(f"{tag}: service_rates must be finite and non-negative")
    if not _finite_nonneg(eps):
        out.append(f"{tag}: energy_rates must be finite and non-negative")
    if out:
        return out
    if mu[0] != 0:
        out.append(f"{tag}: service_rates[0] must be 0")
    for n in range(1, c.capacity + 1):
        if mu[n] <= 0:
            out.append(f"{tag}: service_rates[{n}] not > 0")
        if mu[n] < mu[n - 1]:
            out.append(f"{tag}: service_rates not non-decreasing at n={n}")
        if eps[n] < eps[n - 1]:
            out.append(f"{tag}: energy_rates not non-decreasing at n={n}")
        if eps[n] <= eps[0]:
            out.append(f"{tag}: energy_rates[{n}] not > energy_rates[0]")
    return out


def validate_instance(instance: FarmInstance) -> List[str]:
    """All rule violations of the instance; an empty list means valid."""
    out: List[str] = []
    if instance.scaling < 1:
        out.append("scaling h must be a positive integer")
    if not instance.clusters:
        out.append("instance has no clusters")
    for pos, c in enumerate(instance.clusters):
        if c.id != pos + 1:
            out.append(f"cluster at position {pos + 1} has id {c.id}; ids must be 1..I in order")
        out.extend(validate_cluster(c))
    ids = {c.id for c in instance.clusters}
    for pos, cl in enumerate(instance.classes):
        tag = f"class {cl.id}"
        if cl.id != pos + 1:
            out.append(f"class at position {pos + 1} has id {cl.id}; ids must be 1..L in order")
        if not (math.isfinite(cl.arrival_rate_base) and cl.arrival_rate_base > 0):
            out.append(f"{tag}: arrival_rate_base must be positive and finite")
        if not cl.eligible_clusters:
            out.append(f"{tag}: eligible_clusters is empty")
        missing = [cid for cid in cl.eligible_clusters if cid not in ids]
        if missing:
            out.append(f"{tag}: eligible_clusters references unknown clusters {missing}")
        if len(set(cl.eligible_clusters)) != len(cl.eligible_clusters):
            out.append(f"{tag}: eligible_clusters has duplicates")
    return out


def check_unimodal(cluster: ClusterSpec, rtol: float = 1e-12) -> Tuple[bool, Optional[Tuple[int, int]]]:
    """Energy-efficient unimodality over all pairs n1 < n2 in {0..C-2}.

    Returns (True, None) or (False, first violating (n1, n2)).
    """
    mu, eps = cluster.service_rates, cluster.energy_rates
    C = cluster.capacity
    for n1 in range(0, C - 1):
        d1 = mu[n1 + 1] - mu[n1]
        g1 = eps[n1 + 1] * mu[n1] - eps[n1] * mu[n1 + 1]
        for n2 in range(n1 + 1, C - 1):
            d2 = mu[n2 + 1] - mu[n2]
            g2 = eps[n2 + 1] * mu[n2] - eps[n2] * mu[n2 + 1]
            lhs = d2 * g1
            rhs = d1 * g2
            scale = max(abs(lhs), abs(rhs), 1.0)
            if lhs > rhs + rtol * scale:
                return False, (n1, n2)
    return True, None


def offered_traffic(instance: FarmInstance) -> np.ndarray:
    """Normalized offered traffic rho_l = lambda_l / sum_{j in J_l} mu_{i_j}(C_{i_j})."""
    h = instance.scaling
    out = np.zeros(instance.num_classes)
    for pos, cl in enumerate(instance.classes):
        peak = sum(instance.component_count(i) * instance.clusters[i].service_rates[-1]
                   for i in instance.eligible_positions(pos))
        out[pos] = h * cl.arrival_rate_base / peak
    return out


def _rates_with_rho(clusters: Sequence[ClusterSpec], eligible: Sequence[Sequence[int]], rho: float) -> List[JobClassSpec]:
    out: List[JobClassSpec] = []
    for pos, ids in enumerate(eligible):
        peak = sum(clusters[cid - 1].component_count_base * clusters[cid - 1].service_rates[-1] for cid in ids)
        out.append(JobClassSpec(id=pos + 1, arrival_rate_base=rho * peak, eligible_clusters=tuple(ids)))
    return out


# ----------------------------------------------------------------- generators

def generate_scenario1(seed: int, rho: float, *, num_clusters: int = 10, capacity: int = 5,
                       num_classes: int = 4, scaling: int = 10) -> FarmInstance:
    """Randomly generated farm of the first experimental scenario.

    Generator: numpy PCG64 via ``default_rng(seed)``. Draw order:
      1. peak service rates mu_i(C) ~ U[10, 15], one array of size I;
      2. peak efficiencies mu_i(C)/eps_i(C) ~ U[0.5, 1], one array of size I;
      3. per class l in order: kappa_l ~ integer U{1..I}, then kappa_l
         distinct clusters via ``choice(I, kappa_l, replace=False)``.
    """
    rng = np.random.default_rng(seed)
    mu_peak = rng.uniform(10.0, 15.0, size=num_clusters)
    efficiency = rng.uniform(0.5, 1.0, size=num_clusters)
    eligible: List[List[int]] = []
    for _ in range(num_classes):
        kappa = int(rng.integers(1, num_clusters + 1))
        chosen = rng.choice(num_clusters, size=kappa, replace=False)
        eligible.append(sorted(int(x) + 1 for x in chosen))

    clusters: List[ClusterSpec] = []
    for pos in range(num_clusters):
        i = pos + 1
        C = capacity
        mu = [0.0] * (C + 1)
        eps = [0.0] * (C + 1)
        mu[C] = float(mu_peak[pos])
        eps[C] = mu[C] / float(efficiency[pos])
        eps0 = 0.3 * eps[C] * (0.9 - 0.1 * i)
        for n in range(C - 1, 0, -1):
            mu[n] = mu[n + 1] * n / (n + 1)
            eps[n] = (eps[n + 1] - eps0) * math.sqrt(n / (n + 1)) + eps0
        eps[0] = eps0
        clusters.append(ClusterSpec(id=i, capacity=C, service_rates=tuple(mu), energy_rates=tuple(eps)))

    return FarmInstance(clusters=tuple(clusters), classes=tuple(_rates_with_rho(clusters, eligible, rho)),
                        scaling=scaling)


# (mu_i(C_i), eps_i(0), mu_i(C_i) / (eps_i(C_i) - eps_i(0)))
APPENDIX_K_CLUSTERS: Tuple[Tuple[float, float, float], ...] = (
    (2.425, 0.0655, 13.699),
    (1.620, 0.0333, 15.338),
    (1.758, 0.0315, 14.845),
    (1.600, 0.0189, 18.562),
    (1.728, 0.0116, 26.225),
    (1.668, 0.0069, 33.166),
    (2.390, 0.0055, 43.127),
    (2.116, 0.0026, 51.306),
    (2.416, 0.0011, 70.356),
    (2.224, 0.0, 97.625),
)
APPENDIX_K_CLASSES: Tuple[Tuple[int, ...], ...] = (
    (1, 5, 6, 10),
    (1, 2, 3, 4, 5, 7, 8, 9),
    (1, 6, 7, 10),
    (2,),
)


def preset_appendixK(capacity: int = 10, scaling: int = 1250, rho: float = 0.3) -> FarmInstance:
    """The ten-cluster farm used with the production trace.

    Rates are in an arbitrary time unit. Interior states follow
    mu(n) = n/(n+1) mu(n+1) and eps(n) = n/(n+1) (eps(n+1) - eps(0)) + eps(0).
    Base arrival rates only matter for Poisson runs; they are set so every
    class sees normalized offered traffic ``rho``.
    """
    clusters: List[ClusterSpec] = []
    for pos, (mu_c, eps0, ratio) in enumerate(APPENDIX_K_CLUSTERS):
        C = capacity
        mu = [0.0] * (C + 1)
        eps = [0.0] * (C + 1)
        mu[C] = mu_c
        eps[C] = eps0 + mu_c / ratio
        for n in range(C - 1, 0, -1):
            mu[n] = n / (n + 1) * mu[n + 1]
            eps[n] = n / (n + 1) * (eps[n + 1] - eps0) + eps0
        eps[0] = eps0
        clusters.append(ClusterSpec(id=pos + 1, capacity=C, service_rates=tuple(mu), energy_rates=tuple(eps)))
    classes = _rates_with_rho(clusters, APPENDIX_K_CLASSES, rho)
    return FarmInstance(clusters=tuple(clusters), classes=tuple(classes), scaling=scaling)


def generate_two_power_mode(seed: int, rho: float = 0.3, *, num_clusters: int = 4, capacity: int = 4,
                            num_classes: int = 2, scaling: int = 2) -> FarmInstance:
    """Farm whose components have one busy mode: mu and eps constant for n >= 1."""
    rng = np.random.default_rng(seed)
    mu_peak = rng.uniform(1.0, 3.0, size=num_clusters)
    busy = rng.uniform(1.0, 2.0, size=num_clusters)
    idle = rng.uniform(0.0, 0.5, size=num_clusters) * busy
    eligible: List[List[int]] = []
    for _ in range(num_classes):
        kappa = int(rng.integers(1, num_clusters + 1))
        eligible.append(sorted(int(x) + 1 for x in rng.choice(num_clusters, size=kappa, replace=False)))
    clusters = [
        ClusterSpec(
            id=p + 1,
            capacity=capacity,
            service_rates=(0.0,) + (float(mu_peak[p]),) * capacity,
            energy_rates=(float(idle[p]),) + (float(busy[p]),) * capacity,
        )
        for p in range(num_clusters)
    ]
    return FarmInstance(clusters=tuple(clusters), classes=tuple(_rates_with_rho(clusters, eligible, rho)),
                        scaling=scaling)


def generate_closed_form_cluster(rng: np.random.Generator, cluster_id: int = 1, capacity: Optional[int] = None) -> ClusterSpec:
    """Random cluster with mu(n)/(eps(n)-eps(0)) non-decreasing in n >= 1."""
    C = int(capacity if capacity is not None else rng.integers(1, 8))
    mu = np.concatenate([[0.0], np.cumsum(rng.uniform(0.2, 2.0, size=C))])
    eps0 = float(rng.uniform(0.0, 1.0))
    # eps(n) - eps(0) = mu(n) / r(n) with r(n) non-decreasing
    r = np.sort(rng.uniform(0.5, 5.0, size=C))
    extra = mu[1:] / r
    # keep eps non-decreasing
    extra = np.maximum.accumulate(extra)
    eps = np.concatenate([[eps0], eps0 + extra])
    ratios = mu[1:] / (eps[1:] - eps0)
    if np.any(np.diff(ratios) < 0):
        # fall back to the two-power-mode-like linear profile, always admissible
        eps = np.concatenate([[eps0], eps0 + mu[1:] / r[-1]])
    return ClusterSpec(id=cluster_id, capacity=C, service_rates=tuple(float(x) for x in mu),
                       energy_rates=tuple(float(x) for x in eps))


def generate_tiny(seed: int, *, max_components: int = 4, max_capacity: int = 3, max_classes: int = 2,
                  load: Optional[float] = None) -> FarmInstance:
    """Desk-scale random instance for exact-oracle checks (h = 1)."""
    rng = np.random.default_rng(seed)
    n_comp = int(rng.integers(1, max_components + 1))
    clusters: List[ClusterSpec] = []
    for p in range(n_comp):
        C = int(rng.integers(1, max_capacity + 1))
        mu = np.concatenate([[0.0], np.cumsum(rng.uniform(0.3, 1.5, size=C))])
        eps0 = float(rng.uniform(0.05, 0.5))
        eps = np.concatenate([[eps0], eps0 + np.cumsum(rng.uniform(0.1, 1.0, size=C))])
        clusters.append(ClusterSpec(id=p + 1, capacity=C, service_rates=tuple(float(x) for x in mu),
                                    energy_rates=tuple(float(x) for x in eps)))
    n_cls = int(rng.integers(1, max_classes + 1))
    rho = float(load if load is not None else rng.uniform(0.2, 1.2))
    eligible: List[List[int]] = []
    for _ in range(n_cls):
        kappa = int(rng.integers(1, n_comp + 1))
        eligible.append(sorted(int(x) + 1 for x in rng.choice(n_comp, size=kappa, replace=False)))
    return FarmInstance(clusters=tuple(clusters), classes=tuple(_rates_with_rho(clusters, eligible, rho)), scaling=1)


def instance_from_dict(data: Dict) -> FarmInstance:
    clusters = tuple(
        ClusterSpec(
            id=int(c["id"]),
            capacity=int(c["capacity"]),
            service_rates=tuple(float(x) for x in c["service_rates"]),
            energy_rates=tuple(float(x) for x in c["energy_rates"]),
            component_count_base=int(c.get("components", 1)),
        )
        for c in data.get("clusters", [])
    )
    classes = tuple(
        JobClassSpec(
            id=int(c["id"]),
            arrival_rate_base=float(c["arrival_rate"]),
            eligible_clusters=tuple(int(x) for x in c["clusters"]),
        )
        for c in data.get("classes", [])
    )
    return FarmInstance(clusters=clusters, classes=classes, scaling=int(data.get("scaling", 1)))


def instance_to_dict(instance: FarmInstance) -> Dict:
    return {
        "schema": "farm-instance/v1",
        "scaling": int(instance.scaling),
        "clusters": [
            {
                "id": c.id,
                "capacity": c.capacity,
                "components": c.component_count_base,
                "service_rates": [float(x) for x in c.service_rates],
                "energy_rates": [float(x) for x in c.energy_rates],
            }
            for c in instance.clusters
        ],
        "classes": [
            {"id": c.id, "arrival_rate": float(c.arrival_rate_base), "clusters": list(c.eligible_clusters)}
            for c in instance.classes
        ],
    }
