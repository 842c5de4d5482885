import math

import numpy as np
from hypothesis import given, settings, strategies as st

from core.model import (ClusterSpec, FarmInstance, JobClassSpec, check_unimodal, generate_closed_form_cluster,
                        generate_scenario1, generate_tiny, generate_two_power_mode, instance_from_dict,
                        instance_to_dict, offered_traffic, preset_appendixK, validate_cluster, validate_instance)


def _cluster(mu, eps, cid=1):
    return ClusterSpec(id=cid, capacity=len(mu) - 1, service_rates=tuple(mu), energy_rates=tuple(eps))


def test_validate_cluster_ok():
    assert validate_cluster(_cluster((0, 1, 2), (0.5, 1, 2))) == []


def test_validate_cluster_decreasing_mu():
    out = validate_cluster(_cluster((0, 2, 1), (0.5, 1, 2)))
    assert any("service_rates not non-decreasing at n=2" in v for v in out)


def test_validate_cluster_idle_power_not_below_busy():
    out = validate_cluster(_cluster((0, 1), (1, 1)))
    assert any("energy_rates[1] not > energy_rates[0]" in v for v in out)


def test_validate_cluster_wrong_length():
    c = ClusterSpec(id=1, capacity=3, service_rates=(0, 1), energy_rates=(0, 1))
    out = validate_cluster(c)
    assert len(out) == 2


def test_validate_instance_reports_class_problems():
    c = _cluster((0, 1), (0, 1))
    inst = FarmInstance(clusters=(c,), classes=(JobClassSpec(1, 0.0, (2,)),), scaling=0)
    out = validate_instance(inst)
    assert any("scaling" in v for v in out)
    assert any("arrival_rate_base" in v for v in out)
    assert any("unknown clusters" in v for v in out)


def test_unimodal_constant_mu():
    assert check_unimodal(_cluster((0, 1, 1, 1), (0.2, 0.5, 0.9, 3.0))) == (True, None)


def test_unimodal_linear_examples():
    assert check_unimodal(_cluster((0, 1, 2, 3), (0, 1, 3, 6)))[0]
    ok, where = check_unimodal(_cluster((0, 1, 2, 3), (0, 2, 3, 6)))
    assert not ok and where[0] == 0


def _unimodal_brute(mu, eps):
    C = len(mu) - 1
    for a in range(C - 1):
        for b in range(a + 1, C - 1):
            left = (mu[b + 1] - mu[b]) * (eps[a + 1] * mu[a] - eps[a] * mu[a + 1])
            right = (mu[a + 1] - mu[a]) * (eps[b + 1] * mu[b] - eps[b] * mu[b + 1])
            if left > right + 1e-12 * max(abs(left), abs(right), 1.0):
                return False
    return True


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.1, 3.0), min_size=1, max_size=6), st.lists(st.floats(0.01, 3.0), min_size=7, max_size=7),
       st.floats(0.0, 1.0))
def test_unimodal_matches_brute_force(dmu, deps, eps0):
    mu = [0.0] + list(np.cumsum(dmu))
    eps = [eps0] + list(eps0 + np.cumsum(deps[: len(dmu)]))
    assert check_unimodal(_cluster(mu, eps))[0] == _unimodal_brute(mu, eps)


def test_scenario1_deterministic_and_valid():
    a = generate_scenario1(7, 0.2)
    b = generate_scenario1(7, 0.2)
    assert a == b
    assert validate_instance(a) == []
    assert a.num_clusters == 10 and a.num_classes == 4 and a.scaling == 10
    assert np.max(np.abs(offered_traffic(a) - 0.2)) < 1e-12


def test_scenario1_idle_power_rule():
    inst = generate_scenario1(3, 0.5)
    for c in inst.clusters:
        assert abs(c.energy_rates[0] - 0.3 * c.energy_rates[-1] * (0.9 - 0.1 * c.id)) < 1e-12
        assert 10.0 <= c.service_rates[-1] <= 15.0
        assert 0.5 <= c.service_rates[-1] / c.energy_rates[-1] <= 1.0


def test_appendix_k_preset():
    inst = preset_appendixK()
    assert validate_instance(inst) == []
    c10, c4 = inst.clusters[9], inst.clusters[3]
    assert c10.energy_rates[0] == 0.0
    assert abs(c10.peak_ratio - 97.625) < 1e-9
    assert abs(c4.service_rates[-1] - 1.6) < 1e-12 and abs(c4.energy_rates[0] - 0.0189) < 1e-12
    assert inst.scaling == 1250 and inst.clusters[0].capacity == 10
    assert [c.eligible_clusters for c in inst.classes] == [(1, 5, 6, 10), (1, 2, 3, 4, 5, 7, 8, 9), (1, 6, 7, 10), (2,)]
    assert preset_appendixK(capacity=4).clusters[0].capacity == 4


def test_other_generators_valid():
    assert validate_instance(generate_two_power_mode(1)) == []
    assert validate_instance(generate_tiny(5)) == []
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = generate_closed_form_cluster(rng)
        assert validate_cluster(c) == []
        r = [c.service_rates[n] / (c.energy_rates[n] - c.energy_rates[0]) for n in range(1, c.capacity + 1)]
        assert all(b >= a - 1e-12 for a, b in zip(r, r[1:]))


def test_component_layout():
    inst = FarmInstance(
        clusters=(ClusterSpec(1, 1, (0, 1), (0, 1), 1), ClusterSpec(2, 1, (0, 1), (0, 1), 2)),
        classes=(JobClassSpec(1, 1.0, (2,)), JobClassSpec(2, 1.0, (1, 2))),
        scaling=2,
    )
    assert inst.total_components == 6
    assert list(inst.component_clusters) == [0, 0, 1, 1, 1, 1]
    assert inst.eligible_components(0) == [2, 3, 4, 5]
    assert inst.component(6).virtual
    assert list(inst.lambda_hat0) == [1.0, 2.0]


def test_dict_roundtrip():
    inst = generate_tiny(11)
    assert instance_from_dict(instance_to_dict(inst)) == inst
    assert math.isclose(offered_traffic(inst)[0], offered_traffic(instance_from_dict(instance_to_dict(inst)))[0])
