import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from core.errors import InvalidInputError
from core.indices import FluidAllocation, IndexTable, solve_e0, solve_indices
from core.model import ClusterSpec, FarmInstance, JobClassSpec, generate_tiny, generate_two_power_mode
from core.policies import (REJECT, FarmState, TieBreak, _scan, attractor_point, jsq_dispatch, make_dispatcher,
                           mpmp_dispatch, pas_dispatch, policy_function, score_for)


def _linear(cid, C, count=1):
    return ClusterSpec(cid, C, tuple(float(n) for n in range(C + 1)), tuple(0.5 + n for n in range(C + 1)), count)


def _two_singletons(C):
    return FarmInstance(clusters=(_linear(1, C), _linear(2, C)), classes=(JobClassSpec(1, 1.0, (1, 2)),))


def _table(inst, etas):
    w = np.ones((inst.num_classes, inst.num_clusters))
    return IndexTable(e=0.0, h=1.0, epsilon=1e-12, eta0=tuple(np.asarray(x, float) for x in etas), class_weights=w)


def _state(*occ):
    return FarmState(occupancy=np.array(occ, dtype=int))


def test_mpmp_highest_index():
    inst = _two_singletons(2)
    table = _table(inst, [[0.7, 0.7], [0.5, 0.5]])
    assert mpmp_dispatch(_state(0, 0), 0, table, inst).target.global_id == 0


def test_mpmp_ties():
    inst = _two_singletons(3)
    table = _table(inst, [[1.0] * 3, [1.0] * 3])
    assert mpmp_dispatch(_state(2, 1), 0, table, inst, TieBreak.LLTB).target.global_id == 0
    assert mpmp_dispatch(_state(2, 1), 0, table, inst, "sqtb").target.global_id == 1


def test_mpmp_all_full_rejects():
    inst = _two_singletons(2)
    d = mpmp_dispatch(_state(2, 2), 0, _table(inst, [[1, 1], [1, 1]]), inst)
    assert d.rejected and d.target.global_id == inst.total_components


def test_jsq():
    inst = FarmInstance(clusters=(_linear(1, 4, count=3),), classes=(JobClassSpec(1, 1.0, (1,)),))
    assert jsq_dispatch(_state(3, 1, 2), 0, inst).target.global_id == 1
    assert jsq_dispatch(_state(1, 1, 2), 0, inst).target.global_id == 0
    assert jsq_dispatch(_state(4, 4, 4), 0, inst).rejected


def test_pas():
    inst = _two_singletons(2)
    assert pas_dispatch(_state(0, 0), 0, inst, priorities=(2.0, 1.0)).target.cluster == 0
    assert pas_dispatch(_state(2, 0), 0, inst, priorities=(2.0, 1.0)).target.cluster == 1
    assert pas_dispatch(_state(0, 0), 0, inst, priorities=(1.0, 1.0)).target.cluster == 0
    with pytest.raises(InvalidInputError):
        pas_dispatch(_state(0, 0), 0, inst, priorities=(1.0,))


def test_tiebreak_parse():
    assert TieBreak.parse("SQTB") is TieBreak.SQTB
    with pytest.raises(InvalidInputError):
        TieBreak.parse("random")


def test_unknown_policy():
    with pytest.raises(InvalidInputError):
        score_for("roundrobin", _two_singletons(1))
    with pytest.raises(InvalidInputError):
        score_for("mpmp", _two_singletons(1))


def test_mpmp_reduces_to_pas_with_two_power_modes():
    for seed in range(1, 4):
        inst = generate_two_power_mode(seed)
        e = solve_e0(inst, epsilon=1e-12)
        table = solve_indices(inst, e, epsilon=1e-12)
        rng = np.random.default_rng(seed)
        for _ in range(200):
            occ = np.array([rng.integers(0, inst.clusters[inst.component_clusters[j]].capacity + 1)
                            for j in range(inst.total_components)])
            for cls in range(inst.num_classes):
                a = mpmp_dispatch(FarmState(occ), cls, table, inst)
                b = pas_dispatch(FarmState(occ), cls, inst)
                assert a.target.cluster == b.target.cluster


def test_scaled_indices_same_decisions():
    inst = generate_tiny(3)
    table = solve_indices(inst, 0.4, epsilon=1e-12)
    bigger = table.scaled(4.0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        occ = np.array([rng.integers(0, inst.clusters[inst.component_clusters[j]].capacity + 1)
                        for j in range(inst.total_components)])
        for cls in range(inst.num_classes):
            assert (mpmp_dispatch(FarmState(occ), cls, table, inst).target
                    == mpmp_dispatch(FarmState(occ), cls, bigger, inst).target)


def test_irrelevant_components_do_not_matter():
    inst = FarmInstance(clusters=(_linear(1, 2), _linear(2, 2)),
                        classes=(JobClassSpec(1, 1.0, (1,)), JobClassSpec(2, 1.0, (2,))))
    table = solve_indices(inst, 0.2, epsilon=1e-12)
    base = mpmp_dispatch(_state(1, 0), 0, table, inst).target
    for other in (1, 2):
        assert mpmp_dispatch(_state(1, other), 0, table, inst).target == base


def _random_state(inst, rng):
    return np.array([rng.integers(0, inst.clusters[inst.component_clusters[j]].capacity + 1)
                     for j in range(inst.total_components)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["mpmp", "jsq", "pas"]), st.sampled_from(list(TieBreak)))
def test_bucket_dispatcher_matches_scan(seed, name, tiebreak):
    inst = generate_tiny(seed, max_components=4, max_capacity=3).with_scaling(2)
    table = solve_indices(inst, 0.3, epsilon=1e-10) if name == "mpmp" else None
    score = score_for(name, inst, table)
    disp = make_dispatcher(name, inst, tiebreak, table)
    rng = np.random.default_rng(seed)
    occ = np.zeros(inst.total_components, dtype=int)
    for _ in range(150):
        cls = int(rng.integers(inst.num_classes))
        want = _scan(FarmState(occ), inst, cls, score, tiebreak)
        got = disp.select(cls)
        assert got == (REJECT if want.rejected else want.target.global_id)
        if got == REJECT:
            eligible = inst.eligible_components(cls)
            assert all(occ[j] == inst.clusters[inst.component_clusters[j]].capacity for j in eligible)
        else:
            assert occ[got] < inst.clusters[inst.component_clusters[got]].capacity
            occ[got] += 1
            disp.moved(got, occ[got] - 1, occ[got])
        if rng.random() < 0.45:
            busy = np.flatnonzero(occ)
            if len(busy):
                j = int(rng.choice(busy))
                occ[j] -= 1
                disp.moved(j, occ[j] + 1, occ[j])


def test_policy_function_rejects_with_label():
    inst = _two_singletons(1)
    choose = policy_function("jsq", inst)
    assert choose(np.array([1, 0]), 0) == 1
    assert choose(np.array([1, 1]), 0) == REJECT


def _alloc(q, u):
    return FluidAllocation(q=np.array(q), u=np.array(u, dtype=float), s=np.ones(1), gamma=0.0, e=0.0)


def test_attractor_point():
    single = FarmInstance(clusters=(_linear(1, 1),), classes=(JobClassSpec(1, 1.0, (1,)),))
    assert list(attractor_point(_alloc([1], [0.0]), single)) == [0.0, 1.0]
    assert list(attractor_point(_alloc([0], [0.5]), single)) == [0.5, 0.5]
    two = FarmInstance(clusters=(_linear(1, 2, count=1), _linear(2, 2, count=3)), classes=(JobClassSpec(1, 1.0, (1, 2)),))
    z = attractor_point(_alloc([1, 0], [0.25, 0.5]), two)
    assert abs(z.sum() - 1.0) < 1e-15
    assert abs(z[3:].sum() - 0.75) < 1e-15
    assert abs(z[1] - 0.25 * 0.75) < 1e-15 and abs(z[2] - 0.25 * 0.25) < 1e-15
