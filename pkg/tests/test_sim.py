import math

import numpy as np
import pytest

from core.errors import ConfigError, InvalidInputError, SimulationError, TraceFormatError
from core.indices import fluid_fit
from core.model import ClusterSpec, FarmInstance, JobClassSpec, preset_appendixK
from core.oracle import exact_steady_state
from core.policies import REJECT, attractor_point, policy_function
from core.sim import (Metrics, PolicySpec, SimConfig, bin_count, compute_relative_difference, diurnal_rate,
                      farm_peak_capacity, poisson_stream, pool_metrics, replicate_until_ci, run_simulation,
                      synthetic_diurnal_trace, t_halfwidth, trace_stream, with_replications, z_deviation_stats)

UNIT = ClusterSpec(id=1, capacity=1, service_rates=(0.0, 1.0), energy_rates=(0.0, 1.0))


def _single(cluster, rate, scaling=1):
    return FarmInstance(clusters=(cluster,), classes=(JobClassSpec(1, rate, (cluster.id,)),), scaling=scaling)


def test_loss_queue_matches_two_state_chain():
    m = run_simulation(_single(UNIT, 2.0), PolicySpec("jsq"), SimConfig(horizon=40000.0, seed=3))
    assert abs(m.efficiency - 1.0) < 1e-12
    assert abs(m.L - 2 / 3) < 0.02
    assert abs(m.total_blocking - 2 / 3) < 0.02


def test_no_arrivals():
    c = ClusterSpec(1, 2, (0.0, 1.0, 1.5), (0.25, 1.0, 2.0), 2)
    m = run_simulation(_single(c, 1.0), PolicySpec("pas"), SimConfig(horizon=100.0), arrivals=[])
    assert m.L == 0.0
    assert abs(m.E - 0.5) < 1e-12
    assert m.total_blocking == 0.0 and list(m.blocking_prob) == [0.0]
    assert m.efficiency == 0.0


def test_single_deterministic_job():
    c = ClusterSpec(1, 1, (0.0, 2.0), (0.5, 1.5))
    cfg = SimConfig(horizon=10.0, warmup=0.0, sizes="deterministic", track_states=True)
    m = run_simulation(_single(c, 1.0), PolicySpec("jsq"), cfg, arrivals=[(1.0, 0)])
    assert abs(m.state_time[(1,)] - 0.5) < 1e-12
    assert abs(m.L - 0.1) < 1e-12
    assert abs(m.E - (0.5 * 10 + 1.0 * 0.5) / 10) < 1e-12
    assert list(m.completions) == [1]


def test_processor_sharing_drains_at_mu_over_n():
    c = ClusterSpec(1, 2, (0.0, 1.0, 1.5), (0.1, 1.0, 2.0))
    cfg = SimConfig(horizon=10.0, warmup=0.0, sizes="deterministic", track_states=True)
    m = run_simulation(_single(c, 1.0), PolicySpec("jsq"), cfg, arrivals=[(0.0, 0), (0.0, 0)])
    # two unit jobs each served at 0.75
    assert abs(m.state_time[(2,)] - 1 / 0.75) < 1e-12
    assert (1,) not in m.state_time or m.state_time[(1,)] < 1e-12


def test_processor_sharing_staggered():
    c = ClusterSpec(1, 2, (0.0, 1.0, 2.0), (0.1, 1.0, 2.0))
    cfg = SimConfig(horizon=10.0, warmup=0.0, sizes="deterministic", track_states=True)
    m = run_simulation(_single(c, 1.0), PolicySpec("jsq"), cfg, arrivals=[(0.0, 0), (0.5, 0)])
    # first job has 0.5 left at t=0.5, both drain at rate 1: leave at 1.0 and 1.5
    assert abs(m.state_time[(2,)] - 0.5) < 1e-12
    assert abs(m.state_time[(1,)] - 1.0) < 1e-12
    assert list(m.completions) == [2]


def test_bins_integrate_to_totals():
    inst = preset_appendixK(capacity=3, scaling=2)
    cfg = SimConfig(horizon=50.0, warmup=0.0, bin_seconds=7.0, seed=2)
    m = run_simulation(inst, PolicySpec("jsq"), cfg)
    widths = m.bins.bin_end - m.bins.bin_start
    assert len(m.bins) == 8 and m.bins.bin_end.iloc[-1] == 50.0
    assert abs(float((m.bins.throughput * widths).sum()) - m.L * 50.0) < 1e-9
    assert abs(float((m.bins.energy * widths).sum()) - m.E * 50.0) < 1e-9
    assert int(m.bins.arrivals.sum()) == int(m.arrivals.sum())


@pytest.mark.parametrize("width, count", [(0.1, 10), (1 / 3, 3), (0.7, 2)])
def test_fractional_bins_without_arrivals(width, count):
    c = ClusterSpec(1, 2, (0.0, 1.0, 1.5), (0.25, 1.0, 2.0), 2)
    cfg = SimConfig(horizon=1.0, warmup=0.0, bin_seconds=width)
    m = run_simulation(_single(c, 1.0), PolicySpec("jsq"), cfg, arrivals=[])
    widths = m.bins.bin_end - m.bins.bin_start
    assert len(m.bins) == count and m.bins.bin_end.iloc[-1] == 1.0
    assert np.allclose(m.bins.energy, 0.5, rtol=0, atol=1e-12)
    assert abs(float((m.bins.energy * widths).sum()) - m.E) < 1e-12


@pytest.mark.parametrize("width", [0.1, 1 / 3])
def test_fractional_bins_integrate_to_totals(width):
    inst = preset_appendixK(capacity=3, scaling=2)
    cfg = SimConfig(horizon=5.0, warmup=0.0, bin_seconds=width, seed=6)
    m = run_simulation(inst, PolicySpec("pas"), cfg)
    widths = m.bins.bin_end - m.bins.bin_start
    assert len(m.bins) == bin_count(5.0, width) == round(5.0 / width)
    assert abs(float((m.bins.energy * widths).sum()) / 5.0 - m.E) <= 1e-9 * m.E
    assert abs(float((m.bins.throughput * widths).sum()) / 5.0 - m.L) <= 1e-9 * max(m.L, 1.0)
    assert int(m.bins.arrivals.sum()) == int(m.arrivals.sum())


def test_bin_count_absorbs_rounding():
    assert bin_count(24 * 0.1, 0.1) == 24
    assert bin_count(1.1, 0.1) == 11
    assert bin_count(1.05, 0.1) == 11
    assert bin_count(0.05, 0.1) == 1


def test_arrival_on_bin_edge_shares_bin_with_its_work():
    c = ClusterSpec(1, 1, (0.0, 2.0), (0.5, 1.5))
    cfg = SimConfig(horizon=2.0, warmup=0.0, sizes="deterministic", bin_seconds=0.1)
    m = run_simulation(_single(c, 1.0), PolicySpec("jsq"), cfg, arrivals=[(0.5, 0)])
    assert len(m.bins) == 20
    assert list(m.bins.arrivals) == [0] * 5 + [1] + [0] * 14
    assert np.allclose(m.bins.throughput[:5], 0.0) and np.allclose(m.bins.throughput[5:10], 2.0)
    assert np.allclose(m.bins.throughput[10:], 0.0)


class _FixedChoice:
    def __init__(self, j):
        self.j = j

    def select(self, cls):
        return self.j

    def moved(self, j, old, new):
        pass


class _Pinned(PolicySpec):
    def dispatcher(self, instance):
        return _FixedChoice(self.priorities[0])


def test_dispatch_to_full_component_raises():
    cfg = SimConfig(horizon=10.0, warmup=0.0, sizes="deterministic")
    with pytest.raises(SimulationError) as err:
        run_simulation(_single(UNIT, 1.0), _Pinned("jsq", priorities=(0,)), cfg, arrivals=[(0.1, 0), (0.2, 0)])
    assert err.value.time == 0.2


def test_rejection_with_free_slot_raises():
    cfg = SimConfig(horizon=10.0, warmup=0.0)
    with pytest.raises(SimulationError):
        run_simulation(_single(UNIT, 1.0), _Pinned("jsq", priorities=(REJECT,)), cfg, arrivals=[(0.1, 0)])


def test_reproducible():
    inst = preset_appendixK(capacity=3, scaling=3)
    cfg = SimConfig(horizon=40.0, seed=9, sizes="mixed")
    a = run_simulation(inst, PolicySpec("pas"), cfg)
    b = run_simulation(inst, PolicySpec("pas"), cfg)
    assert a.L == b.L and a.E == b.E
    assert np.array_equal(a.blocks, b.blocks) and np.array_equal(a.completions, b.completions)


def test_policies_share_arrivals():
    inst = preset_appendixK(capacity=3, scaling=3)
    cfg = SimConfig(horizon=40.0, seed=4)
    a = run_simulation(inst, PolicySpec("pas"), cfg)
    b = run_simulation(inst, PolicySpec("jsq"), cfg)
    assert np.array_equal(a.arrivals, b.arrivals)


def test_simulation_matches_exact_chain():
    c = ClusterSpec(1, 2, (0.0, 1.0, 1.6), (0.2, 0.7, 1.0))
    inst = _single(c, 1.5, scaling=2)
    exact = exact_steady_state(inst, policy_function("jsq", inst))
    m = run_simulation(inst, PolicySpec("jsq"), SimConfig(horizon=30000.0, seed=5))
    assert abs(compute_relative_difference(m, exact.efficiency)) < 0.02


def test_z_tracking_on_simplex():
    inst = preset_appendixK(capacity=3, scaling=2)
    alloc = fluid_fit(inst, 5.0, epsilon=1e-10)
    z = attractor_point(alloc, inst)
    cfg = SimConfig(horizon=30.0, seed=1, track_z=True, z_target=z, record_z=True)
    m = run_simulation(inst, PolicySpec("jsq"), cfg)
    assert m.z_deviation is not None and m.z_deviation >= 0
    for _, sample in m.z_samples:
        assert abs(sample.sum() - 1.0) < 1e-9 and sample.min() > -1e-12
    assert m.z_samples[-1][0] == 30.0
    t = np.array([s[0] for s in m.z_samples])
    d = np.array([np.linalg.norm(s[1] - z) for s in m.z_samples])
    # each sample holds Z on the interval that ends at its epoch
    step = (d[0] * (t[0] - 3.0) + float(np.sum(d[1:] * np.diff(t)))) / 27.0
    assert abs(step - m.z_deviation) <= 1e-9 * max(1.0, m.z_deviation)
    trap = float(np.trapezoid(d, t) / (t[-1] - t[0]))
    assert abs(z_deviation_stats(m.z_samples, z) - trap) < 1e-12


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(horizon=10.0, warmup=10.0).validate()
    with pytest.raises(ConfigError):
        SimConfig(track_z=True).validate()
    with pytest.raises(ConfigError):
        SimConfig(sizes="uniform").size_kinds(2)
    assert SimConfig(sizes="mixed").size_kinds(5) == ("deterministic", "exponential", "pareto-f", "pareto-inf",
                                                      "deterministic")
    assert SimConfig(horizon=50.0).effective_warmup == 5.0


def test_poisson_stream_rate():
    events = list(poisson_stream([1000.0, 0.0], 7, 1000.0))
    assert abs(len(events) / 1e6 - 1.0) < 0.01
    assert all(cls == 0 for _, cls in events[:1000])
    times = [t for t, _ in events]
    assert times == sorted(times)


def test_poisson_stream_classes_independent():
    a = [t for t, c in poisson_stream([1.0, 2.0], 3, 50.0) if c == 0]
    b = [t for t, c in poisson_stream([1.0, 5.0], 3, 50.0) if c == 0]
    assert a == b


def test_trace_stream(tmp_path):
    p = tmp_path / "trace.csv"
    p.write_text("timestamp_seconds,class_id\n0.5,1\n1.25,2\n")
    assert trace_stream(str(p)) == [(0.5, 0), (1.25, 1)]
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert trace_stream(str(empty)) == []


@pytest.mark.parametrize("body", ["0.5,1\n0.25,1\n", "0.5,3\n", "0.5\n", "1,a\n"])
def test_trace_stream_errors(tmp_path, body):
    inst = FarmInstance(clusters=(UNIT,), classes=(JobClassSpec(1, 1.0, (1,)), JobClassSpec(2, 1.0, (1,))))
    p = tmp_path / "bad.csv"
    p.write_text("timestamp_seconds,class_id\n" + body)
    with pytest.raises(TraceFormatError):
        trace_stream(str(p), inst)


def test_trace_replay():
    inst = _single(UNIT, 1.0)
    cfg = SimConfig(horizon=2.0, warmup=0.0, sizes="deterministic", track_states=True)
    m = run_simulation(inst, PolicySpec("jsq"), cfg, arrivals=[(0.5, 0), (1.0, 0)])
    assert list(m.arrivals) == [2] and list(m.blocks) == [1]


def test_synthetic_diurnal_profile():
    inst = _single(UNIT, 1.0, scaling=10)
    cap = farm_peak_capacity(inst)
    trace = synthetic_diurnal_trace(inst, hours=24, bin_seconds=3600.0, seed=11)
    counts = np.bincount([int(t // 3600.0) for t, _ in trace], minlength=24)
    for k in range(24):
        grid = np.linspace(k * 3600.0, (k + 1) * 3600.0, 361)
        expected = np.trapezoid(diurnal_rate(grid, cap), grid)
        assert abs(counts[k] / expected - 1.0) < 0.05
    with pytest.raises(InvalidInputError):
        synthetic_diurnal_trace(inst, amplitude=1.5)


def test_relative_difference():
    assert compute_relative_difference(1.0, 1.0) == 0.0
    assert abs(compute_relative_difference(1.2, 1.0) - 0.2) < 1e-12
    a, b = 0.83, 1.37
    rd_ab = compute_relative_difference(a, b)
    rd_ba = compute_relative_difference(b, a)
    assert abs(rd_ab + rd_ba / (1 + rd_ba)) < 1e-12
    with pytest.raises(InvalidInputError):
        compute_relative_difference(1.0, 0.0)


def test_z_deviation_stats():
    z = np.array([0.5, 0.5])
    assert z_deviation_stats([(0.0, z), (3.0, z)], z) == 0.0
    far = np.array([1.0, 0.0])
    d = math.sqrt(0.5)
    assert abs(z_deviation_stats([(0.0, far), (2.0, far)], z) - d) < 1e-15
    # distance 0 at t=0, d at t=2: average d/2
    assert abs(z_deviation_stats([(0.0, z), (2.0, far)], z) - d / 2) < 1e-15


def test_t_halfwidth_quantile():
    x = np.arange(10.0)
    sd = float(np.std(x, ddof=1))
    assert abs(t_halfwidth(x) - 2.262 * sd / math.sqrt(10)) < 1e-3 * sd
    assert t_halfwidth([1.0]) == math.inf
    assert t_halfwidth([2.0, 2.0, 2.0]) == 0.0


def test_replicate_stops_at_minimum_without_variance():
    inst = _single(UNIT, 1.0)
    cfg = SimConfig(horizon=5.0, warmup=0.0, sizes="deterministic", min_replications=3, max_replications=10)
    m = replicate_until_ci(inst, PolicySpec("jsq"), cfg, arrivals=[(0.5, 0), (3.0, 0)])
    assert m.replications == 3 and not m.cap_hit
    assert m.ci_halfwidth["efficiency"] == 0.0


def test_replicate_cap_flag():
    inst = preset_appendixK(capacity=3, scaling=2)
    cfg = SimConfig(horizon=5.0, seed=1, min_replications=2, max_replications=3, ci_target=1e-9)
    m = replicate_until_ci(inst, PolicySpec("jsq"), cfg)
    assert m.replications == 3 and m.cap_hit


def test_replicate_independent_of_workers():
    inst = preset_appendixK(capacity=3, scaling=2)
    cfg = with_replications(SimConfig(horizon=10.0, seed=8), 4)
    one = replicate_until_ci(inst, PolicySpec("pas"), cfg)
    two = replicate_until_ci(inst, PolicySpec("pas"), SimConfig(**{**cfg.__dict__, "workers": 2}))
    assert one.efficiency == two.efficiency and one.replications == two.replications == 4


def test_halfwidth_shrinks_with_more_replications():
    inst = _single(UNIT, 2.0)
    base = SimConfig(horizon=200.0, seed=21)
    few = replicate_until_ci(inst, PolicySpec("jsq"), with_replications(base, 8))
    many = replicate_until_ci(inst, PolicySpec("jsq"), with_replications(base, 32))
    ratio = many.ci_halfwidth["L"] / few.ci_halfwidth["L"]
    assert 0.2 < ratio < 0.9


def test_pool_metrics():
    def run(eff):
        return Metrics(policy="x", L=eff, E=1.0, efficiency=eff, duration=1.0, arrivals=np.array([2]),
                       blocks=np.array([1]), completions=np.array([1]))
    pooled = pool_metrics([run(1.0), run(3.0)])
    assert pooled.efficiency == 2.0 and pooled.replications == 2
    assert list(pooled.arrivals) == [4] and pooled.total_blocking == 0.5
    with pytest.raises(InvalidInputError):
        pool_metrics([])
