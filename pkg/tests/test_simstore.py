import math
import statistics

import pytest

from kvsla.metrics import compute_metrics
from kvsla.model import ConfigError, ConsistencyLevel, Constant, DelayModel, Kind, KnobState, Lognormal, ms, validate_log
from kvsla.simstore import (
    Arrival,
    ClusterConfig,
    Simulation,
    generate_workload,
    probe_pairs,
    run_simulation,
)

MICRO = DelayModel(Lognormal(((0, ms(3), ms(0.3)),)))


def micro_config(**kw):
    base = dict(delay_model=MICRO, n_keys=10, replication_loss=0.05, rng_seed=5)
    base.update(kw)
    return ClusterConfig(**base)


def metrics(log, t_c=0, t_a=ms(25)):
    return compute_metrics(log, t_c, t_a)


def test_config_validation():
    with pytest.raises(ConfigError):
        ClusterConfig(DelayModel(Constant(0)), replication_factor=10)
    with pytest.raises(ConfigError):
        ClusterConfig(DelayModel(Constant(0)), key_distribution="pareto")
    with pytest.raises(ConfigError):
        ClusterConfig(DelayModel(Constant(0)), replication_loss=1.0)


def test_replica_placement_is_a_ring():
    cfg = ClusterConfig(DelayModel(Constant(0)))
    assert cfg.replicas(0) == [0, 1, 2]
    assert cfg.replicas(8) == [8, 0, 1]
    assert cfg.replicas(17) == [8, 0, 1]


def test_workload_counts_and_mix():
    cfg = ClusterConfig(DelayModel(Constant(0)), throughput_ops_per_s=1000, read_fraction=0.8)
    ops = generate_workload(cfg, ms(10_000))
    assert abs(len(ops) - 10_000) <= 500
    reads = sum(op.kind is Kind.READ for op in ops)
    n = len(ops)
    assert abs(reads - 0.8 * n) <= 3 * math.sqrt(n * 0.8 * 0.2)
    assert ops == generate_workload(cfg, ms(10_000))
    assert ops != generate_workload(cfg, ms(10_000), seed=1)


def test_zipfian_keys_are_skewed():
    cfg = ClusterConfig(DelayModel(Constant(0)), n_keys=100, key_distribution="zipfian")
    ops = generate_workload(cfg, ms(5000))
    hot = sum(op.key == 0 for op in ops) / len(ops)
    assert hot > 0.1


def test_probe_pairs_structure():
    cfg = ClusterConfig(DelayModel(Constant(0)), n_keys=7)
    ops = probe_pairs(cfg, 5, t_c=ms(20), spacing=ms(300))
    assert [op.kind for op in ops[:2]] == [Kind.WRITE, Kind.READ]
    assert ops[1].time - ops[0].time == ms(20) and ops[2].time == ms(300)
    assert all(ops[i].key == ops[i + 1].key for i in range(0, 10, 2))


def test_same_seed_same_log_and_trace():
    cfg = micro_config()
    a = run_simulation(cfg, KnobState(), ms(3000), trace=True)
    b = run_simulation(cfg, KnobState(), ms(3000), trace=True)
    assert a == b
    assert a[1]  # trace recorded
    c = run_simulation(micro_config(rng_seed=6), KnobState(), ms(3000))
    assert c[0] != a[0]


def test_log_is_valid():
    log, _ = run_simulation(micro_config(), KnobState(read_delay=ms(2), repair_rate=0.5), ms(3000))
    assert validate_log(log) == log
    assert any(r.kind is Kind.READ for r in log)


def test_zero_delay_is_fresh_and_timely():
    cfg = ClusterConfig(DelayModel(Constant(0)), n_keys=3)
    log, _ = run_simulation(cfg, KnobState(), ms(2000))
    rep = metrics(log, t_c=0, t_a=1)
    assert rep.p_ic == 0.0 and rep.p_ua == 0.0


def test_ten_ms_links_meet_150ms_deadline():
    cfg = ClusterConfig(DelayModel(Constant(ms(10))), n_keys=100)
    log, _ = run_simulation(cfg, KnobState(), ms(5000))
    assert metrics(log, t_a=ms(150)).p_ua == 0.0


def test_read_delay_lowers_staleness_and_raises_latency():
    cfg = micro_config()
    base = metrics(run_simulation(cfg, KnobState(), ms(10_000))[0])
    slow = metrics(run_simulation(cfg, KnobState(read_delay=ms(10)), ms(10_000))[0])
    assert slow.p_ic <= base.p_ic
    assert slow.p_ua >= base.p_ua


def test_repair_rate_lowers_staleness_without_touching_latency():
    cfg = micro_config()
    low = metrics(run_simulation(cfg, KnobState(repair_rate=0.1), ms(10_000))[0])
    high = metrics(run_simulation(cfg, KnobState(repair_rate=1.0), ms(10_000))[0])
    assert high.p_ic <= low.p_ic
    assert abs(high.p_ua - low.p_ua) <= 0.01


def test_stronger_consistency_level_lowers_staleness():
    one = metrics(run_simulation(micro_config(), KnobState(), ms(10_000))[0])
    every = metrics(run_simulation(micro_config(consistency_level=ConsistencyLevel.ALL), KnobState(), ms(10_000))[0])
    assert every.p_ic <= one.p_ic
    assert every.p_ua >= one.p_ua


def test_knob_schedule_applies_from_its_time():
    cfg = micro_config()
    log, _ = run_simulation(cfg, [(0, KnobState()), (ms(2000), KnobState(read_delay=ms(8)))], ms(4000))
    early = [r for r in log if r.kind is Kind.READ and r.start < ms(1900)]
    late = [r for r in log if r.kind is Kind.READ and r.start > ms(2100)]
    shift = statistics.median(r.span for r in late) - statistics.median(r.span for r in early)
    assert shift == pytest.approx(ms(8), abs=ms(1.5))
    assert min(r.span for r in late) >= ms(8)
    assert min(r.span for r in early) < ms(8)
    with pytest.raises(ConfigError):
        run_simulation(cfg, [(5, KnobState())], ms(10))


def test_quorum_reads_block_when_two_replicas_fail():
    cfg = ClusterConfig(DelayModel(Constant(ms(1))), consistency_level=ConsistencyLevel.QUORUM,
                        throughput_ops_per_s=0)
    failures = [(0, 1, True), (0, 2, True)]  # key 0 lives on servers 0, 1, 2
    sim = Simulation(cfg, workload=[Arrival(ms(10), Kind.READ, 0, 4), Arrival(ms(10), Kind.READ, 3, 4)],
                     failures=failures)
    sim.run_until(ms(5000))
    done = {r.key for r in sim.log() if r.kind is Kind.READ}
    assert done == {3}
    assert sim.failed(1, ms(1)) and not sim.failed(3, ms(1))


def test_injected_ops_are_tagged():
    cfg = micro_config(throughput_ops_per_s=0)
    sim = Simulation(cfg)
    ops = [Arrival(ms(1), Kind.WRITE, 1, 0), Arrival(ms(2), Kind.READ, 1, 3)]
    sim.inject(ops, "probe")
    sim.run_until(ms(1000))
    recs = sim.tagged("probe")
    assert sorted(r.kind.value for r in recs) == ["read", "write"]
    with pytest.raises(ConfigError):
        sim.inject([Arrival(0, Kind.READ, 1, 0)], "late")
