import io
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvsla.model import (
    DEFAULT_WRITE,
    ConfigError,
    ConsistencyLevel,
    ConsistencySla,
    Constant,
    DanglingWriteRef,
    DelayModel,
    Kind,
    KnobOutOfRange,
    KnobState,
    LatencySla,
    Lognormal,
    NegativeSpan,
    OpRecord,
    PartitionModel,
    SharpJump,
    lognormal_params,
    log_to_string,
    ms,
    read_log,
    to_ms,
    validate_log,
    write_log,
)
from oracles import random_log


def w(op_id, key, start, finish):
    return OpRecord(op_id, Kind.WRITE, key, op_id, start, finish, 0)


def r(op_id, key, write_id, start, finish):
    return OpRecord(op_id, Kind.READ, key, write_id, start, finish, 0)


def test_time_conversions_are_exact():
    assert ms(1) == 1000
    assert ms(0.1) == 100
    assert ms(26) == 26_000
    assert to_ms(ms(150)) == 150


def test_validate_empty_log():
    assert validate_log([]) == []


def test_validate_minimal_log():
    log = [w(1, 0, 0, 5), r(2, 0, 1, 6, 9)]
    assert validate_log(log) == log


def test_validate_dangling_reference():
    with pytest.raises(DanglingWriteRef):
        validate_log([r(1, 0, 99, 0, 1)])


def test_validate_negative_span():
    with pytest.raises(NegativeSpan):
        validate_log([w(1, 0, 10, 5)])


def test_validate_default_read_is_fine():
    assert validate_log([r(1, 0, DEFAULT_WRITE, 0, 3)])


def test_log_line_format():
    text = log_to_string([w(1, 7, 10, 20), r(2, 7, DEFAULT_WRITE, 11, 30)])
    lines = text.strip().splitlines()
    assert lines[0] == "op_id,kind,key,write_id,start_us,finish_us,origin_server"
    assert lines[1] == "1,write,7,1,10,20,0"
    assert lines[2] == "2,read,7,-1,11,30,0"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 60))
def test_log_round_trip_is_identity(seed, n):
    log = random_log(random.Random(seed), n)
    buf = io.StringIO()
    write_log(log, buf)
    buf.seek(0)
    assert read_log(buf) == log


def test_read_log_without_header():
    assert read_log(io.StringIO("1,write,0,1,0,5,2\n")) == [OpRecord(1, Kind.WRITE, 0, 1, 0, 5, 2)]


def test_sla_validation_and_target():
    sla = ConsistencySla(0.135, 0, ms(200))
    assert sla.target == pytest.approx(0.085)
    assert sla.bound == 0.135
    with pytest.raises(ConfigError):
        ConsistencySla(1.5, 0, 0)
    with pytest.raises(ConfigError):
        LatencySla(0.02, ms(10), 0, epsilon=0.05)  # laxity larger than the bound
    with pytest.raises(ConfigError):
        PartitionModel(ms(1), alpha=1.2)


def test_lognormal_moment_matching():
    mu, sigma = lognormal_params(3000, 300)
    samples = np.random.default_rng(0).lognormal(mu, sigma, 200_000)
    assert samples.mean() == pytest.approx(3000, rel=0.01)
    assert samples.std() == pytest.approx(300, rel=0.02)


def test_delay_schedule_must_start_at_zero_and_increase():
    with pytest.raises(ConfigError):
        DelayModel(SharpJump(((5, {}),), 10))
    with pytest.raises(ConfigError):
        DelayModel(Lognormal(((0, 1, 1), (0, 2, 2))))
    with pytest.raises(ConfigError):
        DelayModel(Constant(-1))


def test_sharp_jump_link_delays():
    dm = DelayModel(SharpJump(((0, {}), (100, {0: 26, 1: 26})), default=10))
    assert dm.link_delays(3, 0) == [10, 10, 10]
    assert dm.link_delays(3, 100) == [26, 26, 10]
    assert dm.change_times == [100]


def test_sampler_same_seed_same_stream():
    dm = DelayModel(Lognormal(((0, 3000, 300), (10_000, 5000, 500))))
    a = dm.sampler(9, seed=4)
    b = dm.sampler(9, seed=4)
    xs = [a.link(i % 9, i * 7) for i in range(5000)]
    ys = [b.link(i % 9, i * 7) for i in range(5000)]
    assert xs == ys
    assert all(x >= 0 for x in xs)


def test_hop_on_same_machine_is_free():
    s = DelayModel(Constant(ms(10))).sampler(3, seed=0)
    assert s.hop(1, 1, 0) == 0
    assert s.hop(0, 1, 0) == ms(20)


def test_knob_bounds():
    with pytest.raises(KnobOutOfRange):
        KnobState(read_delay=ms(11))
    with pytest.raises(KnobOutOfRange):
        KnobState(repair_rate=1.1)
    assert KnobState(read_delay=ms(15), max_read_delay=ms(20)).read_delay == ms(15)


def test_consistency_levels():
    assert [c.replicas_needed(3) for c in ConsistencyLevel] == [1, 2, 2, 3]
    assert ConsistencyLevel.TWO.replicas_needed(1) == 1


def test_op_record_span():
    assert w(1, 0, 10, 35).span == 25
    assert math.isclose(to_ms(w(1, 0, 0, 1500).span), 1.5)
