"""Adaptive SLA controller for a single datacenter.

Each iteration measures a window of operations, compares the SLA metric with
the target ``p_sla - epsilon`` and moves a knob.  Consecutive moves in the
same direction double the step (up to ``max_inc`` units); a direction change
resets it to one unit, so the loop reaches the target quickly and then
oscillates around it with unit steps.

For a consistency SLA, direction +1 means "improve consistency" (raise the
read delay, or the repair rate when that knob is active).  For a latency
SLA, direction +1 means "improve latency", i.e. lower the read delay.

The read delay is the primary knob.  When a consistency SLA leaves room to
degrade consistency but the read delay is already zero, the controller
switches to lowering the repair rate and switches back as soon as the
direction reverses.  Repair-rate effects are small, so its windows are
larger (3000 operations by default instead of 100).
"""

from __future__ import annotations

import enum
import logging
import math
import random
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .envelope import optimal_p_ic, optimal_p_ua
from .metrics import MetricReport, compute_metrics
from .model import ConsistencySla, KnobState, LatencySla, NoReads, OpRecord, ms
from .simstore import Simulation, arrivals, stream

log = logging.getLogger(__name__)

Sla = ConsistencySla | LatencySla


class Knob(enum.Enum):
    READ_DELAY = "read_delay"
    REPAIR_RATE = "repair_rate"


@dataclass(frozen=True)
class ControllerSettings:
    max_inc: int = 8
    read_delay_unit: int = ms(1)
    repair_rate_unit: float = 0.05
    window_read_delay: int = 100
    window_repair_rate: int = 3000
    use_repair_knob: bool = True
    use_read_delay_knob: bool = True  # False: a consistency SLA moves only the repair rate
    measurement: str = "active"  # or "passive"
    inject_ops_per_s: float = 1000.0
    passive_ops: int = 100
    passive_servers: int = 5
    iteration_gap: int = 0  # simulated pause between iterations
    measure_timeout: int = ms(60_000)


@dataclass(frozen=True)
class ControllerState:
    inc: int = 1
    dir: int = 0  # 0 until the first move; afterwards +1 or -1
    active_knob: Knob = Knob.READ_DELAY

    def window(self, settings: ControllerSettings) -> int:
        if self.active_knob is Knob.REPAIR_RATE or not settings.use_read_delay_knob:
            return settings.window_repair_rate
        return settings.window_read_delay


def sla_metric(sla: Sla, report: MetricReport) -> float:
    return report.p_ic if isinstance(sla, ConsistencySla) else report.p_ua


def select_knob(state: ControllerState, knobs: KnobState, sla: Sla, new_dir: int,
                settings: ControllerSettings = ControllerSettings()) -> Knob:
    """Which knob to move this iteration."""
    if not settings.use_repair_knob or not isinstance(sla, ConsistencySla):
        return Knob.READ_DELAY
    if not settings.use_read_delay_knob:
        return Knob.REPAIR_RATE
    if state.active_knob is Knob.READ_DELAY:
        if knobs.read_delay == 0 and new_dir < 0:
            return Knob.REPAIR_RATE
        return Knob.READ_DELAY
    return Knob.READ_DELAY if new_dir > 0 else Knob.REPAIR_RATE


def next_step(inc: int, direction: int, new_dir: int, max_inc: int) -> tuple[int, int]:
    """Multiplicative step rule: double while the direction holds, else reset to 1."""
    if new_dir == direction:
        return min(inc * 2, max_inc), new_dir
    return 1, new_dir


def control_iteration(state: ControllerState, sla: Sla, report: MetricReport, knobs: KnobState,
                      settings: ControllerSettings = ControllerSettings()) -> tuple[ControllerState, KnobState]:
    """One multiplicative-step update; returns the new state and knob setting."""
    new_dir = 1 if sla_metric(sla, report) > sla.target else -1
    knob = select_knob(state, knobs, sla, new_dir, settings)
    if knob is not state.active_knob:
        inc = 1
    else:
        inc, _ = next_step(state.inc, state.dir, new_dir, settings.max_inc)
    new_state = ControllerState(inc, new_dir, knob)
    step = inc * new_dir
    if knob is Knob.REPAIR_RATE:
        rate = min(1.0, max(0.0, round(knobs.repair_rate + step * settings.repair_rate_unit, 10)))
        return new_state, replace(knobs, repair_rate=rate)
    if isinstance(sla, LatencySla):
        step = -step  # improving latency means less delay
    delay = min(knobs.max_read_delay, max(0, knobs.read_delay + step * settings.read_delay_unit))
    return new_state, replace(knobs, read_delay=delay)


# ---------------------------------------------------------------- measurement


def measure_active(sim: Simulation, k: int, t_c: int, t_a: int, tag: object,
                   settings: ControllerSettings = ControllerSettings(),
                   rng: random.Random | None = None) -> MetricReport:
    """Inject ``k`` operations, wait for them, and score their reads.

    Raises:
        Timeout: operations still running ``settings.measure_timeout`` later.
        NoReads: the window happened to contain only writes.
    """
    rng = rng or stream(sim.seed, f"inject-{tag}")
    ops = list(arrivals(sim.config, rng, start=sim.now, rate=settings.inject_ops_per_s, count=k))
    sim.inject(ops, tag)
    sim.wait_for(tag, settings.measure_timeout + (ops[-1].time - sim.now if ops else 0))
    reads = [r for r in sim.tagged(tag) if r.is_read]
    return compute_metrics((), t_c, t_a, reads=reads, index=sim.index)


def measure_passive(sim: Simulation, t_c: int, t_a: int, rng: random.Random, n_ops: int = 100,
                    n_servers: int = 5) -> MetricReport:
    """Score the latest ``n_ops`` completed operations coordinated by a random server subset.

    Raises:
        NoReads: nothing suitable has completed yet.
    """
    servers = set(rng.sample(range(sim.config.n_servers), min(n_servers, sim.config.n_servers)))
    now = sim.now
    recent: list[OpRecord] = []
    # completed ops are appended roughly in time order; scan a bounded tail
    for rec in reversed(sim.completed[-max(50 * n_ops, 5000):]):
        if rec.finish <= now and rec.origin_server in servers:
            recent.append(rec)
    recent.sort(key=lambda r: (r.finish, r.op_id), reverse=True)
    reads = [r for r in recent[:n_ops] if r.is_read]
    return compute_metrics((), t_c, t_a, reads=reads, index=sim.index)


# ---------------------------------------------------------------- driving loop


@dataclass(frozen=True)
class TimelineRow:
    iter: int
    start_time: int
    sim_time: int
    p_ic: float
    p_ua: float
    n_reads: int
    read_delay: int
    repair_rate: float
    alpha: float
    p_opt: float

    def csv_row(self) -> str:
        return (f"{self.iter},{self.sim_time},{self.p_ic:.6f},{self.p_ua:.6f},{self.read_delay},"
                f"{self.repair_rate:.4f},{self.alpha:.6f},{self.p_opt:.6f}")


TIMELINE_HEADER = "iter,sim_time,p_ic,p_ua,read_delay_us,repair_rate,alpha,p_opt"


def run_controller(sim: Simulation, sla: Sla, until: int, settings: ControllerSettings = ControllerSettings(),
                   alpha_at: Callable[[int], float] | None = None,
                   on_iteration: Callable[[TimelineRow], None] | None = None) -> list[TimelineRow]:
    """Run the adaptive loop until simulated time ``until``.

    ``alpha_at(time)`` supplies the partition parameter for the timeline's
    ``alpha`` and ``p_opt`` columns (the best achievable value of the
    non-SLA metric given the measured SLA metric).
    """
    state = ControllerState()
    rows: list[TimelineRow] = []
    sample_rng = stream(sim.seed, "passive-sample")
    inject_rng = stream(sim.seed, "inject")
    it = 0
    while sim.now < until:
        knobs = sim.knobs
        start = sim.now
        try:
            if settings.measurement == "passive":
                sim.run_until(start + max(settings.iteration_gap, 1))
                report = measure_passive(sim, sla.t_c, sla.t_a, sample_rng, settings.passive_ops,
                                         settings.passive_servers)
            else:
                report = measure_active(sim, state.window(settings), sla.t_c, sla.t_a, ("window", it), settings,
                                        inject_rng)
                if settings.iteration_gap:
                    sim.run_until(sim.now + settings.iteration_gap)
        except NoReads:
            log.debug("iteration %d: no reads, skipped", it)
            if sim.now == start:
                sim.run_until(start + ms(100))
            continue
        alpha = alpha_at(start) if alpha_at else math.nan
        if isinstance(sla, ConsistencySla):
            p_opt = optimal_p_ua(alpha, report.p_ic) if alpha_at else math.nan
        else:
            p_opt = optimal_p_ic(alpha, report.p_ua) if alpha_at else math.nan
        row = TimelineRow(it, start, sim.now, report.p_ic, report.p_ua, report.n_reads, knobs.read_delay,
                          knobs.repair_rate, alpha, p_opt)
        rows.append(row)
        if on_iteration:
            on_iteration(row)
        state, new_knobs = control_iteration(state, sla, report, knobs, settings)
        sim.set_knobs(new_knobs)
        it += 1
    return rows


# ---------------------------------------------------------------- summaries


@dataclass(frozen=True)
class SegmentSummary:
    segment: int
    change_time: int
    n_iterations: int
    convergence_iter: int | None  # absolute iteration index, None if never
    convergence_time: int | None
    satisfaction: float | None  # fraction of post-convergence iterations meeting the SLA bound; None if never


def in_band(sla: Sla, value: float) -> bool:
    return sla.target - 2 * sla.epsilon <= value <= sla.bound


def convergence_index(values: Sequence[float], sla: Sla, run: int = 10) -> int | None:
    """First index from which ``run`` consecutive values stay in the band."""
    streak = 0
    for i, v in enumerate(values):
        streak = streak + 1 if in_band(sla, v) else 0
        if streak >= run:
            return i - run + 1
    return None


def summarize(rows: Sequence[TimelineRow], sla: Sla, change_times: Sequence[int], run: int = 10) -> list[SegmentSummary]:
    """Per delay-schedule segment: convergence and post-convergence SLA satisfaction.

    An iteration belongs to the segment in force when its window ended.
    """
    bounds = [0, *sorted(change_times)]
    out = []
    for seg, t0 in enumerate(bounds):
        t1 = bounds[seg + 1] if seg + 1 < len(bounds) else math.inf
        seg_rows = [r for r in rows if t0 <= r.sim_time < t1] if seg else [r for r in rows if r.sim_time < t1]
        values = [sla_metric_row(sla, r) for r in seg_rows]
        idx = convergence_index(values, sla, run)
        if idx is None:
            out.append(SegmentSummary(seg, t0, len(seg_rows), None, None, None))
            continue
        post = values[idx:]
        sat = sum(1 for v in post if v <= sla.bound) / len(post)
        out.append(SegmentSummary(seg, t0, len(seg_rows), seg_rows[idx].iter, seg_rows[idx].sim_time, sat))
    return out


def sla_metric_row(sla: Sla, row: TimelineRow) -> float:
    return row.p_ic if isinstance(sla, ConsistencySla) else row.p_ua
