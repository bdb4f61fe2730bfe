"""Discrete-event simulation of a single-datacenter replicated key-value store.

The cluster is a star LAN of ``n_servers`` machines; each machine also hosts
a client.  A key is replicated on ``replication_factor`` consecutive servers
of the ring starting at ``key % n_servers``.  Clients send every operation
to a uniformly chosen coordinator.

Writes travel client -> coordinator -> every replica and become visible at a
replica when the message arrives (last-writer-wins on the write's start
timestamp).  A write completes once ``CL`` replicas acknowledged it.

Reads follow five steps:

1. the client sends the read to the coordinator;
2. the coordinator holds it for the current *read delay*, then asks every
   replica;
3. replicas answer with their current version;
4. once ``CL`` answers arrived the freshest of them goes back to the client;
5. with probability *repair_rate*, after all answers arrived, replicas that
   answered with an older version are queued in the repair buffer, which a
   background task drains at a fixed rate by pushing the freshest version.

Every message delay comes from the cluster's :class:`~kvsla.model.DelayModel`.
Everything is driven by a single heap ordered by ``(time, sequence)`` and all
randomness comes from seeded streams, so a run is a pure function of its
configuration.
"""

from __future__ import annotations

import heapq
import math
import logging
import random
from bisect import bisect_right
from dataclasses import dataclass, replace
from itertools import accumulate
from typing import Iterator, Sequence

from .metrics import WriteIndex
from .model import (
    DEFAULT_WRITE,
    US_PER_S,
    ConfigError,
    ConsistencyLevel,
    DelayModel,
    KnobState,
    Kind,
    OpRecord,
    Timeout,
    ms,
)

log = logging.getLogger(__name__)

# event kinds
_ARRIVAL, _APPLY, _READ_AT, _REPAIR_ENQ, _DRAIN = range(5)
_EVENT_NAMES = {_ARRIVAL: "arrival", _APPLY: "apply", _READ_AT: "read_at", _REPAIR_ENQ: "repair_enqueue",
                _DRAIN: "repair_push"}


@dataclass(frozen=True)
class ClusterConfig:
    delay_model: DelayModel
    n_servers: int = 9
    replication_factor: int = 3
    consistency_level: ConsistencyLevel = ConsistencyLevel.ONE
    throughput_ops_per_s: float = 1000.0
    read_fraction: float = 0.8
    n_keys: int = 1000
    key_distribution: str = "uniform"  # or "zipfian"
    zipf_exponent: float = 0.99
    value_size: int = 2048
    rng_seed: int = 0
    replication_loss: float = 0.0  # probability a replica drops a write message
    repair_interval: int = ms(10)
    repair_buffer_size: int = 1000
    write_timeout: int = ms(2000)

    def __post_init__(self):
        if self.n_servers < 1:
            raise ConfigError("n_servers must be positive")
        if not (1 <= self.replication_factor <= self.n_servers):
            raise ConfigError("replication_factor must lie in [1, n_servers]")
        if not (0.0 <= self.read_fraction <= 1.0):
            raise ConfigError("read_fraction must lie in [0, 1]")
        if self.throughput_ops_per_s < 0:
            raise ConfigError("throughput must be nonnegative")
        if self.n_keys < 1:
            raise ConfigError("n_keys must be positive")
        if self.key_distribution not in ("uniform", "zipfian"):
            raise ConfigError(f"unknown key distribution {self.key_distribution!r}")
        if not (0.0 <= self.replication_loss < 1.0):
            raise ConfigError("replication_loss must lie in [0, 1)")
        if self.repair_interval <= 0 or self.repair_buffer_size < 1:
            raise ConfigError("repair buffer must have a positive drain interval and size")

    def replicas(self, key: int) -> list[int]:
        return _ring(self.n_servers, self.replication_factor)[key % self.n_servers]


_RINGS: dict[tuple[int, int], list[list[int]]] = {}


def _ring(n: int, rf: int) -> list[list[int]]:
    ring = _RINGS.get((n, rf))
    if ring is None:
        ring = _RINGS[(n, rf)] = [[(first + q) % n for q in range(rf)] for first in range(n)]
    return ring


@dataclass(frozen=True)
class Arrival:
    time: int
    kind: Kind
    key: int
    client: int


class KeyChooser:
    """Uniform or zipfian key popularity."""

    def __init__(self, config: ClusterConfig, rng: random.Random):
        self.rng = rng
        self.n = config.n_keys
        self.cdf = None
        if config.key_distribution == "zipfian":
            weights = [1.0 / (i + 1) ** config.zipf_exponent for i in range(self.n)]
            total = sum(weights)
            self.cdf = [c / total for c in accumulate(weights)]

    def __call__(self) -> int:
        if self.cdf is None:
            return self.rng.randrange(self.n)
        return min(bisect_right(self.cdf, self.rng.random()), self.n - 1)


def stream(seed: int, name: str) -> random.Random:
    """Independent named random stream derived from a master seed."""
    return random.Random(f"{seed}:{name}")


def arrivals(config: ClusterConfig, rng: random.Random, start: int = 0, rate: float | None = None,
             count: int | None = None, until: int | None = None) -> Iterator[Arrival]:
    """Poisson arrivals from ``start``; stops after ``count`` ops or at ``until``."""
    rate = config.throughput_ops_per_s if rate is None else rate
    if rate <= 0:
        return
    keys = KeyChooser(config, rng)
    mean_gap = US_PER_S / rate
    t = float(start)
    n = 0
    while count is None or n < count:
        t += rng.expovariate(1.0) * mean_gap
        at = int(t)
        if until is not None and at >= until:
            return
        kind = Kind.READ if rng.random() < config.read_fraction else Kind.WRITE
        yield Arrival(at, kind, keys(), rng.randrange(config.n_servers))
        n += 1


def generate_workload(config: ClusterConfig, duration: int, seed: int | None = None) -> list[Arrival]:
    """Arrival schedule for ``duration`` microseconds (deterministic under seed)."""
    seed = config.rng_seed if seed is None else seed
    return list(arrivals(config, stream(seed, "workload"), until=duration))


def probe_pairs(config: ClusterConfig, n_pairs: int, t_c: int, spacing: int, seed: int = 0,
                start: int = 0) -> list[Arrival]:
    """Write/read pairs: a read of the same key ``t_c`` after each write.

    Pairs are ``spacing`` apart; with ``spacing >= t_c + t_a`` pairs cannot
    interfere, which makes this the workload on which the impossibility bound
    is tight.
    """
    rng = stream(seed, "probes")
    out = []
    for i in range(n_pairs):
        t = start + i * spacing
        key = rng.randrange(config.n_keys)
        out.append(Arrival(t, Kind.WRITE, key, rng.randrange(config.n_servers)))
        out.append(Arrival(t + t_c, Kind.READ, key, rng.randrange(config.n_servers)))
    return out


class _PendingRead:
    __slots__ = ("op_id", "key", "client", "coord", "start", "expected", "responses", "repair", "tag")

    def __init__(self, op_id, key, client, coord, start, expected, repair, tag):
        self.op_id = op_id
        self.key = key
        self.client = client
        self.coord = coord
        self.start = start
        self.expected = expected
        self.responses = []
        self.repair = repair
        self.tag = tag


class Simulation:
    """A running store.  Drive it with :meth:`run_until` or :meth:`wait_for`."""

    def __init__(self, config: ClusterConfig, knobs: KnobState | None = None, *, seed: int | None = None,
                 workload: Iterator[Arrival] | Sequence[Arrival] | None = None, trace: bool = False,
                 failures: Sequence[tuple[int, int, bool]] = ()):
        self.config = config
        self.knobs = knobs or KnobState()
        seed = config.rng_seed if seed is None else seed
        self.seed = seed
        # separate streams so that changing a knob does not reshuffle the
        # randomness of unrelated decisions (common random numbers)
        self.net = config.delay_model.sampler(config.n_servers, seed=hash_seed(seed, "net"))
        self.repair_net = config.delay_model.sampler(config.n_servers, seed=hash_seed(seed, "repair-net"))
        self.rng = stream(seed, "coordinators")
        self.loss_rng = stream(seed, "loss")
        self.repair_rng = stream(seed, "repair")
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self._next_op = 0
        self.state: list[dict[int, tuple[int, int]]] = [dict() for _ in range(config.n_servers)]
        self.records: dict[int, OpRecord] = {}
        self.writes: list[OpRecord] = []
        self.completed: list[OpRecord] = []  # in completion-processing order
        self.index = WriteIndex(())  # grows as writes are issued (in start order)
        self._tagged: dict[object, list[int]] = {}
        self._tag_expected: dict[object, int] = {}
        self._pending: dict[int, _PendingRead] = {}
        self._repair_buffer: dict[int, tuple] = {}
        self._drain_scheduled = False
        self.repairs_dropped = 0
        self.blocked_reads = 0
        self.trace: list[tuple[int, str, int, int]] | None = [] if trace else None
        self._cl = config.consistency_level.replicas_needed(config.replication_factor)
        self._fail_times: dict[int, list[int]] = {}
        self._fail_states: dict[int, list[bool]] = {}
        for t, server, down in sorted(failures):
            self._fail_times.setdefault(server, []).append(t)
            self._fail_states.setdefault(server, []).append(down)
        if workload is None:
            workload = arrivals(config, stream(seed, "workload"))
        self._workload = iter(workload)
        self._schedule_next_arrival()

    # ---------------------------------------------------------------- plumbing

    def _push(self, time: int, kind: int, a=None, b=None, c=None, d=None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, self._seq, kind, a, b, c, d))

    def _schedule_next_arrival(self) -> None:
        nxt = next(self._workload, None)
        if nxt is not None:
            self._push(nxt.time, _ARRIVAL, nxt, None)

    def failed(self, server: int, at: int) -> bool:
        times = self._fail_times.get(server)
        if not times:
            return False
        i = bisect_right(times, at)
        return self._fail_states[server][i - 1] if i else False

    def set_knobs(self, knobs: KnobState) -> None:
        """New knob values apply to operations issued from now on."""
        self.knobs = knobs

    def inject(self, ops: Sequence[Arrival], tag: object) -> None:
        """Schedule extra operations; their records are tagged with ``tag``."""
        for op in ops:
            if op.time < self.now:
                raise ConfigError("cannot inject operations in the past")
            self._push(op.time, _ARRIVAL, op, tag)
        self._tag_expected[tag] = self._tag_expected.get(tag, 0) + len(ops)
        self._tagged.setdefault(tag, [])

    def tagged(self, tag: object) -> list[OpRecord]:
        """Completed records of operations injected with ``tag``."""
        return [self.records[i] for i in self._tagged.get(tag, ()) if i in self.records]

    # ---------------------------------------------------------------- driving

    def step(self) -> bool:
        if not self._heap:
            return False
        time, _, kind, a, b, c, d = heapq.heappop(self._heap)
        self.now = time
        if kind == _APPLY:
            self._apply(a, b, c, d)
        elif kind == _READ_AT:
            self._read_at(time, a, b)
        elif kind == _ARRIVAL:
            if b is None:
                self._schedule_next_arrival()
            self._issue(a, b)
        elif kind == _REPAIR_ENQ:
            self._enqueue_repair(a)
        else:
            self._drain()
        return True

    def run_until(self, t: int) -> None:
        heap = self._heap
        while heap and heap[0][0] <= t:
            self.step()
        self.now = max(self.now, t)

    def wait_for(self, tag: object, horizon: int) -> int:
        """Advance until every op injected with ``tag`` completed; return that time.

        Raises:
            Timeout: some op has not completed ``horizon`` after now.
        """
        deadline = self.now + horizon
        expected = self._tag_expected.get(tag, 0)
        ids = self._tagged.setdefault(tag, [])
        records = self.records
        heap = self._heap
        while True:
            if len(ids) == expected and all(i in records for i in ids):
                break
            if not heap or heap[0][0] > deadline:
                missing = expected - sum(1 for i in ids if i in records)
                raise Timeout(f"{missing} operations still running at t={deadline}us")
            self.step()
        done = max((records[i].finish for i in ids), default=self.now)
        self.run_until(done)
        return done

    # ---------------------------------------------------------------- ops

    def _coordinator(self) -> int:
        n = self.config.n_servers
        c = self.rng.randrange(n)
        for _ in range(n):
            if not self.failed(c, self.now):
                return c
            c = (c + 1) % n
        raise ConfigError("every server has failed")

    def _issue(self, op: Arrival, tag) -> None:
        op_id = self._next_op
        self._next_op += 1
        if tag is not None:
            self._tagged[tag].append(op_id)
        coord = self._coordinator()
        if self.trace is not None:
            self.trace.append((op.time, "issue_" + op.kind.value, coord, op_id))
        if op.kind is Kind.WRITE:
            self._issue_write(op_id, op, coord)
        else:
            self._issue_read(op_id, op, coord, tag)

    def _issue_write(self, op_id: int, op: Arrival, coord: int) -> None:
        cfg = self.config
        net = self.net
        t0 = op.time
        t1 = t0 + net.hop(op.client, coord, t0)
        acks = []
        for r in cfg.replicas(op.key):
            arrive = t1 + net.hop(coord, r, t1)
            if cfg.replication_loss and self.loss_rng.random() < cfg.replication_loss:
                continue
            if self.failed(r, arrive):
                continue
            self._push(arrive, _APPLY, r, op.key, t0, op_id)
            acks.append(arrive + net.hop(r, coord, arrive))
        acks.sort()
        if len(acks) >= self._cl:
            done = acks[self._cl - 1]
        else:
            done = t1 + cfg.write_timeout
        finish = done + net.hop(coord, op.client, done)
        rec = OpRecord(op_id, Kind.WRITE, op.key, op_id, t0, finish, coord)
        self.records[op_id] = rec
        self.writes.append(rec)
        self.index.add(rec)
        self.completed.append(rec)

    def _issue_read(self, op_id: int, op: Arrival, coord: int, tag) -> None:
        cfg = self.config
        net = self.net
        t0 = op.time
        t2 = t0 + net.hop(op.client, coord, t0) + self.knobs.read_delay
        repair = self.repair_rng.random() < self.knobs.repair_rate
        pending = _PendingRead(op_id, op.key, op.client, coord, t0, 0, repair, tag)
        for r in cfg.replicas(op.key):
            arrive = t2 + net.hop(coord, r, t2)
            if self.failed(r, arrive):
                continue
            pending.expected += 1
            self._push(arrive, _READ_AT, r, op_id)
        self._pending[op_id] = pending
        if pending.expected < self._cl:
            # the coordinator will never hear back from enough replicas
            self.blocked_reads += 1

    def _read_at(self, now: int, replica: int, op_id: int) -> None:
        p = self._pending[op_id]
        version = self.state[replica].get(p.key, (0, DEFAULT_WRITE))
        back = now + self.net.hop(replica, p.coord, now)
        p.responses.append((back, self.config.replicas(p.key).index(replica), version, replica))
        if len(p.responses) == p.expected:
            self._finish_read(p)

    def _finish_read(self, p: _PendingRead) -> None:
        del self._pending[p.op_id]
        responses = sorted(p.responses)
        if len(responses) < self._cl:
            return
        used = responses[: self._cl]
        best = max(r[2] for r in used)
        last = used[-1][0]
        finish = last + self.net.hop(p.coord, p.client, last)
        rec = OpRecord(p.op_id, Kind.READ, p.key, best[1], p.start, finish, p.coord)
        self.records[p.op_id] = rec
        self.completed.append(rec)
        if self.trace is not None:
            self.trace.append((finish, "complete_read", p.coord, p.op_id))
        if p.repair:
            freshest = max(r[2] for r in responses)
            stale = tuple(r[3] for r in responses if r[2] < freshest)
            if stale:
                self._push(responses[-1][0], _REPAIR_ENQ, (p.key, freshest, stale, p.coord, p.op_id))

    def _apply(self, replica: int, key: int, ts: int, write_id: int) -> None:
        if self.failed(replica, self.now):
            return
        state = self.state[replica]
        cur = state.get(key)
        if cur is None or (ts, write_id) > cur:
            state[key] = (ts, write_id)
        if self.trace is not None:
            self.trace.append((self.now, "apply", replica, write_id))

    def _enqueue_repair(self, entry) -> None:
        key, freshest, stale, coord, op_id = entry
        buf = self._repair_buffer
        queued = buf.get(key)
        if queued is not None:
            # one entry per key: keep the freshest version and every replica
            # known to lag behind it
            if freshest > queued[0]:
                buf[key] = (freshest, stale, coord, op_id)
            elif freshest == queued[0]:
                buf[key] = (freshest, tuple(sorted(set(queued[1]) | set(stale))), queued[2], queued[3])
            return
        if len(buf) >= self.config.repair_buffer_size:
            self.repairs_dropped += 1
            return
        buf[key] = (freshest, stale, coord, op_id)
        if not self._drain_scheduled:
            self._drain_scheduled = True
            self._push(self.now + self.config.repair_interval, _DRAIN)

    def _drain(self) -> None:
        self._drain_scheduled = False
        buf = self._repair_buffer
        if not buf:
            return
        key = next(iter(buf))
        (ts, wid), stale, coord, op_id = buf.pop(key)
        for r in stale:
            self._push(self.now + self.repair_net.hop(coord, r, self.now), _APPLY, r, key, ts, wid)
        if self.trace is not None:
            self.trace.append((self.now, "repair", coord, op_id))
        if buf:
            self._drain_scheduled = True
            self._push(self.now + self.config.repair_interval, _DRAIN)

    # ---------------------------------------------------------------- output

    def log(self, until: float | None = None) -> list[OpRecord]:
        """Completed reads plus every issued write, ordered by op_id.

        Writes are logged when issued (their completion time is already
        determined); reads once they have completed by ``until``.
        """
        until = self.now if until is None else until
        out = [r for r in self.records.values() if r.kind is Kind.WRITE or r.finish <= until]
        out.sort(key=lambda r: r.op_id)
        return out

    def trace_rows(self) -> list[tuple[int, str, int, int]]:
        return sorted(self.trace or [])


def hash_seed(seed: int, name: str) -> int:
    return stream(seed, name).getrandbits(63)


def run_simulation(config: ClusterConfig, knobs: KnobState | Sequence[tuple[int, KnobState]], duration: int,
                   *, workload: Sequence[Arrival] | None = None, trace: bool = False,
                   failures: Sequence[tuple[int, int, bool]] = ()) -> tuple[list[OpRecord], list]:
    """Run with a fixed knob setting (or a ``(time, knobs)`` schedule).

    Returns the operation log and the event trace (empty unless ``trace``).
    """
    schedule = [(0, knobs)] if isinstance(knobs, KnobState) else sorted(knobs, key=lambda e: e[0])
    if not schedule or schedule[0][0] != 0:
        raise ConfigError("knob schedule must start at time 0")
    if workload is None:
        workload = arrivals(config, stream(config.rng_seed, "workload"), until=duration)
    sim = Simulation(config, schedule[0][1], workload=workload, trace=trace, failures=failures)
    for t, k in schedule[1:]:
        sim.run_until(t - 1)
        sim.set_knobs(k)
    sim.run_until(duration)
    # let in-flight operations finish (no new arrivals after duration)
    while sim.step():
        pass
    return sim.log(until=math.inf), sim.trace_rows()


def with_knobs(knobs: KnobState, **changes) -> KnobState:
    return replace(knobs, **changes)


__all__ = [
    "Arrival", "ClusterConfig", "Simulation", "arrivals", "generate_workload", "probe_pairs",
    "run_simulation", "with_knobs", "stream",
]
