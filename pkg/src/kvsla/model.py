"""Domain types shared by the simulator, metrics engine, envelope and controllers.

All times are integer microseconds.  Helpers :func:`ms` and :func:`to_ms`
convert from/to milliseconds, which is the unit scenario files are written in.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping

import numpy as np

US_PER_MS = 1000
US_PER_S = 1_000_000

#: write_id used by reads that return the initial (never written) value.
DEFAULT_WRITE = -1


def ms(value: float) -> int:
    """Milliseconds -> integer microseconds."""
    return int(round(value * US_PER_MS))


def to_ms(value_us: int) -> float:
    return value_us / US_PER_MS


# --------------------------------------------------------------------------
# errors


class KvslaError(Exception):
    """Base class for all errors raised by this package."""


class DanglingWriteRef(KvslaError):
    """A read references a write that is not in the log."""


class NegativeSpan(KvslaError):
    """An operation finishes before it starts (or has a negative timestamp)."""


class NoReads(KvslaError):
    """A metric was requested over a window containing no reads."""


class ConfigError(KvslaError):
    """Invalid configuration or scenario."""


class KnobOutOfRange(KvslaError):
    """A knob value outside its permitted range."""


class EmptyModelList(KvslaError):
    """Composition requested over zero models."""


class Timeout(KvslaError):
    """Measurement operations did not complete within the allowed horizon."""


# --------------------------------------------------------------------------
# operation log


class Kind(enum.Enum):
    READ = "read"
    WRITE = "write"


@dataclass(frozen=True, slots=True)
class OpRecord:
    """One completed read or write.

    ``write_id`` is the op_id of the write whose value was written (for a
    write, its own op_id) or returned (for a read; ``DEFAULT_WRITE`` for the
    initial value).
    """

    op_id: int
    kind: Kind
    key: int
    write_id: int
    start: int
    finish: int
    origin_server: int = 0

    @property
    def is_read(self) -> bool:
        return self.kind is Kind.READ

    @property
    def span(self) -> int:
        return self.finish - self.start


LOG_HEADER = ("op_id", "kind", "key", "write_id", "start_us", "finish_us", "origin_server")


def validate_log(log: Iterable[OpRecord]) -> list[OpRecord]:
    """Check the log invariants and return the records as a list.

    Raises:
        NegativeSpan: a record with finish < start or a negative start.
        DanglingWriteRef: a read returning a write not in the log, or a
            write whose write_id differs from its op_id.
    """
    records = list(log)
    write_ids = set()
    for rec in records:
        if rec.start < 0 or rec.finish < rec.start:
            raise NegativeSpan(f"op {rec.op_id}: start={rec.start} finish={rec.finish}")
        if rec.kind is Kind.WRITE:
            if rec.write_id != rec.op_id:
                raise DanglingWriteRef(f"write {rec.op_id} carries write_id {rec.write_id}")
            write_ids.add(rec.op_id)
    for rec in records:
        if rec.kind is Kind.READ and rec.write_id != DEFAULT_WRITE and rec.write_id not in write_ids:
            raise DanglingWriteRef(f"read {rec.op_id} returns unknown write {rec.write_id}")
    return records


def write_log(log: Iterable[OpRecord], out: IO[str] | str | Path) -> None:
    """Serialize records as CSV (one header line, then one line per record)."""
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="") as fh:
            write_log(log, fh)
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in log:
        w.writerow((r.op_id, r.kind.value, r.key, r.write_id, r.start, r.finish, r.origin_server))


def read_log(src: IO[str] | str | Path) -> list[OpRecord]:
    """Parse the CSV produced by :func:`write_log` (header optional)."""
    if isinstance(src, (str, Path)):
        with open(src, newline="") as fh:
            return read_log(fh)
    out = []
    for row in csv.reader(src):
        if not row or row[0] == LOG_HEADER[0]:
            continue
        op_id, kind, key, wid, start, finish, origin = row
        out.append(OpRecord(int(op_id), Kind(kind), int(key), int(wid), int(start), int(finish), int(origin)))
    return out


def log_to_string(log: Iterable[OpRecord]) -> str:
    buf = io.StringIO()
    write_log(log, buf)
    return buf.getvalue()


# --------------------------------------------------------------------------
# SLAs and partition model


def _check_prob(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise ConfigError(f"{name} must be a probability, got {value}")


@dataclass(frozen=True)
class ConsistencySla:
    """Keep the fraction of t_c-stale reads at or below ``p_ic_sla``."""

    p_ic_sla: float
    t_c: int
    t_a: int
    epsilon: float = 0.05

    metric = "p_ic"

    def __post_init__(self):
        _check_prob("p_ic_sla", self.p_ic_sla)
        if self.t_c < 0 or self.t_a < 0:
            raise ConfigError("t_c and t_a must be nonnegative")
        if not (0.0 <= self.epsilon <= self.p_ic_sla):
            raise ConfigError(f"epsilon {self.epsilon} must lie in [0, {self.p_ic_sla}]")

    @property
    def bound(self) -> float:
        return self.p_ic_sla

    @property
    def target(self) -> float:
        return self.p_ic_sla - self.epsilon


@dataclass(frozen=True)
class LatencySla:
    """Keep the fraction of reads slower than t_a at or below ``p_ua_sla``."""

    p_ua_sla: float
    t_a: int
    t_c: int
    epsilon: float = 0.05

    metric = "p_ua"

    def __post_init__(self):
        _check_prob("p_ua_sla", self.p_ua_sla)
        if self.t_c < 0 or self.t_a < 0:
            raise ConfigError("t_c and t_a must be nonnegative")
        if not (0.0 <= self.epsilon <= self.p_ua_sla):
            raise ConfigError(f"epsilon {self.epsilon} must lie in [0, {self.p_ua_sla}]")

    @property
    def bound(self) -> float:
        return self.p_ua_sla

    @property
    def target(self) -> float:
        return self.p_ua_sla - self.epsilon


@dataclass(frozen=True)
class PartitionModel:
    """At least ``alpha`` of client-to-client paths take longer than ``t_p``."""

    t_p: int
    alpha: float

    def __post_init__(self):
        _check_prob("alpha", self.alpha)
        if self.t_p < 0:
            raise ConfigError("t_p must be nonnegative")


# --------------------------------------------------------------------------
# delay models


def lognormal_params(mean: float, std: float) -> tuple[float, float]:
    """Log-space (mu, sigma) of a lognormal with the given mean and std."""
    if mean <= 0:
        return float("-inf"), 0.0
    s2 = math.log1p((std / mean) ** 2)
    return math.log(mean) - s2 / 2, math.sqrt(s2)


@dataclass(frozen=True)
class Constant:
    """Every server-to-LAN link has the same one-way delay."""

    one_way: int


@dataclass(frozen=True)
class SharpJump:
    """Per-server one-way link delays that change at scheduled times.

    ``schedule`` holds ``(time, {server: delay})`` entries; servers missing
    from an entry's map use ``default``.
    """

    schedule: tuple[tuple[int, Mapping[int, int]], ...]
    default: int = 0


@dataclass(frozen=True)
class Lognormal:
    """Every link traversal independently draws a lognormal delay.

    ``schedule`` holds ``(time, mean, std)`` entries; the sampled delay has
    the given mean and standard deviation.
    """

    schedule: tuple[tuple[int, int, int], ...]


DelayVariant = Constant | SharpJump | Lognormal


@dataclass(frozen=True)
class DelayModel:
    variant: DelayVariant
    rng_seed: int = 0

    def __post_init__(self):
        v = self.variant
        if isinstance(v, Constant):
            if v.one_way < 0:
                raise ConfigError("negative delay")
            return
        times = [entry[0] for entry in v.schedule]
        if not times or times[0] != 0:
            raise ConfigError("delay schedule must start at time 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("delay schedule times must be strictly increasing")
        if isinstance(v, SharpJump):
            if v.default < 0 or any(d < 0 for _, m in v.schedule for d in m.values()):
                raise ConfigError("negative delay")
        elif isinstance(v, Lognormal):
            if any(mu < 0 or sd < 0 for _, mu, sd in v.schedule):
                raise ConfigError("negative lognormal parameters")

    @property
    def change_times(self) -> list[int]:
        """Times (after 0) at which the delay distribution changes."""
        if isinstance(self.variant, Constant):
            return []
        return [entry[0] for entry in self.variant.schedule[1:]]

    def segment(self, at: int) -> int:
        """Index of the schedule entry in force at time ``at``."""
        if isinstance(self.variant, Constant):
            return 0
        idx = 0
        for i, entry in enumerate(self.variant.schedule):
            if entry[0] <= at:
                idx = i
        return idx

    def is_stochastic(self) -> bool:
        return isinstance(self.variant, Lognormal)

    def link_delays(self, n_servers: int, at: int) -> list[int]:
        """Deterministic per-server link delays (mean delays for lognormal)."""
        v = self.variant
        if isinstance(v, Constant):
            return [v.one_way] * n_servers
        entry = v.schedule[self.segment(at)]
        if isinstance(v, SharpJump):
            return [int(entry[1].get(s, v.default)) for s in range(n_servers)]
        return [entry[1]] * n_servers

    def sampler(self, n_servers: int, seed: int | None = None) -> "LinkSampler":
        return LinkSampler(self, n_servers, self.rng_seed if seed is None else seed)


class LinkSampler:
    """Seeded stream of one-way link delays.

    ``link(server, now)`` is the delay of one traversal of the link between
    ``server`` and the LAN switch; a message between two distinct servers
    crosses two links.  Lognormal draws come from a numpy generator consumed
    in blocks, which keeps the stream identical for a given seed.
    """

    _BLOCK = 1 << 16

    def __init__(self, model: DelayModel, n_servers: int, seed: int):
        self.model = model
        self.n_servers = n_servers
        self._gen = np.random.default_rng(seed)
        self._z: list[float] = []
        self._zi = 0
        self._fixed: list[int] = []
        self._ln: tuple[float, float] | None = None
        v = model.variant
        self._bounds = [0] if isinstance(v, Constant) else [e[0] for e in v.schedule]
        self._refresh(0)

    def _refresh(self, now: int) -> None:
        seg = self.model.segment(now)
        self._seg_start = self._bounds[seg]
        self._seg_end = self._bounds[seg + 1] if seg + 1 < len(self._bounds) else math.inf
        v = self.model.variant
        if isinstance(v, Lognormal):
            _, mean, std = v.schedule[seg]
            self._ln = lognormal_params(mean, std)
        else:
            self._ln = None
            self._fixed = self.model.link_delays(self.n_servers, now)

    def link(self, server: int, now: int) -> int:
        if now >= self._seg_end or now < self._seg_start:
            self._refresh(now)
        if self._ln is None:
            return self._fixed[server]
        mu, sigma = self._ln
        if mu == -math.inf:
            return 0
        if self._zi >= len(self._z):
            self._z = self._gen.standard_normal(self._BLOCK).tolist()
            self._zi = 0
        z = self._z[self._zi]
        self._zi += 1
        return int(math.exp(mu + sigma * z) + 0.5)

    def hop(self, src: int, dst: int, now: int) -> int:
        """Delay of a message from ``src`` to ``dst`` (0 on the same machine)."""
        if src == dst:
            return 0
        return self.link(src, now) + self.link(dst, now)


# --------------------------------------------------------------------------
# knobs


class ConsistencyLevel(enum.Enum):
    ONE = "ONE"
    TWO = "TWO"
    QUORUM = "QUORUM"
    ALL = "ALL"

    def replicas_needed(self, replication_factor: int) -> int:
        if self is ConsistencyLevel.ONE:
            return 1
        if self is ConsistencyLevel.TWO:
            return min(2, replication_factor)
        if self is ConsistencyLevel.QUORUM:
            return replication_factor // 2 + 1
        return replication_factor


DEFAULT_MAX_READ_DELAY = ms(10)


@dataclass(frozen=True)
class KnobState:
    read_delay: int = 0
    repair_rate: float = 0.1
    consistency_level: ConsistencyLevel = ConsistencyLevel.ONE
    max_read_delay: int = field(default=DEFAULT_MAX_READ_DELAY, compare=False)

    def __post_init__(self):
        if not (0 <= self.read_delay <= self.max_read_delay):
            raise KnobOutOfRange(f"read_delay {self.read_delay}us outside [0, {self.max_read_delay}]")
        if not (0.0 <= self.repair_rate <= 1.0):
            raise KnobOutOfRange(f"repair_rate {self.repair_rate} outside [0, 1]")

