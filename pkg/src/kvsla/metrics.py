"""Freshness and latency metrics over an operation log.

A read R starting at ``s`` is *t-fresh* when the write it returns started at
or after the cutoff ``tau_fresh(R, t)``:

* if some write to the key starts in ``[s - t, s]`` (clamped at 0), the
  cutoff is ``s - t``;
* else if no write to the key starts before ``s``, the cutoff is 0;
* otherwise the cutoff is the start time of the last write that started
  before ``s - t``.

The initial value behaves like a write that started at time 0.

``compute_metrics`` sorts writes per key once and bisects for every read,
so the cost is O(k log k) for a log of k operations.
"""

from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Iterable, Sequence

from .model import DEFAULT_WRITE, Kind, NoReads, OpRecord


@dataclass(frozen=True)
class MetricReport:
    p_ic: float
    p_ua: float
    n_reads: int
    t_c: int
    t_a: int

    def csv_row(self, window_id: int) -> str:
        return f"{window_id},{self.n_reads},{self.p_ic:.6f},{self.p_ua:.6f}"


METRIC_HEADER = "window_id,n_reads,p_ic,p_ua"


class WriteIndex:
    """Per-key write start times, sorted ascending, plus write lookup."""

    def __init__(self, writes: Iterable[OpRecord]):
        by_key: dict[int, list[int]] = {}
        self.start_of: dict[int, int] = {DEFAULT_WRITE: 0}
        self.finish_of: dict[int, int] = {DEFAULT_WRITE: 0}
        for w in writes:
            by_key.setdefault(w.key, []).append(w.start)
            self.start_of[w.op_id] = w.start
            self.finish_of[w.op_id] = w.finish
        for starts in by_key.values():
            starts.sort()
        self.starts = by_key

    def add(self, write: OpRecord) -> None:
        """Insert a write, keeping per-key order (O(1) for writes added in start order)."""
        starts = self.starts.setdefault(write.key, [])
        if starts and write.start < starts[-1]:
            starts.insert(bisect_right(starts, write.start), write.start)
        else:
            starts.append(write.start)
        self.start_of[write.op_id] = write.start
        self.finish_of[write.op_id] = write.finish

    @classmethod
    def from_log(cls, log: Iterable[OpRecord]) -> "WriteIndex":
        return cls(r for r in log if r.kind is Kind.WRITE)

    def key_starts(self, key: int) -> Sequence[int]:
        return self.starts.get(key, ())


def cutoff(starts: Sequence[int], read_start: int, t: int) -> int:
    """Freshness cutoff for a read at ``read_start`` given sorted write times.

    Works equally on start times (t-freshness) or finish times (t-visibility).
    """
    lo = read_start - t
    if lo < 0:
        lo = 0
    if bisect_right(starts, read_start) > bisect_left(starts, lo):
        return lo
    before = bisect_left(starts, read_start)
    if before == 0:
        return 0
    # every write before read_start also starts before read_start - t here
    return starts[bisect_left(starts, read_start - t) - 1]


def tau_fresh(read: OpRecord, t: int, writes: Sequence[int]) -> int:
    """Cutoff time for ``read`` given the sorted start times of its key's writes."""
    return cutoff(writes, read.start, t)


def is_t_fresh(read: OpRecord, t: int, index: WriteIndex) -> bool:
    tau = tau_fresh(read, t, index.key_starts(read.key))
    return index.start_of[read.write_id] >= tau


def freshness_verdicts(log: Sequence[OpRecord], t: int) -> dict[int, bool]:
    """Map read op_id -> whether the read is t-fresh."""
    index = WriteIndex.from_log(log)
    return {r.op_id: is_t_fresh(r, t, index) for r in log if r.kind is Kind.READ}


def compute_metrics(log: Sequence[OpRecord], t_c: int, t_a: int, reads: Sequence[OpRecord] | None = None,
                    index: WriteIndex | None = None) -> MetricReport:
    """Fraction of t_c-stale reads and of reads slower than t_a.

    ``reads`` optionally restricts which reads are scored (e.g. one
    measurement window) while freshness is judged against every write in
    ``log`` (or in a prebuilt ``index`` of those writes).

    Raises:
        NoReads: when there is nothing to score.
    """
    if index is None:
        index = WriteIndex.from_log(log)
    if reads is None:
        reads = [r for r in log if r.kind is Kind.READ]
    if not reads:
        raise NoReads("no reads in window")
    stale = slow = 0
    start_of = index.start_of
    empty: tuple[int, ...] = ()
    starts = index.starts
    for r in reads:
        if start_of[r.write_id] < cutoff(starts.get(r.key, empty), r.start, t_c):
            stale += 1
        if r.finish - r.start > t_a:
            slow += 1
    n = len(reads)
    return MetricReport(stale / n, slow / n, n, t_c, t_a)


def compute_t_visibility(log: Sequence[OpRecord], t: int) -> float:
    """Fraction of reads that are stale under the end-time based t-visibility.

    The cutoff is computed like ``tau_fresh`` but from write finish times, and
    a read is fresh when the write it returned finished at or after the
    cutoff.  A read returning a write that was still in flight when the read
    started, or a later write, is therefore always fresh.

    Raises:
        NoReads: when the log has no reads.
    """
    ends: dict[int, list[int]] = {}
    finish_of = {DEFAULT_WRITE: 0}
    for w in log:
        if w.kind is Kind.WRITE:
            ends.setdefault(w.key, []).append(w.finish)
            finish_of[w.op_id] = w.finish
    for v in ends.values():
        v.sort()
    reads = [r for r in log if r.kind is Kind.READ]
    if not reads:
        raise NoReads("no reads in log")
    stale = sum(1 for r in reads if finish_of[r.write_id] < cutoff(ends.get(r.key, ()), r.start, t))
    return stale / len(reads)
