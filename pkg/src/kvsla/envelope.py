"""Soft-partition parameter and the achievable consistency/latency envelope.

If client-to-client propagation takes longer than ``t_p`` on a fraction
``alpha`` of paths and ``t_c + t_a < t_p``, then no store can keep
``p_ic + p_ua`` below ``alpha``.  The best achievable curve is therefore
``p_ic = max(0, alpha - p_ua)``.

Path convention
---------------
Clients are co-located with the servers of a star LAN.  A message between
two distinct machines crosses both their links to the switch (delay
``link(a) + link(b)``); a message to the local machine costs nothing.

A *path* is a chain along which a write by client ``w`` reaches a reader
``j`` via a replica server ``r`` of the key: the write travels
``w -> cw -> r`` (coordinator ``cw``), the read request travels
``j -> cr -> r`` and the value returns ``r -> cr -> j``.  Because a write and
a read can be concurrent, the path delay is::

    max(d(w->cw->r), d(j->cr->r)) + d(r->cr->j)

If this exceeds ``t_c + t_a``, a read issued ``t_c`` after the write that is
answered through ``r`` is either stale or slower than ``t_a``.  ``alpha``
counts paths uniformly over writer, write coordinator, reader, read
coordinator, the key's position on the ring and the replica on the path.

Calibration: with nine servers, replication factor 3 and one-way links of
10 ms this gives ``alpha = 0`` at ``t_p = 150 ms``; raising five links to
26 ms gives ``alpha = 0.4376``.  Restricting ``r`` to the replica that
answers first would give 0.29 instead.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .metrics import MetricReport
from .model import DelayModel, Lognormal, lognormal_params


def _replica_sets(n_servers: int, replication_factor: int) -> list[list[int]]:
    return [[(k + q) % n_servers for q in range(replication_factor)] for k in range(n_servers)]


def _alpha_exact(links: Sequence[int], t_p: int, replication_factor: int) -> float:
    n = len(links)
    d = np.asarray(links, dtype=np.int64)
    hop = d[:, None] + d[None, :]
    np.fill_diagonal(hop, 0)
    # write-leg delays to each replica over all (writer, write-coordinator) pairs
    d_write = {r: np.sort((hop + hop[:, r][None, :]).ravel()) for r in range(n)}
    slow = 0
    for reps in _replica_sets(n, replication_factor):
        for cr in range(n):
            for r in reps:
                d_read = hop[:, cr] + hop[cr, r]
                tail = hop[r, cr] + hop[cr, :]
                budget = t_p - tail
                fast = np.searchsorted(d_write[r], budget, side="right")
                slow += int(np.where(d_read > budget, n * n, n * n - fast).sum())
    return slow / (n ** 5 * replication_factor)


def _alpha_monte_carlo(model: DelayModel, n_servers: int, t_p: int, at: int,
                       replication_factor: int, n_samples: int, seed: int) -> float:
    v = model.variant
    assert isinstance(v, Lognormal)
    _, mean, std = v.schedule[model.segment(at)]
    mu, sigma = lognormal_params(mean, std)
    rng = np.random.default_rng(seed)
    n = n_servers
    size = n_samples

    def links(count):
        if mu == -math.inf:
            return np.zeros(count)
        return rng.lognormal(mu, sigma, count)

    def hop(a, b):
        return np.where(a == b, 0.0, links(a.size) + links(a.size))

    w, cw, j, cr, k = (rng.integers(0, n, size) for _ in range(5))
    r = (k + rng.integers(0, replication_factor, size)) % n
    d_write = hop(w, cw) + hop(cw, r)
    d_read = hop(j, cr) + hop(cr, r)
    path = np.maximum(d_write, d_read) + hop(r, cr) + hop(cr, j)
    return float(np.mean(path > t_p))


def compute_alpha(model: DelayModel, n_servers: int, t_p: int, at: int = 0,
                  n_samples: int = 100_000, replication_factor: int = 3, seed: int = 0) -> float:
    """Fraction of client-to-client paths slower than ``t_p`` at time ``at``.

    Exact enumeration for constant and sharp-jump models; Monte-Carlo with
    ``n_samples`` paths for lognormal delays.
    """
    if isinstance(model.variant, Lognormal):
        return _alpha_monte_carlo(model, n_servers, t_p, at, replication_factor, max(n_samples, 10_000), seed)
    return _alpha_exact(model.link_delays(n_servers, at), t_p, replication_factor)


def optimal_p_ic(alpha: float, p_ua: float) -> float:
    """Lowest achievable p_ic for a given p_ua."""
    return max(0.0, alpha - p_ua)


def optimal_p_ua(alpha: float, p_ic: float) -> float:
    """Lowest achievable p_ua for a given p_ic."""
    return max(0.0, alpha - p_ic)


@dataclass(frozen=True)
class EnvelopePoint:
    alpha: float
    t_p: int

    def p_ic_opt(self, p_ua: float) -> float:
        return optimal_p_ic(self.alpha, p_ua)

    def polyline(self, n_points: int = 21) -> list[tuple[float, float]]:
        """(p_ua, p_ic_opt) samples over p_ua in [0, 1], always including alpha."""
        xs = sorted({i / (n_points - 1) for i in range(n_points)} | {round(self.alpha, 6)})
        return [(x, self.p_ic_opt(x)) for x in xs]


class Verdict(enum.Enum):
    CONSISTENT = "consistent"
    VIOLATION = "violation"
    NOT_APPLICABLE = "not-applicable"


def check_impossibility(report: MetricReport, alpha: float, t_c: int, t_a: int, t_p: int,
                        tolerance: float = 0.02) -> Verdict:
    """Would this measurement beat the impossibility bound?"""
    if t_c + t_a >= t_p:
        return Verdict.NOT_APPLICABLE
    if report.p_ua + report.p_ic < alpha - tolerance:
        return Verdict.VIOLATION
    return Verdict.CONSISTENT


def _point_segment_distance(p, a, b) -> float:
    px, py = p
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    length2 = dx * dx + dy * dy
    u = 0.0 if length2 == 0 else max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / length2))
    return math.hypot(px - (ax + u * dx), py - (ay + u * dy))


def distance_to_envelope(points: Iterable[tuple[float, float]], alpha: float) -> float:
    """Distance from the centroid of (p_ua, p_ic) points to the optimal curve."""
    pts = list(points)
    if not pts:
        return math.nan
    cx = sum(p[0] for p in pts) / len(pts)
    cy = sum(p[1] for p in pts) / len(pts)
    corner = (min(alpha, 1.0), 0.0)
    return min(_point_segment_distance((cx, cy), (0.0, alpha), corner),
               _point_segment_distance((cx, cy), corner, (1.0, 0.0)))
