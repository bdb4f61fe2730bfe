"""Multi-datacenter composition and geo-delay control.

A read served from several replica datacenters misses its deadline (or is
stale) depending on a composition rule:

* ``QUICKEST`` -- one datacenter meeting the guarantee suffices, so the
  composed miss probability is the product of per-DC miss probabilities;
* ``ALL`` -- every datacenter must meet it, so the composed miss
  probability is ``1 - prod(1 - p_j)``.

When the per-DC deadlines differ these products only bracket the composed
probability between its values at the smallest and largest deadline.

Per-DC behaviour is estimated by Monte-Carlo.  Within a datacenter a read
takes ``R + S`` (request and response legs) and a concurrent write takes
``W`` to reach the replica; the read is stale when it overtakes the write,
i.e. when the freshness interval ``F = W - R - S`` is positive.  Each remote
datacenter sits behind a WAN link whose delay is normal (clamped at 0).

The local datacenter holds every read for a *geo-delay* ``Delta`` before
forwarding it, which trades latency for freshness:

    p_ic_i = P[F_i + Y_i > t_c + t_pG + Delta]
    p_ua_i = P[L_i + Y_i > t_a + t_pG - Delta]

``Delta`` is steered by a PID law on the composed SLA metric (or, for
comparison, by the single-DC multiplicative step rule).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .controller import next_step
from .model import ConsistencySla, EmptyModelList, LatencySla, lognormal_params, ms

Sla = ConsistencySla | LatencySla


class Rule(enum.Enum):
    QUICKEST = "QUICKEST"
    ALL = "ALL"


def compose(probabilities: Sequence[float], rule: Rule) -> float:
    """Composed miss probability for per-DC misses at a common deadline."""
    if not probabilities:
        raise EmptyModelList("need at least one datacenter model")
    p = np.asarray(probabilities, dtype=float)
    if rule is Rule.QUICKEST:
        return float(np.prod(p))
    return float(1.0 - np.prod(1.0 - p))


@dataclass(frozen=True)
class ComposedBound:
    """Composed miss probability ``value`` for models with thresholds in [t_min, t_max].

    If ``t_min == t_max`` the value is exact; otherwise
    ``p_composed(t_min) >= value >= p_composed(t_max)``.
    """

    value: float
    t_min: int
    t_max: int
    rule: Rule

    @property
    def exact(self) -> bool:
        return self.t_min == self.t_max


def compose_latency(models: Sequence[tuple[int, float]], rule: Rule) -> ComposedBound:
    """Compose per-DC latency models ``(t_a_j, p_ua_j)``."""
    if not models:
        raise EmptyModelList("need at least one datacenter model")
    ts = [t for t, _ in models]
    return ComposedBound(compose([p for _, p in models], rule), min(ts), max(ts), rule)


def compose_consistency(models: Sequence[tuple[int, float]], rule: Rule) -> ComposedBound:
    """Compose per-DC consistency models ``(t_c_j, p_ic_j)``.

    Freshness and latency compose identically (both are deadlines on a
    random interval), so this is :func:`compose_latency` under relabelling.
    """
    return compose_latency(models, rule)


# ---------------------------------------------------------------- samplers


def _lognormal(rng: np.random.Generator, mean: float, std: float, n: int) -> np.ndarray:
    if mean <= 0:
        return np.zeros(n)
    mu, sigma = lognormal_params(mean, std)
    return rng.lognormal(mu, sigma, n)


@dataclass(frozen=True)
class DcModel:
    """Within-datacenter delays (microseconds): write leg W, read legs R and S."""

    write_mean: float = ms(13.0)
    write_std: float = ms(6.0)
    read_mean: float = ms(7.9)
    read_std: float = ms(2.0)
    name: str = "dc"

    def latency(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return _lognormal(rng, self.read_mean, self.read_std, n) + _lognormal(rng, self.read_mean, self.read_std, n)

    def freshness(self, rng: np.random.Generator, n: int) -> np.ndarray:
        w = _lognormal(rng, self.write_mean, self.write_std, n)
        return w - self.latency(rng, n)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Paired (latency, freshness) samples sharing the same read legs."""
        latency = self.latency(rng, n)
        return latency, _lognormal(rng, self.write_mean, self.write_std, n) - latency


@dataclass(frozen=True)
class WanModel:
    """Normal WAN delay per link; ``schedule`` holds (iteration, mean, std)."""

    schedule: tuple[tuple[int, float, float], ...] = ((0, ms(20), ms(2 ** 0.5)),)
    t_p: int = ms(20)

    def params(self, iteration: int) -> tuple[float, float]:
        mean, std = self.schedule[0][1:]
        for it, m, s in self.schedule:
            if it <= iteration:
                mean, std = m, s
        return mean, std

    def sample(self, rng: np.random.Generator, n: int, iteration: int = 0) -> np.ndarray:
        mean, std = self.params(iteration)
        return np.maximum(0.0, rng.normal(mean, std, n))

    def alpha(self, iteration: int = 0, n_samples: int = 100_000, seed: int = 0) -> float:
        """Fraction of WAN messages slower than ``t_p``."""
        return float(np.mean(self.sample(np.random.default_rng(seed), n_samples, iteration) > self.t_p))


@dataclass(frozen=True)
class WanEstimate:
    estimate: float
    lower_bound: float
    p_dc: float
    alpha: float


def compose_wan(x: np.ndarray, y: np.ndarray, t: float, t_p: float) -> WanEstimate:
    """P[X + Y > t + t_p] from paired samples, with the bound P[X > t]·P[Y > t_p]."""
    p_dc = float(np.mean(x > t))
    alpha = float(np.mean(y > t_p))
    return WanEstimate(float(np.mean(x + y > t + t_p)), p_dc * alpha, p_dc, alpha)


# ---------------------------------------------------------------- control


@dataclass(frozen=True)
class PidGains:
    k_p: float
    k_d: float
    k_i: float


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    previous: float | None = None


def pid_step(gains: PidGains, state: PidState, error: float) -> tuple[float, PidState]:
    """u = k_p·E + k_d·(E - E_prev) + k_i·sum(E)."""
    integral = state.integral + error
    deriv = 0.0 if state.previous is None else error - state.previous
    u = gains.k_p * error + gains.k_d * deriv + gains.k_i * integral
    return u, PidState(integral, error)


@dataclass(frozen=True)
class GeoSettings:
    rule: Rule = Rule.ALL
    n_samples: int = 100_000
    controller: str = "pid"  # or "multiplicative"
    gains: PidGains = PidGains(1.0, 0.5, 0.5)
    gain_unit: int = ms(6)  # microseconds of geo-delay per unit of PID output
    step_unit: int = ms(1)  # multiplicative controller unit step
    max_inc: int = 8


@dataclass(frozen=True)
class GeoEstimate:
    p_ic: float
    p_ua: float
    per_dc_ic: tuple[float, ...]
    per_dc_ua: tuple[float, ...]


def estimate(sla: Sla, dcs: Sequence[DcModel], wan: WanModel, delta: float, iteration: int,
             rng: np.random.Generator, n_samples: int, rule: Rule) -> GeoEstimate:
    """Monte-Carlo per-DC probabilities at geo-delay ``delta`` and their composition."""
    if not dcs:
        raise EmptyModelList("need at least one datacenter model")
    ic, ua = [], []
    for dc in dcs:
        latency, freshness = dc.sample(rng, n_samples)
        y = wan.sample(rng, n_samples, iteration)
        ic.append(float(np.mean(freshness + y > sla.t_c + wan.t_p + delta)))
        ua.append(float(np.mean(latency + y > sla.t_a + wan.t_p - delta)))
    return GeoEstimate(compose(ic, rule), compose(ua, rule), tuple(ic), tuple(ua))


@dataclass
class GeoControllerState:
    delta: float = 0.0
    pid: PidState = field(default_factory=PidState)
    inc: int = 1
    dir: int = 0


def geo_control_iteration(state: GeoControllerState, sla: Sla, est: GeoEstimate,
                          settings: GeoSettings) -> GeoControllerState:
    """Move the geo-delay using the PID law."""
    metric = est.p_ic if isinstance(sla, ConsistencySla) else est.p_ua
    error = metric - sla.target
    u, pid = pid_step(settings.gains, state.pid, error)
    change = u * settings.gain_unit
    if isinstance(sla, LatencySla):
        change = -change  # too many slow reads -> shorten the geo-delay
    return GeoControllerState(max(0.0, state.delta + change), pid, state.inc, state.dir)


def geo_control_multiplicative(state: GeoControllerState, sla: Sla, est: GeoEstimate,
                               settings: GeoSettings) -> GeoControllerState:
    """Move the geo-delay with the single-DC multiplicative step rule."""
    metric = est.p_ic if isinstance(sla, ConsistencySla) else est.p_ua
    new_dir = 1 if metric > sla.target else -1
    inc, direction = next_step(state.inc, state.dir, new_dir, settings.max_inc)
    step = inc * direction * settings.step_unit
    if isinstance(sla, LatencySla):
        step = -step
    return GeoControllerState(max(0.0, state.delta + step), state.pid, inc, direction)


@dataclass(frozen=True)
class GeoRow:
    iter: int
    p_ic: float
    p_ua: float
    delta: int
    wan_mean: int

    def csv_row(self) -> str:
        return f"{self.iter},{self.p_ic:.6f},{self.p_ua:.6f},{self.delta},{self.wan_mean}"


GEO_HEADER = "iter,p_ic_composed,p_ua_composed,delta_us,wan_mean_us"


def run_geo(sla: Sla, dcs: Sequence[DcModel], wan: WanModel, iterations: int = 300,
            settings: GeoSettings = GeoSettings(), seed: int = 0) -> list[GeoRow]:
    """Run the geo control loop; row ``i`` reports the estimate made with the delta in force at ``i``."""
    rng = np.random.default_rng(seed)
    state = GeoControllerState()
    step = geo_control_multiplicative if settings.controller == "multiplicative" else geo_control_iteration
    rows = []
    for it in range(iterations):
        delta = int(round(state.delta))
        est = estimate(sla, dcs, wan, delta, it, rng, settings.n_samples, settings.rule)
        rows.append(GeoRow(it, est.p_ic, est.p_ua, delta, int(round(wan.params(it)[0]))))
        state = step(state, sla, est, settings)
    return rows
