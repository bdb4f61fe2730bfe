"""Scenario files: load, validate and run experiments, writing CSV outputs.

A scenario is a JSON object.  Times are given in milliseconds (``*_ms``) or
seconds (``*_s``) and converted to integer microseconds on load.  Three
modes exist:

``single_dc``
    the simulated store under the adaptive controller;
``fixed``
    the simulated store at fixed knob settings (knob studies, metric
    comparisons);
``geo``
    the multi-datacenter geo-delay controller.

A ``variants`` list runs the scenario once per entry, each entry being a
partial scenario deep-merged over the base and labelled by ``label``.  The
field-by-field format is documented in ``docs/scenarios.md``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

from .controller import (
    TIMELINE_HEADER,
    ControllerSettings,
    TimelineRow,
    convergence_index,
    run_controller,
    summarize,
)
from .envelope import EnvelopePoint, compute_alpha, distance_to_envelope
from .geo import GEO_HEADER, DcModel, GeoRow, GeoSettings, PidGains, Rule, WanModel, run_geo
from .metrics import WriteIndex, compute_metrics, compute_t_visibility
from .model import (
    US_PER_S,
    ConfigError,
    ConsistencyLevel,
    ConsistencySla,
    Constant,
    DelayModel,
    Kind,
    KnobOutOfRange,
    KnobState,
    LatencySla,
    Lognormal,
    NoReads,
    SharpJump,
    ms,
)
from .simstore import ClusterConfig, Simulation, arrivals, run_simulation, stream

MODES = ("single_dc", "fixed", "geo")


def _s(value: float) -> int:
    return int(round(value * US_PER_S))


@dataclass(frozen=True)
class Scenario:
    """A validated scenario; ``raw`` keeps the (merged) JSON for reference."""

    name: str
    mode: str
    seed: int
    raw: dict

    @property
    def description(self) -> str:
        return self.raw.get("description", "")


# ---------------------------------------------------------------- loading


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse(raw: dict) -> Scenario:
    """Validate a scenario object.

    Raises:
        ConfigError: missing or malformed fields.
    """
    if not isinstance(raw, dict):
        raise ConfigError("scenario must be a JSON object")
    for field in ("name", "mode"):
        if field not in raw:
            raise ConfigError(f"scenario is missing {field!r}")
    if raw["mode"] not in MODES:
        raise ConfigError(f"unknown mode {raw['mode']!r}; expected one of {', '.join(MODES)}")
    scenario = Scenario(str(raw["name"]), raw["mode"], int(raw.get("seed", 0)), raw)
    # build every variant once so that errors surface before anything runs
    try:
        for variant in variants(scenario):
            if variant.mode == "geo":
                build_geo(variant)
                continue
            build_cluster(variant)
            build_knobs(variant.raw.get("knobs", {}))
            build_controller(variant.raw)
            if variant.mode == "single_dc":
                build_sla(variant.raw)
    except (KnobOutOfRange, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"scenario {scenario.name!r}: {type(exc).__name__}: {exc}") from exc
    return scenario


def load(path: str | Path) -> Scenario:
    """Read and validate a scenario file.

    Raises:
        ConfigError: unreadable file, invalid JSON or invalid fields.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse(raw)


def bundled_dir() -> Path:
    return Path(str(resources.files("kvsla") / "scenarios"))


def bundled() -> list[Path]:
    """Paths of the scenario files shipped with the package, by name."""
    return sorted(bundled_dir().glob("*.json"))


def resolve(name_or_path: str) -> Path:
    """A scenario path, accepting bare names of bundled scenarios."""
    p = Path(name_or_path)
    if p.exists():
        return p
    candidate = bundled_dir() / f"{name_or_path.removesuffix('.json')}.json"
    if candidate.exists():
        return candidate
    raise ConfigError(f"no scenario file or bundled scenario named {name_or_path!r}")


def variants(scenario: Scenario) -> list[Scenario]:
    raw = scenario.raw
    entries = raw.get("variants")
    if not entries:
        return [scenario]
    base = {k: v for k, v in raw.items() if k != "variants"}
    out = []
    seen = set()
    for entry in entries:
        if "label" not in entry:
            raise ConfigError("every variant needs a 'label'")
        label = str(entry["label"])
        if label in seen or "/" in label:
            raise ConfigError(f"bad or duplicate variant label {label!r}")
        seen.add(label)
        merged = deep_merge(base, {k: v for k, v in entry.items() if k != "label"})
        merged["label"] = label
        mode = merged.get("mode", scenario.mode)
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        out.append(Scenario(scenario.name, mode, int(merged.get("seed", scenario.seed)), merged))
    return out


def with_seed(scenario: Scenario, seed: int) -> Scenario:
    raw = dict(scenario.raw)
    raw["seed"] = seed
    return Scenario(scenario.name, scenario.mode, seed, raw)


# ---------------------------------------------------------------- builders


def build_sla(raw: dict) -> ConsistencySla | LatencySla:
    sla = raw.get("sla")
    if not isinstance(sla, dict):
        raise ConfigError("scenario needs an 'sla' object")
    try:
        kind = sla["type"]
        p = float(sla["p"])
        t_c = ms(sla.get("t_c_ms", 0))
        t_a = ms(sla["t_a_ms"])
        eps = float(sla.get("epsilon", 0.05))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad sla: {exc}") from exc
    if kind == "consistency":
        return ConsistencySla(p, t_c, t_a, eps)
    if kind == "latency":
        return LatencySla(p, t_a, t_c, eps)
    raise ConfigError(f"sla type must be 'consistency' or 'latency', got {kind!r}")


def build_delay(raw: dict) -> DelayModel:
    d = raw.get("delay")
    if not isinstance(d, dict):
        raise ConfigError("scenario needs a 'delay' object")
    kind = d.get("kind")
    try:
        if kind == "constant":
            return DelayModel(Constant(ms(d["one_way_ms"])))
        if kind == "sharp_jump":
            schedule = tuple(
                (_s(e["at_s"]), {int(s): ms(v) for s, v in e.get("delays_ms", {}).items()})
                for e in d["schedule"])
            return DelayModel(SharpJump(schedule, ms(d["default_ms"])))
        if kind == "lognormal":
            schedule = tuple((_s(e["at_s"]), ms(e["mean_ms"]), ms(e["std_ms"])) for e in d["schedule"])
            return DelayModel(Lognormal(schedule))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad delay model: {exc}") from exc
    raise ConfigError(f"delay kind must be constant, sharp_jump or lognormal, got {kind!r}")


_CLUSTER_FIELDS = {
    "n_servers": int, "replication_factor": int, "throughput_ops_per_s": float, "read_fraction": float,
    "n_keys": int, "key_distribution": str, "zipf_exponent": float, "value_size": int,
    "replication_loss": float, "repair_buffer_size": int,
}


def build_cluster(scenario: Scenario) -> ClusterConfig:
    raw = scenario.raw
    c = raw.get("cluster", {})
    unknown = set(c) - set(_CLUSTER_FIELDS) - {"consistency_level", "repair_interval_ms", "write_timeout_ms"}
    if unknown:
        raise ConfigError(f"unknown cluster fields: {sorted(unknown)}")
    kwargs: dict[str, Any] = {k: conv(c[k]) for k, conv in _CLUSTER_FIELDS.items() if k in c}
    if "consistency_level" in c:
        try:
            kwargs["consistency_level"] = ConsistencyLevel(c["consistency_level"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if "repair_interval_ms" in c:
        kwargs["repair_interval"] = ms(c["repair_interval_ms"])
    if "write_timeout_ms" in c:
        kwargs["write_timeout"] = ms(c["write_timeout_ms"])
    return ClusterConfig(build_delay(raw), rng_seed=scenario.seed, **kwargs)


def build_knobs(k: dict) -> KnobState:
    kwargs: dict[str, Any] = {}
    if "read_delay_ms" in k:
        kwargs["read_delay"] = ms(k["read_delay_ms"])
    if "repair_rate" in k:
        kwargs["repair_rate"] = float(k["repair_rate"])
    if "consistency_level" in k:
        kwargs["consistency_level"] = ConsistencyLevel(k["consistency_level"])
    if "max_read_delay_ms" in k:
        kwargs["max_read_delay"] = ms(k["max_read_delay_ms"])
    return KnobState(**kwargs)


def build_controller(raw: dict) -> ControllerSettings:
    c = dict(raw.get("controller", {}))
    kwargs: dict[str, Any] = {}
    for name in ("max_inc", "window_read_delay", "window_repair_rate", "passive_ops", "passive_servers"):
        if name in c:
            kwargs[name] = int(c.pop(name))
    for name in ("repair_rate_unit", "inject_ops_per_s"):
        if name in c:
            kwargs[name] = float(c.pop(name))
    for name in ("use_repair_knob", "use_read_delay_knob"):
        if name in c:
            kwargs[name] = bool(c.pop(name))
    if "measurement" in c:
        kwargs["measurement"] = c.pop("measurement")
        if kwargs["measurement"] not in ("active", "passive"):
            raise ConfigError("controller.measurement must be 'active' or 'passive'")
    if "read_delay_unit_ms" in c:
        kwargs["read_delay_unit"] = ms(c.pop("read_delay_unit_ms"))
    if "iteration_gap_ms" in c:
        kwargs["iteration_gap"] = ms(c.pop("iteration_gap_ms"))
    if c:
        raise ConfigError(f"unknown controller fields: {sorted(c)}")
    return ControllerSettings(**kwargs)


def t_p_of(raw: dict, sla: ConsistencySla | LatencySla | None = None) -> int:
    """Partition threshold: ``t_p_ms`` if given, else ``t_c + t_a``."""
    if "t_p_ms" in raw:
        return ms(raw["t_p_ms"])
    if sla is None:
        sla = build_sla(raw)
    return sla.t_c + sla.t_a


@dataclass(frozen=True)
class GeoSetup:
    sla: ConsistencySla | LatencySla
    dcs: tuple[DcModel, ...]
    wan: WanModel
    settings: GeoSettings
    iterations: int


def build_geo(scenario: Scenario) -> GeoSetup:
    raw = scenario.raw
    sla = build_sla(raw)
    dc = raw.get("dc", {})
    try:
        model = DcModel(write_mean=ms(dc.get("write_mean_ms", 13.0)), write_std=ms(dc.get("write_std_ms", 6.0)),
                        read_mean=ms(dc.get("read_mean_ms", 7.9)), read_std=ms(dc.get("read_std_ms", 2.0)))
        n_dcs = int(raw.get("n_remote_dcs", 3))
        w = raw.get("wan", {})
        schedule = tuple((int(e["at_iter"]), ms(e["mean_ms"]), ms(e["std_ms"]))
                         for e in w.get("schedule", [{"at_iter": 0, "mean_ms": 20, "std_ms": math.sqrt(2)}]))
        wan = WanModel(schedule, ms(w.get("t_p_ms", 20)))
        g = raw.get("geo", {})
        gains = g.get("gains", [1.0, 0.5, 0.5])
        settings = GeoSettings(rule=Rule(g.get("rule", "ALL")), n_samples=int(g.get("n_samples", 100_000)),
                               controller=g.get("controller", "pid"), gains=PidGains(*map(float, gains)),
                               gain_unit=ms(g.get("gain_unit_ms", 6)), step_unit=ms(g.get("step_unit_ms", 1)),
                               max_inc=int(g.get("max_inc", 8)))
        iterations = int(raw.get("iterations", 300))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad geo scenario: {exc}") from exc
    if n_dcs < 1:
        raise ConfigError("n_remote_dcs must be positive")
    if settings.controller not in ("pid", "multiplicative"):
        raise ConfigError("geo.controller must be 'pid' or 'multiplicative'")
    if schedule[0][0] != 0:
        raise ConfigError("wan schedule must start at iteration 0")
    return GeoSetup(sla, (model,) * n_dcs, wan, settings, iterations)


# ---------------------------------------------------------------- outputs


@dataclass
class Outputs:
    """CSV file contents keyed by file name."""

    files: dict[str, list[str]]

    def write(self, out_dir: Path) -> list[Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, lines in self.files.items():
            p = out_dir / name
            p.write_text("\n".join(lines) + "\n")
            paths.append(p)
        return paths


def _f(x: float | None, digits: int = 6) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.{digits}f}"


def _opt(x) -> str:
    return "" if x is None else str(x)


# ---------------------------------------------------------------- single DC


def _alpha_function(delay: DelayModel, n_servers: int, rf: int, t_p: int, seed: int):
    cache: dict[int, float] = {}

    def alpha_at(at: int) -> float:
        seg = delay.segment(at)
        if seg not in cache:
            start = 0 if seg == 0 else delay.change_times[seg - 1]
            cache[seg] = compute_alpha(delay, n_servers, t_p, at=start, replication_factor=rf, seed=seed)
        return cache[seg]

    return alpha_at


def _segment_starts(delay: DelayModel) -> list[int]:
    return [0, *delay.change_times]


def run_single_dc(scenario: Scenario, progress=None) -> Outputs:
    raw = scenario.raw
    sla = build_sla(raw)
    config = build_cluster(scenario)
    knobs = build_knobs(raw.get("knobs", {}))
    settings = build_controller(raw)
    duration = _s(raw["duration_s"])
    t_p = t_p_of(raw, sla)
    delay = config.delay_model
    alpha_at = _alpha_function(delay, config.n_servers, config.replication_factor, t_p, scenario.seed)
    failures = [(_s(f["at_s"]), int(f["server"]), bool(f["down"])) for f in raw.get("failures", [])]
    sim = Simulation(config, knobs, seed=scenario.seed, failures=failures)
    rows = run_controller(sim, sla, duration, settings, alpha_at=alpha_at, on_iteration=progress)
    return _controller_outputs(rows, sla, delay, alpha_at, t_p)


def _steady(rows: list[TimelineRow], conv_iter: int | None) -> list[TimelineRow]:
    """Post-convergence rows, or the second half of the segment if it never converged."""
    if conv_iter is not None:
        return [r for r in rows if r.iter >= conv_iter]
    return rows[len(rows) // 2:]


def _controller_outputs(rows, sla, delay: DelayModel, alpha_at, t_p: int) -> Outputs:
    starts = _segment_starts(delay)
    summaries = summarize(rows, sla, delay.change_times)
    timeline = [TIMELINE_HEADER] + [r.csv_row() for r in rows]
    scatter = ["segment,iter,p_ua,p_ic"]
    envelope = ["segment,alpha,t_p_us,p_ua,p_ic_opt"]
    summary = ["segment,change_time_us,n_iterations,convergence_iter,convergence_time_us,satisfaction,"
               "alpha,centroid_p_ua,centroid_p_ic,distance_to_envelope"]
    for seg, s in enumerate(summaries):
        t0 = starts[seg]
        t1 = starts[seg + 1] if seg + 1 < len(starts) else math.inf
        seg_rows = [r for r in rows if t0 <= r.sim_time < t1] if seg else [r for r in rows if r.sim_time < t1]
        alpha = alpha_at(t0)
        steady = _steady(seg_rows, s.convergence_iter)
        pts = [(r.p_ua, r.p_ic) for r in steady]
        for r in steady:
            scatter.append(f"{seg},{r.iter},{r.p_ua:.6f},{r.p_ic:.6f}")
        for x, y in EnvelopePoint(alpha, t_p).polyline():
            envelope.append(f"{seg},{alpha:.6f},{t_p},{x:.6f},{y:.6f}")
        cx = sum(p[0] for p in pts) / len(pts) if pts else None
        cy = sum(p[1] for p in pts) / len(pts) if pts else None
        dist = distance_to_envelope(pts, alpha) if pts else None
        summary.append(f"{seg},{s.change_time},{s.n_iterations},{_opt(s.convergence_iter)},"
                       f"{_opt(s.convergence_time)},{_f(s.satisfaction)},{alpha:.6f},{_f(cx)},{_f(cy)},{_f(dist)}")
    return Outputs({"timeline.csv": timeline, "scatter.csv": scatter, "envelope.csv": envelope,
                    "summary.csv": summary})


# ---------------------------------------------------------------- fixed knobs


def run_fixed(scenario: Scenario, progress=None) -> Outputs:
    """One run at fixed knobs, scored per window and overall.

    Extra output ``freshness.csv`` compares start-time freshness with
    end-time visibility for each ``t_values_ms`` entry.
    """
    raw = scenario.raw
    config = build_cluster(scenario)
    knobs = build_knobs(raw.get("knobs", {}))
    duration = _s(raw["duration_s"])
    t_c = ms(raw.get("t_c_ms", 0))
    t_a = ms(raw["t_a_ms"])
    window = _s(raw.get("window_s", 1))
    t_p = ms(raw["t_p_ms"]) if "t_p_ms" in raw else t_c + t_a
    workload = arrivals(config, stream(scenario.seed, "workload"), until=duration)
    log, _ = run_simulation(config, knobs, duration, workload=workload)
    reads = [r for r in log if r.kind is Kind.READ]
    index = WriteIndex.from_log(log)
    delay = config.delay_model
    alpha_at = _alpha_function(delay, config.n_servers, config.replication_factor, t_p, scenario.seed)

    timeline = ["window,start_us,n_reads,p_ic,p_ua"]
    scatter = ["segment,window,p_ua,p_ic"]
    by_window: dict[int, list] = {}
    for r in reads:
        by_window.setdefault(r.start // window, []).append(r)
    for w in sorted(by_window):
        rep = compute_metrics((), t_c, t_a, reads=by_window[w], index=index)
        timeline.append(f"{w},{w * window},{rep.n_reads},{rep.p_ic:.6f},{rep.p_ua:.6f}")
        scatter.append(f"{delay.segment(w * window)},{w},{rep.p_ua:.6f},{rep.p_ic:.6f}")
    envelope = ["segment,alpha,t_p_us,p_ua,p_ic_opt"]
    for seg, t0 in enumerate(_segment_starts(delay)):
        alpha = alpha_at(t0)
        for x, y in EnvelopePoint(alpha, t_p).polyline():
            envelope.append(f"{seg},{alpha:.6f},{t_p},{x:.6f},{y:.6f}")
    overall = compute_metrics((), t_c, t_a, reads=reads, index=index)
    summary = ["read_delay_us,repair_rate,n_reads,p_ic,p_ua,alpha"]
    summary.append(f"{knobs.read_delay},{knobs.repair_rate:.4f},{overall.n_reads},{overall.p_ic:.6f},"
                   f"{overall.p_ua:.6f},{alpha_at(0):.6f}")
    files = {"timeline.csv": timeline, "scatter.csv": scatter, "envelope.csv": envelope, "summary.csv": summary}
    if raw.get("t_values_ms"):
        fresh = ["t_us,p_stale_freshness,p_stale_visibility"]
        for t_ms in raw["t_values_ms"]:
            t = ms(t_ms)
            p_fresh = compute_metrics((), t, t_a, reads=reads, index=index).p_ic
            fresh.append(f"{t},{p_fresh:.6f},{compute_t_visibility(log, t):.6f}")
        files["freshness.csv"] = fresh
    return Outputs(files)


# ---------------------------------------------------------------- geo


def geo_segments(wan: WanModel, iterations: int) -> list[tuple[int, int]]:
    starts = [it for it, _, _ in wan.schedule if it < iterations]
    return [(s, starts[i + 1] if i + 1 < len(starts) else iterations) for i, s in enumerate(starts)]


def geo_metric(sla, row: GeoRow) -> float:
    return row.p_ic if isinstance(sla, ConsistencySla) else row.p_ua


def run_geo_scenario(scenario: Scenario, progress=None) -> Outputs:
    setup = build_geo(scenario)
    rows = run_geo(setup.sla, setup.dcs, setup.wan, setup.iterations, setup.settings, seed=scenario.seed)
    sla = setup.sla
    timeline = [GEO_HEADER] + [r.csv_row() for r in rows]
    scatter = ["segment,iter,p_ua,p_ic"]
    envelope = ["segment,alpha,t_p_us,p_ua,p_ic_opt"]
    summary = ["segment,start_iter,n_iterations,convergence_iter,satisfaction,steady_delta_mean_us,"
               "steady_delta_amplitude_us,alpha_wan"]
    for seg, (a, b) in enumerate(geo_segments(setup.wan, setup.iterations)):
        seg_rows = rows[a:b]
        values = [geo_metric(sla, r) for r in seg_rows]
        idx = convergence_index(values, sla)
        post = seg_rows[idx:] if idx is not None else []
        sat = sum(1 for r in post if geo_metric(sla, r) <= sla.bound) / len(post) if post else None
        # steady state: the last third of the segment, whatever the controller
        tail = seg_rows[len(seg_rows) - len(seg_rows) // 3:] if len(seg_rows) >= 3 else seg_rows
        deltas = [r.delta for r in tail]
        alpha = setup.wan.alpha(a, seed=scenario.seed)
        for r in (post or tail):
            scatter.append(f"{seg},{r.iter},{r.p_ua:.6f},{r.p_ic:.6f}")
        for x, y in EnvelopePoint(alpha, setup.wan.t_p).polyline():
            envelope.append(f"{seg},{alpha:.6f},{setup.wan.t_p},{x:.6f},{y:.6f}")
        summary.append(f"{seg},{a},{len(seg_rows)},{_opt(idx)},{_f(sat)},{sum(deltas) / len(deltas):.1f},"
                       f"{max(deltas) - min(deltas)},{alpha:.6f}")
    return Outputs({"timeline.csv": timeline, "scatter.csv": scatter, "envelope.csv": envelope,
                    "summary.csv": summary})


# ---------------------------------------------------------------- driver

_RUNNERS = {"single_dc": run_single_dc, "fixed": run_fixed, "geo": run_geo_scenario}


def run_one(scenario: Scenario, progress=None) -> Outputs:
    try:
        return _RUNNERS[scenario.mode](scenario, progress)
    except (KeyError, TypeError, ValueError, NoReads) as exc:
        raise ConfigError(f"scenario {scenario.name!r}: {type(exc).__name__}: {exc}") from exc


def run(scenario: Scenario, out_dir: str | Path, progress=None) -> dict[str, Outputs]:
    """Run every variant; write its CSVs under ``out_dir`` (or ``out_dir/<label>``).

    With variants, ``out_dir/summary.csv`` concatenates the per-variant
    summaries with a leading ``variant`` column.
    """
    out_dir = Path(out_dir)
    parts = variants(scenario)
    results: dict[str, Outputs] = {}
    if parts == [scenario]:
        outputs = run_one(scenario, progress)
        outputs.write(out_dir)
        results[""] = outputs
        return results
    combined: list[str] = []
    for part in parts:
        label = part.raw["label"]
        outputs = run_one(part, progress)
        outputs.write(out_dir / label)
        results[label] = outputs
        header, *body = outputs.files["summary.csv"]
        if not combined:
            combined.append("variant," + header)
        elif combined[0] != "variant," + header:
            raise ConfigError("variants produce summaries with different columns")
        combined.extend(f"{label},{line}" for line in body)
    Outputs({"summary.csv": combined}).write(out_dir)
    results[""] = Outputs({"summary.csv": combined})
    return results
