"""Acceptance criteria, one test per criterion.

Each test prints a single ``CRITERION <n> PASS|FAIL: ...`` line (also
collected into the pytest terminal summary) and then asserts.  Bundled
scenarios are run once per session and shared between criteria; the
determinism criterion runs every one of them a second time.
"""

import csv
import random
import time

import numpy as np
import pytest

from kvsla import scenario as sc
from kvsla.envelope import compute_alpha
from kvsla.geo import Rule, compose
from kvsla.metrics import compute_metrics, freshness_verdicts
from kvsla.model import Constant, DelayModel, Kind, KnobState, Lognormal, SharpJump, lognormal_params, ms
from kvsla.simstore import ClusterConfig, probe_pairs, run_simulation
from oracles import literal_fresh, random_log


def verdict(lines, number, ok, detail):
    line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    lines.append(line)
    assert ok, line


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="session")
def scenario_runs(tmp_path_factory):
    """Run a bundled scenario on first use; returns (output dir, wall seconds)."""
    root = tmp_path_factory.mktemp("runs")
    cache = {}

    def get(name):
        if name not in cache:
            out = root / name
            started = time.perf_counter()
            sc.run(sc.load(sc.resolve(name)), out)
            cache[name] = (out, time.perf_counter() - started)
        return cache[name]

    return get


# ---------------------------------------------------------------- 1


def test_criterion_01_metric_oracle_equivalence(verdict_lines):
    rng = random.Random(2024)
    logs = []
    for _ in range(1000):
        n = rng.randint(1, 200)
        logs.append((random_log(rng, n, n_keys=rng.randint(1, 5), horizon=2000, max_span=200),
                     rng.randint(0, 500)))
    started = time.perf_counter()
    fast = [freshness_verdicts(log, t_c) for log, t_c in logs]
    fast_time = time.perf_counter() - started
    mismatches = reads = 0
    for (log, t_c), verdicts in zip(logs, fast):
        for r in log:
            if r.kind is Kind.READ:
                reads += 1
                mismatches += verdicts[r.op_id] != literal_fresh(r, t_c, log)
    total = time.perf_counter() - started
    verdict(verdict_lines, 1, mismatches == 0 and total < 10.0,
            f"{mismatches} verdict mismatches over {reads} reads in 1000 logs; "
            f"fast path {fast_time:.2f}s, with oracle {total:.2f}s (limit 10s)")


# ---------------------------------------------------------------- 2


def test_criterion_02_metric_performance(verdict_lines):
    cfg = ClusterConfig(DelayModel(Lognormal(((0, ms(3), ms(0.3)),))), n_keys=1000, rng_seed=7)
    log, _ = run_simulation(cfg, KnobState(), ms(10_300))
    log = log[:10_000]
    started = time.perf_counter()
    rep = compute_metrics(log, ms(5), ms(25))
    elapsed = time.perf_counter() - started
    verdict(verdict_lines, 2, len(log) == 10_000 and elapsed <= 2.0,
            f"{len(log)}-op log scored in {elapsed:.3f}s (limit 2s); p_ic={rep.p_ic:.4f} p_ua={rep.p_ua:.4f}")


# ---------------------------------------------------------------- 3

SLOW = {s: ms(26) for s in range(5)}
PARTITIONS = [
    ("sharp jump 5x26ms, t_c=0 t_a=150", DelayModel(SharpJump(((0, SLOW),), ms(10))), 0, ms(150)),
    ("sharp jump 5x26ms, t_c=20 t_a=100", DelayModel(SharpJump(((0, SLOW),), ms(10))), ms(20), ms(100)),
    ("lognormal 20/2ms, t_c=0 t_a=150", DelayModel(Lognormal(((0, ms(20), ms(2)),))), 0, ms(150)),
    ("constant 18ms, t_c=10 t_a=120", DelayModel(Constant(ms(18))), ms(10), ms(120)),
]


def test_criterion_03_impossibility_bound(verdict_lines):
    runs = violations = 0
    worst_margin = 1.0
    details = []
    for label, model, t_c, t_a in PARTITIONS:
        t_p = t_c + t_a + 1  # precondition t_c + t_a < t_p
        alpha = compute_alpha(model, 9, t_p)
        lowest = 1.0
        for seed in range(50):
            for read_delay in (0, ms(10)):
                cfg = ClusterConfig(model, n_keys=1000, throughput_ops_per_s=0, rng_seed=seed)
                ops = probe_pairs(cfg, 200, t_c, t_c + t_a + ms(50), seed=seed)
                log, _ = run_simulation(cfg, KnobState(read_delay=read_delay), ops[-1].time + 1, workload=ops)
                rep = compute_metrics(log, t_c, t_a)
                total = rep.p_ic + rep.p_ua
                runs += 1
                violations += total < alpha - 0.02
                lowest = min(lowest, total)
                worst_margin = min(worst_margin, total - alpha)
        details.append(f"{label}: alpha={alpha:.3f} min sum={lowest:.3f}")
    verdict(verdict_lines, 3, violations == 0 and runs >= 50,
            f"{violations}/{runs} runs with p_ic+p_ua < alpha-0.02 (worst margin {worst_margin:+.3f}); "
            + "; ".join(details))


# ---------------------------------------------------------------- 4


def test_criterion_04_knob_effectiveness(scenario_runs, verdict_lines):
    out, wall = scenario_runs("knob-microbenchmark")
    rows = {r["variant"]: r for r in read_csv(out / "summary.csv")}
    base, delayed, repaired = rows["baseline"], rows["read_delay_15ms"], rows["repair_rate_1"]
    p0 = float(base["p_ic"])
    delay_drop = 1 - float(delayed["p_ic"]) / p0
    repair_change = abs(float(repaired["p_ic"]) - p0) / p0
    ua_change = abs(float(repaired["p_ua"]) - float(base["p_ua"]))
    per_run = wall / len(rows)
    ok = delay_drop > 0.5 and 0.05 <= repair_change <= 0.25 and ua_change <= 0.01 and per_run < 60
    verdict(verdict_lines, 4, ok,
            f"read delay +15ms lowers p_ic by {delay_drop:.1%} (need >50%); repair 0.1->1.0 changes p_ic by "
            f"{repair_change:.1%} (need 15%+-10pp) and p_ua by {ua_change:.4f} (need <=0.01); {per_run:.1f}s per run")


# ---------------------------------------------------------------- 5


def test_criterion_05_latency_sla_sharp_jump(scenario_runs, verdict_lines):
    out, _ = scenario_runs("cass-latency-jump")
    before, after = read_csv(out / "summary.csv")
    conv = after["convergence_time_us"]
    delay_s = (int(conv) - int(after["change_time_us"])) / 1e6 if conv else float("inf")
    sat = float(after["satisfaction"] or 0)
    a0, a1 = float(before["alpha"]), float(after["alpha"])
    ok = delay_s <= 400 and sat >= 0.95 and a0 <= 0.02 and abs(a1 - 0.42) <= 0.1
    verdict(verdict_lines, 5, ok,
            f"re-converged {delay_s:.1f}s after the jump (limit 400s), satisfaction {sat:.3f} (need >=0.95), "
            f"alpha {a0:.4f} -> {a1:.4f} (need ~0 -> ~0.42)")


# ---------------------------------------------------------------- 6


def test_criterion_06_consistency_sla_lognormal(scenario_runs, verdict_lines):
    out, _ = scenario_runs("cass-consistency-lognormal")
    segments = read_csv(out / "summary.csv")
    parts, ok = [], len(segments) == 3
    for s in segments:
        sat = float(s["satisfaction"]) if s["satisfaction"] else None
        ok = ok and s["convergence_iter"] != "" and sat is not None and sat >= 0.95
        parts.append(f"segment {s['segment']}: converged at iter {s['convergence_iter'] or 'never'}, "
                     f"satisfaction {sat if sat is None else round(sat, 3)}")
    verdict(verdict_lines, 6, ok, "; ".join(parts) + " (need all converged, >=0.95)")


# ---------------------------------------------------------------- 7


def test_criterion_07_composition_bounds(verdict_lines):
    rng = np.random.default_rng(77)
    n = 100_000
    worst_sandwich = worst_exact = 0.0
    started = time.perf_counter()
    for _ in range(1000):
        k = int(rng.integers(1, 6))
        means = rng.uniform(5, 40, k)
        stds = means * rng.uniform(0.05, 0.8, k)
        samples = np.stack([rng.lognormal(*lognormal_params(m, s), n) for m, s in zip(means, stds)])
        fastest, slowest = samples.min(axis=0), samples.max(axis=0)
        ts = rng.uniform(0.5, 1.5, k) * means
        per_dc = [float(np.mean(x > t)) for x, t in zip(samples, ts)]
        for rule, joint in ((Rule.QUICKEST, fastest), (Rule.ALL, slowest)):
            value = compose(per_dc, rule)
            hi = float(np.mean(joint > ts.min()))
            lo = float(np.mean(joint > ts.max()))
            worst_sandwich = max(worst_sandwich, value - hi, lo - value)
            t = float(ts[0])  # identical deadlines: closed form vs joint Monte-Carlo
            closed = compose([float(np.mean(x > t)) for x in samples], rule)
            worst_exact = max(worst_exact, abs(closed - float(np.mean(joint > t))))
    elapsed = time.perf_counter() - started
    verdict(verdict_lines, 7, worst_sandwich <= 0.01 and worst_exact <= 0.01,
            f"1000 model sets x 2 rules at 1e5 samples: worst sandwich excess {worst_sandwich:.4f}, "
            f"worst identical-t deviation {worst_exact:.4f} (limit 0.01); {elapsed:.1f}s")


# ---------------------------------------------------------------- 8


def test_criterion_08_geo_pid_convergence(scenario_runs, verdict_lines):
    lat_out, lat_wall = scenario_runs("geo-latency-all")
    cons_out, cons_wall = scenario_runs("geo-consistency-all")
    lat = read_csv(lat_out / "summary.csv")
    cons = read_csv(cons_out / "summary.csv")

    def conv(row):
        return int(row["convergence_iter"]) if row["convergence_iter"] else None

    lat_ok = all(conv(r) is not None and conv(r) <= 10 for r in lat)
    cons_ok = all(conv(r) is not None and conv(r) <= 35 for r in cons)
    ok = lat_ok and cons_ok and len(lat) == 2 and max(lat_wall, cons_wall) < 30
    verdict(verdict_lines, 8, ok,
            f"latency SLA converged at {[conv(r) for r in lat]} iterations before/after the WAN jump (limit 10); "
            f"consistency SLA at {[conv(r) for r in cons]} (limit 35); 300-iteration runs took "
            f"{lat_wall:.1f}s / {cons_wall:.1f}s (limit 30s)")


# ---------------------------------------------------------------- 9


def test_criterion_09_pid_vs_multiplicative(scenario_runs, verdict_lines):
    out, _ = scenario_runs("geo-pid-vs-multiplicative")
    rows = read_csv(out / "summary.csv")
    setup = sc.build_geo(sc.variants(sc.load(sc.resolve("geo-pid-vs-multiplicative")))[1])
    unit = setup.settings.step_unit
    amp = {(r["variant"], r["segment"]): int(r["steady_delta_amplitude_us"]) for r in rows}
    segments = sorted({seg for _, seg in amp})
    ok = bool(segments) and all(
        amp[("pid", s)] < amp[("multiplicative", s)] and amp[("multiplicative", s)] >= unit for s in segments)
    parts = [f"segment {s}: PID {amp[('pid', s)]}us vs multiplicative {amp[('multiplicative', s)]}us"
             for s in segments]
    verdict(verdict_lines, 9, ok, "; ".join(parts) + f" (need PID < multiplicative, multiplicative >= {unit}us)")


# ---------------------------------------------------------------- 10


def test_criterion_10_determinism(scenario_runs, tmp_path, verdict_lines):
    names = [p.stem for p in sc.bundled()]
    differing, compared = [], 0
    for name in names:
        first, _ = scenario_runs(name)
        second = tmp_path / name
        sc.run(sc.load(sc.resolve(name)), second)
        files = sorted(p.relative_to(first) for p in first.rglob("*.csv"))
        again = sorted(p.relative_to(second) for p in second.rglob("*.csv"))
        if files != again:
            differing.append(f"{name} (file sets differ)")
            continue
        for rel in files:
            compared += 1
            if (first / rel).read_bytes() != (second / rel).read_bytes():
                differing.append(f"{name}/{rel}")
    verdict(verdict_lines, 10, not differing and compared > 0,
            f"{len(names)} scenarios re-run with the same seed: {compared} CSV files compared, "
            f"{len(differing)} differ" + (f" ({', '.join(differing)})" if differing else ""))
