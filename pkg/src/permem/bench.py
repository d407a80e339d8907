"""Throughput and recovery-delay measurement over the queue builds.

Two engines share one report shape.  The native engine drives real
threads through :mod:`permem.native`; absolute rates are machine-bound,
so claims should compare rows, not quote numbers.  The model engine runs
the single-stepping scheduler instead: far slower, but its counters are
exact and crash injection works, which is what the recovery-delay tables
use.
"""

from __future__ import annotations

import csv
import random
import statistics
import time
from dataclasses import dataclass

from .model import Schedule, run_seeded
from .native import run_native_once
from .queues import (
    BASELINE,
    BROKEN_FIXTURE,
    MODE_PRIVATE,
    MODES,
    VARIANTS,
    make_system,
)

NATIVE_PREFILL = 1_000_000
MODEL_PREFILL = 10_000

ENGINES = ("native", "model")

# Model-engine workload sizing: target op count per thread for a one
# second request, scaled linearly with the requested duration.
_MODEL_OPS_PER_SECOND = 600


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark cell; every field lands in the CSV row."""

    variant: str = BASELINE
    mode: str = MODE_PRIVATE
    threads: int = 2
    duration_seconds: float = 2.0
    pairs: bool = True
    prefill: int | None = None
    seed: int = 0
    repeats: int = 10
    engine: str = "native"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS or self.variant == BROKEN_FIXTURE:
            raise ValueError(f"not a benchmarkable variant: {self.variant!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 1 <= self.threads <= 8:
            raise ValueError("threads must be between 1 and 8")
        if self.duration_seconds <= 0:
            raise ValueError("duration must be positive")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.prefill is not None and self.prefill < 0:
            raise ValueError("prefill cannot be negative")

    @property
    def resolved_prefill(self) -> int:
        if self.prefill is not None:
            return self.prefill
        return NATIVE_PREFILL if self.engine == "native" else MODEL_PREFILL


@dataclass
class BenchReport:
    """Aggregates over a config's repeats, counters summed."""

    config: BenchConfig
    rates: tuple[float, ...]
    ops_total: int
    steps: int
    flushes: int
    fences: int
    boundaries: int
    recovery_samples: tuple[int, ...] = ()
    plan_exhausted: bool = False

    @property
    def ops_per_sec_mean(self) -> float:
        return statistics.fmean(self.rates)

    @property
    def ops_per_sec_std(self) -> float:
        if len(self.rates) < 2:
            return 0.0
        return statistics.stdev(self.rates)


def _bench_native(config: BenchConfig) -> BenchReport:
    rates = []
    ops_total = steps = flushes = fences = boundaries = 0
    exhausted = False
    for _ in range(config.repeats):
        counts, elapsed = run_native_once(
            config.variant, config.mode, config.threads,
            config.duration_seconds, pairs=config.pairs,
            prefill=config.resolved_prefill)
        ops = sum(c.ops for c in counts)
        rates.append(ops / elapsed)
        ops_total += ops
        steps += sum(c.steps for c in counts)
        flushes += sum(c.flushes for c in counts)
        fences += sum(c.fences for c in counts)
        boundaries += sum(c.boundaries for c in counts)
        exhausted = exhausted or any(c.exhausted for c in counts)
    return BenchReport(config, tuple(rates), ops_total, steps, flushes,
                       fences, boundaries, plan_exhausted=exhausted)


def _model_plans(nthreads: int, per_thread_ops: int, pairs: bool):
    plans = []
    for pid in range(nthreads):
        plan: list[tuple] = []
        for k in range(per_thread_ops if not pairs else per_thread_ops // 2):
            plan.append(("enqueue", pid * per_thread_ops + k))
            if pairs:
                plan.append(("dequeue",))
        plans.append(plan or [("dequeue",)])
    return plans


def _bench_model(config: BenchConfig) -> BenchReport:
    per_thread_ops = max(4, int(config.duration_seconds * _MODEL_OPS_PER_SECOND))
    plans = _model_plans(config.threads, per_thread_ops, config.pairs)
    enqueues = max(sum(1 for st in p if st[0] == "enqueue") for p in plans)
    rates = []
    ops_total = steps = flushes = fences = boundaries = 0
    samples: list[int] = []
    for r in range(config.repeats):
        machine, queue, wrap = make_system(
            config.variant, config.mode, config.threads, enqueues + 1,
            reserve=config.resolved_prefill)
        if config.resolved_prefill:
            queue.host_prefill(range(-config.resolved_prefill, 0))
        factories = [wrap(f) for f in queue.workers(plans)]
        sched = Schedule(seed=config.seed + r, step_bound=50_000_000,
                         track_contention=False)
        t0 = time.monotonic()
        res = run_seeded(machine, factories, sched, record=False)
        elapsed = max(time.monotonic() - t0, 1e-9)
        if res.truncated:
            raise RuntimeError("model bench run hit the step bound")
        c = res.counters
        ops = sum(len(p) for p in plans)
        rates.append(ops / elapsed)
        ops_total += ops
        steps += c.total_steps()
        flushes += sum(c.flushes)
        fences += sum(c.fences)
        boundaries += sum(c.boundaries)
        for per_pid in c.recovery_samples:
            samples.extend(per_pid)
    return BenchReport(config, tuple(rates), ops_total, steps, flushes,
                       fences, boundaries, recovery_samples=tuple(samples))


def run_bench(config: BenchConfig) -> BenchReport:
    if config.engine == "native":
        return _bench_native(config)
    return _bench_model(config)


# -- CSV ------------------------------------------------------------------

# Stable column order; append-only by convention.
CSV_COLUMNS = (
    "variant", "mode", "engine", "threads", "repeats", "seconds",
    "prefill", "pairs", "seed", "ops_per_sec_mean", "ops_per_sec_std",
    "ops_total", "steps", "flushes", "fences", "boundaries",
    "plan_exhausted",
)


def report_row(report: BenchReport) -> dict:
    cfg = report.config
    return {
        "variant": cfg.variant,
        "mode": cfg.mode,
        "engine": cfg.engine,
        "threads": cfg.threads,
        "repeats": cfg.repeats,
        "seconds": cfg.duration_seconds,
        "prefill": cfg.resolved_prefill,
        "pairs": int(cfg.pairs),
        "seed": cfg.seed,
        "ops_per_sec_mean": round(report.ops_per_sec_mean, 2),
        "ops_per_sec_std": round(report.ops_per_sec_std, 2),
        "ops_total": report.ops_total,
        "steps": report.steps,
        "flushes": report.flushes,
        "fences": report.fences,
        "boundaries": report.boundaries,
        "plan_exhausted": int(report.plan_exhausted),
    }


def write_csv(reports: list[BenchReport], fp) -> None:
    writer = csv.DictWriter(fp, fieldnames=CSV_COLUMNS)
    writer.writeheader()
    for report in reports:
        writer.writerow(report_row(report))


# -- recovery delay ---------------------------------------------------------

def _delay_system(variant: str, mode: str, nops: int):
    pairs = nops // 2
    machine, queue, wrap = make_system(variant, mode, 1, pairs + 1)
    plan: list[tuple] = []
    for k in range(pairs):
        plan.append(("enqueue", k))
        plan.append(("dequeue",))
    return machine, [wrap(f) for f in queue.workers([plan])]


def recovery_delay_samples(variant: str, nops: int, samples: int,
                           seed: int = 0,
                           mode: str = MODE_PRIVATE) -> dict:
    """Crash a sequential run at uniform points; report redo step counts.

    A calibration run measures the crash-free step total, then each
    sample reruns the same program with one crash placed uniformly over
    that range.  Sample 0 always crashes at step 0, before any work, so
    the suite's minimum (a crash on a capsule boundary) is in every
    table.  The baseline build restarts from scratch and would replay
    its whole plan, so it is rejected.
    """
    if variant == BASELINE:
        raise ValueError("the baseline build has no recovery path")
    machine, facs = _delay_system(variant, mode, nops)
    calib = run_seeded(machine, facs, Schedule(
        seed=seed, step_bound=50_000_000, track_contention=False),
        record=False)
    if calib.truncated:
        raise RuntimeError("calibration run hit the step bound")
    total = calib.counters.total_steps()
    rng = random.Random(seed)
    out: list[int] = []
    crash_victim: object = 0 if mode == MODE_PRIVATE else "all"
    for k in range(samples):
        at = 0 if k == 0 else rng.randrange(1, total)
        machine, facs = _delay_system(variant, mode, nops)
        res = run_seeded(machine, facs, Schedule(
            seed=seed + k + 1, crash_budget=1, crash_at={at: crash_victim},
            step_bound=50_000_000, track_contention=False), record=False)
        if res.truncated:
            raise RuntimeError("sample run hit the step bound")
        got = res.counters.recovery_samples[0]
        if len(got) != 1:
            raise RuntimeError(
                f"expected one recovery sample, got {got!r} (crash at {at})")
        out.append(got[0])
    return {
        "variant": variant,
        "mode": mode,
        "ops": nops,
        "crash_free_steps": total,
        "samples": out,
        "min": min(out),
        "max": max(out),
        "mean": statistics.fmean(out),
    }


def recovery_delay_table(variant: str, lengths: list[int],
                         samples: int = 12, seed: int = 0,
                         mode: str = MODE_PRIVATE) -> list[dict]:
    """One row per history length, same crash protocol throughout."""
    return [recovery_delay_samples(variant, n, samples, seed=seed, mode=mode)
            for n in lengths]
