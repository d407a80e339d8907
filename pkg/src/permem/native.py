"""Threaded execution of the simulator's programs, for throughput runs.

Every algorithm in this package is a generator yielding shared-memory
instructions; the model executes them one at a time under a scheduler.
This module executes the same generators on real threads instead: each
thread drives its own program against the machine's cells, taking a
stripe lock keyed by cell id around every load, store and CAS.  Relative
costs between queue builds carry over because each build still pays its
own instruction stream; absolute numbers are machine-relative.

There is no persistence hardware behind the cells, so ``flush`` and
``fence`` do nothing but bump counters.  The machine runs in private
cache mode regardless of the requested queue mode: the mode still
selects the build's flush discipline and wrapping, which is what the
counter comparisons measure.
"""

from __future__ import annotations

import threading
import time
from typing import Any

from .model import Machine, PRIVATE
from .queues import (
    BASELINE,
    BROKEN_FIXTURE,
    GENERAL,
    GENERAL_OPT,
    MODE_IZRAELEVITZ,
    MODE_MANUAL,
    MODES,
    NORMALIZED,
    NORMALIZED_OPT,
    VARIANTS,
    BaselineQueue,
    GeneralQueue,
    NormalizedQueue,
    izraelevitz_wrap,
)

_DEADLINE_MASK = 0x3F  # consult the clock every 64 instructions


def native_system(variant: str, mode: str, nthreads: int, per_pid: int,
                  reserve: int = 0):
    """A queue wired like the model's, over a private-cache machine."""
    if variant not in VARIANTS or variant == BROKEN_FIXTURE:
        raise ValueError(f"unknown bench variant {variant!r}")
    if mode not in MODES:
        raise ValueError(f"unknown bench mode {mode!r}")
    cas_fences = variant in (GENERAL_OPT, NORMALIZED_OPT)
    machine = Machine(nthreads, PRIVATE, cas_fences=cas_fences)
    durable = mode == MODE_MANUAL
    if variant == BASELINE:
        queue = BaselineQueue(machine, nthreads, per_pid, reserve=reserve)
    elif variant in (GENERAL, GENERAL_OPT):
        queue = GeneralQueue(machine, nthreads, per_pid, reserve=reserve,
                             durable=durable, opt=variant == GENERAL_OPT)
    else:
        queue = NormalizedQueue(machine, nthreads, per_pid, reserve=reserve,
                                durable=durable, opt=variant == NORMALIZED_OPT)
    wrap = izraelevitz_wrap if mode == MODE_IZRAELEVITZ else None
    return machine, queue, wrap


class ThreadCounts:
    """Per-thread tallies; one instance per thread, summed afterwards."""

    __slots__ = ("ops", "steps", "flushes", "fences", "boundaries",
                 "exhausted", "elapsed", "responses")

    def __init__(self) -> None:
        self.ops = 0
        self.steps = 0
        self.flushes = 0
        self.fences = 0
        self.boundaries = 0
        self.exhausted = False
        self.elapsed = 0.0
        self.responses: list[tuple[str, Any]] = []


class NativeDriver:
    """Runs one program per thread until a wall-clock deadline."""

    def __init__(self, machine: Machine, nstripes: int = 64) -> None:
        self.machine = machine
        self.locks = [threading.Lock() for _ in range(nstripes)]
        self.nstripes = nstripes

    def _drive(self, gen, deadline: float, counts: ThreadCounts,
               keep_responses: bool) -> None:
        cells = self.machine.cells
        locks = self.locks
        nstripes = self.nstripes
        send = None
        ticks = 0
        start = time.monotonic()
        while True:
            try:
                instr = gen.send(send)
            except StopIteration:
                counts.exhausted = True
                counts.elapsed = time.monotonic() - start
                return
            send = None
            kind = instr[0]
            if kind == "load":
                wid = instr[1]
                with locks[wid % nstripes]:
                    send = cells[wid]
                counts.steps += 1
            elif kind == "cas":
                wid = instr[1]
                with locks[wid % nstripes]:
                    if cells[wid] == instr[2]:
                        cells[wid] = instr[3]
                        send = True
                    else:
                        send = False
                counts.steps += 1
            elif kind == "store":
                wid = instr[1]
                with locks[wid % nstripes]:
                    cells[wid] = instr[2]
                counts.steps += 1
            elif kind == "flush":
                counts.flushes += 1
                counts.steps += 1
            elif kind == "fence":
                counts.fences += 1
                counts.steps += 1
            elif kind == "mark_respond":
                counts.ops += 1
                if keep_responses:
                    counts.responses.append((instr[1], instr[3]))
            elif kind == "note":
                if instr[1] == "boundary":
                    counts.boundaries += 1
            elif kind == "crashed":
                send = False
            ticks += 1
            if not ticks & _DEADLINE_MASK and time.monotonic() >= deadline:
                counts.elapsed = time.monotonic() - start
                return

    def run(self, factories: list, seconds: float,
            keep_responses: bool = False) -> list[ThreadCounts]:
        """Start one thread per factory; returns per-thread counts."""
        counts = [ThreadCounts() for _ in factories]
        deadline = time.monotonic() + seconds
        threads = [
            threading.Thread(
                target=self._drive,
                args=(fac(pid), deadline, counts[pid], keep_responses),
                name=f"bench-{pid}",
            )
            for pid, fac in enumerate(factories)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return counts


def pair_plans(nthreads: int, per_pid: int, pairs: bool = True) -> list[list[tuple]]:
    """Enqueue-dequeue pair workload (or enqueue-only), one plan per thread."""
    plans = []
    deq = ("dequeue",)
    for pid in range(nthreads):
        plan: list[tuple] = []
        for k in range(per_pid):
            plan.append(("enqueue", pid * per_pid + k))
            if pairs:
                plan.append(deq)
        plans.append(plan)
    return plans


# Node pools never recycle, so a plan's enqueue count bounds its runtime.
# Budgets keep the pool's memory sane; a plan that still runs dry ends its
# thread early, which the per-thread clocks keep honest (and the report
# surfaces as plan_exhausted).
_RATE_GUESS = {BASELINE: 700_000}
_DEFAULT_RATE = 150_000
_NODE_BUDGET_PLAIN = 6_000_000
_NODE_BUDGET_RECOVERABLE = 1_500_000


def plan_budget(variant: str, seconds: float, pairs: bool,
                nthreads: int) -> int:
    """Enqueues per thread: sized for the duration, capped by memory."""
    rate = _RATE_GUESS.get(variant, _DEFAULT_RATE)
    per_iter = 2 if pairs else 1
    want = int(rate * seconds * 1.5 / per_iter) + 1024
    budget = (_NODE_BUDGET_PLAIN if variant == BASELINE
              else _NODE_BUDGET_RECOVERABLE)
    return min(want, max(1024, budget // max(nthreads, 1)))


def run_native_once(variant: str, mode: str, nthreads: int, seconds: float,
                    pairs: bool = True, prefill: int = 0,
                    per_pid: int | None = None,
                    keep_responses: bool = False):
    """One timed run; returns (per-thread counts, effective seconds)."""
    if per_pid is None:
        per_pid = plan_budget(variant, seconds, pairs, nthreads)
    machine, queue, wrap = native_system(variant, mode, nthreads, per_pid,
                                         reserve=prefill)
    if prefill:
        queue.host_prefill(range(-prefill, 0))
    plans = pair_plans(nthreads, per_pid, pairs)
    factories = queue.workers(plans)
    if wrap is not None:
        factories = [wrap(f) for f in factories]
    driver = NativeDriver(machine)
    counts = driver.run(factories, seconds, keep_responses=keep_responses)
    elapsed = max((c.elapsed for c in counts), default=0.0)
    return counts, max(elapsed, 1e-9)
