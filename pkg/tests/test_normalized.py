"""Normalized operations: executor semantics, checkpoint accounting,
recovery verdicts."""

from __future__ import annotations

import pytest

from permem import (
    Machine,
    NormalizedStruct,
    RESTART,
    Schedule,
    SequentialDriver,
    Triple,
    explore,
    normalized_workers,
    run_seeded,
)
from permem.checker import check_history, project, seq_last
from permem.normalized import cas_executor
from permem.rcas import RCas, seq_discipline_violations


class FaaSpec:
    """Fetch-and-add-one over a single cell; the response is the old value."""

    def initial(self):
        return 0

    def apply(self, state, op):
        assert op.op == "faa"
        return state + 1, state


def counter_struct(machine, nprocs, label="counter"):
    """Fetch-and-add built as a normalized retry loop over one cell."""
    obj = RCas(machine, nprocs, init=0, label=f"{label}-cell")

    def generate(pid, op, args):
        t = yield ("load", obj.x)
        return ((0, t.value, t.value + 1),)

    def wrapup(pid, op, args, plan, idx):
        if False:
            yield
        if idx == len(plan):
            return plan[0][1]
        return RESTART

    return NormalizedStruct(label, (obj,), generate, wrapup), obj


def faa_plan(n):
    return [("faa", ())] * n


def iteration_notes(history):
    return [ev for ev in history if ev.kind == "note" and ev.op == "iteration"]


def responses(history, op="faa"):
    """Completed responses after projection, which reconciles crash-cut
    operations with their recovery verdicts."""
    pv, projected = project(history)
    assert pv.ok, pv.reason
    return [ev.ret for ev in projected if ev.kind == "respond" and ev.op == op]


# ---------------------------------------------------------------------------
# executor semantics


def test_executor_stops_at_first_failure():
    mach = Machine(1)
    a = RCas(mach, 1, init="a0")
    b = RCas(mach, 1, init="WRONG")
    c = RCas(mach, 1, init="c0")
    drv = SequentialDriver(mach)
    entries = [(a, "a0", "a1"), (b, "b0", "b1"), (c, "c0", "c1")]
    idx = drv.run(0, cas_executor(0, entries, 1, False))
    assert idx == 1
    assert mach.peek(a.x).value == "a1"
    assert mach.peek(b.x).value == "WRONG"
    assert mach.peek(c.x).value == "c0"  # never attempted


def test_executor_skips_entries_that_already_landed():
    mach = Machine(1)
    a = RCas(mach, 1, init="a0")
    b = RCas(mach, 1, init="b0")
    drv = SequentialDriver(mach)
    entries = [(a, "a0", "a1"), (b, "b0", "b1")]
    # first attempt interrupted right after entry 0 landed
    drv.run(0, a.cas(0, "a0", "a1", 5))
    idx = drv.run(0, cas_executor(0, entries, 5, True))
    assert idx == 2
    assert mach.peek(a.x).value == "a1"  # not re-executed: expected is stale
    assert mach.peek(b.x).value == "b1"


def test_executor_rejects_duplicate_objects():
    mach = Machine(1)
    a = RCas(mach, 1, init=0)
    drv = SequentialDriver(mach)
    with pytest.raises(ValueError, match="same object twice"):
        drv.run(0, cas_executor(0, [(a, 0, 1), (a, 1, 2)], 1, False))


# ---------------------------------------------------------------------------
# checkpoint accounting


def test_sequential_counter_one_boundary_per_iteration():
    mach = Machine(1)
    struct, obj = counter_struct(mach, 1)
    res = run_seeded(mach, normalized_workers(mach, struct, [faa_plan(10)]),
                     Schedule(seed=0))
    assert responses(res.history) == list(range(10))
    assert mach.peek(obj.x).value == 10
    iters = len(iteration_notes(res.history))
    assert iters == 10
    # one boundary per iteration plus the one opening checkpoint
    assert res.counters.boundaries[0] == iters + 1
    v = check_history(res.history, FaaSpec(), seq_of=seq_last)
    assert v.ok, v.reason


def test_contention_restarts_keep_the_accounting():
    restarts_seen = 0
    for seed in range(60):
        mach = Machine(2)
        struct, obj = counter_struct(mach, 2)
        plans = [faa_plan(4), faa_plan(4)]
        res = run_seeded(mach, normalized_workers(mach, struct, plans),
                         Schedule(seed=seed))
        assert sorted(responses(res.history)) == list(range(8))
        assert mach.peek(obj.x).value == 8
        iters = sum(1 for ev in iteration_notes(res.history))
        per_pid = [0, 0]
        for ev in iteration_notes(res.history):
            per_pid[ev.pid] += 1
        restarts_seen += iters - 8
        assert res.counters.boundaries[0] == per_pid[0] + 1
        assert res.counters.boundaries[1] == per_pid[1] + 1
        v = check_history(res.history, FaaSpec(), seq_of=seq_last)
        assert v.ok, v.reason
    assert restarts_seen > 0


# ---------------------------------------------------------------------------
# crash recovery


def test_every_single_crash_point_keeps_the_counter_exact():
    # one process, two operations: with a single process the schedule is
    # deterministic, so sweeping the forced-crash step covers every
    # crash placement once
    for k in range(1, 40):
        mach = Machine(1)
        struct, obj = counter_struct(mach, 1)
        sched = Schedule(seed=0, crash_budget=1, crash_at={k: 0})
        res = run_seeded(mach, normalized_workers(mach, struct, [faa_plan(2)]),
                         sched)
        assert mach.peek(obj.x).value == 2, f"crash at step {k}"
        v = check_history(res.history, FaaSpec(), seq_of=seq_last)
        assert v.ok, f"crash at step {k}: {v.reason}"
        assert seq_discipline_violations(res.history, obj) == []


def test_seeded_crash_sweep_two_processes():
    crashed_runs = 0
    for seed in range(250):
        mach = Machine(2)
        struct, obj = counter_struct(mach, 2)
        plans = [faa_plan(3), faa_plan(3)]
        sched = Schedule(seed=seed, crash_budget=2, crash_rate=0.1)
        res = run_seeded(mach, normalized_workers(mach, struct, plans), sched)
        crashed_runs += res.counters.crashes > 0
        assert mach.peek(obj.x).value == 6
        assert sorted(responses(res.history)) == list(range(6))
        v = check_history(res.history, FaaSpec(), seq_of=seq_last)
        assert v.ok, f"seed {seed}: {v.reason}"
        assert seq_discipline_violations(res.history, obj) == []
    assert crashed_runs > 50


def test_exhaustive_crashes_with_interference():
    mach = Machine(2)
    struct, obj = counter_struct(mach, 2)
    worker = normalized_workers(mach, struct, [faa_plan(1), []])[0]

    def interferer(pid):
        # one raw step keeps the exhaustive space small; it can only
        # displace the initial value, never the worker's install, so it
        # skips the notify protocol without breaking anyone's recovery
        ok = yield ("cas", obj.x, Triple(0, 0, 0), Triple(100, pid, 1))
        return ok

    sched = Schedule(mode="exhaustive", crash_budget=1,
                     crash_victims=frozenset([0]))
    runs = with_crash = 0
    for res in explore(mach, [worker, interferer], sched):
        runs += 1
        with_crash += res.counters.crashes
        installs = [ev for ev in res.history
                    if ev.kind == "step" and ev.op == "cas" and ev.obj == obj.x
                    and ev.ret and ev.args[1].pid == 0]
        assert len(installs) == 1, "the operation's effect must land exactly once"
        got = responses(res.history)
        final = mach.peek(obj.x).value
        if res.returns[1]:  # interferer won the race, worker added on top
            assert final == 101 and got == [100]
        else:
            assert final in (1, 101) and got == [0]
    assert runs > 50 and with_crash > 5


# ---------------------------------------------------------------------------
# multi-entry plans


class LastWriteSpec:
    """A register written by ``set`` operations; reads are not modeled."""

    def initial(self):
        return None

    def apply(self, state, op):
        assert op.op == "set"
        return op.args[0], "ok"


def register_struct(machine, nprocs):
    """A register whose writes go through a version bump plus the write
    itself; the bump is invisible to the register's specification."""
    version = RCas(machine, nprocs, init=0, label="reg-version")
    cell = RCas(machine, nprocs, init=None, label="reg-cell")

    def generate(pid, op, args):
        tv = yield ("load", version.x)
        tc = yield ("load", cell.x)
        return ((0, tv.value, tv.value + 1), (1, tc.value, args[0]))

    def wrapup(pid, op, args, plan, idx):
        if False:
            yield
        return "ok" if idx == len(plan) else RESTART

    return NormalizedStruct("register", (version, cell), generate, wrapup), cell


def test_two_entry_plans_survive_crashes():
    for seed in range(150):
        mach = Machine(2)
        struct, cell = register_struct(mach, 2)
        plans = [[("set", (f"p0-{i}",)) for i in range(2)],
                 [("set", (f"p1-{i}",)) for i in range(2)]]
        sched = Schedule(seed=seed, crash_budget=2, crash_rate=0.1)
        res = run_seeded(mach, normalized_workers(mach, struct, plans), sched)
        final = mach.peek(cell.x).value
        assert final in {"p0-0", "p0-1", "p1-0", "p1-1"}
        v = check_history(res.history, LastWriteSpec(), seq_of=seq_last)
        assert v.ok, f"seed {seed}: {v.reason}"


def test_generate_must_name_known_and_distinct_objects():
    mach = Machine(1)
    obj = RCas(mach, 1, init=0)

    def bad_index(pid, op, args):
        if False:
            yield
        return ((3, 0, 1),)

    def duplicate(pid, op, args):
        if False:
            yield
        return ((0, 0, 1), (0, 1, 2))

    def wrapup(pid, op, args, plan, idx):
        if False:
            yield
        return "ok"

    for generate, msg in ((bad_index, "names object 3"),
                          (duplicate, "same object twice")):
        struct = NormalizedStruct("bad", (obj,), generate, wrapup)
        facs = normalized_workers(mach, struct, [[("op", ())]])
        with pytest.raises(ValueError, match=msg):
            run_seeded(mach, facs, Schedule(seed=0))
