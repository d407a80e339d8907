"""Writable CAS array: sequential semantics, races, recycling, invariants.

The exhaustive tests drive every interleaving of two short plans with a
probe that re-checks the ownership partition after every single step, and
each finished branch is validated against the atomic register-array
oracle plus the history validators (no plain stores, pointer entries
disjoint throughout, installs only into owned inactive slots).
"""

import random

import pytest

from permem import (
    Announcement,
    Machine,
    Schedule,
    SequentialDriver,
    WritableCasArray,
    array_store_steps,
    disjointness_violations,
    explore,
    install_violations,
    run_seeded,
)
from permem.history import Ev
from permem.checker import RegisterArraySpec, check_history
from permem.rcas import check_recovery


def fresh(nprocs, nobjs, init=0, **kw):
    m = Machine(nprocs)
    return m, WritableCasArray(m, nprocs=nprocs, nobjs=nobjs, init=init, **kw)


def run_steps(machine, gen, n, send=None):
    """Advance a generator by ``n`` shared steps.

    Returns ``("done", value)`` on completion, else ``("parked", send)``
    where ``send`` is the undelivered result of the last step; pass it
    back to :func:`finish` to resume.
    """
    done = 0
    while done < n:
        try:
            instr = gen.send(send)
        except StopIteration as stop:
            return "done", stop.value
        send = None
        kind = instr[0]
        if kind == "load":
            send = machine.cells[instr[1]]
            done += 1
        elif kind == "store":
            machine.do_store(instr[1], instr[2])
            done += 1
        elif kind == "cas":
            send = machine.do_cas(instr[1], instr[2], instr[3])
            done += 1
        elif kind in ("flush", "fence"):
            done += 1
        elif kind == "crashed":
            send = False
    return "parked", send


def finish(machine, gen, send=None):
    st, val = run_steps(machine, gen, 10 ** 9, send)
    assert st == "done"
    return val


def responses(history, op):
    return [ev.ret for ev in history if ev.kind == "respond" and ev.op == op]


def explore_branches(machine, arr, plans, spec):
    """Every interleaving, partition-probed per step, oracle-checked per
    branch.  Yields each run result."""
    def watch(run):
        bad = arr.partition_violations()
        assert not bad, bad

    for res in explore(machine, arr.workers(plans), Schedule(mode="exhaustive"),
                       probe=watch):
        v = check_history(res.history, spec)
        assert v.ok, (v.reason, v.witness)
        assert array_store_steps(res.history, arr) == []
        assert disjointness_violations(res.history, arr) == []
        assert install_violations(res.history, arr) == []
        yield res


# -- sequential semantics ---------------------------------------------------


def test_fresh_and_written_values_read_back():
    m, arr = fresh(2, 2, init=7)
    d = SequentialDriver(m)
    assert d.run(0, arr.read(0, 0)) == 7
    assert d.run(0, arr.write(0, 0, 11)) == "ok"
    assert d.run(0, arr.read(0, 0)) == 11
    assert d.run(1, arr.read(1, 1)) == 7
    assert arr.partition_violations() == []


def test_sequential_cas_semantics():
    m, arr = fresh(2, 1, init=7)
    d = SequentialDriver(m)
    assert d.run(0, arr.cas_obj(0, 0, 7, 9)) is True
    assert d.run(1, arr.read(1, 0)) == 9
    assert d.run(0, arr.write(0, 0, 3)) == "ok"
    assert d.run(1, arr.cas_obj(1, 0, 9, 5)) is False
    assert d.run(1, arr.cas_obj(1, 0, 3, 5)) is True
    assert d.run(0, arr.read(0, 0)) == 5


def test_out_of_range_object_faults():
    m, arr = fresh(2, 2)
    d = SequentialDriver(m)
    for gen in (arr.read(0, 2), arr.write(0, -1, 5), arr.cas_obj(0, 99, 0, 1)):
        with pytest.raises(IndexError):
            d.run(0, gen)


# -- exhaustive races -------------------------------------------------------


def test_read_racing_write_sees_old_or_new():
    m, arr = fresh(2, 1, init=0)
    seen = set()
    n = 0
    for res in explore_branches(m, arr, [[("write", 0, 5)], [("read", 0)]],
                                RegisterArraySpec(1, 0)):
        n += 1
        seen.add(responses(res.history, "read")[0])
    assert n == 3003  # C(14, 6): 8 writer steps against 6 reader steps
    assert seen == {0, 5}


def test_cas_racing_write_matches_some_sequential_order():
    m, arr = fresh(2, 1, init=0)
    verdicts = set()
    for res in explore_branches(m, arr, [[("write", 0, 5)], [("cas", 0, 0, 9)]],
                                RegisterArraySpec(1, 0)):
        verdicts.add(responses(res.history, "cas")[0])
    assert verdicts == {True, False}


def test_two_concurrent_writes_both_complete():
    m, arr = fresh(2, 1, init=0)
    finals = set()
    for res in explore_branches(m, arr, [[("write", 0, 5)], [("write", 0, 6)]],
                                RegisterArraySpec(1, 0)):
        assert responses(res.history, "write") == ["ok", "ok"]
        finals.add(m.cells[arr.bbase + arr.ptr_entries()[0]])
    assert finals == {5, 6}


# -- recycling --------------------------------------------------------------


def test_recompute_at_most_once_per_p_writes():
    nprocs = 3
    m, arr = fresh(nprocs, 1, init=0)
    d = SequentialDriver(m)
    marks = []
    for k in range(30):
        d.run(0, arr.write(0, 0, k))
        marks.append(arr.recomputes(0))
    for lo in range(len(marks) - nprocs):
        assert marks[lo + nprocs] - marks[lo] <= 1
    # with nothing announced every scan frees the whole retired list, so
    # scans land exactly every 2 * nprocs writes
    assert marks[-1] == 5
    assert len(arr.free_slots(0)) == 2 * nprocs - 1
    assert arr.partition_violations() == []


def test_announced_slot_stays_retired():
    m, arr = fresh(2, 1, init=10)
    d = SequentialDriver(m)
    reader = arr.read(1, 0)
    st, pend = run_steps(m, reader, 5)  # lookup resolved to slot 0, value unread
    assert st == "parked"
    assert m.cells[arr.abase + 1] == Announcement(0, 1, 0)
    for k in range(4):  # drain the free list; the 4th write rebuilds it
        d.run(0, arr.write(0, 0, 11 + k))
    assert arr.recomputes(0) == 1
    assert arr.retired_slots(0) == (0,)
    assert 0 not in arr.free_slots(0)
    assert finish(m, reader, pend) == 10  # the value slot 0 held throughout
    assert arr.partition_violations() == []


def test_helping_resolves_parked_lookup():
    m, arr = fresh(2, 1, init=10)
    d = SequentialDriver(m)
    reader = arr.read(1, 0)
    st, pend = run_steps(m, reader, 2)  # announcement raised, pointer unread
    assert st == "parked"
    assert m.cells[arr.abase + 1].help == 1
    for k in range(4):
        d.run(0, arr.write(0, 0, 11 + k))
    current = arr.ptr_entries()[0]
    # the recompute inside the 4th write resolved the parked lookup itself
    assert m.cells[arr.abase + 1] == Announcement(current, 1, 0)
    assert finish(m, reader, pend) == 14
    assert arr.partition_violations() == []


def test_scan_frees_everything_without_announcements():
    m, arr = fresh(1, 1, init=0)
    d = SequentialDriver(m)
    d.run(0, arr.write(0, 0, 1))
    d.run(0, arr.write(0, 0, 2))  # second write recomputes: 2 owned slots
    assert arr.recomputes(0) == 1
    assert arr.retired_slots(0) == ()
    assert d.run(0, arr.read(0, 0)) == 2


# -- seeded stress ----------------------------------------------------------


def test_seeded_mixed_ops_linearizable():
    for seed in range(80):
        rng = random.Random(seed)
        m, arr = fresh(3, 2, init=0)
        plans = []
        val = 100
        for pid in range(3):
            plan = []
            for _ in range(rng.randrange(2, 5)):
                j = rng.randrange(2)
                kind = rng.random()
                if kind < 0.4:
                    plan.append(("read", j))
                elif kind < 0.75:
                    val += 1
                    plan.append(("write", j, val))
                else:
                    plan.append(("cas", j, rng.randrange(0, 3), val + 500))
            plans.append(plan)

        def watch(run):
            bad = arr.partition_violations()
            assert not bad, (seed, bad)

        res = run_seeded(m, arr.workers(plans), Schedule(seed=seed), probe=watch)
        v = check_history(res.history, RegisterArraySpec(2, 0))
        assert v.ok, (seed, v.reason)
        assert array_store_steps(res.history, arr) == []
        assert disjointness_violations(res.history, arr) == []
        assert install_violations(res.history, arr) == []


def test_seeded_scan_contention():
    for seed in range(300):
        m, arr = fresh(2, 1, init=0)
        d = SequentialDriver(m)
        for k in range(3):  # leave process 0 one write away from a recompute
            d.run(0, arr.write(0, 0, k + 1))
        plans = [[("write", 0, 10), ("write", 0, 11)],
                 [("read", 0), ("read", 0)]]

        def watch(run):
            bad = arr.partition_violations()
            assert not bad, (seed, bad)

        res = run_seeded(m, arr.workers(plans), Schedule(seed=seed), probe=watch)
        v = check_history(res.history, RegisterArraySpec(1, 3))
        assert v.ok, (seed, v.reason)
        assert install_violations(res.history, arr) == []
        assert arr.recomputes(0) >= 1


# -- bookkeeping plumbing ---------------------------------------------------


def test_bookkeeping_restores_with_snapshots():
    m, arr = fresh(2, 1, init=0)
    snap = m.snapshot()
    before = [arr._books(p) for p in range(2)]
    d = SequentialDriver(m)
    d.run(0, arr.write(0, 0, 5))
    assert [arr._books(p) for p in range(2)] != before
    m.restore(snap)
    assert [arr._books(p) for p in range(2)] == before


def test_recoverable_roles_smoke():
    m, arr = fresh(2, 1, init=4, recoverable=("slots", "ptr"))
    d = SequentialDriver(m)
    assert d.run(0, arr.write(0, 0, 6)) == "ok"
    assert d.run(1, arr.read(1, 0)) == 6
    assert d.run(1, arr.cas_obj(1, 0, 6, 8)) is True
    assert d.run(0, arr.read(0, 0)) == 8
    # the swing that published the write is recorded for its process
    assert d.run(0, check_recovery(arr.ptrs[0], 1, 0)) is True
    assert arr.partition_violations() == []


def test_unknown_role_rejected():
    m = Machine(2)
    with pytest.raises(ValueError):
        WritableCasArray(m, 2, 1, recoverable=("cells",))


# -- validator negative controls --------------------------------------------


def test_validators_catch_planted_faults():
    m, arr = fresh(2, 2, init=0)
    active = arr.ptr_entries()[0]
    planted = [Ev("note", 0, "install", None, (0, active, 0), None, 0)]
    assert len(install_violations(planted, arr)) == 2  # active and not owned
    dup = [Ev("step", 0, "cas", arr.pbase + 0, (0, 1), True, 0)]
    assert disjointness_violations(dup, arr) == [(0, (1, 1))]
    store = [Ev("step", 1, "store", arr.bbase, (3,), None, 0)]
    assert array_store_steps(store, arr) == store
