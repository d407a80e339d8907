"""Queue variants: FIFO semantics, crash recovery, detectability,
boundary budgets, and flush accounting."""

from __future__ import annotations

import pytest

from permem import (
    DetectableResult,
    NOT_TAKEN,
    Schedule,
    SequentialDriver,
    conservation_check,
    explore,
    make_system,
    run_seeded,
)
from permem.checker import EMPTY, FifoQueueSpec, check_history, project, seq_last
from permem.queues import (
    BASELINE,
    BROKEN_FIXTURE,
    GENERAL,
    GENERAL_OPT,
    MODE_IZRAELEVITZ,
    MODE_MANUAL,
    MODE_PRIVATE,
    NORMALIZED,
    NORMALIZED_OPT,
    NULL,
    NodeHeap,
)
from permem.model import Machine
from permem.rcas import aba_violations, seq_discipline_violations

PERSISTENT = (GENERAL, GENERAL_OPT, NORMALIZED, NORMALIZED_OPT)
ALL_VARIANTS = (BASELINE,) + PERSISTENT


def fifo_verdict(history, mode="strict"):
    return check_history(history, FifoQueueSpec(), mode=mode, seq_of=seq_last)


def popped(history):
    """Dequeue responses after projection, in order."""
    v, evs = project(history)
    assert v.ok, v.reason
    return [ev.ret for ev in evs if ev.kind == "respond" and ev.op == "dequeue"]


def drive_until(machine, gen, stop):
    """Step a generator inline, abandoning it right after ``stop`` fires.

    The truncation plays the role of a crash hitting between two
    instructions; the machine keeps whatever the prefix wrote.
    """
    send = None
    while True:
        instr = gen.send(send)
        op = instr[0]
        send = None
        if op == "load":
            send = machine.cells[instr[1]]
        elif op == "store":
            machine.do_store(instr[1], instr[2])
        elif op == "cas":
            send = machine.do_cas(instr[1], instr[2], instr[3])
        elif op == "crashed":
            send = False
        if stop(instr, send):
            gen.close()
            return


# -- semantics, crash-free ------------------------------------------------


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_fifo_order_each_variant(variant):
    machine, q, wrap = make_system(variant, MODE_PRIVATE, 1, per_pid=4)
    plan = [("enqueue", 1), ("enqueue", 2), ("enqueue", 3),
            ("dequeue",), ("dequeue",), ("dequeue",), ("dequeue",)]
    facs = [wrap(f) for f in q.workers([plan])]
    res = run_seeded(machine, facs, Schedule(seed=0))
    assert popped(res.history) == [1, 2, 3, EMPTY]
    v = fifo_verdict(res.history)
    assert v.ok, v.reason
    ok, why = conservation_check(q, res.history)
    assert ok, why
    assert q.residue() == []


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_two_process_histories_linearize(variant):
    plans = [[("enqueue", 10), ("dequeue",), ("enqueue", 11)],
             [("enqueue", 20), ("dequeue",), ("dequeue",)]]
    for seed in range(40):
        machine, q, wrap = make_system(variant, MODE_PRIVATE, 2, per_pid=4)
        facs = [wrap(f) for f in q.workers(plans)]
        res = run_seeded(machine, facs, Schedule(seed=seed))
        v = fifo_verdict(res.history)
        assert v.ok, (seed, v.reason)
        ok, why = conservation_check(q, res.history)
        assert ok, (seed, why)


# -- recovery windows, placed by hand --------------------------------------


@pytest.mark.parametrize("variant", PERSISTENT)
@pytest.mark.parametrize("window", ("before-link", "after-link"))
def test_crash_around_the_link_is_reconciled(variant, window):
    """A crash on either side of the enqueue's linearizing CAS: the
    recovery answer matches, and the rerun never links a second copy."""
    machine, q, wrap = make_system(variant, MODE_PRIVATE, 1, per_pid=4)
    facs = [wrap(f) for f in q.workers([[("enqueue", 7)]])]
    link = q.heap.next[0]
    node = q.heap.node(0, 0)
    if window == "before-link":
        stop = lambda instr, res: (instr[0] == "store"
                                   and instr[1] == link.abase)
    else:
        stop = lambda instr, res: (instr[0] == "cas"
                                   and instr[1] == link.x and res is True)
    drive_until(machine, facs[0](0), stop)
    drv = SequentialDriver(machine)
    drv.crash(0)
    rr = drv.run(0, q.recover_op(0))
    if window == "before-link":
        assert rr == DetectableResult(1, NOT_TAKEN)
    else:
        assert rr == DetectableResult(1, "ok")
    drv.run(0, facs[0](0))
    assert q.residue() == [7]
    assert q.heap.peek_next(0) == node
    assert q.heap.peek_next(node) == NULL
    assert drv.run(0, q.recover_op(0)) == DetectableResult(1, "ok")


@pytest.mark.parametrize("variant", PERSISTENT)
def test_recovery_answer_examples(variant):
    machine, q, wrap = make_system(variant, MODE_PRIVATE, 1, per_pid=4)
    facs = [wrap(f) for f in q.workers([[("enqueue", 7), ("dequeue",)]])]
    drv = SequentialDriver(machine)
    # before the first operation takes a single shared step
    assert drv.run(0, q.recover_op(0)) == DetectableResult(1, NOT_TAKEN)
    drv.run(0, facs[0](0))
    # after the completed dequeue brought 7 back out
    assert drv.run(0, q.recover_op(0)) == DetectableResult(2, 7)
    # asking again without any crash changes nothing
    assert drv.run(0, q.recover_op(0)) == DetectableResult(2, 7)


# -- crash schedules --------------------------------------------------------


@pytest.mark.parametrize("variant", PERSISTENT)
def test_every_crash_point_single_process(variant):
    plan = [("enqueue", 1), ("enqueue", 2), ("dequeue",), ("dequeue",)]
    k = 1
    crashed_runs = 0
    while True:
        machine, q, wrap = make_system(variant, MODE_PRIVATE, 1, per_pid=4)
        facs = [wrap(f) for f in q.workers([plan])]
        res = run_seeded(machine, facs,
                         Schedule(seed=5, crash_budget=1, crash_at={k: 0}))
        v = fifo_verdict(res.history)
        assert v.ok, (k, v.reason)
        ok, why = conservation_check(q, res.history)
        assert ok, (k, why)
        assert popped(res.history) == [1, 2], k
        assert q.residue() == []
        if res.counters.crashes == 0:
            break  # the run ended before step k; every point is covered
        crashed_runs += 1
        k += 1
    assert crashed_runs > 40


@pytest.mark.parametrize("variant", (GENERAL, NORMALIZED))
@pytest.mark.parametrize("mode", (MODE_PRIVATE, MODE_MANUAL))
def test_seeded_crash_sweep_two_processes(variant, mode):
    plans = [[("enqueue", 10), ("dequeue",), ("enqueue", 11)],
             [("enqueue", 20), ("dequeue",), ("dequeue",)]]
    lin_mode = "strict" if mode == MODE_PRIVATE else "durable"
    crashed = 0
    for seed in range(80):
        machine, q, wrap = make_system(variant, mode, 2, per_pid=4)
        facs = [wrap(f) for f in q.workers(plans)]
        res = run_seeded(machine, facs,
                         Schedule(seed=seed, crash_budget=2, crash_rate=0.08))
        v = fifo_verdict(res.history, mode=lin_mode)
        assert v.ok, (seed, v.reason)
        ok, why = conservation_check(q, res.history)
        assert ok, (seed, why)
        assert seq_discipline_violations(res.history, q.head) == []
        assert seq_discipline_violations(res.history, q.tail) == []
        assert aba_violations(res.history, q.head, init_value=0) == []
        assert aba_violations(res.history, q.tail, init_value=0) == []
        crashed += res.counters.crashes > 0
    assert crashed > 15


def test_broken_recovery_is_caught():
    """The fixture that reissues without looking duplicates effects; the
    checker must find a witness where the honest build stays clean."""
    plans = [[("enqueue", 1), ("dequeue",)],
             [("enqueue", 2), ("dequeue",)]]

    def sweep(variant):
        bad = 0
        for seed in range(400):
            machine, q, wrap = make_system(variant, MODE_PRIVATE, 2, per_pid=4)
            facs = [wrap(f) for f in q.workers(plans)]
            res = run_seeded(machine, facs,
                             Schedule(seed=seed, crash_budget=1,
                                      crash_rate=0.1))
            v = fifo_verdict(res.history)
            ok, _ = conservation_check(q, res.history)
            bad += not (v.ok and ok)
        return bad

    assert sweep(BROKEN_FIXTURE) > 0
    assert sweep(GENERAL) == 0


# -- cost accounting --------------------------------------------------------


def test_boundary_budget_by_variant():
    """Checkpoint counts for a fixed crash-free run, from the capsule
    tables themselves: enqueue and nonempty dequeue cost 4 and 3
    boundaries in the plain build, 2 and 2 merged, one per iteration
    plus the entry in the loop build, none transient."""
    plan = [("enqueue", 1), ("enqueue", 2),
            ("dequeue",), ("dequeue",), ("dequeue",)]
    budgets = {BASELINE: 0, GENERAL: 4 + 4 + 3 + 3 + 2,
               GENERAL_OPT: 2 + 2 + 2 + 2 + 1,
               NORMALIZED: 5 + 1, NORMALIZED_OPT: 5 + 1}
    for variant, want in budgets.items():
        machine, q, wrap = make_system(variant, MODE_PRIVATE, 1, per_pid=4)
        facs = [wrap(f) for f in q.workers([plan])]
        res = run_seeded(machine, facs, Schedule(seed=1))
        assert popped(res.history) == [1, 2, EMPTY]
        assert res.counters.boundaries[0] == want, variant


def test_flush_per_access_wrapping():
    """The wrapped build flushes and fences once per shared access, no
    more and no less; the transient build keeps the count honest since
    it has no checkpoint traffic of its own."""
    machine, q, wrap = make_system(BASELINE, MODE_IZRAELEVITZ, 1, per_pid=2)
    facs = [wrap(f) for f in q.workers([[("enqueue", 5)]])]
    res = run_seeded(machine, facs, Schedule(seed=0))
    c = res.counters
    accesses = c.steps[0] - c.flushes[0] - c.fences[0]
    assert accesses > 0
    assert c.flushes[0] == accesses
    assert c.fences[0] == accesses


@pytest.mark.parametrize("variant", (GENERAL, NORMALIZED))
def test_manual_flushes_fewer_than_wrapped(variant):
    plans = [[("enqueue", 1), ("enqueue", 2), ("dequeue",), ("dequeue",)]]

    def flushes(mode):
        machine, q, wrap = make_system(variant, mode, 1, per_pid=4)
        facs = [wrap(f) for f in q.workers(plans)]
        res = run_seeded(machine, facs, Schedule(seed=2))
        assert popped(res.history) == [1, 2]
        return res.counters.flushes[0]

    assert flushes(MODE_MANUAL) < flushes(MODE_IZRAELEVITZ)


@pytest.mark.parametrize("variant", (GENERAL, NORMALIZED))
def test_wrapped_variant_survives_system_crash_prefixes(variant):
    """Crashes at every point, with every persisted prefix of each dirty
    line: the wrapped build stays durably linearizable.  Immediate
    flushing also keeps the prefix fan-out small enough to enumerate."""
    machine, q, wrap = make_system(variant, MODE_IZRAELEVITZ, 1, per_pid=2)
    facs = [wrap(f) for f in q.workers([[("enqueue", 7)]])]
    sched = Schedule(mode="exhaustive", crash_budget=1)
    runs = 0
    with_crash = 0
    for res in explore(machine, facs, sched):
        runs += 1
        with_crash += res.counters.crashes > 0
        v = fifo_verdict(res.history, mode="durable")
        assert v.ok, v.reason
        ok, why = conservation_check(q, res.history)
        assert ok, why
        assert q.residue() == [7]
    assert runs > 50
    assert with_crash > 25


# -- pool and assembly ------------------------------------------------------


def test_prefill_accounting():
    machine, q, wrap = make_system(GENERAL, MODE_PRIVATE, 1, per_pid=2,
                                   reserve=3)
    q.host_prefill([10, 11, 12])
    facs = [wrap(f) for f in q.workers([[("dequeue",), ("dequeue",)]])]
    res = run_seeded(machine, facs, Schedule(seed=0))
    assert popped(res.history) == [10, 11]
    assert q.residue() == [12]
    ok, why = conservation_check(q, res.history)
    assert ok, why


def test_node_pool_is_deterministic():
    machine = Machine(2)
    heap = NodeHeap(machine, 2, per_pid=3, reserve=2, recoverable=False)
    ids = {heap.node(p, k) for p in range(2) for k in range(3)}
    assert len(ids) == 6
    assert min(ids) == 3  # sentinel and two reserved nodes come first
    with pytest.raises(ValueError, match="stripe"):
        heap.node(0, 3)


def test_make_system_validates_tags():
    with pytest.raises(ValueError, match="variant"):
        make_system("fifo", MODE_PRIVATE, 1, per_pid=1)
    with pytest.raises(ValueError, match="mode"):
        make_system(GENERAL, "durable", 1, per_pid=1)
