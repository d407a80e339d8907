"""Simulated machine: persistent shared memory plus crash-prone processes.

Memory is a flat array of cells, each holding one :data:`Payload` (a machine
word in spirit: a raw value, a value/owner/seq triple, a validity-mask/pc
pair, or a seq/flag pair).  Processes are Python generators that *yield*
instruction descriptors and receive each instruction's result back::

    def prog(pid):
        v = yield ('load', x)
        ok = yield ('cas', x, v, 41)
        return ok

Instruction descriptors
-----------------------
Shared-memory steps (each counts as one step and is one scheduling point):

    ('load', wid)               -> payload
    ('store', wid, value)       -> None
    ('cas', wid, expected, new) -> bool
    ('flush', wid)              -> None     write-back request for wid's line
    ('fence',)                  -> None     completes this process's flushes

Zero-cost actions (no step counted):

    ('crashed',)                      -> bool, consumed inline; true exactly
                                         once after a crash of this process
    ('mark_invoke',  op, obj, args)   operation markers; logged as history
    ('mark_respond', op, obj, ret)    events of kind invoke/respond/recover
    ('mark_recover', op, obj, args)
    ('note', tag, payload)            diagnostics; tag 'boundary' also feeds
                                      the per-process progress counters

Cache modes
-----------
``private``: every store/cas is durable immediately; a crash hits one
process and loses only its volatile context (generator locals).

``shared``: stores/cas update the volatile view and join their cache
line's pending-write log.  A flush+fence moves the flushed lines' pending
writes to the persisted view.  A crash stops the whole system; for every
line an adversarially chosen *prefix* of its pending writes survives.

Scheduling
----------
An exhaustive schedule enumerates every interleaving and every crash
placement within the crash budget, by replaying choice prefixes
(generators cannot be forked).  A seeded schedule draws choices from
``random.Random(seed)`` and is bit-reproducible.  When some process has a
pending operation marker, delivering the lowest-pid marker is the only
non-crash choice; markers therefore never multiply interleavings but
crashes between an operation's last step and its response stay reachable.
"""

from __future__ import annotations

import random
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, NamedTuple

from .history import SYSTEM, Ev


class Triple(NamedTuple):
    """Cell contents for recoverable-CAS objects: value, owner pid, owner seq."""

    value: Any
    pid: int
    seq: int


class MaskPc(NamedTuple):
    """Capsule frame commit word: copy-validity bit mask plus program counter."""

    mask: int
    pc: int


class SeqFlag(NamedTuple):
    """Announcement cell contents: sequence number plus notified flag."""

    seq: int
    flag: int


Payload = Any  # RawWord (int/str/tuple) | Triple | MaskPc | SeqFlag

PRIVATE = "private"
SHARED = "shared"

_MARKS = frozenset(("mark_invoke", "mark_respond", "mark_recover", "note"))

Program = Callable[[int], Any]  # factory: pid -> generator


class _Line:
    """Pending-write log for one cache line in shared mode."""

    __slots__ = ("log", "total")

    def __init__(self) -> None:
        self.log: list[tuple[int, Payload]] = []  # (wid, volatile value)
        self.total = 0  # writes ever issued to this line


class Machine:
    """Persistent shared memory; holds no per-run scheduling state."""

    def __init__(self, nprocs: int, mode: str = PRIVATE, line_words: int = 1,
                 cas_fences: bool = False) -> None:
        if mode not in (PRIVATE, SHARED):
            raise ValueError(f"unknown cache mode {mode!r}")
        self.nprocs = nprocs
        self.mode = mode
        self.line_words = line_words
        self.cas_fences = cas_fences
        self.cells: list[Payload] = []
        self.pcells: list[Payload] | None = [] if mode == SHARED else None
        self.lines: dict[int, _Line] = {}

    # -- allocation and host access ------------------------------------

    def alloc(self, count: int = 1, init: Payload = 0) -> int:
        """Fresh contiguous cells, init persisted as well as volatile."""
        base = len(self.cells)
        self.cells.extend([init] * count)
        if self.pcells is not None:
            self.pcells.extend([init] * count)
        return base

    def alloc_block(self, inits: list[Payload], align_line: bool = False) -> int:
        if align_line and self.line_words > 1:
            pad = -len(self.cells) % self.line_words
            if pad:
                self.alloc(pad)
        base = len(self.cells)
        self.cells.extend(inits)
        if self.pcells is not None:
            self.pcells.extend(inits)
        return base

    def peek(self, wid: int) -> Payload:
        return self.cells[wid]

    def peek_persisted(self, wid: int) -> Payload:
        return self.cells[wid] if self.pcells is None else self.pcells[wid]

    def poke(self, wid: int, value: Payload) -> None:
        """Host-side write to both views (setup only, not a step)."""
        self.cells[wid] = value
        if self.pcells is not None:
            self.pcells[wid] = value

    def line_of(self, wid: int) -> int:
        return wid // self.line_words

    # -- instruction semantics ----------------------------------------

    def do_store(self, wid: int, value: Payload) -> None:
        self.cells[wid] = value
        if self.pcells is not None:
            line = self.lines.setdefault(self.line_of(wid), _Line())
            line.log.append((wid, value))
            line.total += 1

    def do_cas(self, wid: int, expected: Payload, new: Payload) -> bool:
        if self.cells[wid] != expected:
            return False
        self.do_store(wid, new)
        return True

    def flush_watermark(self, wid: int) -> tuple[int, int] | None:
        """(line id, write watermark) covering everything pending right now."""
        if self.pcells is None:
            return None
        lid = self.line_of(wid)
        line = self.lines.get(lid)
        if line is None or not line.log:
            return None
        return (lid, line.total)

    def apply_fence(self, marks: list[tuple[int, int]]) -> None:
        if self.pcells is None:
            return
        for lid, watermark in marks:
            line = self.lines.get(lid)
            if line is None:
                continue
            done = line.total - len(line.log)
            todo = watermark - done
            for _ in range(max(0, todo)):
                wid, value = line.log.pop(0)
                self.pcells[wid] = value

    def crash_prefix_choices(self) -> list[tuple[int, int]]:
        """Per-line pending counts, for enumerating crash survivors."""
        return sorted((lid, len(line.log)) for lid, line in self.lines.items()
                      if line.log)

    def apply_crash(self, prefixes: dict[int, int]) -> None:
        """Whole-system crash: persist chosen per-line prefixes, drop the rest,
        and reset the volatile view to the persisted one."""
        assert self.pcells is not None, "apply_crash is shared-mode only"
        for lid, line in self.lines.items():
            if not line.log:
                continue
            keep = prefixes.get(lid, 0)
            for _ in range(keep):
                wid, value = line.log.pop(0)
                self.pcells[wid] = value
            for wid, _ in line.log:
                self.cells[wid] = self.pcells[wid]
            line.log.clear()

    # -- replay support -------------------------------------------------

    def snapshot(self) -> tuple:
        lines = {lid: (list(l.log), l.total) for lid, l in self.lines.items()}
        pc = None if self.pcells is None else list(self.pcells)
        return (list(self.cells), pc, lines)

    def restore(self, snap: tuple) -> None:
        cells, pcells, lines = snap
        self.cells = list(cells)
        self.pcells = None if pcells is None else list(pcells)
        self.lines = {}
        for lid, (log, total) in lines.items():
            line = _Line()
            line.log = list(log)
            line.total = total
            self.lines[lid] = line


@dataclass
class Schedule:
    """How to drive a run: exhaustively or from a seed.

    ``crash_budget`` bounds the total number of crash events (a whole-system
    crash counts once).  ``crash_rate`` only matters for seeded runs: the
    probability of taking an eligible crash at each decision point.
    ``crash_at`` forces crashes: {step count: victim pid or 'all'}.
    """

    mode: str = "seeded"
    seed: int = 0
    crash_budget: int = 0
    per_proc_crashes: int | None = None
    step_bound: int = 100_000
    crash_rate: float = 0.0
    crash_at: dict[int, Any] | None = None
    crash_victims: frozenset[int] | None = None
    track_contention: bool = True


class Counters:
    """Per-run accounting: steps, flushes, fences, boundaries, crashes,
    recovery delays and memory contention."""

    __slots__ = ("nprocs", "steps", "flushes", "fences", "boundaries",
                 "crashes", "recovery_samples", "contention")

    def __init__(self, nprocs: int) -> None:
        self.nprocs = nprocs
        self.steps = [0] * nprocs
        self.flushes = [0] * nprocs
        self.fences = [0] * nprocs
        self.boundaries = [0] * nprocs
        self.crashes = 0
        self.recovery_samples: list[list[int]] = [[] for _ in range(nprocs)]
        self.contention: dict[int, int] = {}

    def total_steps(self) -> int:
        return sum(self.steps)

    def to_dict(self) -> dict:
        return {
            "steps": list(self.steps),
            "flushes": list(self.flushes),
            "fences": list(self.fences),
            "boundaries": list(self.boundaries),
            "crashes": self.crashes,
            "recovery_samples": [list(s) for s in self.recovery_samples],
            "contention": dict(self.contention),
        }


@dataclass
class RunResult:
    history: list[Ev]
    counters: Counters
    truncated: bool
    returns: list[Any]
    choice_trace: list[int] = field(default_factory=list)


class _Proc:
    __slots__ = ("pid", "gen", "pending", "done", "retval", "crashed_flag",
                 "epoch", "epoch_steps", "recovering", "target", "rcount",
                 "last_ord", "crash_count")

    def __init__(self, pid: int) -> None:
        self.pid = pid
        self.gen = None
        self.pending: tuple | None = None
        self.done = False
        self.retval: Any = None
        self.crashed_flag = False
        self.epoch = 0
        self.epoch_steps = 0
        self.recovering = False
        self.target = (0, 0)
        self.rcount = 0
        self.last_ord = -1
        self.crash_count = 0


class _Run:
    """One execution being driven to completion, choice by choice."""

    def __init__(self, machine: Machine, factories: list[Program],
                 sched: Schedule, rng: random.Random | None = None,
                 probe: Callable | None = None, record: bool = True) -> None:
        self.machine = machine
        self.factories = factories
        self.sched = sched
        self.rng = rng
        self.probe = probe
        self.record = record
        self.history: list[Ev] = []
        self.counters = Counters(machine.nprocs)
        self.procs = [_Proc(pid) for pid in range(machine.nprocs)]
        self.flushmarks: list[list[tuple[int, int]]] = [[] for _ in range(machine.nprocs)]
        self.resp_log: dict[int, list[int]] = {}
        self.ord = 0
        self.steps_total = 0
        self.crashes_used = 0
        self.stopped = False
        self.truncated = False
        self._fired_crash_plans: set[int] = set()
        for p in self.procs:
            p.gen = factories[p.pid](p.pid)
            self._advance(p, None)

    # -- driving one process -------------------------------------------

    def _advance(self, p: _Proc, send: Any) -> None:
        gen = p.gen
        while True:
            try:
                instr = gen.send(send)
            except StopIteration as stop:
                p.done = True
                p.retval = stop.value
                p.pending = None
                return
            if instr[0] == "crashed":
                send = p.crashed_flag
                p.crashed_flag = False
                continue
            p.pending = instr
            return

    # -- decision points -------------------------------------------------

    def _crash_eligible(self, p: _Proc) -> bool:
        s = self.sched
        if self.crashes_used >= s.crash_budget:
            return False
        if s.crash_victims is not None and p.pid not in s.crash_victims:
            return False
        if s.per_proc_crashes is not None and p.crash_count >= s.per_proc_crashes:
            return False
        return True

    def choices(self) -> list[tuple]:
        cs: list[tuple] = []
        mark_pid = None
        for p in self.procs:
            if p.pending is not None and p.pending[0] in _MARKS:
                mark_pid = p.pid
                break
        if mark_pid is not None:
            cs.append(("mark", mark_pid))
        else:
            cs.extend(("step", p.pid) for p in self.procs if p.pending is not None)
        if not cs:
            cs.append(("stop",))
        if self.crashes_used < self.sched.crash_budget:
            if self.machine.mode == PRIVATE:
                cs.extend(("crash", p.pid) for p in self.procs if self._crash_eligible(p))
            else:
                if self.rng is not None:
                    cs.append(("crashall", None))
                else:
                    cs.extend(("crashall", combo)
                              for combo in self._prefix_combos())
        return cs

    def _prefix_combos(self) -> list[tuple]:
        pending = self.machine.crash_prefix_choices()
        combos: list[tuple] = [()]
        for lid, n in pending:
            combos = [c + ((lid, k),) for c in combos for k in range(n + 1)]
        return combos

    # -- applying a choice ------------------------------------------------

    def apply(self, choice: tuple) -> None:
        kind = choice[0]
        if kind == "stop":
            self.stopped = True
        elif kind == "step":
            self._exec_step(self.procs[choice[1]])
        elif kind == "mark":
            self._deliver_mark(self.procs[choice[1]])
        elif kind == "crash":
            self._log(Ev("crash", choice[1], None, None, None, None, self._next_ord()))
            self._crash_proc(self.procs[choice[1]])
            self.crashes_used += 1
            self.counters.crashes += 1
        elif kind == "crashall":
            self._log(Ev("crash", SYSTEM, None, None, None, None, self._next_ord()))
            self._crash_system(choice[1])
            self.crashes_used += 1
            self.counters.crashes += 1
        else:  # pragma: no cover - defensive
            raise ValueError(f"unknown choice {choice!r}")
        if self.probe is not None:
            self.probe(self)

    def _next_ord(self) -> int:
        i = self.ord
        self.ord += 1
        return i

    def _log(self, ev: Ev) -> None:
        if self.record:
            self.history.append(ev)

    def _exec_step(self, p: _Proc) -> None:
        instr = p.pending
        p.pending = None
        m = self.machine
        opname = instr[0]
        idx = self._next_ord()
        wid: int | None
        args: Any = None
        ret: Any = None
        if opname == "load":
            wid = instr[1]
            ret = m.cells[wid]
        elif opname == "store":
            wid = instr[1]
            args = (instr[2],)
            m.do_store(wid, instr[2])
        elif opname == "cas":
            wid = instr[1]
            args = (instr[2], instr[3])
            ret = m.do_cas(wid, instr[2], instr[3])
            if m.cas_fences and self.flushmarks[p.pid]:
                m.apply_fence(self.flushmarks[p.pid])
                self.flushmarks[p.pid].clear()
        elif opname == "flush":
            wid = instr[1]
            mark = m.flush_watermark(wid)
            if mark is not None:
                self.flushmarks[p.pid].append(mark)
            self.counters.flushes[p.pid] += 1
        elif opname == "fence":
            wid = None
            m.apply_fence(self.flushmarks[p.pid])
            self.flushmarks[p.pid].clear()
            self.counters.fences[p.pid] += 1
        else:
            raise ValueError(f"process {p.pid} yielded unknown instruction {instr!r}")

        self.counters.steps[p.pid] += 1
        self.steps_total += 1
        if self.steps_total >= self.sched.step_bound:
            self.truncated = True
        if self.sched.track_contention and opname in ("load", "store", "cas"):
            log = self.resp_log.setdefault(wid, [])
            n = len(log) - bisect_right(log, p.last_ord)
            if n:
                self.counters.contention[wid] = self.counters.contention.get(wid, 0) + n
            log.append(idx)
        p.last_ord = idx

        p.epoch_steps += 1
        if p.recovering:
            p.rcount += 1
            if (p.epoch, p.epoch_steps) >= p.target:
                self.counters.recovery_samples[p.pid].append(p.rcount)
                p.recovering = False

        self._log(Ev("step", p.pid, opname, wid, args, ret, idx))
        self._advance(p, ret)

    def _deliver_mark(self, p: _Proc) -> None:
        instr = p.pending
        p.pending = None
        idx = self._next_ord()
        kind = instr[0]
        if kind == "note":
            tag, payload = instr[1], instr[2]
            if tag == "boundary":
                p.epoch += 1
                p.epoch_steps = 0
                self.counters.boundaries[p.pid] += 1
                if p.recovering and (p.epoch, p.epoch_steps) >= p.target:
                    self.counters.recovery_samples[p.pid].append(p.rcount)
                    p.recovering = False
            self._log(Ev("note", p.pid, tag, None, payload, None, idx))
        elif kind == "mark_invoke":
            self._log(Ev("invoke", p.pid, instr[1], instr[2], instr[3], None, idx))
        elif kind == "mark_respond":
            self._log(Ev("respond", p.pid, instr[1], instr[2], None, instr[3], idx))
        else:  # mark_recover
            self._log(Ev("recover", p.pid, instr[1], instr[2], instr[3], None, idx))
        self._advance(p, None)

    def _crash_proc(self, p: _Proc) -> None:
        p.pending = None
        p.done = False
        p.retval = None
        p.crashed_flag = True
        p.crash_count += 1
        # The sample counts post-restart steps until the process is back at
        # an equal-or-later (boundary, in-capsule step) position, so the
        # in-capsule count starts over with the generator.
        p.target = (p.epoch, p.epoch_steps)
        p.epoch_steps = 0
        p.recovering = True
        p.rcount = 0
        self.flushmarks[p.pid].clear()
        p.gen = self.factories[p.pid](p.pid)
        self._advance(p, None)

    def _crash_system(self, combo: tuple | None) -> None:
        if combo is None:
            prefixes = {lid: self.rng.randint(0, n)
                        for lid, n in self.machine.crash_prefix_choices()}
        else:
            prefixes = dict(combo)
        self.machine.apply_crash(prefixes)
        for p in self.procs:
            self._crash_proc(p)

    # -- results ---------------------------------------------------------

    @property
    def live(self) -> bool:
        return not (self.stopped or self.truncated)

    def result(self, trace: list[int] | None = None) -> RunResult:
        return RunResult(self.history, self.counters, self.truncated,
                         [p.retval for p in self.procs],
                         list(trace) if trace else [])


def explore(machine: Machine, factories: list[Program], sched: Schedule,
            probe: Callable | None = None, record: bool = True,
            loose: bool = False, max_runs: int | None = None) -> Iterator[RunResult]:
    """Enumerate every interleaving and crash placement, depth first.

    Generators cannot be forked, so each branch is replayed from a memory
    snapshot by re-applying a recorded prefix of choice indices.  Choice
    lists are a deterministic function of machine + process state, which
    makes the replay exact.
    """
    if not loose:
        if machine.nprocs > 4:
            raise ValueError("exhaustive default bound: at most 4 processes (loose=True to override)")
        if sched.crash_budget > 2:
            raise ValueError("exhaustive default bound: at most 2 crashes (loose=True to override)")
    snap = machine.snapshot()
    prefix: list[int] = []
    widths: list[int] = []
    runs = 0
    while True:
        machine.restore(snap)
        run = _Run(machine, factories, sched, rng=None, probe=probe, record=record)
        for ci in prefix:
            run.apply(run.choices()[ci])
        while run.live:
            cs = run.choices()
            prefix.append(0)
            widths.append(len(cs))
            run.apply(cs[0])
        yield run.result(prefix)
        runs += 1
        if max_runs is not None and runs >= max_runs:
            return
        while prefix and prefix[-1] + 1 >= widths[-1]:
            prefix.pop()
            widths.pop()
        if not prefix:
            return
        prefix[-1] += 1


def run_seeded(machine: Machine, factories: list[Program], sched: Schedule,
               probe: Callable | None = None, record: bool = True) -> RunResult:
    """One reproducible run: all choices drawn from random.Random(seed)."""
    rng = random.Random(sched.seed)
    run = _Run(machine, factories, sched, rng=rng, probe=probe, record=record)
    plan = dict(sched.crash_at) if sched.crash_at else {}
    while run.live:
        cs = run.choices()
        crashes = [c for c in cs if c[0] in ("crash", "crashall")]
        normal = [c for c in cs if c[0] not in ("crash", "crashall")]
        choice = None
        if crashes:
            due = [s for s in plan if s <= run.steps_total]
            if due:
                victim = plan.pop(min(due))
                if victim == "all":
                    choice = next((c for c in crashes if c[0] == "crashall"), None)
                else:
                    choice = next((c for c in crashes if c == ("crash", victim)), None)
            if choice is None and sched.crash_rate > 0 and rng.random() < sched.crash_rate:
                choice = crashes[rng.randrange(len(crashes))]
        if choice is None:
            choice = normal[rng.randrange(len(normal))]
        run.apply(choice)
    return run.result()


def run(machine: Machine, factories: list[Program], sched: Schedule, **kw):
    """Spec-shaped entry point: an iterator of runs (exhaustive) or one run."""
    if sched.mode == "exhaustive":
        return explore(machine, factories, sched, **kw)
    return run_seeded(machine, factories, sched, **kw)


class SequentialDriver:
    """Executes generators to completion one at a time, inline.

    Useful for setup code and for sequential randomized testing where the
    full scheduler would only add overhead.  Crashes are taken between
    operations: they wipe nothing in private mode but set the victim's
    crashed flag, which the next generator run on that pid observes.
    """

    def __init__(self, machine: Machine) -> None:
        self.machine = machine
        self.crashed = [False] * machine.nprocs
        self.steps = 0
        self.marks: list[list[tuple[int, int]]] = [[] for _ in range(machine.nprocs)]

    def run(self, pid: int, gen) -> Any:
        m = self.machine
        send = None
        while True:
            try:
                instr = gen.send(send)
            except StopIteration as stop:
                return stop.value
            op = instr[0]
            send = None
            if op == "load":
                send = m.cells[instr[1]]
                self.steps += 1
            elif op == "store":
                m.do_store(instr[1], instr[2])
                self.steps += 1
            elif op == "cas":
                send = m.do_cas(instr[1], instr[2], instr[3])
                self.steps += 1
            elif op == "flush":
                mark = m.flush_watermark(instr[1])
                if mark is not None:
                    self.marks[pid].append(mark)
                self.steps += 1
            elif op == "fence":
                m.apply_fence(self.marks[pid])
                self.marks[pid].clear()
                self.steps += 1
            elif op == "crashed":
                send = self.crashed[pid]
                self.crashed[pid] = False
            elif op in _MARKS:
                pass
            else:
                raise ValueError(f"unknown instruction {instr!r}")

    def crash(self, pid: int) -> None:
        self.crashed[pid] = True
        self.marks[pid].clear()

    def crash_all(self, prefixes: dict[int, int] | None = None) -> None:
        if self.machine.mode == SHARED:
            self.machine.apply_crash(prefixes or {})
        for pid in range(self.machine.nprocs):
            self.crash(pid)


# Descriptor constructors, mainly for tests and demos; algorithm modules
# yield the raw tuples directly.

def load(wid: int) -> tuple:
    return ("load", wid)


def store(wid: int, value: Payload) -> tuple:
    return ("store", wid, value)


def cas(wid: int, expected: Payload, new: Payload) -> tuple:
    return ("cas", wid, expected, new)


def flush(wid: int) -> tuple:
    return ("flush", wid)


def fence() -> tuple:
    return ("fence",)


def crashed() -> tuple:
    return ("crashed",)


def invoke(op: str, obj: Any, args: tuple = ()) -> tuple:
    return ("mark_invoke", op, obj, tuple(args))


def respond(op: str, obj: Any, ret: Any = None) -> tuple:
    return ("mark_respond", op, obj, ret)


def recover_mark(op: str, obj: Any, args: tuple = ()) -> tuple:
    return ("mark_recover", op, obj, tuple(args))


def note(tag: str, payload: Any = None) -> tuple:
    return ("note", tag, payload)
