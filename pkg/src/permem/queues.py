"""Lock-free FIFO queues on persistent memory, in five builds.

All variants share one layout: a pool of nodes (a value cell plus a next
link each), a head pointing at a sentinel node, and a tail pointing at
or one behind the last node.  Node ids are never reused, so pointer
comparisons are immune to recycling.

* ``baseline`` runs on plain cells with raw CAS.  It is the transient
  reference: fastest, correct only between crashes.
* ``general`` rebuilds the same algorithm from typed capsules over
  recoverable CAS: one boundary per shared CAS, plus read capsules.
* ``general-opt`` keeps the protocol but merges stages into free
  capsules with a hand-checked repeat argument, parks helping swings on
  the no-notify slot, persists fewer locals, and line-aligns its frames.
* ``normalized`` expresses both operations as retry loops with
  single-entry CAS plans and one boundary per iteration: the enqueue
  plan links the new node, wrap-up swings the tail (a helping step) and
  asks for a repeat when the link failed; the dequeue plan advances the
  head.
* ``normalized-opt`` is the same loop with the aligned one-line frame
  and fence elision before CAS.

Persistence modes: ``private`` (per-process crashes, caches survive),
``manual-flush`` (shared cache, explicit flush and fence on the queue
words at their writes), and ``izraelevitz`` (shared cache, every shared
access followed by flush and fence via :func:`izraelevitz_wrap`).

Every variant but the baseline answers :meth:`recover_op`: the number
of the process's most recently invoked operation together with its
response, or :data:`NOT_TAKEN` when it has not taken effect.  Calling
it without a preceding crash is allowed and gives the same answer.

``broken-fixture`` is ``general`` with the detection step disabled: its
recovery always reissues, so a crash after an effect duplicates it.  It
exists so the checker has a guaranteed-red input.
"""

from __future__ import annotations

from typing import Any, NamedTuple

from .capsules import (HALT, Frame, cas_read, free, read_only,
                       run_capsules, single)
from .checker import EMPTY, project
from .model import Machine, PRIVATE, SHARED, Triple
from .normalized import (_ENTRY, _ITER, RESTART, NormalizedStruct,
                         normalized_workers)
from .rcas import RCas, cas_no_self_notify, check_recovery

NULL = -1

BASELINE = "baseline"
GENERAL = "general"
GENERAL_OPT = "general-opt"
NORMALIZED = "normalized"
NORMALIZED_OPT = "normalized-opt"
BROKEN_FIXTURE = "broken-fixture"
VARIANTS = (BASELINE, GENERAL, GENERAL_OPT, NORMALIZED, NORMALIZED_OPT,
            BROKEN_FIXTURE)

MODE_PRIVATE = "private"
MODE_MANUAL = "manual-flush"
MODE_IZRAELEVITZ = "izraelevitz"
MODES = (MODE_PRIVATE, MODE_MANUAL, MODE_IZRAELEVITZ)


class _NotTaken:
    __slots__ = ()

    def __repr__(self) -> str:
        return "NOT_TAKEN"


NOT_TAKEN = _NotTaken()


class DetectableResult(NamedTuple):
    """Recovery answer for a process: which operation number ran last
    and what it returned; ``value`` is :data:`NOT_TAKEN` when the
    operation has not (yet) taken effect."""

    seq: int
    value: Any


class NodeHeap:
    """Preallocated node pool: one value cell and one next link per node.

    Node 0 is the initial sentinel.  Ids 1..reserve belong to host-side
    prefill; after those, each process owns a fixed stripe, so the node
    used by a given enqueue is a pure function of (pid, enqueue index)
    and survives any number of retries or replays.  Nodes are never
    freed; the model's memory is unbounded.
    """

    def __init__(self, machine: Machine, nprocs: int, per_pid: int,
                 reserve: int = 0, recoverable: bool = True,
                 durable: bool = False) -> None:
        self.machine = machine
        self.nprocs = nprocs
        self.per_pid = per_pid
        self.reserve = reserve
        self.total = 1 + reserve + nprocs * per_pid
        self.vbase = machine.alloc_block([None] * self.total)
        if recoverable:
            self.next: list[RCas] | None = [
                RCas(machine, nprocs, init=NULL, label=("next", i),
                     durable=durable)
                for i in range(self.total)]
            self.nbase = None
        else:
            self.next = None
            self.nbase = machine.alloc_block([NULL] * self.total)

    def node(self, pid: int, k: int) -> int:
        if not 0 <= k < self.per_pid:
            raise ValueError(
                f"enqueue {k} exceeds the pool stripe ({self.per_pid} per "
                "process); size the heap for the workload")
        return 1 + self.reserve + pid * self.per_pid + k

    def value_cell(self, node: int) -> int:
        return self.vbase + node

    def peek_next(self, node: int) -> int:
        """Host-side read of a node's successor id."""
        if self.next is not None:
            return self.machine.peek(self.next[node].x).value
        return self.machine.peek(self.nbase + node)

    def poke_next(self, node: int, succ: int) -> None:
        if self.next is not None:
            self.machine.poke(self.next[node].x, Triple(succ, 0, 0))
        else:
            self.machine.poke(self.nbase + node, succ)


class _QueueCommon:
    """State and host helpers shared by every variant."""

    label = "queue"

    def host_prefill(self, values: list) -> None:
        """Chain ``values`` behind the sentinel before any process runs.

        Uses the heap's reserved stripe; raises when it is too small.
        """
        heap = self.heap
        if len(values) > heap.reserve:
            raise ValueError(
                f"prefill of {len(values)} exceeds the reserved "
                f"{heap.reserve} nodes")
        self.prefilled = list(values)
        prev = 0
        for j, v in enumerate(values):
            nid = 1 + j
            self.machine.poke(heap.value_cell(nid), v)
            heap.poke_next(prev, nid)
            prev = nid
        self._poke_tail(prev)

    def residue(self) -> list:
        """Values still queued, by walking the chain from the head.

        Guards against cycles so a corrupted chain (possible only with
        the broken fixture) reports what it reached instead of hanging.
        """
        vals = []
        seen = set()
        cur = self._peek_head()
        while cur not in seen:
            seen.add(cur)
            nxt = self.heap.peek_next(cur)
            if nxt == NULL:
                break
            vals.append(self.machine.peek(self.heap.value_cell(nxt)))
            cur = nxt
        return vals


def conservation_check(queue, history) -> tuple[bool, str]:
    """Multiset accounting: values whose enqueue took effect must equal
    values dequeued plus values still in the chain."""
    verdict, evs = project(history)
    if not verdict.ok:
        return False, f"projection failed: {verdict.reason}"
    pushed: dict[Any, int] = {}
    for v in getattr(queue, "prefilled", ()):
        pushed[v] = pushed.get(v, 0) + 1
    popped: dict[Any, int] = {}
    open_args: dict[tuple, Any] = {}
    for ev in evs:
        if ev.obj != queue.label:
            continue
        if ev.kind == "invoke":
            open_args[(ev.pid, ev.op)] = ev.args
        elif ev.kind == "respond" and ev.op == "enqueue":
            args = open_args.get((ev.pid, "enqueue"))
            if args is not None:
                pushed[args[0]] = pushed.get(args[0], 0) + 1
        elif ev.kind == "respond" and ev.op == "dequeue":
            if ev.ret != EMPTY:
                popped[ev.ret] = popped.get(ev.ret, 0) + 1
    left = dict(popped)
    for v in queue.residue():
        left[v] = left.get(v, 0) + 1
    if pushed == left:
        return True, "conserved"
    gained = {v: n for v, n in left.items() if n > pushed.get(v, 0)}
    lost = {v: n for v, n in pushed.items() if n > left.get(v, 0)}
    return False, f"element mismatch: duplicated {gained}, lost {lost}"


def izraelevitz_wrap(factory):
    """General-purpose durability transform: after every shared access
    the line is flushed and a fence issued.  Correct by construction and
    oblivious to the algorithm; the price shows up in the flush counts.
    """
    def wrapped(pid: int):
        return _flush_every_access(factory(pid))
    wrapped.frame = getattr(factory, "frame", None)
    return wrapped


def _flush_every_access(gen):
    send = None
    while True:
        try:
            instr = gen.send(send)
        except StopIteration as stop:
            return stop.value
        send = yield instr
        if instr[0] in ("load", "store", "cas"):
            yield ("flush", instr[1])
            yield ("fence",)


# -- baseline: transient reference --------------------------------------


class BaselineQueue(_QueueCommon):
    """Plain-cell queue; correct only in crash-free runs."""

    def __init__(self, machine: Machine, nprocs: int, per_pid: int,
                 reserve: int = 0) -> None:
        self.machine = machine
        self.nprocs = nprocs
        self.heap = NodeHeap(machine, nprocs, per_pid, reserve,
                             recoverable=False)
        base = machine.alloc_block([0, 0])
        self.hcell = base
        self.tcell = base + 1

    def _peek_head(self) -> int:
        return self.machine.peek(self.hcell)

    def _poke_tail(self, node: int) -> None:
        self.machine.poke(self.tcell, node)

    def enqueue(self, pid: int, v, node: int):
        heap = self.heap
        yield ("store", heap.value_cell(node), v)
        while True:
            t = yield ("load", self.tcell)
            n = yield ("load", heap.nbase + t)
            if n == NULL:
                if (yield ("cas", heap.nbase + t, NULL, node)):
                    yield ("cas", self.tcell, t, node)
                    return "ok"
            else:
                yield ("cas", self.tcell, t, n)

    def dequeue(self, pid: int):
        heap = self.heap
        while True:
            h = yield ("load", self.hcell)
            t = yield ("load", self.tcell)
            n = yield ("load", heap.nbase + h)
            if h == t:
                if n == NULL:
                    return EMPTY
                yield ("cas", self.tcell, t, n)
            else:
                v = yield ("load", heap.value_cell(n))
                if (yield ("cas", self.hcell, h, n)):
                    return v

    def workers(self, plans: list[list[tuple]]) -> list:
        factories = []
        for pid, plan in enumerate(plans):
            factories.append(self._worker(pid, plan))
        return factories

    def _worker(self, pid: int, plan: list[tuple]):
        def factory(_pid: int):
            return self._program(pid, plan)
        return factory

    def _program(self, pid: int, plan: list[tuple]):
        k_enq = 0
        for k, (op, *args) in enumerate(plan):
            if op == "enqueue":
                node = self.heap.node(pid, k_enq)
                k_enq += 1
                yield ("mark_invoke", "enqueue", self.label, (args[0], k + 1))
                res = yield from self.enqueue(pid, args[0], node)
                yield ("mark_respond", "enqueue", self.label, res)
            else:
                yield ("mark_invoke", "dequeue", self.label, (k + 1,))
                res = yield from self.dequeue(pid)
                yield ("mark_respond", "dequeue", self.label, res)


# -- capsule-built variants ----------------------------------------------


class GeneralQueue(_QueueCommon):
    """The queue rebuilt from typed capsules over recoverable CAS.

    Plain build: every shared CAS sits in its own cas-read capsule and
    every read block in a read-only capsule, so each gets a boundary.
    Opt build (``opt=True``): stages merge into free capsules (invoke,
    value store and the first reads together; link and tail swing
    together), helping swings go through the no-notify slot instead of
    consuming a numbered CAS, one frame slot serves as both the tail and
    head snapshot, and frames are line-aligned.  The merged capsules are
    repeat-safe by the same argument the typed shapes automate: the
    value store is first-access-write, re-reads only narrow the branch,
    and the guarded link plus an idempotent swing tolerate replay.
    """

    def __init__(self, machine: Machine, nprocs: int, per_pid: int,
                 reserve: int = 0, durable: bool = False, opt: bool = False,
                 broken: bool = False) -> None:
        self.machine = machine
        self.nprocs = nprocs
        self.durable = durable
        self.opt = opt
        self.broken = broken
        self.heap = NodeHeap(machine, nprocs, per_pid, reserve,
                             recoverable=True, durable=durable)
        self.head = RCas(machine, nprocs, init=0, label="head",
                         durable=durable)
        self.tail = RCas(machine, nprocs, init=0, label="tail",
                         durable=durable)
        self.frames: dict[int, Frame] = {}
        self._stages: dict[int, dict[int, tuple]] = {}

    def _peek_head(self) -> int:
        return self.machine.peek(self.head.x).value

    def _poke_tail(self, node: int) -> None:
        self.machine.poke(self.tail.x, Triple(node, 0, 0))

    def _put_value(self, node: int, v):
        cell = self.heap.value_cell(node)
        yield ("store", cell, v)
        if self.durable:
            yield ("flush", cell)
            yield ("fence",)

    # -- worker construction ------------------------------------------

    def workers(self, plans: list[list[tuple]]) -> list:
        names = (("seq", "op", "t", "n", "last") if self.opt
                 else ("seq", "op", "t", "n", "h", "last"))
        inits = dict.fromkeys(names, 0)
        inits.update(seq=0, op=0, last=(0, None))
        stride = 4 if self.opt else 6
        factories = []
        for pid, plan in enumerate(plans):
            frame = Frame(self.machine, names, inits,
                          entry_pc=0 if plan else HALT,
                          label=f"queue-worker-{pid}",
                          line_aligned=self.opt)
            self.frames[pid] = frame
            table: dict[int, Any] = {}
            stages: dict[int, tuple] = {}
            k_enq = 0
            for k, (op, *args) in enumerate(plan):
                base = stride * k
                nxt = stride * (k + 1) if k + 1 < len(plan) else HALT
                if op == "enqueue":
                    node = self.heap.node(pid, k_enq)
                    k_enq += 1
                    block, marks = self._enqueue_block(k, args[0], node,
                                                       base, nxt)
                else:
                    block, marks = self._dequeue_block(k, base, nxt)
                table.update(block)
                stages.update(marks)
            self._stages[pid] = stages
            factories.append(self._worker(pid, frame, table, plan, stride))
        return factories

    def _enqueue_block(self, k: int, v, node: int, base: int, nxt: int):
        heap = self.heap
        opseq = k + 1
        link_pc = base + 1 if self.opt else base + 2
        help_pc = base + 2 if self.opt else base + 3

        def locate(ctx):
            t = (yield ("load", self.tail.x)).value
            n = (yield ("load", heap.next[t].x)).value
            if n == NULL:
                return link_pc, {"t": t}
            return help_pc, {"t": t, "n": n}

        if self.opt:
            def start(ctx):
                yield ("mark_invoke", "enqueue", self.label, (v, opseq))
                yield from self._put_value(node, v)
                return (yield from locate(ctx))

            def link_swing(ctx):
                ok = yield from ctx.cas(heap.next[ctx.vars["t"]], NULL, node)
                if not ok:
                    return base + 3, {}
                yield from cas_no_self_notify(ctx.pid, self.tail,
                                              ctx.vars["t"], node, 0)
                yield ("mark_respond", "enqueue", self.label, "ok")
                return nxt, {"op": k + 1, "last": (opseq, "ok")}

            def helper(ctx):
                yield from cas_no_self_notify(ctx.pid, self.tail,
                                              ctx.vars["t"], ctx.vars["n"], 0)
                return (yield from locate(ctx))

            table = {base: free(start), base + 1: free(link_swing),
                     base + 2: free(helper), base + 3: free(locate)}
            stages = {base: ("pre", k), base + 1: ("elink", k, node),
                      base + 2: ("pre", k), base + 3: ("pre", k)}
            return table, stages

        def prep(ctx):
            yield ("mark_invoke", "enqueue", self.label, (v, opseq))
            yield from self._put_value(node, v)
            return base + 1, {}

        def link(ctx):
            ok = yield from ctx.cas(heap.next[ctx.vars["t"]], NULL, node)
            if ok:
                return base + 4, {}
            return base + 1, {}

        def helper(ctx):
            yield from ctx.cas(self.tail, ctx.vars["t"], ctx.vars["n"])
            return base + 1, {}

        def swing(ctx):
            yield from ctx.cas(self.tail, ctx.vars["t"], node)
            yield ("mark_respond", "enqueue", self.label, "ok")
            return nxt, {"op": k + 1, "last": (opseq, "ok")}

        table = {base: single(prep), base + 1: read_only(locate),
                 base + 2: cas_read(link), base + 3: cas_read(helper),
                 base + 4: cas_read(swing)}
        stages = {base: ("pre", k), base + 1: ("pre", k),
                  base + 2: ("elink", k, node), base + 3: ("pre", k),
                  base + 4: ("eswing", k, node)}
        return table, stages

    def _dequeue_block(self, k: int, base: int, nxt: int):
        heap = self.heap
        opseq = k + 1
        hvar = "t" if self.opt else "h"

        def inspect(ctx):
            h = (yield ("load", self.head.x)).value
            t = (yield ("load", self.tail.x)).value
            n = (yield ("load", heap.next[h].x)).value
            if h == t:
                if n == NULL:
                    yield ("mark_respond", "dequeue", self.label, EMPTY)
                    return nxt, {"op": k + 1, "last": (opseq, EMPTY)}
                return base + 2, {"t": t, "n": n}
            return (base + 1 if self.opt else base + 3), {hvar: h, "n": n}

        def pop(ctx):
            ok = yield from ctx.cas(self.head, ctx.vars[hvar], ctx.vars["n"])
            if not ok:
                return (base + 3 if self.opt else base + 1), {}
            val = yield ("load", heap.value_cell(ctx.vars["n"]))
            yield ("mark_respond", "dequeue", self.label, val)
            return nxt, {"op": k + 1, "last": (opseq, val)}

        if self.opt:
            def start(ctx):
                yield ("mark_invoke", "dequeue", self.label, (opseq,))
                return (yield from inspect(ctx))

            def helper(ctx):
                yield from cas_no_self_notify(ctx.pid, self.tail,
                                              ctx.vars["t"], ctx.vars["n"], 0)
                return (yield from inspect(ctx))

            table = {base: free(start), base + 1: free(pop),
                     base + 2: free(helper), base + 3: free(inspect)}
            stages = {base: ("pre", k), base + 1: ("dpop", k),
                      base + 2: ("pre", k), base + 3: ("pre", k)}
            return table, stages

        def start(ctx):
            yield ("mark_invoke", "dequeue", self.label, (opseq,))
            return base + 1, {}

        def helper(ctx):
            yield from ctx.cas(self.tail, ctx.vars["t"], ctx.vars["n"])
            return base + 1, {}

        table = {base: read_only(start), base + 1: read_only(inspect),
                 base + 2: cas_read(helper), base + 3: cas_read(pop)}
        stages = {base: ("pre", k), base + 1: ("pre", k),
                  base + 2: ("pre", k), base + 3: ("dpop", k)}
        return table, stages

    # -- recovery -------------------------------------------------------

    def recover_op(self, pid: int):
        """Inspect this process's frame and the announcements: returns a
        :class:`DetectableResult` for its most recently invoked
        operation.  Callable with or without a preceding crash."""
        frame = self.frames[pid]
        pc, _, vars = yield from frame.restore()
        return (yield from self._detect(pid, pc, vars))

    def _detect(self, pid: int, pc: int, vars: dict):
        if self.broken:
            # the fixture forgets to look: everything seems repeatable
            if False:
                yield
            return DetectableResult(vars["op"] + 1, NOT_TAKEN)
        if pc == HALT:
            oseq, res = vars["last"]
            if oseq == 0:
                return DetectableResult(0, NOT_TAKEN)
            return DetectableResult(oseq, res)
        stage = self._stages[pid][pc]
        kind, k = stage[0], stage[1]
        opseq = k + 1
        if kind == "elink":
            obj = self.heap.next[vars["t"]]
            if (yield from check_recovery(obj, vars["seq"] + 1, pid)):
                return DetectableResult(opseq, "ok")
            return DetectableResult(opseq, NOT_TAKEN)
        if kind == "eswing":
            # reached only after the link landed
            return DetectableResult(opseq, "ok")
        if kind == "dpop":
            hvar = "t" if self.opt else "h"
            if (yield from check_recovery(self.head, vars["seq"] + 1, pid)):
                val = yield ("load", self.heap.value_cell(vars["n"]))
                return DetectableResult(opseq, val)
            return DetectableResult(opseq, NOT_TAKEN)
        return DetectableResult(opseq, NOT_TAKEN)

    def _worker(self, pid: int, frame: Frame, table: dict, plan: list,
                stride: int):
        def factory(_pid: int):
            return self._program(pid, frame, table, plan, stride)
        factory.frame = frame
        return factory

    def _program(self, pid: int, frame: Frame, table: dict, plan: list,
                 stride: int):
        from_crash = yield ("crashed",)
        if not from_crash:
            state = (frame.entry_pc, 0, dict(frame.inits), False)
            return (yield from run_capsules(pid, frame, table, state=state))
        pc, mask, vars = yield from frame.restore()
        yield ("mark_recover", "recover", self.label, ())
        rr = yield from self._detect(pid, pc, vars)
        if rr.value is NOT_TAKEN:
            yield ("mark_respond", "recover", self.label,
                   {"verdict": "repeatable", "seq": rr.seq})
            begin = stride * vars["op"] if pc != HALT else HALT
            state = (begin, mask, vars, True)
        else:
            yield ("mark_respond", "recover", self.label,
                   {"verdict": "taken", "response": rr.value, "seq": rr.seq})
            if pc == HALT or vars["op"] >= rr.seq:
                state = (pc, mask, vars, True)
            else:
                # the answered operation never committed its exit; skip
                # past it so the response is not produced twice
                k = rr.seq - 1
                nxt = stride * (k + 1) if k + 1 < len(plan) else HALT
                updates = {"op": k + 1, "last": (rr.seq, rr.value)}
                mask = yield from frame.boundary(mask, nxt, updates)
                vars = {**vars, **updates}
                state = (nxt, mask, vars, False)
        return (yield from run_capsules(pid, frame, table, state=state))


class NormalizedQueue(_QueueCommon):
    """The queue as a normalized structure: one boundary per retry-loop
    iteration.  Plans hold a single entry (the linearizing CAS); the
    tail swing is a helping step inside wrap-up, through the no-notify
    slot so the pending plan's announcement survives it.
    """

    def __init__(self, machine: Machine, nprocs: int, per_pid: int,
                 reserve: int = 0, durable: bool = False,
                 opt: bool = False) -> None:
        self.machine = machine
        self.nprocs = nprocs
        self.durable = durable
        self.opt = opt
        self.heap = NodeHeap(machine, nprocs, per_pid, reserve,
                             recoverable=True, durable=durable)
        self.head = RCas(machine, nprocs, init=0, label="head",
                         durable=durable)
        self.tail = RCas(machine, nprocs, init=0, label="tail",
                         durable=durable)
        self.objects = (self.head, self.tail, *self.heap.next)
        self.struct = NormalizedStruct(self.label, self.objects,
                                       self._generate, self._wrapup)
        self.frames: dict[int, Frame] = {}

    def _peek_head(self) -> int:
        return self.machine.peek(self.head.x).value

    def _poke_tail(self, node: int) -> None:
        self.machine.poke(self.tail.x, Triple(node, 0, 0))

    def _put_value(self, node: int, v):
        cell = self.heap.value_cell(node)
        yield ("store", cell, v)
        if self.durable:
            yield ("flush", cell)
            yield ("fence",)

    # -- the two repeat-safe phases -------------------------------------

    def _generate(self, pid: int, op: str, args: tuple):
        heap = self.heap
        if op == "enqueue":
            v, node = args
            yield from self._put_value(node, v)
            t = (yield ("load", self.tail.x)).value
            return [(2 + t, NULL, node)]
        h = (yield ("load", self.head.x)).value
        n = (yield ("load", heap.next[h].x)).value
        if n == NULL:
            return []
        return [(0, h, n)]

    def _wrapup(self, pid: int, op: str, args: tuple, plan: tuple, idx: int):
        heap = self.heap
        if op == "enqueue":
            i, _, node = plan[0]
            t = i - 2
            if idx == 1:
                yield from cas_no_self_notify(pid, self.tail, t, node, 0)
                return "ok"
            # link failed: the tail is behind; push it along and repeat
            n = (yield ("load", heap.next[t].x)).value
            if n != NULL:
                yield from cas_no_self_notify(pid, self.tail, t, n, 0)
            return RESTART
        if not plan:
            # planned nothing: answer empty only if it still looks empty
            h = (yield ("load", self.head.x)).value
            t = (yield ("load", self.tail.x)).value
            n = (yield ("load", heap.next[h].x)).value
            if n == NULL:
                return EMPTY
            if h == t:
                yield from cas_no_self_notify(pid, self.tail, t, n, 0)
            return RESTART
        _, _, n = plan[0]
        if idx == 1:
            return (yield ("load", heap.value_cell(n)))
        return RESTART

    # -- workers and recovery -------------------------------------------

    def workers(self, plans: list[list[tuple]]) -> list:
        shaped = []
        for plan in plans:
            out = []
            k_enq = 0
            for op, *args in plan:
                if op == "enqueue":
                    node = self.heap.node(len(shaped), k_enq)
                    k_enq += 1
                    out.append(("enqueue", (args[0], node)))
                else:
                    out.append(("dequeue", ()))
            shaped.append(out)
        factories = normalized_workers(self.machine, self.struct, shaped)
        for pid, fac in enumerate(factories):
            self.frames[pid] = fac.frame
        return factories

    def recover_op(self, pid: int):
        """Same contract as the general build's, read off the loop frame."""
        frame = self.frames[pid]
        pc, _, vars = yield from frame.restore()
        if pc == HALT:
            oseq, res = vars["last"]
            if oseq == 0:
                return DetectableResult(0, NOT_TAKEN)
            return DetectableResult(oseq, res)
        if pc == _ENTRY:
            return DetectableResult(1, NOT_TAKEN)
        opseq = vars["op"] + 1
        cl = vars["cl"]
        if not cl:
            return DetectableResult(opseq, NOT_TAKEN)
        i, _, b = cl[0]
        base = vars["seq"] - len(cl) + 1
        if (yield from check_recovery(self.objects[i], base, pid)):
            if i == 0:
                val = yield ("load", self.heap.value_cell(b))
                return DetectableResult(opseq, val)
            return DetectableResult(opseq, "ok")
        return DetectableResult(opseq, NOT_TAKEN)


# -- assembly ------------------------------------------------------------


def make_system(variant: str, mode: str, nprocs: int, per_pid: int,
                reserve: int = 0, line_words: int | None = None):
    """Machine, queue, and factory wrapper for a (variant, mode) pair.

    Returns ``(machine, queue, wrap)``; build workers as
    ``[wrap(f) for f in queue.workers(plans)]``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    shared = mode != MODE_PRIVATE
    if line_words is None:
        line_words = 16 if shared else 1
    opt = variant in (GENERAL_OPT, NORMALIZED_OPT)
    machine = Machine(nprocs, SHARED if shared else PRIVATE,
                      line_words=line_words, cas_fences=opt)
    durable = mode == MODE_MANUAL
    if variant == BASELINE:
        queue = BaselineQueue(machine, nprocs, per_pid, reserve)
    elif variant in (GENERAL, GENERAL_OPT, BROKEN_FIXTURE):
        queue = GeneralQueue(machine, nprocs, per_pid, reserve,
                             durable=durable, opt=opt,
                             broken=variant == BROKEN_FIXTURE)
    else:
        queue = NormalizedQueue(machine, nprocs, per_pid, reserve,
                                durable=durable, opt=opt)
    wrap = izraelevitz_wrap if mode == MODE_IZRAELEVITZ else _identity
    return machine, queue, wrap


def _identity(factory):
    return factory
