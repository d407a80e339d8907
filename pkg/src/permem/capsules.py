"""Checkpointed execution: frames, boundaries, and capsule programs.

A process's durable local state lives in a :class:`Frame`: two cells per
variable plus one commit word holding a validity mask and the program
counter.  A *boundary* writes each updated variable into its currently
invalid copy, then commits everything with a single store of the
mask/pc word.  A crash before the commit restores the old state in full,
a crash after it the new state in full; there is no partial mix.

Code between two boundaries is a *capsule*.  On restart a process reads
back the last committed frame and repeats the interrupted capsule, so a
capsule body must be safe to repeat:

* ``read_only`` capsules touch shared memory only through loads;
* ``cas_read`` capsules perform at most one shared CAS, before any other
  shared read, through :meth:`Ctx.cas`, which on a restarted run consults
  the recoverable-CAS recovery first and skips the CAS when its effect
  already landed;
* ``single`` capsules hold one shared instruction (the degenerate case:
  a boundary between every two instructions);
* ``free`` capsules get no shape checking and are used by staged
  constructions that carry their own repeat-safety argument.

Plain loads and private persistent stores are repeated bare.  The repeat
hazard left is reading a heap cell and later overwriting it in the same
capsule; :func:`detect_war_conflict` flags that pattern in a capsule's
access trace unless the capsule's first access to the cell is a write.

Capsule programs are tables mapping pc labels to :class:`Capsule`
entries.  :func:`run_capsules` drives a table: on a fresh start it
begins at the frame's entry state; after a crash it restores the frame
and re-enters the interrupted capsule with ``from_crash`` set.  Each
committed boundary also emits a zero-cost ``('note', 'boundary', pc)``
marker, which feeds the run counters.
"""

from __future__ import annotations

from typing import Any, Callable, NamedTuple

from .model import Machine, MaskPc, Payload, SHARED
from .rcas import check_recovery

HALT = -1
MAX_VARS = 62

READ_ONLY = "read-only"
CAS_READ = "cas-read"
SINGLE = "single"
FREE = "free"


class CapsuleShapeError(Exception):
    """A capsule body broke its kind's repeat-safety rules."""


class Capsule(NamedTuple):
    kind: str
    body: Callable  # body(ctx) -> generator returning (next_pc, updates)


def read_only(body: Callable) -> Capsule:
    return Capsule(READ_ONLY, body)


def cas_read(body: Callable) -> Capsule:
    return Capsule(CAS_READ, body)


def single(body: Callable) -> Capsule:
    return Capsule(SINGLE, body)


def free(body: Callable) -> Capsule:
    return Capsule(FREE, body)


class Frame:
    """Persistent frame for one process: duplicated variable slots plus a
    mask/pc commit word.

    Layout: ``[mask_pc, var0 copy A, var0 copy B, var1 copy A, ...]``.
    Bit k of the mask selects the valid copy of variable k (0 selects A).
    The frame is single-owner; only its process ever touches these cells.
    """

    def __init__(self, machine: Machine, names: tuple[str, ...],
                 inits: dict[str, Payload], entry_pc: int = 0,
                 label: str | None = None, line_aligned: bool = False) -> None:
        names = tuple(names)
        if len(names) > MAX_VARS:
            raise ValueError(
                f"frame holds {len(names)} variables; at most {MAX_VARS} fit "
                "one commit word (spill larger state to the heap)")
        unknown = set(inits) - set(names)
        if unknown:
            raise ValueError(f"inits name unknown variables: {sorted(unknown)}")
        self.machine = machine
        self.names = names
        self.index = {n: k for k, n in enumerate(names)}
        self.inits = {n: inits.get(n, 0) for n in names}
        self.entry_pc = entry_pc
        self.durable = machine.mode == SHARED
        cells: list[Payload] = [MaskPc(0, entry_pc)]
        for n in names:
            cells.extend((self.inits[n], self.inits[n]))
        self.base = machine.alloc_block(cells, align_line=line_aligned)
        self.label = label if label is not None else f"frame@{self.base}"

    def cell(self, k: int, sel: int) -> int:
        return self.base + 1 + 2 * k + sel

    # -- the two frame protocols ---------------------------------------

    def restore(self):
        """Read back the last committed state: (pc, mask, variable dict).

        Constant step count: one load for the commit word plus one per
        variable, regardless of how long the process has been running.
        """
        mp = yield ("load", self.base)
        vals: dict[str, Payload] = {}
        for k, name in enumerate(self.names):
            vals[name] = yield ("load", self.cell(k, (mp.mask >> k) & 1))
        return mp.pc, mp.mask, vals

    def boundary(self, mask: int, pc: int, updates: dict[str, Payload]):
        """Commit ``updates`` and the next capsule label; returns the new
        mask.  The single commit point is the mask/pc store: a crash on
        either side of it leaves a complete old or complete new state.

        In shared-cache mode the copies are flushed and fenced before the
        commit word, and the commit word after: two fences.  When every
        written cell shares the commit word's cache line, the line's
        write order alone guarantees the copies persist no later than
        the commit word, and the first fence is dropped.
        """
        new_mask = mask
        written: list[int] = []
        for name, val in updates.items():
            k = self.index.get(name)
            if k is None:
                raise ValueError(f"boundary update names unknown variable {name!r}")
            sel = 1 - ((mask >> k) & 1)
            cell = self.cell(k, sel)
            yield ("store", cell, val)
            written.append(cell)
            new_mask = (new_mask & ~(1 << k)) | (sel << k)
        commit = MaskPc(new_mask, pc)
        if self.durable:
            m = self.machine
            lines = {m.line_of(c) for c in written}
            if lines <= {m.line_of(self.base)}:
                yield ("store", self.base, commit)
                yield ("flush", self.base)
                yield ("fence",)
            else:
                for c in sorted(lines):
                    yield ("flush", c * m.line_words)
                yield ("fence",)
                yield ("store", self.base, commit)
                yield ("flush", self.base)
                yield ("fence",)
        else:
            yield ("store", self.base, commit)
        yield ("note", "boundary", pc)
        return new_mask

    # -- host-side inspection (tests and recovery analysis) -------------

    def peek_state(self, persisted: bool = True) -> tuple[int, dict[str, Payload]]:
        peek = self.machine.peek_persisted if persisted else self.machine.peek
        mp = peek(self.base)
        vals = {name: peek(self.cell(k, (mp.mask >> k) & 1))
                for k, name in enumerate(self.names)}
        return mp.pc, vals


class RestartBank:
    """Restart slot plus the preallocated frames it can name.

    Call/return linkage: entering a callee switches the slot to the
    callee's frame; returning switches it back.  Recovery loads the slot
    first and restores whichever frame it names.
    """

    def __init__(self, machine: Machine, frames: list[Frame],
                 current: int = 0) -> None:
        self.machine = machine
        self.frames = list(frames)
        self.durable = machine.mode == SHARED
        self.cell = machine.alloc(1, init=current)

    def switch(self, idx: int):
        if not 0 <= idx < len(self.frames):
            raise ValueError(f"no frame {idx} in this bank")
        yield ("store", self.cell, idx)
        if self.durable:
            yield ("flush", self.cell)
            yield ("fence",)

    def restore(self):
        """(frame index, pc, mask, vars) for the frame the slot names."""
        idx = yield ("load", self.cell)
        frame = self.frames[idx]
        pc, mask, vals = yield from frame.restore()
        return idx, pc, mask, vals


class Ctx:
    """Per-execution view handed to a capsule body.

    ``vars`` holds the values committed by the previous boundary (plus
    entry values on a fresh start).  ``seq`` is this capsule's sequence
    number, the same on every repetition.  ``from_crash`` is True when
    this execution repeats an interrupted capsule.
    """

    __slots__ = ("pid", "vars", "from_crash", "seq", "kind",
                 "_cas_calls", "_loads", "_steps", "_exempt", "trace")

    def __init__(self, pid: int, vars: dict, from_crash: bool, seq: int,
                 kind: str) -> None:
        self.pid = pid
        self.vars = vars
        self.from_crash = from_crash
        self.seq = seq
        self.kind = kind
        self._cas_calls = 0
        self._loads = 0
        self._steps = 0
        self._exempt = False
        self.trace: list[tuple[str, int]] = []

    # -- the guarded CAS -------------------------------------------------

    def cas(self, obj, exp: Any, new: Any):
        """The capsule's one shared CAS, through the crash guard.

        On a repeated run the recovery check tells whether the CAS
        numbered ``seq`` already took effect; if so it is not reissued.
        Raises :class:`CapsuleShapeError` when the capsule's kind does
        not admit this call here.
        """
        if self.kind == READ_ONLY:
            raise CapsuleShapeError("read-only capsule body issued a CAS")
        if self._cas_calls:
            raise CapsuleShapeError("second shared CAS in one capsule")
        if self.kind == CAS_READ and self._loads:
            raise CapsuleShapeError(
                "cas-read capsule read shared memory before its CAS; "
                "expected/new values must come from the previous capsule")
        self._cas_calls += 1
        self._steps += 1
        self._exempt = True
        try:
            if self.from_crash and (yield from check_recovery(obj, self.seq, self.pid)):
                return True
            return (yield from obj.cas(self.pid, exp, new, self.seq))
        finally:
            self._exempt = False

    # -- shape accounting (runner hook) ----------------------------------

    def observe(self, instr: tuple) -> None:
        if self._exempt:
            return
        op = instr[0]
        if op == "load":
            self._loads += 1
            self._steps += 1
            self.trace.append(("read", instr[1]))
        elif op == "store":
            if self.kind == READ_ONLY:
                raise CapsuleShapeError("read-only capsule body issued a store")
            self._steps += 1
            self.trace.append(("write", instr[1]))
        elif op == "cas":
            if self.kind in (READ_ONLY, CAS_READ, SINGLE):
                raise CapsuleShapeError(
                    f"{self.kind} capsule body issued a raw CAS; use ctx.cas")
            self._steps += 1
            self.trace.append(("write", instr[1]))
        else:
            return
        if self.kind == SINGLE and self._steps > 1:
            raise CapsuleShapeError("single-instruction capsule took a second step")


def detect_war_conflict(trace: list[tuple[str, int]]) -> list[tuple[int, int, int]]:
    """Write-after-read conflicts in one capsule's heap-access trace.

    ``trace`` is a list of ('read' | 'write', cell) records in program
    order.  A cell read and later written within the capsule makes the
    repeat non-idempotent, unless the capsule's first access to that
    cell is a write (the repeat then overwrites before it reads).
    Returns (cell, read position, write position) per offending cell.
    """
    first: dict[int, str] = {}
    first_read: dict[int, int] = {}
    out: list[tuple[int, int, int]] = []
    flagged: set[int] = set()
    for i, (op, wid) in enumerate(trace):
        if wid not in first:
            first[wid] = op
        if op == "read":
            first_read.setdefault(wid, i)
        elif (op == "write" and first[wid] == "read" and wid not in flagged):
            flagged.add(wid)
            out.append((wid, first_read[wid], i))
    return out


# -- capsule templates ----------------------------------------------------

def run_cas_read_capsule(ctx: Ctx, obj, exp: Any, new: Any,
                         body_after: Callable | None = None):
    """One CAS-Read capsule body: the guarded CAS, then any read suffix.

    ``body_after(ctx, ok)`` may issue reads and local work and return a
    dict of extra updates.  Returns (ok, extra updates).
    """
    ok = yield from ctx.cas(obj, exp, new)
    extra: dict = {}
    if body_after is not None:
        extra = (yield from body_after(ctx, ok)) or {}
    return ok, extra


def run_single_instruction_capsule(ctx: Ctx, action: tuple):
    """One instruction under the capsule rules.

    ``action`` is either a raw instruction descriptor (loads and private
    persistent stores are repeated bare; both are invisible to other
    processes) or ``('rcas', obj, exp, new)`` for a shared CAS, which
    goes through the crash guard.
    """
    if action[0] == "rcas":
        _, obj, exp, new = action
        return (yield from ctx.cas(obj, exp, new))
    return (yield action)


# -- the program runner ----------------------------------------------------

def _drive(ctx: Ctx, gen, report_war: bool):
    send = None
    while True:
        try:
            instr = gen.send(send)
        except StopIteration as stop:
            if report_war:
                for wid, r, w in detect_war_conflict(ctx.trace):
                    yield ("note", "war", (wid, r, w))
            return stop.value
        ctx.observe(instr)
        send = yield instr


def run_capsules(pid: int, frame: Frame, table: dict[int, Capsule],
                 state: tuple | None = None, result_var: str | None = None,
                 report_war: bool = False):
    """Drive a capsule table over a frame until the pc reaches ``HALT``.

    On a fresh start execution begins at the frame's entry state without
    touching memory; after a crash the frame is read back and the
    interrupted capsule repeats with ``from_crash`` set.  Callers that
    performed the restore themselves (recovery protocols that inspect
    the state first) pass it as ``state=(pc, mask, vars, from_crash)``.

    Each capsule body returns ``(next pc, updates)``; the boundary then
    commits the updates, the next capsule label, and this capsule's
    sequence number (bodies may override ``seq``, e.g. to reserve a
    window of numbers).  The final variable dict is returned, or just
    ``result_var`` from it.
    """
    has_seq = "seq" in frame.index
    if state is not None:
        pc, mask, vars, from_crash = state
        vars = dict(vars)
    else:
        from_crash = yield ("crashed",)
        if from_crash:
            pc, mask, vars = yield from frame.restore()
        else:
            pc, mask, vars = frame.entry_pc, 0, dict(frame.inits)
    while pc != HALT:
        cap = table[pc]
        seq = vars["seq"] + 1 if has_seq else 0
        ctx = Ctx(pid, vars, from_crash, seq, cap.kind)
        next_pc, updates = yield from _drive(ctx, cap.body(ctx), report_war)
        if has_seq and "seq" not in updates:
            updates = {**updates, "seq": seq}
        mask = yield from frame.boundary(mask, next_pc, updates)
        vars.update(updates)
        pc = next_pc
        from_crash = False
    return vars.get(result_var) if result_var is not None else vars


def capsule_factory(frame: Frame, table: dict[int, Capsule],
                    result_var: str | None = None,
                    report_war: bool = False):
    """A scheduler factory running one capsule table on one frame."""
    def factory(pid: int):
        return run_capsules(pid, frame, table, result_var=result_var,
                            report_war=report_war)
    return factory
