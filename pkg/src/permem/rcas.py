"""Recoverable compare-and-swap.

The cell ``x`` stores a :class:`~permem.model.Triple` (value, owner pid,
owner seq).  Next to it lives one announcement cell per process holding a
:class:`~permem.model.SeqFlag`.  A caller announces (seq, 0) before its
CAS; whoever later overwrites the value first *notifies* the previous
owner by flipping its announcement flag to 1.  ``recover`` reads the cell,
performs the same notify (covering the case where the caller's own value
still sits in ``x``), and returns the caller's announcement:

* (seq, True): the caller's CAS numbered seq took effect;
* (seq, False): the announced CAS numbered seq did not (yet) take effect,
  and no later CAS by this caller has either.

Sequence numbers are per process and must never decrease; a crashed
attempt is re-run with the *same* number, which is what makes
:func:`check_recovery` meaningful.  ``seq`` 0 is reserved for "no CAS
ever": announcements start at (0, False) and callers start at 1.

A failed CAS returns after its single read of ``x`` (that read is its
linearization point) and does not notify; only overwriting requires it.

With ``durable=True`` (shared cache mode) every mutation is flushed and
fenced so that a persisted value CAS implies persisted announcement and
notify; without this, a crash can persist the value but lose the
bookkeeping, and recovery would deny an effect other processes already
built on.

:class:`FrCas` is an alternate implementation behind the same interface:
no per-CAS announcement, a P-by-P seq matrix written on overwrite, and an
O(P) column scan on recovery.  It exists for benchmark comparisons.
"""

from __future__ import annotations

from typing import Any, NamedTuple

from .history import Ev
from .model import Machine, SeqFlag, Triple


class RecoverResult(NamedTuple):
    seq: int
    flag: bool


class RCas:
    """Recoverable CAS object; all operations are generator programs."""

    def __init__(self, machine: Machine, nprocs: int, init: Any = 0,
                 label: Any = None, base: int | None = None,
                 durable: bool = False) -> None:
        self.machine = machine
        self.nprocs = nprocs
        self.durable = durable
        if base is None:
            base = machine.alloc_block(
                [Triple(init, 0, 0)] + [SeqFlag(0, 0)] * (nprocs + 1))
        self.x = base
        self.abase = base + 1  # announcement of pid p lives at abase + p
        self.sink = self.abase + nprocs  # reserved no-notify slot
        self.label = label if label is not None else f"rcas@{base}"

    @classmethod
    def span(cls, nprocs: int) -> int:
        """Cells occupied: the value plus P+1 announcement slots."""
        return nprocs + 2

    # -- operations ------------------------------------------------------

    def read(self, pid: int):
        t = yield ("load", self.x)
        return t.value

    def cas(self, pid: int, a: Any, b: Any, seq: int):
        v, owner, oseq = yield ("load", self.x)
        if v != a:
            return False
        yield ("cas", self.abase + owner, SeqFlag(oseq, 0), SeqFlag(oseq, 1))
        yield ("store", self.abase + pid, SeqFlag(seq, 0))
        if self.durable:
            yield ("flush", self.abase + owner)
            yield ("flush", self.abase + pid)
            if not self.machine.cas_fences:
                yield ("fence",)
        ok = yield ("cas", self.x, Triple(a, owner, oseq), Triple(b, pid, seq))
        if self.durable:
            yield ("flush", self.x)
            yield ("fence",)
        return ok

    def recover(self, pid: int):
        v, owner, oseq = yield ("load", self.x)
        yield ("cas", self.abase + owner, SeqFlag(oseq, 0), SeqFlag(oseq, 1))
        if self.durable:
            yield ("flush", self.abase + owner)
            yield ("fence",)
        sf = yield ("load", self.abase + pid)
        return RecoverResult(sf.seq, bool(sf.flag))


def check_recovery(obj, seq: int, pid: int):
    """Did this process's CAS numbered ``seq`` take effect?

    Callable any number of times; sound as long as ``seq`` numbers follow
    the per-process discipline.
    """
    last, flag = yield from obj.recover(pid)
    return last >= seq and flag


def cas_no_self_notify(pid: int, obj: RCas, a: Any, b: Any, seq: int):
    """CAS that skips its own announcement and parks ownership on the
    reserved slot, so the caller's pending recoverable CAS (if any) keeps
    its announcement intact.  For helping and wrap-up CASes issued outside
    the caller's numbered sequence."""
    v, owner, oseq = yield ("load", obj.x)
    if v != a:
        return False
    yield ("cas", obj.abase + owner, SeqFlag(oseq, 0), SeqFlag(oseq, 1))
    if obj.durable:
        yield ("flush", obj.abase + owner)
        if not obj.machine.cas_fences:
            yield ("fence",)
    ok = yield ("cas", obj.x, Triple(a, owner, oseq), Triple(b, obj.nprocs, seq))
    if obj.durable:
        yield ("flush", obj.x)
        yield ("fence",)
    return ok


class FrCas:
    """Alternate recoverable CAS: P-by-P matrix, O(P) recovery scan.

    ``A[i][j]`` holds the seq of the last CAS by j that i overwrote.
    Recovery takes the column max (after recording the current cell's
    owner itself), so the flag of the result is always True and the seq
    is the caller's last successful CAS (0 when none).
    """

    NO_OWNER = -1

    def __init__(self, machine: Machine, nprocs: int, init: Any = 0,
                 label: Any = None, base: int | None = None,
                 durable: bool = False) -> None:
        self.machine = machine
        self.nprocs = nprocs
        self.durable = durable
        if base is None:
            base = machine.alloc_block(
                [Triple(init, self.NO_OWNER, 0)] + [0] * (nprocs * nprocs))
        self.x = base
        self.mbase = base + 1
        self.label = label if label is not None else f"frcas@{base}"

    @classmethod
    def span(cls, nprocs: int) -> int:
        return 1 + nprocs * nprocs

    def _cell(self, i: int, j: int) -> int:
        return self.mbase + i * self.nprocs + j

    def read(self, pid: int):
        t = yield ("load", self.x)
        return t.value

    def cas(self, pid: int, a: Any, b: Any, seq: int):
        v, owner, oseq = yield ("load", self.x)
        if v != a:
            return False
        if owner != self.NO_OWNER:
            yield ("store", self._cell(pid, owner), oseq)
            if self.durable:
                yield ("flush", self._cell(pid, owner))
                if not self.machine.cas_fences:
                    yield ("fence",)
        ok = yield ("cas", self.x, Triple(a, owner, oseq), Triple(b, pid, seq))
        if self.durable:
            yield ("flush", self.x)
            yield ("fence",)
        return ok

    def recover(self, pid: int):
        v, owner, oseq = yield ("load", self.x)
        if owner != self.NO_OWNER:
            yield ("store", self._cell(pid, owner), oseq)
            if self.durable:
                yield ("flush", self._cell(pid, owner))
                yield ("fence",)
        best = 0
        for j in range(self.nprocs):
            s = yield ("load", self._cell(j, pid))
            if s > best:
                best = s
        return RecoverResult(best, True)


# ---------------------------------------------------------------------------
# debug analyzers (pure functions over histories)


def aba_violations(history: list[Ev], obj: RCas, init_value: Any = None) -> list[tuple]:
    """Successful installs whose value the cell has already held.

    The algorithms here rely on value freshness (queue node ids are never
    reused); a revisit means the surrounding code broke that contract.
    """
    seen = set() if init_value is None else {init_value}
    out = []
    for ev in history:
        if ev.kind != "step" or ev.obj != obj.x:
            continue
        if ev.op == "load":
            seen.add(ev.ret.value)
        elif ev.op == "cas" and ev.ret:
            seen.add(ev.args[0].value)  # the witnessed old value
            new = ev.args[1].value
            if new in seen:
                out.append((ev.index, new))
            seen.add(new)
    return out


def seq_discipline_violations(history: list[Ev], obj: RCas) -> list[tuple]:
    """Announcement stores whose seq decreases for some process.

    Re-announcing an equal seq is legal (capsule replay); going backwards
    never is.
    """
    last: dict[int, int] = {}
    out = []
    for ev in history:
        if ev.kind != "step" or ev.op != "store":
            continue
        if not (obj.abase <= (ev.obj or -1) < obj.abase + obj.nprocs):
            continue
        pid = ev.obj - obj.abase
        seq = ev.args[0].seq
        if seq < last.get(pid, 0):
            out.append((ev.index, pid, seq, last[pid]))
        last[pid] = seq
    return out
