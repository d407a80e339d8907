"""An array of writable CAS objects built from load/CAS cells only.

Plain stores mix badly with CAS: a store can land between a reader's load
and its CAS and leave no trace for either side to detect.  This module
removes the mix entirely.  Each logical object keeps its value in one slot
of a shared pool, a pointer array says which slot is current, and a write
installs its value into a privately owned slot (a CAS that cannot fail)
before swinging the pointer.  Readers announce the slot they are about to
touch so that recycling steers around them, and recyclers resolve stalled
announcements themselves instead of waiting.

Layout, for ``nprocs`` processes and ``nobjs`` objects::

    slots    nobjs + 2 * nprocs**2 value cells
    ptr      nobjs slot indices, pairwise distinct
    ann      one Announcement(index, seq, help) per process
    status   one Status(pid, announced) per slot

Every process owns ``2 * nprocs`` slots at all times: one staged for its
next write, the rest split between a free list and a retired list.  A
successful pointer swing trades the staged slot for the displaced one.
When the free list runs dry the owner scans the announcement array once,
pins announced slots of its own by marking their status, keeps those
retired, and frees the rest.  At most ``nprocs`` slots can be pinned, so
the scan yields at least ``nprocs`` free slots and runs at most once per
``nprocs`` writes: writes cost amortized constant steps.

Single ownership is what lets the bookkeeping CASes assert success.  One
subtlety: a slot's status would keep its old owner's pid while the slot
is active, so a scanner could pin a slot it had long given away and race
the next owner's acquisition CAS.  The write path therefore clears the
status pid just before the swing that publishes the slot; active slots
always read ``Status(NOBODY, 0)``.

The per-process lists are volatile bookkeeping, not shared state, but
they live in machine cells (host-mutated, never instruction targets) so
that snapshot replay during exhaustive exploration restores them along
with memory.
"""

from __future__ import annotations

from typing import Any, Iterable, NamedTuple

from .history import Ev
from .model import Machine
from .rcas import RCas

NOBODY = -1

ROLES = frozenset(("slots", "ptr"))


class Announcement(NamedTuple):
    """One process's claim: an object index while ``help`` is set, the
    resolved slot index after."""

    index: int
    seq: int
    help: int


class Status(NamedTuple):
    pid: int  # owning process, NOBODY while the slot is active
    announced: int


_FRESH = Announcement(NOBODY, 0, 0)


class WritableCasArray:
    """``nobjs`` objects supporting read / write / cas over CAS cells.

    ``recoverable`` names the roles whose deciding CAS should go through
    a recoverable CAS object rather than a plain cell: ``"slots"`` for
    the per-slot value CAS, ``"ptr"`` for the pointer swing.  The
    bookkeeping cells (announcements, status) stay plain; all their
    CASes are single-writer by the ownership rules.
    """

    def __init__(self, machine: Machine, nprocs: int, nobjs: int,
                 init: Any = 0, recoverable: Iterable[str] = (),
                 label: Any = "wcas") -> None:
        bad = set(recoverable) - ROLES
        if bad:
            raise ValueError(f"unknown recoverable roles {sorted(bad)}; pick from {sorted(ROLES)}")
        self.machine = machine
        self.nprocs = nprocs
        self.nobjs = nobjs
        self.nslots = nobjs + 2 * nprocs * nprocs
        self.recoverable = frozenset(recoverable)
        self.label = label
        self._seq = [0] * nprocs  # per-process CAS numbering for the recoverable roles

        per = 2 * nprocs
        self._lo = len(machine.cells)
        if "slots" in self.recoverable:
            self.bbase = None
            self.slots = [RCas(machine, nprocs, init if i < nobjs else 0,
                               label=(label, "slot", i)) for i in range(self.nslots)]
        else:
            self.bbase = machine.alloc_block([init] * nobjs + [0] * (self.nslots - nobjs))
        if "ptr" in self.recoverable:
            self.pbase = None
            self.ptrs = [RCas(machine, nprocs, j, label=(label, "ptr", j))
                         for j in range(nobjs)]
        else:
            self.pbase = machine.alloc_block(list(range(nobjs)))
        self.abase = machine.alloc_block([_FRESH] * nprocs)
        self.sbase = machine.alloc_block(
            [Status(NOBODY, 0)] * nobjs
            + [Status(p, 0) for p in range(nprocs) for _ in range(per)])
        # host-mutated bookkeeping: (staged slot, free tuple, retired tuple,
        # recompute count) per process
        self.vbase = machine.alloc_block(
            [(nobjs + p * per, tuple(range(nobjs + p * per + 1, nobjs + (p + 1) * per)), (), 0)
             for p in range(nprocs)])
        self._hi = len(machine.cells)

    # -- bookkeeping, host access only ---------------------------------

    def _books(self, pid: int) -> tuple:
        return self.machine.cells[self.vbase + pid]

    def _set_books(self, pid: int, staged, free, retired, recomputes) -> None:
        self.machine.cells[self.vbase + pid] = (staged, tuple(free), tuple(retired), recomputes)

    def staged_slot(self, pid: int) -> int | None:
        return self._books(pid)[0]

    def free_slots(self, pid: int) -> tuple:
        return self._books(pid)[1]

    def retired_slots(self, pid: int) -> tuple:
        return self._books(pid)[2]

    def recomputes(self, pid: int) -> int:
        return self._books(pid)[3]

    def owned(self, pid: int) -> set[int]:
        staged, free, retired, _ = self._books(pid)
        out = set(free) | set(retired)
        if staged is not None:
            out.add(staged)
        return out

    def ptr_entries(self) -> list[int]:
        if self.pbase is None:
            return [self.machine.cells[o.x].value for o in self.ptrs]
        return [self.machine.cells[self.pbase + j] for j in range(self.nobjs)]

    def cell_range(self) -> tuple[int, int]:
        return self._lo, self._hi

    # -- cell access, role-dispatched -----------------------------------

    def _slot_read(self, pid: int, idx: int):
        if self.bbase is None:
            v = yield from self.slots[idx].read(pid)
            return v
        v = yield ("load", self.bbase + idx)
        return v

    def _slot_cas(self, pid: int, idx: int, old: Any, new: Any):
        if self.bbase is None:
            self._seq[pid] += 1
            ok = yield from self.slots[idx].cas(pid, old, new, self._seq[pid])
            return ok
        ok = yield ("cas", self.bbase + idx, old, new)
        return ok

    def _ptr_read(self, pid: int, j: int):
        if self.pbase is None:
            v = yield from self.ptrs[j].read(pid)
            return v
        v = yield ("load", self.pbase + j)
        return v

    def _ptr_cas(self, pid: int, j: int, old: int, new: int):
        if self.pbase is None:
            self._seq[pid] += 1
            ok = yield from self.ptrs[j].cas(pid, old, new, self._seq[pid])
            return ok
        ok = yield ("cas", self.pbase + j, old, new)
        return ok

    def _must(self, addr: int, expect: Any, new: Any):
        """A read-then-CAS pair whose CAS the ownership rules make safe."""
        ok = yield ("cas", addr, expect, new)
        if not ok:
            raise RuntimeError(f"contention on single-writer cell {addr}")

    def _check_obj(self, j: int) -> None:
        if not 0 <= j < self.nobjs:
            raise IndexError(f"object index {j} outside [0, {self.nobjs})")

    # -- operations ------------------------------------------------------

    def _locate(self, pid: int, j: int):
        """Find the slot currently backing object ``j``, announcing it.

        The announcement goes up with its help flag set.  Either this
        process resolves it with the pointer value it reads, or a
        recycler resolves it first with a fresher one; both leave a slot
        index behind, so the final load is authoritative either way.
        """
        a = yield ("load", self.abase + pid)
        claim = Announcement(j, a.seq + 1, 1)
        yield from self._must(self.abase + pid, a, claim)
        cur = yield from self._ptr_read(pid, j)
        yield ("cas", self.abase + pid, claim, Announcement(cur, claim.seq, 0))
        a = yield ("load", self.abase + pid)
        return a.index

    def read(self, pid: int, j: int):
        self._check_obj(j)
        idx = yield from self._locate(pid, j)
        v = yield from self._slot_read(pid, idx)
        return v

    def cas_obj(self, pid: int, j: int, old: Any, new: Any):
        self._check_obj(j)
        idx = yield from self._locate(pid, j)
        ok = yield from self._slot_cas(pid, idx, old, new)
        return ok

    def write(self, pid: int, j: int, v: Any):
        """Install ``v`` in the staged slot, then swing the pointer.

        A failed swing means another write landed in the window; this one
        orders itself just before it and returns, keeping its staged slot
        for the next attempt.
        """
        self._check_obj(j)
        staged, free, retired, rec = self._books(pid)
        yield ("note", "install", (pid, staged, j))
        cur = yield from self._slot_read(pid, staged)
        ok = yield from self._slot_cas(pid, staged, cur, v)
        if not ok:
            raise RuntimeError(f"contention on staged slot {staged}")
        s = yield ("load", self.sbase + staged)
        yield from self._must(self.sbase + staged, s, Status(NOBODY, 0))
        old = yield from self._ptr_read(pid, j)
        ok = yield from self._ptr_cas(pid, j, old, staged)
        if ok:
            self._set_books(pid, None, free, retired, rec)
            fresh = yield from self.recycle(pid, old)
            staged2, free2, retired2, rec2 = self._books(pid)
            self._set_books(pid, fresh, free2, retired2, rec2)
        return "ok"

    def recycle(self, pid: int, old_slot: int):
        """Retire a freshly displaced slot and hand back a free one.

        When the free list is empty, one pass over the announcement array
        rebuilds it: raised announcements get resolved (helping the
        stalled reader), announced slots of ours get their status marked
        and stay retired, everything else retired goes free, and the
        marks come off again.  At least ``nprocs`` slots come back free,
        which bounds how often the pass can run.
        """
        staged, free, retired, rec = self._books(pid)
        retired = retired + (old_slot,)
        self._set_books(pid, staged, free, retired, rec)
        s = yield ("load", self.sbase + old_slot)
        yield from self._must(self.sbase + old_slot, s, Status(pid, 0))
        if not free:
            pinned: list[int] = []
            for q in range(self.nprocs):
                a = yield ("load", self.abase + q)
                if a.help:
                    cur = yield from self._ptr_read(pid, a.index)
                    yield ("cas", self.abase + q, a, Announcement(cur, a.seq, 0))
                    a = yield ("load", self.abase + q)
                idx = a.index
                if not a.help and idx >= 0:
                    s = yield ("load", self.sbase + idx)
                    if s.pid == pid and not s.announced:
                        yield from self._must(self.sbase + idx, s, Status(pid, 1))
                        pinned.append(idx)
            keep: list[int] = []
            freed: list[int] = []
            for slot in retired:
                s = yield ("load", self.sbase + slot)
                (keep if s.announced else freed).append(slot)
            staged, free, _, rec = self._books(pid)
            self._set_books(pid, staged, free + tuple(freed), keep, rec + 1)
            for idx in pinned:
                s = yield ("load", self.sbase + idx)
                yield from self._must(self.sbase + idx, s, Status(pid, 0))
        staged, free, retired, rec = self._books(pid)
        if not free:
            raise RuntimeError("no free slot after a recompute; the ownership bound is broken")
        self._set_books(pid, staged, free[:-1], retired, rec)
        return free[-1]

    # -- worker programs --------------------------------------------------

    def workers(self, plans: list[list[tuple]]) -> list:
        """One marker-emitting program per plan; plan steps are
        ``("read", j)``, ``("write", j, v)`` or ``("cas", j, old, new)``."""
        return [self._worker(pid, plan) for pid, plan in enumerate(plans)]

    def _worker(self, pid: int, plan: list[tuple]):
        def factory(_pid: int):
            return self._program(pid, plan)
        return factory

    def _program(self, pid: int, plan: list[tuple]):
        for op, *args in plan:
            yield ("mark_invoke", op, self.label, tuple(args))
            if op == "read":
                ret = yield from self.read(pid, args[0])
            elif op == "write":
                ret = yield from self.write(pid, args[0], args[1])
            elif op == "cas":
                ret = yield from self.cas_obj(pid, args[0], args[1], args[2])
            else:
                raise ValueError(f"unknown plan op {op!r}")
            yield ("mark_respond", op, self.label, ret)

    # -- invariant probes --------------------------------------------------

    def partition_violations(self) -> list[str]:
        """Check, against the current volatile state, that the active
        slots and the per-process holdings partition the pool."""
        out: list[str] = []
        active = self.ptr_entries()
        if len(set(active)) != self.nobjs:
            out.append(f"pointer entries collide: {active}")
        claim: dict[int, Any] = {slot: "active" for slot in active}
        for pid in range(self.nprocs):
            mine = self.owned(pid)
            if len(mine) != 2 * self.nprocs:
                out.append(f"process {pid} holds {len(mine)} slots, expected {2 * self.nprocs}")
            for slot in mine:
                if slot in claim:
                    out.append(f"slot {slot} held by {pid} and by {claim[slot]}")
                claim[slot] = pid
        uncovered = [s for s in range(self.nslots) if s not in claim]
        if uncovered:
            out.append(f"slots {uncovered} belong to nobody")
        return out


# -- history validators ----------------------------------------------------


def array_store_steps(history: Iterable[Ev], array: WritableCasArray) -> list[Ev]:
    """Plain store steps into the array's cells; the construction issues
    none, which is the point of it."""
    lo, hi = array.cell_range()
    return [ev for ev in history
            if ev.kind == "step" and ev.op == "store"
            and ev.obj is not None and lo <= ev.obj < hi]


def _replay(history: Iterable[Ev], array: WritableCasArray):
    """Walk a history, tracking pointer entries and slot ownership.

    Yields ``(ev, ptr, owner)`` after applying each successful pointer
    swing and at each install note.  Plain pointer role only: the replay
    decodes raw CAS steps.
    """
    if array.pbase is None:
        raise ValueError("history replay needs the plain pointer role")
    per = 2 * array.nprocs
    owner: dict[int, int] = {array.nobjs + i: (i // per) for i in range(2 * array.nprocs * array.nprocs)}
    ptr = list(range(array.nobjs))
    for ev in history:
        if ev.kind == "note" and ev.op == "install":
            yield ev, ptr, owner
        elif (ev.kind == "step" and ev.op == "cas" and ev.ret
                and array.pbase <= (ev.obj or -1) < array.pbase + array.nobjs):
            old, new = ev.args
            ptr[ev.obj - array.pbase] = new
            owner[old] = ev.pid
            owner.pop(new, None)
            yield ev, ptr, owner


def disjointness_violations(history: Iterable[Ev], array: WritableCasArray) -> list[tuple]:
    """Pointer entries that collide at any point of the history."""
    bad = []
    for ev, ptr, _ in _replay(history, array):
        if ev.kind == "step" and len(set(ptr)) != array.nobjs:
            bad.append((ev.index, tuple(ptr)))
    return bad


def install_violations(history: Iterable[Ev], array: WritableCasArray) -> list[tuple]:
    """Install notes whose target slot was active or not the installer's.

    Together with :func:`array_store_steps` being empty this is the
    no-race check: value installs only ever land on slots that nothing
    else can be operating on.
    """
    bad = []
    for ev, ptr, owner in _replay(history, array):
        if ev.kind != "note":
            continue
        pid, slot, j = ev.args
        if owner.get(slot) != pid:
            bad.append((ev.index, f"process {pid} installs into slot {slot} owned by {owner.get(slot)}"))
        if slot in ptr:
            bad.append((ev.index, f"process {pid} installs into active slot {slot}"))
    return bad
