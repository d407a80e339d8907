"""Normalized retry-loop operations, one checkpoint per iteration.

A normalized operation runs as a loop: a *generate* phase plans a list
of CASes, a *CAS executor* applies them in order until one fails, and a
*wrap-up* phase interprets how far it got, either producing the
response or asking for another iteration.

Checkpointing each phase separately would cost several commits per
iteration.  Here each iteration is a single capsule, [executor, wrap-up,
markers, generate of the next plan], closed by one boundary.  That is
sound because the plan and its sequence-number window are committed
*before* the executor runs: a restarted capsule re-derives the
executor's progress through the per-entry recovery check instead of a
persisted index, skips entries that already landed, re-executes the
rest, and repeats the other two phases, which must be repeat-safe.

Three contracts bind the structure built on top:

* generate and wrap-up are repeat-safe: loads always, stores only where
  rewriting the same cell is harmless, and helping CASes only through
  the no-self-notify variant so the process's own pending announcement
  survives the help;
* wrap-up answers :data:`RESTART` only when the iteration had no
  effect the structure's specification can see;
* one plan never names the same object twice; an object's announcement
  slot holds a single sequence number per process, so a later entry's
  attempt would mask an earlier entry's outcome.  The executor rejects
  such plans outright.
"""

from __future__ import annotations

from typing import Any, Callable, NamedTuple

from .capsules import HALT, Frame, capsule_factory, free
from .model import Machine
from .rcas import check_recovery

_ENTRY = 0
_ITER = 1


class _Restart:
    __slots__ = ()

    def __repr__(self) -> str:
        return "RESTART"


RESTART = _Restart()


class NormalizedStruct(NamedTuple):
    """A normalized structure: its objects plus the two read-only phases.

    ``generate(pid, op, args)`` is a generator function returning the
    plan, a tuple of ``(object index, expected, new)`` triples;
    ``wrapup(pid, op, args, plan, idx)`` is a generator function
    returning the operation's response, or :data:`RESTART` to run
    another iteration.
    """

    label: Any
    objects: tuple
    generate: Callable
    wrapup: Callable


def cas_executor(pid: int, entries: list[tuple], seq_base: int,
                 from_crash: bool):
    """Apply ``entries`` = [(obj, expected, new), ...] in order, numbered
    from ``seq_base``; returns how many succeeded before the first
    failure.  On a restarted run the recovery check recognizes entries
    whose effect already landed and skips them.
    """
    if len({obj.x for obj, _, _ in entries}) != len(entries):
        raise ValueError("a CAS plan names the same object twice; "
                         "split the operation across iterations instead")
    idx = len(entries)
    for i, (obj, a, b) in enumerate(entries):
        seq = seq_base + i
        if from_crash and (yield from check_recovery(obj, seq, pid)):
            continue
        ok = yield from obj.cas(pid, a, b, seq)
        if not ok:
            idx = i
            break
    return idx


def normalized_workers(machine: Machine, struct: NormalizedStruct,
                       plans: list[list[tuple]]) -> list:
    """One capsule-program factory per process; ``plans[pid]`` lists
    ``(op, args)`` pairs run in order against the structure.

    Operation markers follow the recovery protocol: an operation cut by
    a crash is either reported taken, with its response carried on the
    recovery marker, or reissued under the same operation number.

    Each factory exposes its persistent frame as ``factory.frame``, and
    the frame keeps the last answered operation in its ``last`` variable
    as ``(opseq, response)``, so recovery inspection can still answer
    for an operation whose boundary already moved past it.
    """
    factories = []
    for pid, plan in enumerate(plans):
        frame = Frame(machine, ("op", "cl", "seq", "last"),
                      {"op": 0, "cl": (), "seq": 0, "last": (0, None)},
                      label=f"{struct.label}-worker-{pid}")
        table = {
            _ENTRY: free(_entry_body(struct, plan)),
            _ITER: free(_iter_body(struct, plan)),
        }
        fac = capsule_factory(frame, table)
        fac.frame = frame
        factories.append(fac)
    return factories


def _entry_body(struct: NormalizedStruct, plan: list[tuple]):
    def body(ctx):
        if not plan:
            if False:
                yield
            return HALT, {}
        if ctx.from_crash:
            # nothing can have executed before the first checkpoint, so
            # whatever was announced is reissued
            yield ("mark_recover", "recover", struct.label, ())
            yield ("mark_respond", "recover", struct.label,
                   {"verdict": "repeatable", "seq": 1})
        return (yield from _open_op(ctx, struct, plan, 0))
    return body


def _iter_body(struct: NormalizedStruct, plan: list[tuple]):
    def body(ctx):
        m = ctx.vars["op"]
        op, args = plan[m]
        cl = ctx.vars["cl"]
        entries = [(struct.objects[i], a, b) for i, a, b in cl]
        base = ctx.vars["seq"] - len(cl) + 1
        yield ("note", "iteration", m)
        if ctx.from_crash:
            yield ("mark_recover", "recover", struct.label, ())
            idx = yield from cas_executor(ctx.pid, entries, base, True)
            res = yield from struct.wrapup(ctx.pid, op, args, cl, idx)
            if res is RESTART:
                yield ("mark_respond", "recover", struct.label,
                       {"verdict": "repeatable", "seq": m + 1})
                return (yield from _open_op(ctx, struct, plan, m))
            yield ("mark_respond", "recover", struct.label,
                   {"verdict": "taken", "response": res, "seq": m + 1})
            return (yield from _advance(ctx, struct, plan, m, res))
        idx = yield from cas_executor(ctx.pid, entries, base, False)
        res = yield from struct.wrapup(ctx.pid, op, args, cl, idx)
        if res is RESTART:
            cl2 = yield from struct.generate(ctx.pid, op, args)
            _check_plan(struct, cl2)
            return _ITER, {"cl": tuple(cl2),
                           "seq": ctx.vars["seq"] + len(cl2)}
        yield ("mark_respond", op, struct.label, res)
        return (yield from _advance(ctx, struct, plan, m, res))
    return body


def _open_op(ctx, struct: NormalizedStruct, plan: list[tuple], m: int):
    """Invoke operation ``m`` and commit its first plan."""
    op, args = plan[m]
    yield ("mark_invoke", op, struct.label, (*args, m + 1))
    cl = yield from struct.generate(ctx.pid, op, args)
    _check_plan(struct, cl)
    return _ITER, {"op": m, "cl": tuple(cl),
                   "seq": ctx.vars["seq"] + len(cl)}


def _advance(ctx, struct: NormalizedStruct, plan: list[tuple], m: int, res):
    """Operation ``m`` is answered; open the next one or stop."""
    if m + 1 >= len(plan):
        if False:
            yield
        return HALT, {"last": (m + 1, res)}
    pc, updates = yield from _open_op(ctx, struct, plan, m + 1)
    updates["last"] = (m + 1, res)
    return pc, updates


def _check_plan(struct: NormalizedStruct, cl) -> None:
    for i, a, b in cl:
        if not 0 <= i < len(struct.objects):
            raise ValueError(f"plan entry names object {i}, "
                             f"structure has {len(struct.objects)}")
    if len({i for i, _, _ in cl}) != len(tuple(cl)):
        raise ValueError("a CAS plan names the same object twice; "
                         "split the operation across iterations instead")
