"""Ready-made workload programs for the checkers and the CLI.

These wire algorithm operations into full process programs: operation
markers around each call, the crash protocol (recover first, then stop or
resume), and the post-run annotation that turns raw recovery answers into
the structured verdicts the projection consumes.
"""

from __future__ import annotations

from typing import Any

from .capsules import HALT, Frame, capsule_factory, free
from .checker import AtomicCasSpec, Verdict, check_history, seq_last
from .history import Ev
from .model import Machine
from .rcas import RCas, RecoverResult


def rcas_factories(machine: Machine, obj, ops_per_pid: list[list[tuple]],
                   resume: bool = False) -> list:
    """One program per process, each running its list of (expected, new)
    recoverable CAS calls with seq = position + 1.

    After a crash the program recovers the object and either stops
    (``resume=False``, keeps exhaustive exploration small) or consults a
    persisted progress cell, skips the interrupted call if it took effect,
    reissues it with the same seq otherwise, and continues.
    """
    nprocs = len(ops_per_pid)
    progress = machine.alloc(nprocs, 0) if resume else None

    def make(pid: int):
        myops = ops_per_pid[pid]

        def factory(_pid, pid=pid):
            def gen():
                start = 0
                if (yield ("crashed",)):
                    yield ("mark_recover", "recover", obj.label, ())
                    last, flag = yield from obj.recover(pid)
                    yield ("mark_respond", "recover", obj.label,
                           {"last": last, "flag": bool(flag)})
                    if not resume:
                        return
                    start = yield ("load", progress + pid)
                    if start < len(myops) and last >= start + 1 and flag:
                        # interrupted call took effect; count it done
                        yield ("store", progress + pid, start + 1)
                        start += 1
                for i in range(start, len(myops)):
                    a, b = myops[i]
                    seq = i + 1
                    yield ("mark_invoke", "cas", obj.label, (a, b, seq))
                    ok = yield from obj.cas(pid, a, b, seq)
                    yield ("mark_respond", "cas", obj.label, ok)
                    if resume:
                        yield ("store", progress + pid, i + 1)
            return gen()
        return factory

    return [make(p) for p in range(nprocs)]


def annotate_recoveries(history: list[Ev]) -> list[Ev]:
    """Resolve raw recovery answers {last, flag} into projection verdicts.

    The interrupted call's seq comes from the history itself (the caller's
    dangling invocation); taken means the recovery proves that call took
    effect, and for a CAS a taken call's response is True.
    """
    out = list(history)
    for i, ev in enumerate(out):
        if ev.kind != "respond" or ev.op != "recover":
            continue
        if not isinstance(ev.ret, dict) or "verdict" in ev.ret or "flag" not in ev.ret:
            continue
        pid = ev.pid
        rec_pos = None
        for j in range(i - 1, -1, -1):
            if out[j].pid == pid and out[j].kind == "recover":
                rec_pos = j
                break
        dangling_seq = None
        if rec_pos is not None:
            open_resp = True
            for j in range(rec_pos - 1, -1, -1):
                e2 = out[j]
                if e2.pid != pid:
                    continue
                if e2.kind == "respond" and e2.op != "recover":
                    open_resp = False
                    break
                if e2.kind == "invoke":
                    if open_resp:
                        dangling_seq = e2.args[-1]
                    break
        last, flag = ev.ret["last"], ev.ret["flag"]
        if dangling_seq is not None and last >= dangling_seq and flag:
            verdict = {"verdict": "taken", "response": True, "seq": dangling_seq}
        elif dangling_seq is not None:
            verdict = {"verdict": "repeatable", "seq": dangling_seq}
        else:
            verdict = {"verdict": "taken", "response": None, "seq": last}
        out[i] = ev._replace(ret={**ev.ret, **verdict})
    return out


def rcas_history_verdict(history: list[Ev], init: Any = 0, **kw) -> Verdict:
    """Strict linearizability of one recoverable-CAS run against the
    atomic cell spec."""
    return check_history(annotate_recoveries(history), AtomicCasSpec(init),
                         mode="strict", seq_of=seq_last, **kw)


def capsule_cas_workers(machine: Machine, obj: RCas, plans: list[list[tuple]],
                        guarded: bool = True) -> list:
    """Factories that run one CAS per capsule, one capsule per planned op.

    ``plans[pid]`` is a list of ``(expected, new)`` pairs.  After a crash
    the capsule body consults the object's recovery answer: a taken op is
    skipped (the recovery marker carries the response), anything else is
    reissued under the same sequence number.  With ``guarded=False`` the
    body still emits recovery markers but fabricates a "nothing happened"
    answer and always reissues; this models a recovery routine that
    forgets completed operations and exists to give the checker something
    to catch.
    """
    factories = []
    for pid, ops in enumerate(plans):
        frame = Frame(machine, ("seq",), {"seq": 0},
                      label=f"cas-worker-{pid}")
        table = {}
        for k, (a, b) in enumerate(ops):
            nxt = k + 1 if k + 1 < len(ops) else HALT
            table[k] = free(_cas_capsule_body(obj, a, b, nxt, guarded))
        factories.append(capsule_factory(frame, table))
    return factories


def _cas_capsule_body(obj: RCas, a, b, nxt: int, guarded: bool):
    def body(ctx):
        if ctx.from_crash:
            yield ("mark_recover", "recover", obj.label, ())
            if guarded:
                rr = yield from obj.recover(ctx.pid)
            else:
                rr = RecoverResult(0, False)
            yield ("mark_respond", "recover", obj.label,
                   {"last": rr.seq, "flag": bool(rr.flag)})
            if rr.seq >= ctx.seq and rr.flag:
                # took effect before the crash; the annotated recovery
                # supplies the missing response, so don't respond again
                return nxt, {}
        yield ("mark_invoke", "cas", obj.label, (a, b, ctx.seq))
        ok = yield from obj.cas(ctx.pid, a, b, ctx.seq)
        yield ("mark_respond", "cas", obj.label, ok)
        return nxt, {}
    return body
