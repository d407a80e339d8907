"""History checkers: admissibility, crash projection, linearizability, locality.

The pipeline for a crash-prone history is::

    check_admissible(h)          structural rules for crashes and recoveries
    project(h)                   rewrite recoveries into a crash-free history
    check_linearizable(p, spec)  brute-force search against a sequential spec

``project`` follows the composition construction for failure-recovery
histories: a recovery that reports its process's interrupted operation as
*taken* materializes the missing response right after the recovery's own
position; one that reports it *repeatable* erases the dangling invocation
(and its response, if one exists).  Recovery and crash events then drop
out.  Composability (locality) of this construction is what
:func:`check_locality` probes.

Operations that were pending at a crash and never got a recovery verdict
stay pending.  In ``strict`` mode they may linearize before their crash or
never; in ``durable`` mode they may linearize anywhere after invocation or
never.

Sequence-number conventions: harnesses in this package put an operation's
sequence number *last* in the invoke args and pass ``seq_of=seq_last``
to the admissibility checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .history import SYSTEM, Ev

TAKEN = "taken"
REPEATABLE = "repeatable"

OP_KINDS = frozenset(("invoke", "respond", "recover", "crash"))


def seq_last(ev: Ev) -> int | None:
    """Default sequence extractor: last element of the invoke args."""
    if ev.args:
        s = ev.args[-1]
        if isinstance(s, int):
            return s
    return None


@dataclass
class Verdict:
    ok: bool | None  # True pass, False fail, None inconclusive
    kind: str  # 'pass' | 'fail' | 'inconclusive'
    reason: str = ""
    witness: list = field(default_factory=list)

    def __bool__(self) -> bool:  # pragma: no cover - convenience
        return self.ok is True


def op_history(history: Iterable[Ev]) -> list[Ev]:
    """Drop steps and notes; keep operation-level events in order."""
    return [ev for ev in history if ev.kind in OP_KINDS]


# ---------------------------------------------------------------------------
# admissibility


def check_admissible(history: Iterable[Ev], seq_of: Callable[[Ev], int | None] | None = None) -> Verdict:
    """Structural rules for failure-recovery histories.

    1. Per process: invocations and responses alternate; a crash may cut an
       invocation short.
    2. Per process and object: sequence numbers of non-recovery invocations
       never decrease (checked only when ``seq_of`` is given).  A recovery
       verdict naming operation ``s`` rewinds the floor to ``s``, because a
       crash can wipe work the process had marked but never committed past
       a checkpoint; the replay then restates numbers the wiped attempt had
       already passed.
    3. After a crash interrupts an operation on an object, the process must
       run that object's recovery before invoking anything else on it.
    """
    errors: list[str] = []
    open_op: dict[int, Ev] = {}
    open_recover: dict[int, Ev] = {}
    needs_recovery: dict[int, set] = {}
    last_seq: dict[tuple, int] = {}

    for pos, ev in enumerate(history):
        if ev.kind not in OP_KINDS:
            continue
        if ev.kind == "crash":
            pids = [ev.pid] if ev.pid != SYSTEM else list(open_op) + [p for p in open_recover if p not in open_op]
            for pid in set(pids):
                cut = open_op.pop(pid, None)
                if cut is not None:
                    needs_recovery.setdefault(pid, set()).add(cut.obj)
                open_recover.pop(pid, None)
            continue
        pid = ev.pid
        if ev.kind == "invoke":
            if pid in open_op or pid in open_recover:
                errors.append(f"@{pos}: pid {pid} invokes {ev.op} with an operation still open")
            if ev.obj in needs_recovery.get(pid, ()):
                errors.append(f"@{pos}: pid {pid} invokes {ev.op} on {ev.obj!r} before recovering it")
            open_op[pid] = ev
            if seq_of is not None:
                s = seq_of(ev)
                if s is not None:
                    key = (pid, ev.obj)
                    if key in last_seq and s < last_seq[key]:
                        errors.append(f"@{pos}: pid {pid} seq {s} decreases (last {last_seq[key]}) on {ev.obj!r}")
                    last_seq[key] = s
        elif ev.kind == "recover":
            if pid in open_op or pid in open_recover:
                errors.append(f"@{pos}: pid {pid} starts recovery with an operation still open")
            open_recover[pid] = ev
        else:  # respond
            if pid in open_recover:
                rec = open_recover.pop(pid)
                if rec.op != ev.op:
                    errors.append(f"@{pos}: pid {pid} recovery respond {ev.op} mismatches {rec.op}")
                needs_recovery.get(pid, set()).discard(ev.obj)
                if seq_of is not None and isinstance(ev.ret, dict):
                    s = ev.ret.get("seq")
                    if ev.ret.get("verdict") is not None and isinstance(s, int):
                        floor = s - 1 if ev.ret["verdict"] == REPEATABLE else s
                        key = (pid, ev.obj)
                        if key in last_seq and floor < last_seq[key]:
                            last_seq[key] = floor
            elif pid in open_op:
                inv = open_op.pop(pid)
                if inv.op != ev.op or inv.obj != ev.obj:
                    errors.append(f"@{pos}: pid {pid} respond {ev.op}/{ev.obj!r} mismatches open {inv.op}/{inv.obj!r}")
            else:
                errors.append(f"@{pos}: pid {pid} responds {ev.op} with nothing open")
    if errors:
        return Verdict(False, "fail", "; ".join(errors))
    return Verdict(True, "pass")


# ---------------------------------------------------------------------------
# projection


def _recovery_verdict(ret: Any) -> tuple[str, Any] | None:
    if isinstance(ret, dict) and "verdict" in ret:
        return ret["verdict"], ret.get("response")
    return None


def project(history: Iterable[Ev], keep_crashes: bool = False) -> tuple[Verdict, list[Ev]]:
    """Rewrite a failure-recovery history into an ordinary one.

    Returns (verdict, projected).  The verdict fails only when a recovery's
    answer contradicts the history (a recorded response that mismatches a
    *taken* answer).  Recoveries whose own response never arrived (the
    process crashed again) simply vanish; the next recovery covers them.
    """
    evs = op_history(history)
    alive = [True] * len(evs)
    inserts: dict[int, list[Ev]] = {}
    resolved: dict[int, Any] = {}  # target invocation -> response already added
    errors: list[str] = []

    # match each recover to its respond (same pid, first respond after it
    # with no intervening invoke/recover by that pid)
    for i, ev in enumerate(evs):
        if ev.kind != "recover":
            continue
        alive[i] = False
        verdict = None
        resp_pos = None
        for j in range(i + 1, len(evs)):
            e2 = evs[j]
            if e2.kind == "crash" and (e2.pid == ev.pid or e2.pid == SYSTEM):
                break
            if e2.pid != ev.pid:
                continue
            if e2.kind == "respond" and e2.op == ev.op:
                resp_pos = j
                verdict = _recovery_verdict(e2.ret)
                break
            if e2.kind in ("invoke", "recover"):
                break
        if resp_pos is None:
            continue  # recovery itself interrupted; drop its invocation
        alive[resp_pos] = False
        if verdict is None:
            continue  # no structured verdict: recovery is pure observation
        answer, response = verdict

        # the dangling candidate: the last invocation by this pid on this
        # object before the recovery, in original order.  When the verdict
        # names a sequence number, only an invocation carrying that number
        # in its final argument qualifies; a verdict about an operation
        # whose invocation never reached the record resolves nothing.
        want = evs[resp_pos].ret.get("seq")
        target = None
        for j in range(i - 1, -1, -1):
            e2 = evs[j]
            if e2.pid == ev.pid and e2.kind == "invoke" and e2.obj == ev.obj:
                if want is not None and (not e2.args or e2.args[-1] != want):
                    continue
                target = j
                break
        if target is None or not alive[target]:
            continue  # nothing left to resolve; vacuous recovery
        # find its response, if any
        t_resp = None
        for j in range(target + 1, len(evs)):
            e2 = evs[j]
            if e2.pid == ev.pid and alive[j]:
                if e2.kind == "respond" and e2.op == evs[target].op:
                    t_resp = j
                break

        if answer == TAKEN:
            if t_resp is not None:
                if evs[t_resp].ret != response and response is not None:
                    errors.append(
                        f"recovery of pid {ev.pid} reports {response!r} but history recorded {evs[t_resp].ret!r}")
                continue
            if target in resolved:
                # a second crash replayed the same recovery; the answers
                # must agree, and one response is already in place
                if resolved[target] != response and response is not None:
                    errors.append(
                        f"recoveries of pid {ev.pid} disagree: {resolved[target]!r} then {response!r}")
                continue
            tgt = evs[target]
            resolved[target] = response
            inserts.setdefault(resp_pos, []).append(
                Ev("respond", ev.pid, tgt.op, tgt.obj, None, response, evs[resp_pos].index))
        elif answer == REPEATABLE:
            if target in resolved:
                errors.append(
                    f"recoveries of pid {ev.pid} disagree: taken then repeatable")
                continue
            if t_resp is not None:
                # erase both; legal only for operations whose effect is
                # invisible, which downstream linearizability will judge
                alive[t_resp] = False
            alive[target] = False

    out: list[Ev] = []
    for i, ev in enumerate(evs):
        if alive[i]:
            if ev.kind == "crash" and not keep_crashes:
                pass
            else:
                out.append(ev)
        for extra in inserts.get(i, ()):
            out.append(extra)
    if errors:
        return Verdict(False, "fail", "; ".join(errors)), out
    return Verdict(True, "pass"), out


# ---------------------------------------------------------------------------
# linearizability


@dataclass
class OpRec:
    pid: int
    op: str
    obj: Any
    args: Any
    ret: Any
    inv: int
    res: int | None
    deadline: int | None = None


def extract_ops(history: Iterable[Ev], mode: str = "strict") -> list[OpRec]:
    """Operation records from an op-level history (crashes set deadlines)."""
    evs = list(history)
    ops: list[OpRec] = []
    open_by_pid: dict[int, OpRec] = {}
    for pos, ev in enumerate(evs):
        if ev.kind == "invoke":
            rec = OpRec(ev.pid, ev.op, ev.obj, ev.args, None, pos, None)
            ops.append(rec)
            open_by_pid[ev.pid] = rec
        elif ev.kind == "respond":
            rec = open_by_pid.pop(ev.pid, None)
            if rec is not None:
                rec.ret = ev.ret
                rec.res = pos
                # A respond after a crash means recovery finished the op
                # (projection inserts one for taken verdicts); the op then
                # completed normally and the crash cutoff no longer applies.
                rec.deadline = None
        elif ev.kind == "crash":
            pids = [ev.pid] if ev.pid != SYSTEM else list(open_by_pid)
            for pid in pids:
                rec = open_by_pid.get(pid)
                if rec is not None and mode == "strict":
                    rec.deadline = pos
    return ops


_INF = float("inf")


def check_linearizable(history: Iterable[Ev], spec, mode: str = "strict",
                       max_ops: int = 16, node_cap: int = 4_000_000) -> Verdict:
    """Brute-force linearizability of an op-level history against a spec.

    ``spec`` provides ``initial()`` and ``apply(state, op) -> (state, ret)``
    with hashable states and deterministic returns.  Completed operations
    must reproduce their recorded return values; pending operations may
    linearize (with any return) or be dropped; in strict mode a pending
    operation interrupted by a crash must linearize before that crash.
    """
    ops = extract_ops(history, mode=mode)
    n = len(ops)
    if n > max_ops:
        return Verdict(None, "inconclusive", f"{n} operations exceed max_ops={max_ops}")
    if n == 0:
        return Verdict(True, "pass")

    # effective response position for precedence: completed ops use their
    # response; pending ops block nothing (or nothing past their deadline)
    eff_res = []
    for o in ops:
        if o.res is not None:
            eff_res.append(o.res)
        elif o.deadline is not None:
            eff_res.append(o.deadline)
        else:
            eff_res.append(_INF)

    completed_mask = 0
    for i, o in enumerate(ops):
        if o.res is not None:
            completed_mask |= 1 << i

    seen: set = set()
    witness: list[tuple] = []
    nodes = 0
    full_mask = (1 << n) - 1

    def search(remaining: int, state: Any) -> bool:
        nonlocal nodes
        if remaining & completed_mask == 0:
            return True
        key = (remaining, state)
        if key in seen:
            return False
        nodes += 1
        if nodes > node_cap:
            raise _CapHit()
        ids = [i for i in range(n) if remaining >> i & 1]
        for i in ids:
            o = ops[i]
            blocked = any(eff_res[j] < o.inv for j in ids if j != i)
            if not blocked:
                state2, ret = spec.apply(state, o)
                if o.res is None or ret == o.ret:
                    witness.append((o.pid, o.op, o.args, ret))
                    if search(remaining & ~(1 << i), state2):
                        return True
                    witness.pop()
            if o.res is None:
                # drop branch: the pending op never takes effect
                if search(remaining & ~(1 << i), state):
                    return True
        seen.add(key)
        return False

    try:
        if search(full_mask, spec.initial()):
            return Verdict(True, "pass", witness=list(witness))
        return Verdict(False, "fail", "no linearization reproduces the recorded responses")
    except _CapHit:
        return Verdict(None, "inconclusive", f"search exceeded node_cap={node_cap}")


class _CapHit(Exception):
    pass


def check_history(history: Iterable[Ev], spec, mode: str = "strict",
                  seq_of: Callable[[Ev], int | None] | None = None,
                  max_ops: int = 16, node_cap: int = 4_000_000) -> Verdict:
    """Admissibility, projection and linearizability in one call."""
    adm = check_admissible(history, seq_of=seq_of)
    if not adm.ok:
        return Verdict(False, "fail", "inadmissible: " + adm.reason)
    pv, projected = project(history, keep_crashes=True)
    if not pv.ok:
        return Verdict(False, "fail", "projection impossible: " + pv.reason)
    return check_linearizable(projected, spec, mode=mode, max_ops=max_ops, node_cap=node_cap)


# ---------------------------------------------------------------------------
# locality


def check_locality(history: Iterable[Ev], specs: dict, mode: str = "strict",
                   seq_of: Callable[[Ev], int | None] | None = None,
                   max_ops: int = 20, node_cap: int = 8_000_000) -> Verdict:
    """Composability probe: per-object verdicts vs the whole history.

    A counterexample to locality would be: every per-object subhistory
    passes, the combined history fails.  Returns pass when the combined
    check agrees with the conjunction of the parts.
    """
    evs = op_history(history)
    per_object: dict[Any, Verdict] = {}
    for obj, spec in specs.items():
        sub = [ev for ev in evs if ev.kind == "crash" or ev.obj == obj]
        per_object[obj] = check_history(sub, spec, mode=mode, seq_of=seq_of,
                                        max_ops=max_ops, node_cap=node_cap)
    combined = check_history(evs, CombinedSpec(specs), mode=mode, seq_of=seq_of,
                             max_ops=max_ops, node_cap=node_cap)
    parts_ok = all(v.ok for v in per_object.values())
    if None in (combined.ok, *(v.ok for v in per_object.values())):
        return Verdict(None, "inconclusive", "a component check was inconclusive")
    if parts_ok and combined.ok is False:
        return Verdict(False, "fail",
                       "locality counterexample: all per-object checks pass, combined fails")
    return Verdict(True, "pass",
                   reason="consistent" if parts_ok == combined.ok else "combined and parts both fail" if not parts_ok else "")


# ---------------------------------------------------------------------------
# sequential specifications


class AtomicCasSpec:
    """One cell with read / cas; cas args are (expected, new[, seq])."""

    def __init__(self, init: Any = 0):
        self.init = init

    def initial(self):
        return self.init

    def apply(self, state, op: OpRec):
        if op.op == "read":
            return state, state
        if op.op == "cas":
            a, b = op.args[0], op.args[1]
            if state == a:
                return b, True
            return state, False
        if op.op == "write":
            return op.args[0], "ok"
        raise ValueError(f"AtomicCasSpec: unknown op {op.op!r}")


EMPTY = "empty"


class FifoQueueSpec:
    """Unbounded FIFO queue; enqueue args (v[, seq]), dequeue args ([seq])."""

    def initial(self):
        return ()

    def apply(self, state, op: OpRec):
        if op.op == "enqueue":
            return state + (op.args[0],), "ok"
        if op.op == "dequeue":
            if not state:
                return state, EMPTY
            return state[1:], state[0]
        raise ValueError(f"FifoQueueSpec: unknown op {op.op!r}")


class RegisterArraySpec:
    """M CAS-able cells; ops carry the index first: read (j,), cas (j, old,
    new[, seq]), write (j, v[, seq])."""

    def __init__(self, m: int, init: Any = 0):
        self.m = m
        self.init = init

    def initial(self):
        return (self.init,) * self.m

    def apply(self, state, op: OpRec):
        j = op.args[0]
        if op.op == "read":
            return state, state[j]
        if op.op == "cas":
            old, new = op.args[1], op.args[2]
            if state[j] == old:
                return state[:j] + (new,) + state[j + 1:], True
            return state, False
        if op.op == "write":
            return state[:j] + (op.args[1],) + state[j + 1:], "ok"
        raise ValueError(f"RegisterArraySpec: unknown op {op.op!r}")


class CombinedSpec:
    """Product of per-object specs; state is a tuple in sorted-key order."""

    def __init__(self, specs: dict):
        self.keys = sorted(specs, key=repr)
        self.specs = specs

    def initial(self):
        return tuple(self.specs[k].initial() for k in self.keys)

    def apply(self, state, op: OpRec):
        i = self.keys.index(op.obj)
        sub, ret = self.specs[op.obj].apply(state[i], op)
        return state[:i] + (sub,) + state[i + 1:], ret
