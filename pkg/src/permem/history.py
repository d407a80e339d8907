"""Execution histories and their serialized form.

A history is a flat list of :class:`Ev` records produced by a run of the
simulated machine.  Five kinds of events appear:

``step``
    one shared-memory instruction (load / store / cas / flush / fence)
    executed by a process.  ``obj`` is the cell id, ``args`` the operands,
    ``ret`` the result.
``invoke`` / ``respond``
    operation-level markers emitted by programs around composite
    operations.  These are what the correctness checkers consume.
``recover``
    the invocation of a recovery operation after a crash.  Its matching
    completion is a ``respond`` event whose ``ret`` usually carries a
    structured verdict (see :mod:`permem.checker`).
``crash``
    a crash of one process (``pid``) or of the whole system (``pid`` is -1).
``note``
    zero-cost diagnostics (capsule boundary commits, invariant reports).

Histories serialize to JSON Lines, one event per line, with stable key
order so that identical histories are byte-identical on disk.
"""

from __future__ import annotations

import json
from typing import Any, Iterable, NamedTuple

SYSTEM = -1  # pid used for whole-system events


class Ev(NamedTuple):
    kind: str
    pid: int
    op: str | None
    obj: Any
    args: Any
    ret: Any
    index: int


def _jsonable(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, bool) or v is None or isinstance(v, (int, float, str)):
        return v
    return repr(v)


def _detuple(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_detuple(x) for x in v)
    if isinstance(v, dict):
        return {k: _detuple(x) for k, x in v.items()}
    return v


def event_to_dict(ev: Ev) -> dict:
    return {
        "kind": ev.kind,
        "pid": ev.pid,
        "op": ev.op,
        "obj": _jsonable(ev.obj),
        "args": _jsonable(ev.args),
        "ret": _jsonable(ev.ret),
        "step_index": ev.index,
    }


def event_from_dict(d: dict) -> Ev:
    return Ev(
        d["kind"],
        d["pid"],
        d["op"],
        _detuple(d["obj"]),
        _detuple(d["args"]),
        _detuple(d["ret"]),
        d["step_index"],
    )


def to_jsonl(history: Iterable[Ev]) -> str:
    return "".join(
        json.dumps(event_to_dict(ev), sort_keys=False, separators=(",", ":")) + "\n"
        for ev in history
    )


def dump_jsonl(history: Iterable[Ev], path: str) -> None:
    with open(path, "w") as f:
        f.write(to_jsonl(history))


def load_jsonl(path: str) -> list[Ev]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(event_from_dict(json.loads(line)))
    return out


def loads_jsonl(text: str) -> list[Ev]:
    return [event_from_dict(json.loads(l)) for l in text.splitlines() if l.strip()]


def op_events(history: Iterable[Ev]) -> list[Ev]:
    """The operation-level subhistory (everything except raw steps)."""
    return [ev for ev in history if ev.kind in ("invoke", "respond", "recover", "crash")]


def _freeze(v: Any) -> Any:
    if isinstance(v, dict):
        return tuple(sorted((k, _freeze(x)) for k, x in v.items()))
    if isinstance(v, (list, tuple)):
        return tuple(_freeze(x) for x in v)
    return v


def canonical_key(history: Iterable[Ev]) -> tuple:
    """Hashable key identifying a history up to step indices.

    Two histories with the same key have the same event sequence and
    therefore the same verdict under every checker in this package.
    """
    return tuple((ev.kind, ev.pid, ev.op, _freeze(ev.obj), _freeze(ev.args),
                  _freeze(ev.ret)) for ev in history)
