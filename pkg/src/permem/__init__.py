"""permem: lock-free algorithms on crash-prone persistent memory.

A small toolkit around one simulated machine model: persistent shared
memory cells, volatile per-process state, and crashes that restart
processes (or the whole system) at adversarially chosen points.  On top
of the model live a recoverable compare-and-swap, a capsule runtime that
splits programs into at-most-once sections, a recycling writable CAS
array, a normalized-operation simulator, several persistent queue
builds, history checkers (linearizability in three flavors plus
composability), and a benchmark harness that also runs the same
algorithms on real threads.
"""

from .capsules import (
    Capsule,
    CapsuleShapeError,
    Frame,
    HALT,
    RestartBank,
    capsule_factory,
    cas_read,
    detect_war_conflict,
    free,
    read_only,
    run_capsules,
    single,
)
from .history import Ev, SYSTEM, canonical_key, dump_jsonl, load_jsonl, to_jsonl
from .normalized import (
    NormalizedStruct,
    RESTART,
    cas_executor,
    normalized_workers,
)
from .model import (
    Counters,
    Machine,
    MaskPc,
    PRIVATE,
    RunResult,
    Schedule,
    SeqFlag,
    SequentialDriver,
    SHARED,
    Triple,
    explore,
    run,
    run_seeded,
)
from .queues import (
    BaselineQueue,
    DetectableResult,
    GeneralQueue,
    MODES,
    NOT_TAKEN,
    NormalizedQueue,
    VARIANTS,
    conservation_check,
    izraelevitz_wrap,
    make_system,
)
from .wcas import (
    Announcement,
    NOBODY,
    Status,
    WritableCasArray,
    array_store_steps,
    disjointness_violations,
    install_violations,
)

__all__ = [
    "Capsule",
    "CapsuleShapeError",
    "Frame",
    "HALT",
    "RestartBank",
    "capsule_factory",
    "cas_read",
    "detect_war_conflict",
    "free",
    "read_only",
    "run_capsules",
    "single",
    "Ev",
    "SYSTEM",
    "canonical_key",
    "dump_jsonl",
    "load_jsonl",
    "to_jsonl",
    "NormalizedStruct",
    "RESTART",
    "cas_executor",
    "normalized_workers",
    "Counters",
    "Machine",
    "MaskPc",
    "PRIVATE",
    "RunResult",
    "Schedule",
    "SeqFlag",
    "SequentialDriver",
    "SHARED",
    "Triple",
    "explore",
    "run",
    "run_seeded",
    "BaselineQueue",
    "DetectableResult",
    "GeneralQueue",
    "MODES",
    "NOT_TAKEN",
    "NormalizedQueue",
    "VARIANTS",
    "conservation_check",
    "izraelevitz_wrap",
    "make_system",
    "Announcement",
    "NOBODY",
    "Status",
    "WritableCasArray",
    "array_store_steps",
    "disjointness_violations",
    "install_violations",
]

__version__ = "0.1.0"
