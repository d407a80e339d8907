"""Command-line front end for the verification suites and benchmarks.

Four subcommands:

  check           correctness suites over a named target
  bench           threaded throughput runs, CSV out
  recovery-delay  crash-at-random-point redo cost tables, JSONL out
  explore         bounded exhaustive exploration, histories as JSONL

Every run prints a ``# seed ...`` line first; rerunning with that seed
reproduces the run exactly.  Verdicts go to stdout as JSON lines shaped
``{"pass": bool, "rule": str, "witness": {...}}`` and the process exits
nonzero if any verdict failed.
"""

from __future__ import annotations

import argparse
import json
import random
import sys

from .bench import (
    BenchConfig,
    ENGINES,
    recovery_delay_table,
    report_row,
    run_bench,
    write_csv,
)
from .checker import (
    AtomicCasSpec,
    FifoQueueSpec,
    RegisterArraySpec,
    check_history,
    check_locality,
    seq_last,
)
from .history import canonical_key, to_jsonl
from .model import Machine, Schedule, explore, run_seeded
from .queues import (
    BASELINE,
    BROKEN_FIXTURE,
    GeneralQueue,
    MODE_MANUAL,
    MODE_PRIVATE,
    MODES,
    VARIANTS,
    conservation_check,
    make_system,
)
from .rcas import RCas, aba_violations, seq_discipline_violations
from .wcas import (
    WritableCasArray,
    disjointness_violations,
    install_violations,
)
from .workloads import rcas_factories, rcas_history_verdict

CHECK_TARGETS = ("rcas", "queue", "wcas", "locality")


# -- check suites -----------------------------------------------------------
#
# Each suite returns a list of verdict dicts and is imported unchanged by
# the acceptance tests, so the command line and the test gate run the
# same code.

def _verdict(rule: str, ok: bool, witness: dict) -> dict:
    return {"pass": bool(ok), "rule": rule, "witness": witness}


def rcas_plans(procs: int, ops: int, seed: int = 0) -> list[list[tuple]]:
    """Expected values collide across processes so CAS outcomes branch."""
    if (procs, ops) == (2, 2):
        return [[(0, 1), (1, 3)], [(0, 2), (2, 4)]]
    rng = random.Random(seed)
    nxt = 1
    plans = []
    for _ in range(procs):
        plan = []
        for _ in range(ops):
            plan.append((rng.randrange(0, nxt + 1), nxt))
            nxt += 1
        plans.append(plan)
    return plans


def check_rcas_suite(procs: int = 2, ops: int = 2, crashes: int = 2,
                     seeds: int = 400, seed: int = 0,
                     exhaustive_budget: int = 1) -> list[dict]:
    """Strict linearizability of the recoverable CAS object.

    Two waves.  The exhaustive one covers every interleaving and crash
    placement up to ``exhaustive_budget`` crashes (budgets past that are
    out of reach: each extra crash multiplies the tree by every restart
    interleaving).  The seeded wave samples the full ``crashes`` budget
    with resuming programs.
    """
    plans = rcas_plans(procs, ops, seed)
    verdicts = []
    budget = min(crashes, exhaustive_budget)
    mach = Machine(procs)
    obj = RCas(mach, procs, init=0)
    fs = rcas_factories(mach, obj, plans)
    runs = unique = 0
    fail: dict | None = None
    seen: set = set()
    for r in explore(mach, fs, Schedule(mode="exhaustive", crash_budget=budget)):
        runs += 1
        key = canonical_key(e for e in r.history if e.kind != "step")
        if key in seen:
            continue
        seen.add(key)
        unique += 1
        v = rcas_history_verdict(r.history, init=0)
        if not v.ok:
            fail = {"trace": r.choice_trace, "reason": v.reason}
            break
    verdicts.append(_verdict(
        f"rcas: exhaustive linearizability, {procs} procs x {ops} ops, "
        f"crash budget {budget}",
        fail is None,
        fail or {"runs": runs, "unique_histories": unique}))

    if crashes > budget:
        small = [plan[:1] for plan in plans]
        small_budget = min(crashes, 2)
        mach = Machine(procs)
        obj = RCas(mach, procs, init=0)
        fs = rcas_factories(mach, obj, small)
        runs = unique = 0
        fail = None
        seen = set()
        for r in explore(mach, fs, Schedule(mode="exhaustive",
                                            crash_budget=small_budget)):
            runs += 1
            key = canonical_key(e for e in r.history if e.kind != "step")
            if key in seen:
                continue
            seen.add(key)
            unique += 1
            v = rcas_history_verdict(r.history, init=0)
            if not v.ok:
                fail = {"trace": r.choice_trace, "reason": v.reason}
                break
        verdicts.append(_verdict(
            f"rcas: exhaustive linearizability, {procs} procs x 1 op, "
            f"crash budget {small_budget}",
            fail is None,
            fail or {"runs": runs, "unique_histories": unique}))

        bad: dict | None = None
        crashed = 0
        for s in range(seeds):
            mach = Machine(procs)
            obj = RCas(mach, procs, init=0)
            fs = rcas_factories(mach, obj, plans, resume=True)
            r = run_seeded(mach, fs, Schedule(seed=seed + s,
                                              crash_budget=crashes,
                                              crash_rate=0.08))
            crashed += r.counters.crashes > 0
            v = rcas_history_verdict(r.history, init=0)
            if not v.ok:
                bad = {"seed": seed + s, "reason": v.reason}
                break
        verdicts.append(_verdict(
            f"rcas: seeded sampling, crash budget {crashes}, {seeds} seeds",
            bad is None,
            bad or {"seeds": seeds, "runs_with_crashes": crashed}))
    return verdicts


def queue_plans(rng: random.Random, nprocs: int, total_ops: int) -> list[list[tuple]]:
    """Random enqueue/dequeue split with distinct values per process."""
    plans: list[list[tuple]] = [[] for _ in range(nprocs)]
    val = 0
    for k in range(total_ops):
        pid = k % nprocs if k < nprocs else rng.randrange(nprocs)
        if rng.random() < 0.55:
            val += 1
            plans[pid].append(("enqueue", val))
        else:
            plans[pid].append(("dequeue",))
    return plans


def check_queue_suite(variant: str, seeds: int = 1000, seed: int = 0,
                      modes: tuple[str, ...] = (MODE_PRIVATE, MODE_MANUAL),
                      procs: tuple[int, int] = (2, 4),
                      ops: tuple[int, int] = (6, 10),
                      crashes: int = 2) -> list[dict]:
    """Seeded crash schedules against the FIFO oracle plus conservation.

    Linearizability is checked strictly in private mode and durably in
    the shared modes (an unflushed effect may vanish with the cache, so
    only completed operations must survive).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    verdicts = []
    for mode in modes:
        lin_mode = "strict" if mode == MODE_PRIVATE else "durable"
        bad: dict | None = None
        crashed = 0
        for s in range(seeds):
            rng = random.Random((seed + s) * 2654435761 % 2 ** 32)
            nprocs = rng.randint(*procs)
            total = rng.randint(*ops)
            plans = queue_plans(rng, nprocs, total)
            machine, q, wrap = make_system(variant, mode, nprocs,
                                           per_pid=total + 1)
            facs = [wrap(f) for f in q.workers(plans)]
            r = run_seeded(machine, facs, Schedule(seed=seed + s,
                                                   crash_budget=crashes,
                                                   crash_rate=0.08))
            crashed += r.counters.crashes > 0
            v = check_history(r.history, FifoQueueSpec(), mode=lin_mode,
                              seq_of=seq_last)
            ok, why = conservation_check(q, r.history)
            if not (v.ok and ok):
                bad = {"seed": seed + s, "mode": mode, "nprocs": nprocs,
                       "plans": plans,
                       "reason": v.reason if not v.ok else why}
                break
            if variant != BASELINE:
                for cell in (q.head, q.tail):
                    if (seq_discipline_violations(r.history, cell)
                            or aba_violations(r.history, cell, init_value=0)):
                        bad = {"seed": seed + s, "mode": mode,
                               "reason": "usage discipline violated"}
                        break
                if bad:
                    break
        verdicts.append(_verdict(
            f"queue {variant}: {seeds} seeded crash schedules, mode {mode}, "
            f"linearizability ({lin_mode}) + conservation",
            bad is None,
            bad or {"seeds": seeds, "runs_with_crashes": crashed}))
    return verdicts


def _wcas_probe(arr):
    def probe(run):
        broken = arr.partition_violations()
        if broken:
            raise AssertionError(f"slot partition broken: {broken}")
    return probe


def _wcas_run_verdict(res, arr) -> str | None:
    v = check_history(res.history, RegisterArraySpec(arr.nobjs, 0))
    if not v.ok:
        return v.reason
    extra = (disjointness_violations(res.history, arr)
             or install_violations(res.history, arr))
    if extra:
        return f"replay violations: {extra}"
    return None


def check_wcas_suite(procs: int = 2, nobjs: int = 2, seeds: int = 300,
                     seed: int = 0, exhaustive: bool = True,
                     exhaustive_plans: list[list[tuple]] | None = None) -> list[dict]:
    """Slot-partition invariants at every step plus linearizability.

    The exhaustive wave walks every interleaving of one fixed plan with
    the partition probe attached to each step; the seeded wave
    randomizes mixed read/write/cas plans and process counts.
    """
    verdicts = []
    if exhaustive:
        plans = exhaustive_plans or [[("write", 0, 5), ("cas", 1, 0, 7)],
                                     [("read", 0)]]
        machine = Machine(procs)
        arr = WritableCasArray(machine, procs, nobjs, init=0)
        fail: dict | None = None
        runs = 0
        for res in explore(machine, arr.workers(plans),
                           Schedule(mode="exhaustive"),
                           probe=_wcas_probe(arr)):
            runs += 1
            why = _wcas_run_verdict(res, arr)
            if why:
                fail = {"trace": res.choice_trace, "reason": why}
                break
        nops = sum(len(p) for p in plans)
        verdicts.append(_verdict(
            f"wcas: exhaustive interleavings of {nops} ops over {procs} "
            "procs, partition probed at every step",
            fail is None, fail or {"runs": runs}))

    rng = random.Random(seed)
    bad: dict | None = None
    runs = 0
    for s in range(seeds):
        nprocs = rng.randint(2, 3)
        machine = Machine(nprocs)
        arr = WritableCasArray(machine, nprocs, nobjs, init=0)
        val = 10
        plans = []
        for _ in range(nprocs):
            plan = []
            for _ in range(rng.randint(2, 4)):
                pick = rng.random()
                j = rng.randrange(nobjs)
                if pick < 0.4:
                    plan.append(("write", j, val))
                    val += 1
                elif pick < 0.7:
                    plan.append(("cas", j, rng.choice((0, val - 1)), val))
                    val += 1
                else:
                    plan.append(("read", j))
            plans.append(plan)
        res = run_seeded(machine, arr.workers(plans),
                         Schedule(seed=seed + s), probe=_wcas_probe(arr))
        runs += 1
        why = _wcas_run_verdict(res, arr)
        if why:
            bad = {"seed": seed + s, "plans": plans, "reason": why}
            break
    verdicts.append(_verdict(
        f"wcas: {seeds} seeded mixed-op schedules, partition probed at "
        "every step",
        bad is None, bad or {"runs": runs}))
    return verdicts


# Crash-free by design: a crash leaves the queue's interrupted operation
# without a recovery verdict once the merged program stops, and the
# composition theorem under test is about projections, which the
# crash-free histories already exercise.
LOCALITY_PLANS = (
    ([("cas", 0, 1)], [("enqueue", 7)]),
    ([("cas", 0, 2)], [("dequeue",)]),
    ([("read",)], [("enqueue", 8), ("dequeue",)]),
    ([("cas", 0, 3), ("read",)], [("enqueue", 9)]),
)


def _two_object_system(nprocs: int, per_pid: int):
    machine = Machine(nprocs)
    obj = RCas(machine, nprocs, init=0)
    queue = GeneralQueue(machine, nprocs, per_pid)
    return machine, obj, queue


def _cas_side_factory(obj, ops):
    """Program for the CAS object's half of a two-object plan; ``ops``
    entries are (expected, new) pairs or the string "read"."""
    def factory(pid):
        def gen():
            seq = 0
            for op in ops:
                if op == "read":
                    yield ("mark_invoke", "read", obj.label, ())
                    v = yield from obj.read(pid)
                    yield ("mark_respond", "read", obj.label, v)
                else:
                    a, b = op
                    seq += 1
                    yield ("mark_invoke", "cas", obj.label, (a, b, seq))
                    ok = yield from obj.cas(pid, a, b, seq)
                    yield ("mark_respond", "cas", obj.label, ok)
        return gen()
    return factory


def _merge_factories(first, second):
    def factory(pid):
        def gen():
            yield from first(pid)
            yield from second(pid)
        return gen()
    return factory


def _locality_factories(obj, queue, cas_plans, q_plans):
    qfacs = queue.workers(q_plans)
    return [_merge_factories(_cas_side_factory(obj, cas_plans[p]), qfacs[p])
            for p in range(len(q_plans))]


def _locality_verdict(obj, queue, history):
    return check_locality(history, {obj.label: AtomicCasSpec(0),
                                    queue.label: FifoQueueSpec()},
                          seq_of=seq_last)


def _split_locality_plan(plan):
    """One mixed op list into its (cas ops, queue ops) halves."""
    cas_ops: list = []
    queue_ops: list = []
    for st in plan:
        if st[0] in ("enqueue", "dequeue"):
            queue_ops.append(st)
        elif st[0] == "cas":
            cas_ops.append((st[1], st[2]))
        else:
            cas_ops.append("read")
    return cas_ops, queue_ops


def check_locality_suite(seed: int = 0, seeds: int = 150,
                         exhaustive: bool = True) -> list[dict]:
    """Two objects on one machine: a CAS cell and a queue.

    Verifies that per-object linearizability and whole-history
    linearizability never disagree, exhaustively on the small fixed
    plans and then over seeded mixed schedules.
    """
    verdicts = []
    if exhaustive:
        fail: dict | None = None
        runs = 0
        for plan0, plan1 in LOCALITY_PLANS:
            if fail:
                break
            sides = [_split_locality_plan(plan0), _split_locality_plan(plan1)]
            machine, obj, queue = _two_object_system(2, 4)
            facs = _locality_factories(obj, queue,
                                       [s[0] for s in sides],
                                       [s[1] for s in sides])
            for res in explore(machine, facs, Schedule(mode="exhaustive")):
                runs += 1
                v = _locality_verdict(obj, queue, res.history)
                if v.ok is False:
                    fail = {"plans": (plan0, plan1),
                            "trace": res.choice_trace, "reason": v.reason}
                    break
        verdicts.append(_verdict(
            f"locality: exhaustive two-object runs over {len(LOCALITY_PLANS)} "
            "plan shapes",
            fail is None, fail or {"runs": runs}))

    rng = random.Random(seed)
    bad: dict | None = None
    runs = 0
    for s in range(seeds):
        machine, obj, queue = _two_object_system(2, 6)
        val = 100 * (s + 1)
        cas_plans = []
        q_plans = []
        for _ in range(2):
            ops: list = []
            for _ in range(rng.randint(1, 2)):
                if rng.random() < 0.25:
                    ops.append("read")
                else:
                    val += 1
                    ops.append((rng.choice((0, val - 1)), val))
            cas_plans.append(ops)
            qops = []
            for _ in range(rng.randint(1, 2)):
                if rng.random() < 0.6:
                    val += 1
                    qops.append(("enqueue", val))
                else:
                    qops.append(("dequeue",))
            q_plans.append(qops)
        facs = _locality_factories(obj, queue, cas_plans, q_plans)
        res = run_seeded(machine, facs, Schedule(seed=seed + s))
        runs += 1
        v = _locality_verdict(obj, queue, res.history)
        if v.ok is False:
            bad = {"seed": seed + s, "reason": v.reason}
            break
    verdicts.append(_verdict(
        f"locality: {seeds} seeded two-object runs",
        bad is None, bad or {"runs": runs}))
    return verdicts


# -- commands ---------------------------------------------------------------

def _emit(fp, payload: dict) -> None:
    fp.write(json.dumps(payload, default=repr) + "\n")


def cmd_check(args, out) -> int:
    if args.target == "rcas":
        verdicts = check_rcas_suite(procs=args.procs, ops=args.ops,
                                    crashes=args.crashes, seeds=args.seeds,
                                    seed=args.seed)
    elif args.target == "queue":
        modes = (args.mode,) if args.mode else (MODE_PRIVATE, MODE_MANUAL)
        verdicts = check_queue_suite(args.variant, seeds=args.seeds,
                                     seed=args.seed, modes=modes,
                                     crashes=args.crashes)
    elif args.target == "wcas":
        verdicts = check_wcas_suite(procs=args.procs, seeds=args.seeds,
                                    seed=args.seed,
                                    exhaustive=args.exhaustive)
    else:
        verdicts = check_locality_suite(seed=args.seed, seeds=args.seeds,
                                        exhaustive=True)
    ok = True
    for v in verdicts:
        _emit(out, v)
        ok = ok and v["pass"]
    return 0 if ok else 1


def cmd_bench(args, out) -> int:
    variants = ([v for v in VARIANTS if v != BROKEN_FIXTURE]
                if args.variant == "all" else [args.variant])
    reports = []
    for variant in variants:
        for threads in args.threads:
            cfg = BenchConfig(variant=variant, mode=args.mode,
                              threads=threads,
                              duration_seconds=args.seconds,
                              pairs=not args.no_pairs,
                              prefill=args.prefill, seed=args.seed,
                              repeats=args.repeats, engine=args.engine)
            reports.append(run_bench(cfg))
    if args.out:
        with open(args.out, "w", newline="") as fp:
            write_csv(reports, fp)
    write_csv(reports, out)
    return 0


def cmd_recovery_delay(args, out) -> int:
    rows = recovery_delay_table(args.variant, args.ops,
                                samples=args.repeats, seed=args.seed,
                                mode=args.mode)
    sink = open(args.out, "w") if args.out else None
    try:
        for row in rows:
            _emit(out, row)
            if sink:
                _emit(sink, row)
    finally:
        if sink:
            sink.close()
    return 0


def cmd_explore(args, out) -> int:
    if args.target == "rcas":
        machine = Machine(args.procs)
        obj = RCas(machine, args.procs, init=0)
        facs = rcas_factories(machine, obj,
                              rcas_plans(args.procs, args.ops, args.seed))
    else:
        machine, q, wrap = make_system(args.variant or "general",
                                       MODE_PRIVATE, args.procs,
                                       per_pid=args.ops + 1)
        rng = random.Random(args.seed)
        plans = queue_plans(rng, args.procs, args.ops)
        facs = [wrap(f) for f in q.workers(plans)]
    sched = Schedule(mode="exhaustive", crash_budget=args.crashes)
    sink = open(args.out, "w") if args.out else None
    n = 0
    try:
        for res in explore(machine, facs, sched, max_runs=args.max_runs):
            n += 1
            line = to_jsonl(e for e in res.history if e.kind != "step")
            (sink or out).write(line + "\n")
    finally:
        if sink:
            sink.close()
    print(f"# explored {n} runs", file=sys.stderr)
    return 0


# -- argument plumbing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="permem",
        description="Verification suites and benchmarks for the "
                    "persistent-memory toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", type=str, default=None,
                        help="also write results to this file")

    c = sub.add_parser("check", help="run a correctness suite")
    c.add_argument("target", choices=CHECK_TARGETS)
    c.add_argument("--variant", default="general",
                   choices=[v for v in VARIANTS if v != BASELINE])
    c.add_argument("--mode", default=None, choices=MODES)
    c.add_argument("--exhaustive", action="store_true")
    c.add_argument("--seeds", type=int, default=400)
    c.add_argument("--procs", type=int, default=2)
    c.add_argument("--ops", type=int, default=2)
    c.add_argument("--crashes", type=int, default=2)
    common(c)

    b = sub.add_parser("bench", help="threaded throughput runs")
    b.add_argument("--variant", default="all",
                   choices=["all"] + [v for v in VARIANTS
                                      if v != BROKEN_FIXTURE])
    b.add_argument("--mode", default=MODE_PRIVATE, choices=MODES)
    b.add_argument("--threads", type=int, nargs="+",
                   default=[1, 2, 4, 8])
    b.add_argument("--seconds", type=float, default=2.0)
    b.add_argument("--prefill", type=int, default=None)
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--engine", default="native", choices=list(ENGINES))
    b.add_argument("--no-pairs", action="store_true",
                   help="enqueue-only workload")
    common(b)

    r = sub.add_parser("recovery-delay",
                       help="crash redo cost vs history length")
    r.add_argument("--variant", default="normalized",
                   choices=[v for v in VARIANTS
                            if v not in (BASELINE, BROKEN_FIXTURE)])
    r.add_argument("--mode", default=MODE_PRIVATE, choices=MODES)
    r.add_argument("--ops", type=int, nargs="+",
                   default=[100, 1000, 10000, 100000],
                   help="history lengths (operation counts)")
    r.add_argument("--repeats", type=int, default=10,
                   help="crash samples per length")
    common(r)

    e = sub.add_parser("explore", help="dump exhaustive histories as JSONL")
    e.add_argument("target", choices=("rcas", "queue"))
    e.add_argument("--variant", default=None,
                   choices=[v for v in VARIANTS if v != BASELINE])
    e.add_argument("--procs", type=int, default=2)
    e.add_argument("--ops", type=int, default=2)
    e.add_argument("--crashes", type=int, default=0)
    e.add_argument("--max-runs", type=int, default=20000)
    common(e)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = sys.stdout
    print(f"# seed {args.seed}")
    if args.command == "check":
        return cmd_check(args, out)
    if args.command == "bench":
        return cmd_bench(args, out)
    if args.command == "recovery-delay":
        return cmd_recovery_delay(args, out)
    return cmd_explore(args, out)


if __name__ == "__main__":
    sys.exit(main())
