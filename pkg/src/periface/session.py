"""Model instantiation: run, explore on misses, repeat until nothing changes.

A *round* is a run during which the model changed (a register appeared or
moved category, a handler was added, an interrupt was enabled for the first
time).  The model counts as stable after ``STABLE_RUNS`` consecutive runs
without a round; later misses still start new rounds.
"""

from __future__ import annotations

import itertools
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .explore import ExplorationEvent, explore
from .fuzz import Budgets, Corpus, FuzzRunReport, FuzzStats, derive_seed, fuzz_loop, run_once
from .irq import FiringStrategy
from .machine import Firmware, Snapshot
from .modelstore import Change, InstantiatedModel, diff, save
from .regmodel import SRAccessContext

STABLE_RUNS = 10
MAX_RUNS = 200
INPUT_LEN = 1024


@dataclass
class RoundRecord:
    number: int
    run: int
    changes: list[Change]
    explorations: int
    after_stable: bool = False

    def render(self) -> str:
        kinds = {}
        for c in self.changes:
            kinds[c.kind] = kinds.get(c.kind, 0) + 1
        summary = " ".join(f"{k}={kinds[k]}" for k in sorted(kinds)) or "other"
        tag = " post-stable" if self.after_stable else ""
        head = f"round {self.number} run {self.run} explorations={self.explorations} {summary}{tag}"
        return "\n".join([head] + [f"  {c}" for c in self.changes]) + "\n"


def instantiation_inputs(fw: Firmware, length: int = INPUT_LEN):
    """All-zero input, then pseudo-random inputs keyed by the image hash."""
    yield bytes(length)
    rng = random.Random(int(fw.sha256[:16], 16))
    while True:
        yield rng.randbytes(length)


@dataclass
class Session:
    fw: Firmware
    seed: int = 0
    strategy: FiringStrategy = field(default_factory=FiringStrategy)
    budgets: Budgets = field(default_factory=Budgets)
    jobs: int = 1
    keep_snapshots: bool = False
    model: InstantiatedModel | None = None

    def __post_init__(self):
        if self.model is None:
            self.model = InstantiatedModel(firmware_hash=self.fw.sha256, session_seed=self.seed)
        self.tie_rng = random.Random(derive_seed(self.seed, "ties"))
        self.events: list[ExplorationEvent] = []
        self.rounds: list[RoundRecord] = []
        self.reports: list[FuzzRunReport] = []
        self.runs = 0
        self.quiet = 0
        self.stable_at: int | None = None
        self.insns = 0

    @property
    def stable(self) -> bool:
        return self.stable_at is not None

    def resolve(self, ctx: SRAccessContext, snap: Snapshot, execution=None) -> None:
        ev = explore(self.fw, snap, ctx, self.model, self.tie_rng, self.jobs, self.keep_snapshots)
        self.model.add_handler(ctx, ev.winner, ev.tie)
        self.events.append(ev)
        self.insns += sum(r.blocks for r in ev.results)

    def run_input(self, data: bytes, strict_input: bool = False) -> FuzzRunReport:
        before = self.model.copy()
        version = self.model.version
        n_events = len(self.events)
        rep = run_once(self.fw, self.model, data, self.strategy, self.budgets, mode="on_demand",
                       strict_input=strict_input, resolver=self.resolve)
        self.runs += 1
        self.insns += rep.insn_executed
        self.reports.append(rep)
        if self.model.version != version:
            self.rounds.append(RoundRecord(len(self.rounds) + 1, self.runs, diff(before, self.model),
                                           len(self.events) - n_events, self.stable))
            self.quiet = 0
        else:
            self.quiet += 1
            if self.quiet >= STABLE_RUNS and self.stable_at is None:
                self.stable_at = self.runs
        return rep

    def instantiate(self, max_runs: int = MAX_RUNS, input_len: int = INPUT_LEN,
                    seeds=()) -> "Session":
        """Run ``seeds`` first, then the generated inputs, until stable."""
        inputs = itertools.chain((bytes(s) for s in seeds), instantiation_inputs(self.fw, input_len))
        while not self.stable and self.runs < max_runs:
            self.run_input(next(inputs))
        return self

    def fuzz(self, seeds, seed: int, execs: int, mode: str = "on_demand",
             stop_on_crash: bool = False) -> tuple[Corpus, FuzzStats]:
        """Fuzz against this session's model; SR misses are explored on the spot."""
        resolver = self.resolve if mode == "on_demand" else None
        return fuzz_loop(self.fw, self.model, seeds, seed, execs, mode=mode,
                         strategy=self.strategy, budgets=self.budgets, resolver=resolver,
                         stop_on_crash=stop_on_crash)

    @property
    def rounds_to_stable(self) -> int:
        return sum(1 for r in self.rounds if not r.after_stable)

    def rounds_log(self) -> str:
        out = "".join(r.render() for r in self.rounds)
        status = f"stable after run {self.stable_at}" if self.stable else "not stable"
        return out + f"runs {self.runs} rounds {len(self.rounds)} {status}\n"

    def explore_log(self) -> str:
        return "".join(ev.log_line() + "\n" for ev in self.events)

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save(self.model, d / "model.txt")
        (d / "rounds.log").write_text(self.rounds_log())
        (d / "explore.log").write_text(self.explore_log())


def instantiate(image, seed: int = 0, strategy: FiringStrategy | None = None, seeds=(),
                **kw) -> Session:
    fw = image if isinstance(image, Firmware) else Firmware(image)
    return Session(fw, seed, strategy or FiringStrategy(), **kw).instantiate(seeds=seeds)


@dataclass
class InstanceResult:
    instance: int
    seed: int
    model: InstantiatedModel
    corpus: Corpus
    stats: FuzzStats


def _fuzz_instance(args) -> InstanceResult:
    i, fw, model, seeds, seed, execs, strategy, budgets, mode = args
    s = Session(fw, seed, strategy, budgets, model=model.copy())
    corpus, stats = s.fuzz(seeds, seed, execs, mode)
    return InstanceResult(i, seed, s.model, corpus, stats)


def fuzz_instances(fw: Firmware, model: InstantiatedModel, seeds, seed: int, execs: int,
                   jobs: int = 1, *, strategy: FiringStrategy | None = None,
                   budgets: Budgets = Budgets(), mode: str = "on_demand") -> list[InstanceResult]:
    """Split ``execs`` over ``jobs`` independent instances.

    Instance ``i`` works on its own model copy with the PRNG seed
    ``derive_seed(seed, "instance", i)``.
    """
    if jobs < 1:
        raise ValueError("jobs must be at least 1")
    strategy = strategy or FiringStrategy()
    tasks = [(i, fw, model, list(seeds), derive_seed(seed, "instance", i),
              execs // jobs + (i < execs % jobs), strategy, budgets, mode) for i in range(jobs)]
    if jobs == 1:
        return [_fuzz_instance(tasks[0])]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_fuzz_instance, tasks))


def merge_corpora(corpora) -> Corpus:
    """Union of queues and buckets; the result does not depend on input order."""
    out = Corpus()
    queue, seeds, crashes, hangs = set(), set(), {}, {}
    for c in corpora:
        queue.update(c.queue)
        seeds.update(c.seeds)
        for mine, theirs in ((crashes, c.crashes), (hangs, c.hangs)):
            for bucket, (data, rep) in theirs.items():
                if bucket not in mine or data < mine[bucket][0]:
                    mine[bucket] = (data, rep)
    out.queue = sorted(queue)
    out.seeds = sorted(seeds)
    out.crashes = crashes
    out.hangs = hangs
    return out
