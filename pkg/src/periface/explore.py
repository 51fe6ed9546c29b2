"""Explorative execution: pick a value for an unhandled status-register read.

From a snapshot taken just before the read, 33 workers each replay the
read with a different candidate (every one-hot 32-bit value, then zero) and
run until the reading function returns, the firmware crashes or stalls, or
a block budget runs out.  Candidates that got through cleanly are ranked by
how much data-register traffic they unlocked.
"""

from __future__ import annotations

import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .irq import IrqController
from .machine import Firmware, Machine, Snapshot
from .regmodel import EXPLORED_MARK, PeripheralBus, SRAccessContext

CANDIDATES = tuple(1 << i for i in range(32)) + (0,)
WORKER_BUDGET = 20_000  # blocks
STALL_BLOCKS = 2_000    # consecutive blocks without a new edge

RAN_TO_FRAME_POP = "ran_to_frame_pop"
CRASHED = "crashed"
STALLED = "stalled"
BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass(frozen=True)
class CandidateResult:
    candidate_value: int
    outcome: str
    dr_access_count: int
    sr_dependent_failure: bool = False
    crash_kind: str | None = None
    crash_at: int | None = None
    blocks: int = 0

    @property
    def clean(self) -> bool:
        return self.outcome in (RAN_TO_FRAME_POP, BUDGET_EXHAUSTED)

    def brief(self) -> str:
        dep = "dep" if self.sr_dependent_failure else "-"
        return f"0x{self.candidate_value:08x}:{self.outcome}:{self.dr_access_count}:{dep}"


class NoQualifiedCandidate(Exception):
    def __init__(self, ctx: SRAccessContext | None, results=()):
        self.ctx = ctx
        self.results = list(results)
        super().__init__(f"no qualified candidate for {ctx}")


@dataclass(frozen=True)
class TieBreak:
    ctx: SRAccessContext
    tied: tuple[int, ...]
    chosen: int


@dataclass(frozen=True)
class Ranking:
    winner: int
    qualified: tuple[int, ...]
    tied: tuple[int, ...]


@dataclass(frozen=True)
class ExplorationEvent:
    ctx: SRAccessContext
    results: tuple[CandidateResult, ...]
    winner: int
    qualified: tuple[int, ...]
    tie: TieBreak | None = None
    snapshot: Snapshot | None = None  # kept for offline re-checking

    def log_line(self) -> str:
        outcomes = ",".join(r.brief() for r in self.results)
        return f"explore {self.ctx} winner=0x{self.winner:08x} outcomes={outcomes}"


class SRHandlerTable:
    """Append-only map from read context to the chosen SR value."""

    def __init__(self, entries: dict | None = None):
        self.entries: dict[SRAccessContext, int] = dict(entries or {})

    def lookup(self, ctx: SRAccessContext) -> int | None:
        return self.entries.get(ctx)

    def insert(self, ctx: SRAccessContext, value: int) -> None:
        old = self.entries.get(ctx)
        if old is not None and old != value:
            raise ValueError(f"handler for {ctx} already set to 0x{old:08x}")
        self.entries[ctx] = value

    def items(self):
        """Entries in canonical order: by (r, bbl, cs, conf)."""
        return sorted(self.entries.items(), key=lambda kv: (kv[0].r, kv[0].bbl, kv[0].cs, kv[0].conf))

    def copy(self) -> "SRHandlerTable":
        return SRHandlerTable(self.entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, ctx):
        return ctx in self.entries

    def __eq__(self, other):
        return isinstance(other, SRHandlerTable) and self.entries == other.entries


class _Stop(Exception):
    def __init__(self, outcome):
        self.outcome = outcome


def worker_machine(fw: Firmware, snap: Snapshot, model) -> tuple[Machine, PeripheralBus]:
    """A machine resumed from ``snap`` with a private model and no interrupts."""
    m = Machine(fw)
    m.restore(snap.machine)
    bus = PeripheralBus(model, "worker")
    if snap.bus is not None:
        bus.restore(snap.bus)
    ctl = IrqController(frozen=True)
    if snap.irq is not None:
        ctl.restore(snap.irq)
    m.bus = bus
    m.scs = ctl
    m.irq_source = None
    m.irq_delivery = False
    return m, bus


def run_worker(fw: Firmware, snap: Snapshot, ctx: SRAccessContext, model, value: int,
               budget: int = WORKER_BUDGET, stall: int = STALL_BLOCKS) -> CandidateResult:
    wmodel = model.copy()
    wmodel.sr_handlers.entries[ctx] = value
    m, bus = worker_machine(fw, snap, wmodel)
    bus.explored = ctx
    tag = ctx.r | EXPLORED_MARK
    m.stop_below_depth = m.depth
    edges = set()
    counters = [0, 0]  # blocks, blocks since last new edge

    def hook(_m, prev, cur):
        counters[0] += 1
        if (prev, cur) in edges:
            counters[1] += 1
            if counters[1] >= stall:
                raise _Stop(STALLED)
        else:
            edges.add((prev, cur))
            counters[1] = 0
        if counters[0] >= budget:
            raise _Stop(BUDGET_EXHAUSTED)

    m.block_hook = hook
    start_dr = bus.rt.dr_accesses
    try:
        out = m.run(1 << 62)
    except _Stop as stop:
        outcome = stop.outcome
        dep = outcome == STALLED and m.last_branch_taint == tag
        return CandidateResult(value, outcome, bus.rt.dr_accesses - start_dr, dep,
                               blocks=counters[0])
    dr = bus.rt.dr_accesses - start_dr
    if out.kind == "fault":
        return CandidateResult(value, CRASHED, dr, m.fault_taint == tag,
                               out.fault.value, out.addr, counters[0])
    # frame popped, or the firmware halted without returning
    return CandidateResult(value, RAN_TO_FRAME_POP, dr, False, blocks=counters[0])


def qualify_and_rank(results, rng: random.Random | int | None,
                     ctx: SRAccessContext | None = None) -> Ranking:
    results = list(results)
    qualified = [r for r in results if r.clean]
    if not qualified:
        qualified = [r for r in results if not r.sr_dependent_failure]
    if not qualified:
        raise NoQualifiedCandidate(ctx, results)
    best = max(r.dr_access_count for r in qualified)
    tied = tuple(r.candidate_value for r in qualified if r.dr_access_count == best)
    if len(tied) == 1:
        winner = tied[0]
    else:
        if not isinstance(rng, random.Random):
            rng = random.Random(rng)
        winner = tied[rng.randrange(len(tied))]
    return Ranking(winner, tuple(r.candidate_value for r in qualified), tied)


def _worker_task(args):
    return run_worker(*args)


def explore(fw: Firmware, snap: Snapshot, ctx: SRAccessContext, model,
            rng: random.Random | int | None = 0, jobs: int = 1,
            keep_snapshot: bool = False) -> ExplorationEvent:
    """Evaluate all candidates for ``ctx`` and return the exploration event.

    The caller commits ``event.winner`` to the model's handler table.
    """
    if ctx in model.sr_handlers:
        raise ValueError(f"{ctx} already has a handler")
    if jobs > 1:
        tasks = [(fw, snap, ctx, model, v) for v in CANDIDATES]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = tuple(pool.map(_worker_task, tasks))
    else:
        results = tuple(run_worker(fw, snap, ctx, model, v) for v in CANDIDATES)
    rank = qualify_and_rank(results, rng, ctx)
    tie = TieBreak(ctx, rank.tied, rank.winner) if len(rank.tied) > 1 else None
    return ExplorationEvent(ctx, results, rank.winner, rank.qualified, tie,
                            snap if keep_snapshot else None)
