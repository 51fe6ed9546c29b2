"""Run the bundled corpus against its manifest.

For each firmware: instantiate a model, compare its categories with the
ground-truth labels, and run the processor-peripheral equivalence property
(full marker string, no crash, no hang) under an all-zero input, a random
input and a batch of mutated inputs.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from .fuzz import OK, Budgets, FuzzRunReport, derive_seed, mutate
from .irq import FiringStrategy, audit_timeline
from .machine import Firmware
from .manifest import CorpusManifest, FirmwareEntry
from .regmodel import Category
from .session import Session

PROPERTY_INPUT_LEN = 4096
PROPERTY_MUTANTS = 100
MAX_ROUNDS = 5


@dataclass(frozen=True)
class Deviation:
    address: int
    expected: Category | None  # None: register has no label
    got: Category

    @property
    def kind(self) -> str:
        if self.expected is Category.SR and self.got is Category.DR:
            return "type1"
        if self.expected is Category.DR and self.got is Category.CR:
            return "type2"
        return "other"

    def __str__(self):
        exp = self.expected.value if self.expected else "unlabeled"
        return f"0x{self.address:08x} {exp}->{self.got.value} ({self.kind})"


@dataclass
class PropertyRun:
    label: str
    report: FuzzRunReport
    passed: bool


@dataclass
class FirmwareCheck:
    entry: FirmwareEntry
    session: Session
    seconds: float
    registers_read: int = 0
    deviations: list[Deviation] = field(default_factory=list)   # against ground truth
    unexpected: list[Deviation] = field(default_factory=list)   # against the expected model
    runs: list[PropertyRun] = field(default_factory=list)
    property_seconds: float = 0.0
    post_stable_rounds: int | None = None
    irq_violations: list = field(default_factory=list)
    problems: list[str] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        """1 - (Type I + Type II) / registers read."""
        if not self.registers_read:
            return 1.0
        bad = sum(1 for d in self.deviations if d.kind in ("type1", "type2"))
        return 1.0 - bad / self.registers_read

    @property
    def property_failures(self) -> list[PropertyRun]:
        return [r for r in self.runs if not r.passed]

    @property
    def ok(self) -> bool:
        return not self.problems

    def row(self) -> str:
        e = self.entry
        runs = f"{len(self.runs) - len(self.property_failures)}/{len(self.runs)}"
        post = "-" if self.post_stable_rounds is None else str(self.post_stable_rounds)
        return (f"{e.name:16s} {e.klass:20s} {self.accuracy * 100:6.1f}% "
                f"{self.registers_read:4d} {self.session.rounds_to_stable:6d} {post:>4s} "
                f"{runs:>8s} {'PASS' if self.ok else 'FAIL'}")


HEADER = (f"{'firmware':16s} {'class':20s} {'acc':>7s} {'read':>4s} {'rounds':>6s} "
          f"{'post':>4s} {'property':>8s} result")


def entry_budgets(entry: FirmwareEntry, budgets: Budgets | None = None) -> Budgets:
    budgets = budgets or Budgets()
    if entry.hang_blocks is not None:
        budgets = Budgets(entry.hang_blocks, budgets.max_insns)
    return budgets


def instantiate_entry(entry: FirmwareEntry, seed: int = 0,
                      strategy: FiringStrategy | None = None,
                      budgets: Budgets | None = None, jobs: int = 1) -> Session:
    fw = Firmware(entry.image())
    s = Session(fw, seed, strategy or FiringStrategy(), entry_budgets(entry, budgets), jobs)
    return s.instantiate(seeds=entry.seeds)


def categorization(entry: FirmwareEntry, model) -> tuple[int, list[Deviation], list[Deviation]]:
    """(registers read, deviations from labels, deviations from the expected model)."""
    truth = entry.labels
    expected = entry.expected_model()
    read = [r for r in model.registers.values() if r.reads > 0]
    dev, unexpected = [], []
    for rec in sorted(read, key=lambda r: r.address):
        label = truth.get(rec.address)
        if label is not rec.category:
            dev.append(Deviation(rec.address, label, rec.category))
        want = expected.get(rec.address)
        if want is not rec.category:
            unexpected.append(Deviation(rec.address, want, rec.category))
    # a labeled mis-categorization that did not happen is also a deviation
    for addr, cat in sorted(entry.miscategorized.items()):
        rec = model.registers.get(addr)
        if rec is None or rec.reads == 0:
            unexpected.append(Deviation(addr, cat, Category.UNKNOWN))
    return len(read), dev, unexpected


def property_inputs(entry: FirmwareEntry, seed: int = 0, length: int = PROPERTY_INPUT_LEN,
                    mutants: int = PROPERTY_MUTANTS):
    """(label, data) pairs: zero input, random input, then mutants."""
    rng = random.Random(derive_seed(seed, "property", entry.name))
    zero = bytes(length)
    rand = rng.randbytes(length)
    yield "zero", zero
    yield "random", rand
    pool = [zero, rand] + [s + bytes(max(0, length - len(s))) for s in entry.seeds]
    for i in range(mutants):
        yield f"mutant{i}", mutate(pool[i % len(pool)], rng, pool)


def property_holds(entry: FirmwareEntry, rep: FuzzRunReport) -> bool:
    if entry.expect == OK:
        return rep.verdict == OK and rep.markers == entry.markers
    return rep.verdict == entry.expect


def check_entry(entry: FirmwareEntry, seed: int = 0, *, mutants: int = PROPERTY_MUTANTS,
                strategy: FiringStrategy | None = None, budgets: Budgets | None = None,
                session: Session | None = None) -> FirmwareCheck:
    t0 = time.perf_counter()
    s = session or instantiate_entry(entry, seed, strategy, budgets)
    chk = FirmwareCheck(entry, s, time.perf_counter() - t0)
    chk.registers_read, chk.deviations, chk.unexpected = categorization(entry, s.model)
    for d in chk.unexpected:
        chk.problems.append(f"categorization {d}")
    if entry.conforming and s.rounds_to_stable > MAX_ROUNDS:
        chk.problems.append(f"{s.rounds_to_stable} rounds to stability (limit {MAX_ROUNDS})")

    t0 = time.perf_counter()
    if entry.expect != OK:
        mutants = 0  # a known failure only needs to be shown, not fuzzed
    for label, data in property_inputs(entry, seed, mutants=mutants):
        rep = s.run_input(data)
        ok = property_holds(entry, rep)
        chk.runs.append(PropertyRun(label, rep, ok))
        chk.irq_violations += audit_timeline(rep.irq_timeline)
    chk.property_seconds = time.perf_counter() - t0
    for r in chk.property_failures[:3]:
        chk.problems.append(f"property {r.label}: {r.report.verdict} "
                            f"markers {r.report.markers.decode('latin-1')!r}")
    if len(chk.property_failures) > 3:
        chk.problems.append(f"... {len(chk.property_failures)} property failures in total")
    if chk.irq_violations:
        chk.problems.append(f"disabled interrupts fired: {chk.irq_violations[:4]}")

    if entry.trigger is not None:
        before = len(s.rounds)
        s.run_input(entry.trigger)
        chk.post_stable_rounds = sum(1 for r in s.rounds[before:] if r.after_stable)
        if not chk.post_stable_rounds:
            chk.problems.append("trigger input did not start a post-stable round")
    return chk


def check_corpus(manifest: CorpusManifest, seed: int = 0, names=None, **kw) -> list[FirmwareCheck]:
    return [check_entry(e, seed, **kw) for e in manifest if names is None or e.name in names]


def render(checks) -> str:
    lines = [HEADER]
    for c in checks:
        lines.append(c.row())
        lines += [f"    {p}" for p in c.problems]
    failed = sum(1 for c in checks if not c.ok)
    lines.append(f"{len(checks) - failed}/{len(checks)} firmware match the manifest")
    return "\n".join(lines) + "\n"


def bug_hunt(entry: FirmwareEntry, session: Session, seed: int, max_execs: int,
             input_len: int = 64, n_seeds: int = 4):
    """Fuzz from random seeds until the first crash; returns (corpus, stats)."""
    rng = random.Random(derive_seed(seed, "bug-seeds", entry.name))
    seeds = [rng.randbytes(input_len) for _ in range(n_seeds)]
    return session.fuzz(seeds, seed, max_execs, stop_on_crash=True)
