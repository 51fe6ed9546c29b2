"""Fuzzing harness: one-run execution, coverage, verdicts and a small mutator.

A run ends with exactly one verdict: ``ok`` (HALT), ``crash`` (fault),
``hang`` (too many blocks without a new edge or input consumption, or the
instruction budget), ``input_exhausted`` (fuzz mode ran out of input) or
``model_miss`` (a read-only model could not answer an access).
"""

from __future__ import annotations

import hashlib
import itertools
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .irq import FiringStrategy, IrqController
from .machine import Firmware, Snapshot, load_firmware
from .regmodel import ModelMiss, PeripheralBus, Recategorized

MAP_SIZE = 1 << 16
HANG_BLOCKS = 100_000
MAX_INSNS = 2_000_000

OK = "ok"
CRASH = "crash"
HANG = "hang"
INPUT_EXHAUSTED = "input_exhausted"
MODEL_MISS = "model_miss"


class InputExhausted(Exception):
    pass


class _Hang(Exception):
    pass


@dataclass
class InputChannel:
    """Feeds DR reads four little-endian bytes at a time."""

    data: bytes = b""
    strict: bool = False  # raise InputExhausted instead of returning 0
    cursor: int = 0
    exhausted: bool = False
    words: int = 0

    def next_word(self) -> int:
        if self.cursor >= len(self.data):
            self.exhausted = True
            if self.strict:
                raise InputExhausted()
            return 0
        chunk = self.data[self.cursor:self.cursor + 4]
        self.cursor += 4
        self.words += 1
        return int.from_bytes(chunk.ljust(4, b"\0"), "little")


def byte_stream(data: bytes) -> bytes:
    """Input that delivers ``data`` one byte per DR read."""
    return b"".join(bytes((b, 0, 0, 0)) for b in data)


def block_hash(addr: int) -> int:
    return ((addr >> 2) * 0x9E3779B1) & 0xFFFF


class CoverageMap:
    """Edge-hit counters (saturating at 255)."""

    def __init__(self):
        self.counts = bytearray(MAP_SIZE)
        self.touched: list[int] = []
        self._h: dict[int, int] = {}

    def index(self, prev: int, cur: int) -> int:
        h = self._h
        hc = h.get(cur)
        if hc is None:
            hc = h[cur] = block_hash(cur)
        hp = h.get(prev)
        if hp is None:
            hp = h[prev] = block_hash(prev)
        return hc ^ (hp >> 1)

    def hit(self, prev: int, cur: int) -> bool:
        """Count one edge; True when it is new in this map."""
        i = self.index(prev, cur)
        c = self.counts[i]
        if c == 0:
            self.touched.append(i)
            self.counts[i] = 1
            return True
        if c < 255:
            self.counts[i] = c + 1
        return False

    def digest(self) -> str:
        return hashlib.sha256(self.counts).hexdigest()

    def edges(self) -> set[int]:
        return set(self.touched)


class GlobalCoverage:
    """Union of run maps (max-merge)."""

    def __init__(self):
        self.counts = bytearray(MAP_SIZE)

    def merge(self, cov: CoverageMap) -> int:
        """Fold a run in; returns the number of edges never seen before."""
        new = 0
        g = self.counts
        for i in cov.touched:
            c = cov.counts[i]
            if g[i] == 0:
                new += 1
            if c > g[i]:
                g[i] = c
        return new

    def digest(self) -> str:
        return hashlib.sha256(self.counts).hexdigest()

    def edge_count(self) -> int:
        return MAP_SIZE - self.counts.count(0)


@dataclass(frozen=True)
class Budgets:
    hang_blocks: int = HANG_BLOCKS
    max_insns: int = MAX_INSNS


@dataclass
class FuzzRunReport:
    verdict: str
    crash_kind: str | None = None
    pc: int | None = None
    addr: int | None = None
    bb_executed: int = 0
    insn_executed: int = 0
    new_edges: int = 0
    input_ref: str = ""
    input_consumed: int = 0
    markers: bytes = b""
    coverage_digest: str = ""
    blocks: frozenset = frozenset()
    edges: int = 0
    miss: str | None = None
    fired: tuple = ()       # (bb_count, irq)
    irq_timeline: tuple = ()

    @property
    def bucket(self) -> tuple[str, int] | None:
        if self.verdict == CRASH:
            return (self.crash_kind, self.pc)
        if self.verdict == HANG:
            return ("hang", self.pc)
        return None

    def render(self) -> str:
        lines = [f"verdict {self.verdict}"]
        if self.verdict == CRASH:
            lines.append(f"fault {self.crash_kind} pc=0x{self.pc:08x} addr=0x{self.addr:08x}")
        elif self.verdict == HANG:
            lines.append(f"pc 0x{self.pc:08x}")
        if self.miss:
            lines.append(f"miss {self.miss}")
        lines += [f"blocks {self.bb_executed}", f"instructions {self.insn_executed}",
                  f"input {self.input_ref} consumed={self.input_consumed}",
                  f"markers {self.markers.decode('latin-1')!r}",
                  f"coverage {self.coverage_digest} edges={self.edges}"]
        return "\n".join(lines) + "\n"


def input_ref(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


class Execution:
    """One run of a firmware image against a model.

    ``mode``: ``fixed`` (read-only model), ``on_demand`` (model grows; SR
    misses go to ``resolver``) or ``stub`` (all MMIO reads 0, no interrupts).
    """

    def __init__(self, fw: Firmware, model, data: bytes = b"", *, mode: str = "fixed",
                 strategy: FiringStrategy | None = None, strict_input: bool = False,
                 budgets: Budgets = Budgets(), resolver: Callable | None = None):
        self.fw = fw
        self.model = model
        self.mode = mode
        self.budgets = budgets
        self.resolver = resolver
        self.data = data
        self.channel = InputChannel(data, strict_input)
        self.cov = CoverageMap()
        self.blocks = {fw.reset}
        if strategy is None:
            strategy = FiringStrategy()
        if mode == "stub":
            strategy = FiringStrategy.none()
        self.m = m = load_firmware(fw)
        self.bus = PeripheralBus(model, mode, input_word=self.channel.next_word,
                                 snapshotter=self.snapshot)
        self.irq = IrqController(strategy,
                                 on_change=model.note_irq if mode == "on_demand" else None)
        m.bus = self.bus
        m.scs = self.irq
        m.irq_source = self.irq if strategy.kind != "none" else None
        m.block_hook = self._block
        self.quiet = 0
        self.last_cursor = 0
        self.snapshots = 0
        self.cov.hit(0, fw.reset)

    def _block(self, m, prev, cur):
        self.blocks.add(cur)
        if self.cov.hit(prev, cur) or self.channel.cursor != self.last_cursor:
            self.quiet = 0
            self.last_cursor = self.channel.cursor
        else:
            self.quiet += 1
            if self.quiet >= self.budgets.hang_blocks:
                raise _Hang()

    def snapshot(self) -> Snapshot:
        self.snapshots += 1
        ch = self.channel
        harness = (ch.cursor, ch.exhausted, ch.words, bytes(self.cov.counts), len(self.cov.touched),
                   frozenset(self.blocks), self.quiet, self.last_cursor)
        return Snapshot(self.snapshots, self.m.snapshot(), self.bus.snapshot(),
                        self.irq.snapshot(), harness)

    def restore(self, snap: Snapshot) -> None:
        self.m.restore(snap.machine)
        self.bus.restore(snap.bus)
        self.irq.restore(snap.irq)
        (self.channel.cursor, self.channel.exhausted, self.channel.words, counts, ntouched,
         blocks, self.quiet, self.last_cursor) = snap.harness
        self.cov.counts[:] = counts
        del self.cov.touched[ntouched:]
        self.blocks = set(blocks)

    def run(self) -> FuzzRunReport:
        m = self.m
        rep = None
        while rep is None:
            remaining = self.budgets.max_insns - m.insn_count
            if remaining <= 0:
                rep = FuzzRunReport(HANG, pc=m.pc)
                break
            try:
                out = m.run(remaining)
            except ModelMiss as miss:
                if self.mode != "on_demand" or self.resolver is None or miss.ctx is None:
                    rep = FuzzRunReport(MODEL_MISS, pc=m.pc, addr=miss.address, miss=str(miss))
                else:
                    self.resolver(miss.ctx, self.snapshot(), self)
                continue
            except Recategorized as rc:
                self.restore(rc.snapshot)
                continue
            except InputExhausted:
                rep = FuzzRunReport(INPUT_EXHAUSTED, pc=m.pc)
                break
            except _Hang:
                rep = FuzzRunReport(HANG, pc=m.pc)
                break
            if out.kind == "halted":
                rep = FuzzRunReport(OK, pc=out.pc)
            elif out.kind == "fault":
                rep = FuzzRunReport(CRASH, out.fault.value, out.pc, out.addr)
        rep.bb_executed = m.bb_count
        rep.insn_executed = m.insn_count
        rep.input_ref = input_ref(self.data)
        rep.input_consumed = self.channel.cursor
        rep.markers = bytes(m.debug)
        rep.coverage_digest = self.cov.digest()
        rep.blocks = frozenset(self.blocks)
        rep.edges = len(self.cov.touched)
        rep.fired = tuple(self.irq.fired)
        rep.irq_timeline = tuple(self.irq.timeline)
        return rep


def run_once(image, model, data: bytes = b"", strategy: FiringStrategy | None = None,
             budgets: Budgets = Budgets(), *, mode: str = "fixed", strict_input: bool = False,
             resolver: Callable | None = None) -> FuzzRunReport:
    fw = image if isinstance(image, Firmware) else Firmware(image)
    return Execution(fw, model, data, mode=mode, strategy=strategy, strict_input=strict_input,
                     budgets=budgets, resolver=resolver).run()


# -- mutation ----------------------------------------------------------

INTERESTING_8 = (0, 1, 16, 32, 64, 100, 127, 128, 255)
INTERESTING_32 = (0, 1, 0x7F, 0x80, 0xFF, 0x100, 0x7FFF, 0x8000, 0xFFFF, 0x10000,
                  0x7FFFFFFF, 0x80000000, 0xFFFFFFFF)


def _bitflip(rng, d: bytearray, width: int):
    if not d:
        return
    bit = rng.randrange(len(d) * 8)
    for b in range(bit, min(bit + width, len(d) * 8)):
        d[b >> 3] ^= 0x80 >> (b & 7)


def _byte_set(rng, d):
    if d:
        d[rng.randrange(len(d))] = rng.randrange(256)


def _byte_interesting(rng, d):
    if d:
        d[rng.randrange(len(d))] = rng.choice(INTERESTING_8)


def _byte_add(rng, d):
    if d:
        i = rng.randrange(len(d))
        delta = rng.randint(1, 35)
        d[i] = (d[i] + (delta if rng.random() < 0.5 else -delta)) & 0xFF


def _word_overwrite(rng, d):
    if len(d) < 4:
        return
    i = rng.randrange(len(d) // 4) * 4
    v = rng.choice(INTERESTING_32) if rng.random() < 0.5 else rng.getrandbits(32)
    d[i:i + 4] = v.to_bytes(4, "little")


_SIMPLE = (
    ("bitflip1", lambda r, d: _bitflip(r, d, 1)),
    ("bitflip2", lambda r, d: _bitflip(r, d, 2)),
    ("bitflip4", lambda r, d: _bitflip(r, d, 4)),
    ("byte_set", _byte_set),
    ("byte_interesting", _byte_interesting),
    ("byte_add", _byte_add),
    ("word_overwrite", _word_overwrite),
)
MUTATORS = tuple(name for name, _ in _SIMPLE) + ("splice", "havoc")


def mutate(data: bytes, rng: random.Random, pool=(), op: str | None = None) -> bytes:
    """Apply one mutation operator (chosen by ``rng`` unless ``op`` is given)."""
    if op is None:
        op = rng.choice(MUTATORS)
    d = bytearray(data)
    if op == "splice":
        other = rng.choice(pool) if pool else data
        if d and other:
            cut = rng.randrange(len(d))
            cut2 = rng.randrange(len(other))
            d = d[:cut] + bytearray(other[cut2:])
        return bytes(d)
    if op == "havoc":
        for _ in range(rng.randint(2, 8)):
            rng.choice(_SIMPLE)[1](rng, d)
        return bytes(d)
    dict(_SIMPLE)[op](rng, d)
    return bytes(d)


# -- the fuzzing loop ---------------------------------------------------

@dataclass
class Corpus:
    queue: list[bytes] = field(default_factory=list)
    seeds: list[bytes] = field(default_factory=list)
    crashes: dict = field(default_factory=dict)  # (kind, pc) -> (input, report)
    hangs: dict = field(default_factory=dict)


@dataclass
class FuzzStats:
    execs: int = 0
    verdicts: dict = field(default_factory=dict)
    edges: int = 0
    coverage_digest: str = ""
    first_crash_exec: int | None = None
    blocks: frozenset = frozenset()

    def render(self) -> str:
        lines = [f"execs {self.execs}", f"edges {self.edges}",
                 f"coverage {self.coverage_digest}",
                 f"first_crash_exec {self.first_crash_exec if self.first_crash_exec is not None else '-'}",
                 f"blocks {len(self.blocks)}"]
        for k in sorted(self.verdicts):
            lines.append(f"verdict {k} {self.verdicts[k]}")
        return "\n".join(lines) + "\n"


def derive_seed(seed: int, *labels) -> int:
    h = hashlib.sha256(seed.to_bytes(8, "little", signed=False))
    for label in labels:
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def fuzz_loop(image, model, seeds, seed: int, execs: int, *, mode: str = "fixed",
              strategy: FiringStrategy | None = None, budgets: Budgets = Budgets(),
              resolver: Callable | None = None, stop_on_crash: bool = False,
              mutations_per_entry: int = 16) -> tuple[Corpus, FuzzStats]:
    """Mutate-run-keep loop.  All randomness comes from ``seed``."""
    seeds = [bytes(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed input is required")
    fw = image if isinstance(image, Firmware) else Firmware(image)
    rng = random.Random(derive_seed(seed, "mutate"))
    corpus = Corpus(seeds=list(seeds))
    stats = FuzzStats()
    cov = GlobalCoverage()
    blocks = set()

    def one(data: bytes) -> FuzzRunReport:
        ex = Execution(fw, model, data, mode=mode, strategy=strategy, strict_input=True,
                       budgets=budgets, resolver=resolver)
        rep = ex.run()
        rep.new_edges = cov.merge(ex.cov)
        blocks.update(rep.blocks)
        stats.execs += 1
        stats.verdicts[rep.verdict] = stats.verdicts.get(rep.verdict, 0) + 1
        b = rep.bucket
        if b is not None:
            bucket = corpus.crashes if rep.verdict == CRASH else corpus.hangs
            if b not in bucket:
                bucket[b] = (data, rep)
                if rep.verdict == CRASH and stats.first_crash_exec is None:
                    stats.first_crash_exec = stats.execs
        if rep.new_edges > 0:
            corpus.queue.append(data)
        return rep

    for s in seeds:
        if stats.execs >= execs:
            break
        one(s)
    if not corpus.queue:
        corpus.queue.append(seeds[0])
    for i in itertools.count():
        if stats.execs >= execs or (stop_on_crash and corpus.crashes):
            break
        parent = corpus.queue[(i // mutations_per_entry) % len(corpus.queue)]
        one(mutate(parent, rng, corpus.queue))
    stats.edges = cov.edge_count()
    stats.coverage_digest = cov.digest()
    stats.blocks = frozenset(blocks)
    return corpus, stats


def write_artifacts(out: Path, corpus: Corpus, stats: FuzzStats) -> None:
    out = Path(out)
    for sub in ("queue", "crashes", "hangs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for n, data in enumerate(corpus.queue):
        (out / "queue" / f"id_{n:06d}.bin").write_bytes(data)
    for sub, buckets in (("crashes", corpus.crashes), ("hangs", corpus.hangs)):
        for (kind, pc), (data, rep) in sorted(buckets.items()):
            stem = f"{kind}_{pc:08x}"
            (out / sub / f"{stem}.bin").write_bytes(data)
            (out / sub / f"{stem}.txt").write_text(rep.render())
    (out / "stats.txt").write_text(stats.render())


def coverage_compare(image, model_a, model_b, inputs, *, mode_a: str = "fixed",
                     mode_b: str = "fixed", strategy: FiringStrategy | None = None,
                     budgets: Budgets = Budgets()) -> tuple[float, int, int]:
    """Distinct blocks covered under model_b divided by those under model_a.

    Use mode ``stub`` for the no-model baseline.
    """
    fw = image if isinstance(image, Firmware) else Firmware(image)
    cover = []
    for model, mode in ((model_a, mode_a), (model_b, mode_b)):
        seen = set()
        for data in inputs:
            seen |= run_once(fw, model, data, strategy, budgets, mode=mode).blocks
        cover.append(len(seen))
    a, b = cover
    return (b / a if a else float("inf")), a, b
