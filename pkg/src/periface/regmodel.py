"""Peripheral register model: identification, categorization and handling.

Every load or store in the peripheral window lands in :class:`PeripheralBus`.
The bus identifies the word-aligned register, updates its category from the
observed access pattern (:class:`Categorizer`) and answers the access the way
its category dictates:

* CR  - a memory word (reads return the last write, or 0)
* SR  - the value the explorer picked for this read context
* DR  - the next word of fuzzer input; writes only go to the output log
* CSR - CR bits from the stored word, SR bits from the explorer

Runtime values (what a CR currently holds) live in the bus and are reset
per run; categories and SR handlers live in the model and persist.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple

M32 = 0xFFFFFFFF
MMIO_BASE = 0x40000000
MMIO_END = 0x60000000

EXPLORED_MARK = 1     # taint-tag bit for values coming from the explored SR read
RMW_WINDOW = 32       # max instructions between the read and write of an RMW pair
POLL_THRESHOLD = 3    # consecutive same-block reads that reveal a polled SR

_PAIR = struct.Struct("<II")


class Category(str, Enum):
    CR = "CR"
    SR = "SR"
    DR = "DR"
    CSR = "CSR"
    UNKNOWN = "UNKNOWN"


@dataclass
class RegisterRecord:
    address: int
    category: Category = Category.UNKNOWN
    peripheral_id: int = 0
    stored_value: int = 0
    cr_bitmask: int = 0
    locked: bool = False
    reads: int = 0
    writes: int = 0

    def __post_init__(self):
        if not self.peripheral_id:
            self.peripheral_id = assign_peripheral(self.address)

    def check(self) -> None:
        """Raise ValueError when the record violates a type invariant."""
        if self.address % 4 or not MMIO_BASE <= self.address < MMIO_END:
            raise ValueError(f"register 0x{self.address:08x} is not a word in the MMIO window")
        if self.peripheral_id != assign_peripheral(self.address):
            raise ValueError(f"register 0x{self.address:08x} has wrong peripheral id")
        if self.cr_bitmask and self.category is not Category.CSR:
            raise ValueError(f"register 0x{self.address:08x}: bitmask on a non-CSR register")
        for v in (self.stored_value, self.cr_bitmask):
            if not 0 <= v <= M32:
                raise ValueError(f"register 0x{self.address:08x}: value out of range")


@dataclass(frozen=True)
class AccessEvent:
    address: int
    kind: str  # "read" | "write"
    value: int
    width: int
    bbl: int
    cs: int
    frame_id: int
    insn_count: int


class SRAccessContext(NamedTuple):
    """Grouping key for status-register reads."""

    r: int
    cs: int
    bbl: int
    conf: int

    def __str__(self) -> str:
        return f"r=0x{self.r:08x} cs=0x{self.cs:016x} bbl=0x{self.bbl:08x} conf=0x{self.conf:016x}"


@dataclass
class TaintState:
    """Per-register taint tags: the MMIO word each register value came from."""

    sources: list = field(default_factory=lambda: [None] * 16)

    @classmethod
    def of(cls, machine) -> "TaintState":
        return cls(list(machine.taint))

    def tainted_by(self, address: int) -> list[int]:
        return [i for i, s in enumerate(self.sources) if s == address]


class ModelMiss(Exception):
    """The model cannot answer an access: an SR read context without a
    handler (``ctx`` set) or, in fixed mode, an unseen register."""

    def __init__(self, address: int, ctx: SRAccessContext | None = None):
        self.address = address
        self.ctx = ctx
        super().__init__(str(ctx) if ctx else f"unmodeled register 0x{address:08x}")


class Recategorized(Exception):
    """A register read earlier in this run turned out to be an SR (or CSR).
    The read already returned a memory value, so execution rolls back to
    the snapshot taken just before it and replays."""

    def __init__(self, address: int, snapshot):
        self.address = address
        self.snapshot = snapshot
        super().__init__(f"0x{address:08x}")


def assign_peripheral(address: int) -> int:
    return address & ~0x3FF & M32


def config_hash(peripheral_id: int, registers, values: dict[int, int] | None = None) -> int:
    """64-bit hash of the control state of one peripheral.

    ``registers`` maps address to RegisterRecord; ``values`` holds current
    CR contents (defaults to each record's stored_value).  Zero-valued
    words are left out so that a CR identified late does not change the
    hash of contexts seen before it was identified.
    """
    pairs = []
    for addr, rec in registers.items():
        if rec.peripheral_id != peripheral_id:
            continue
        if rec.category is Category.CR:
            v = rec.stored_value if values is None else values.get(addr, 0)
        elif rec.category is Category.CSR:
            v = (rec.stored_value if values is None else values.get(addr, 0)) & rec.cr_bitmask
        else:
            continue
        if v:
            pairs.append((addr, v))
    h = hashlib.blake2b(digest_size=8)
    for addr, v in sorted(pairs):
        h.update(_PAIR.pack(addr, v))
    return int.from_bytes(h.digest(), "little")


class _Watch:
    """An outstanding read of an UNKNOWN or CR register whose value may
    still reach a comparison."""

    __slots__ = ("snapshot", "frame_id", "insn", "value")

    def __init__(self, snapshot, frame_id, insn, value):
        self.snapshot = snapshot
        self.frame_id = frame_id
        self.insn = insn
        self.value = value


@dataclass
class BusRuntime:
    """Per-run state of the bus (part of every snapshot)."""

    values: dict = field(default_factory=dict)       # CR / UNKNOWN memory words
    last: dict = field(default_factory=dict)         # addr -> (kind, frame_id, insn, value)
    watches: dict = field(default_factory=dict)      # addr -> _Watch
    poll: tuple = (None, None, 0)                    # (addr, bbl, consecutive reads)
    dr_accesses: int = 0
    outputs: list = field(default_factory=list)      # (addr, value) DR writes
    nested_misses: list = field(default_factory=list)

    def copy(self) -> "BusRuntime":
        return BusRuntime(dict(self.values), dict(self.last),
                          {a: _Watch(w.snapshot, w.frame_id, w.insn, w.value)
                           for a, w in self.watches.items()},
                          self.poll, self.dr_accesses, list(self.outputs),
                          list(self.nested_misses))


class Categorizer:
    """Access-pattern state machine over a model's register records.

    Edges: RMW write -> CR; read then compare -> SR; first access a write
    -> DR; read guarded by a tested SR of the same peripheral -> DR; polled
    DR -> SR (locked); CR read then compare -> CSR.
    """

    def __init__(self, model):
        self.model = model

    def _set(self, rec: RegisterRecord, cat: Category, why: str, locked: bool = False) -> None:
        if rec.locked or rec.category is cat:
            return
        rec.category = cat
        rec.locked = locked
        if cat is Category.CSR:
            rec.cr_bitmask = self.model.rmw_bits.get(rec.address, 0)
        else:
            rec.cr_bitmask = 0
        self.model.touch()

    def on_write_unknown(self, rec: RegisterRecord, first_access: bool, rmw: bool) -> None:
        if rmw:
            self._set(rec, Category.CR, "rmw")
        elif first_access:
            self._set(rec, Category.DR, "write-first")

    def on_guarded_read(self, rec: RegisterRecord) -> None:
        self._set(rec, Category.DR, "guarded-read")

    def on_condition(self, rec: RegisterRecord) -> bool:
        """A watched read reached a comparison; True if the category changed."""
        if rec.category is Category.UNKNOWN:
            self._set(rec, Category.SR, "condition")
            return True
        if rec.category is Category.CR:
            self._set(rec, Category.CSR, "cr-condition")
            return rec.category is Category.CSR
        return False

    def on_poll(self, rec: RegisterRecord) -> None:
        if rec.category is Category.DR:
            self._set(rec, Category.SR, "polling", locked=True)


class PeripheralBus:
    """The machine's MMIO hook.

    ``mode`` is one of ``on_demand`` (model grows), ``fixed`` (read-only
    model; anything unmodeled raises ModelMiss), ``worker`` (explorer
    worker: private model copy, unknown SR reads return 0, no input) or
    ``stub`` (reads return 0, writes vanish).
    """

    def __init__(self, model, mode: str = "on_demand", *,
                 input_word: Callable[[], int] | None = None,
                 snapshotter: Callable[[], object] | None = None):
        if mode not in ("on_demand", "fixed", "worker", "stub"):
            raise ValueError(f"unknown bus mode {mode!r}")
        self.model = model
        self.mode = mode
        self.input_word = input_word
        self.snapshotter = snapshotter
        self.rt = BusRuntime()
        self.explored: SRAccessContext | None = None  # worker: the read being explored
        self.events: list[AccessEvent] | None = None  # set to a list to record accesses
        self.categorizer = Categorizer(model)
        self._conf: dict[int, int] = {}
        self._conf_version = -1

    # -- runtime state -------------------------------------------------
    def snapshot(self) -> BusRuntime:
        return self.rt.copy()

    def restore(self, rt: BusRuntime) -> None:
        self.rt = rt.copy()
        self._conf.clear()

    def reset(self) -> None:
        self.rt = BusRuntime()
        self._conf.clear()

    # -- helpers -------------------------------------------------------
    def conf(self, pid: int) -> int:
        if self._conf_version != self.model.version:
            self._conf.clear()
            self._conf_version = self.model.version
        h = self._conf.get(pid)
        if h is None:
            h = config_hash(pid, self.model.registers, self.rt.values)
            self._conf[pid] = h
        return h

    def context(self, m, addr: int, bbl: int | None = None) -> SRAccessContext:
        if bbl is None:
            bbl = m.fw.block_of(m.pc)
        return SRAccessContext(addr, m.call_signature(), bbl, self.conf(assign_peripheral(addr)))

    def _record(self, m, addr: int, kind: str, value: int, width: int) -> None:
        self.events.append(AccessEvent(addr, kind, value, width, m.fw.block_of(m.pc),
                                       m.call_signature(), m.frame_id, m.insn_count))

    def _set_value(self, addr: int, value: int) -> None:
        if self.rt.values.get(addr, 0) != value:
            self.rt.values[addr] = value
            self._conf.pop(assign_peripheral(addr), None)

    def _guarded(self, m, pid: int) -> bool:
        return pid in m.frames[-1].guards

    def _new_record(self, addr: int) -> RegisterRecord:
        rec = RegisterRecord(addr)
        self.model.registers[addr] = rec
        self.model.touch()
        return rec

    def _sr_value(self, m, addr: int, bbl: int) -> int:
        ctx = self.context(m, addr, bbl)
        v = self.model.sr_handlers.lookup(ctx)
        if v is None:
            if self.mode == "worker":
                self.rt.nested_misses.append(ctx)
                return 0
            raise ModelMiss(addr, ctx)
        if ctx == self.explored:
            m.read_mark = EXPLORED_MARK
        return v

    # -- machine hook interface ----------------------------------------
    def read(self, m, addr: int, width: int) -> int:
        if self.mode == "stub":
            return 0
        word = addr & ~3
        rt = self.rt
        rec = self.model.registers.get(word)
        if rec is not None and rec.category is Category.SR:
            return self._read_sr(m, addr, word, rec, width)
        if rec is None:
            if self.mode == "fixed":
                raise ModelMiss(word)
            rec = self._new_record(word)
        cat = rec.category
        pid = rec.peripheral_id
        mutable = self.mode != "fixed"
        watch = False
        bbl = m.fw.block_of(m.pc)

        if cat is Category.UNKNOWN and mutable and self._guarded(m, pid):
            self.categorizer.on_guarded_read(rec)
            cat = rec.category

        if cat is Category.SR:
            value = self._sr_value(m, word, bbl)
        elif cat is Category.DR:
            value = self._dr_input()
        elif cat is Category.CSR:
            sr_bits = self._sr_value(m, word, bbl)
            mask = rec.cr_bitmask
            value = (rt.values.get(word, 0) & mask) | (sr_bits & ~mask & M32)
        else:  # CR and UNKNOWN both behave as a memory word
            value = rt.values.get(word, 0)
            watch = mutable

        # the access is committed from here on (no more ModelMiss)
        if watch:
            snap = self.snapshotter() if (self.snapshotter and self.mode == "on_demand") else None
            rt.watches[word] = _Watch(snap, m.frame_id, m.insn_count, value)
        else:
            rt.watches.pop(word, None)
        rec.reads += 1
        if cat is Category.DR:
            rt.dr_accesses += 1
        rt.last[word] = ("read", m.frame_id, m.insn_count, value)
        if self.events is not None:
            self._record(m, word, "read", value, width)

        a, b, n = rt.poll
        n = n + 1 if (a == word and b == bbl) else 1
        rt.poll = (word, bbl, n)
        if n >= POLL_THRESHOLD and cat is Category.DR and mutable:
            self.categorizer.on_poll(rec)

        if width == 8:
            return (value >> (8 * (addr & 3))) & 0xFF
        return value

    def _read_sr(self, m, addr: int, word: int, rec: RegisterRecord, width: int) -> int:
        # same steps as the general path, specialised for the polling case
        rt = self.rt
        bbl = m.fw.block_of(m.pc)
        value = self._sr_value(m, word, bbl)
        rt.watches.pop(word, None)
        rec.reads += 1
        rt.last[word] = ("read", m.frame_id, m.insn_count, value)
        if self.events is not None:
            self._record(m, word, "read", value, width)
        a, b, n = rt.poll
        rt.poll = (word, bbl, n + 1 if (a == word and b == bbl) else 1)
        if width == 8:
            return (value >> (8 * (addr & 3))) & 0xFF
        return value

    def write(self, m, addr: int, value: int, width: int) -> None:
        if self.mode == "stub":
            return
        word = addr & ~3
        rt = self.rt
        rec = self.model.registers.get(word)
        first = rec is None
        if rec is None:
            if self.mode == "fixed":
                raise ModelMiss(word)
            rec = self._new_record(word)
        old = rt.values.get(word, 0)
        if width == 8:
            shift = 8 * (addr & 3)
            value = (old & ~(0xFF << shift) & M32) | ((value & 0xFF) << shift)

        prev = rt.last.get(word)
        rmw = (prev is not None and prev[0] == "read" and prev[1] == m.frame_id
               and m.insn_count - prev[2] <= RMW_WINDOW)
        if self.mode != "fixed":
            if rec.category is Category.UNKNOWN:
                self.categorizer.on_write_unknown(rec, first, rmw)
            if rmw and rec.category in (Category.CR, Category.CSR):
                bits = (prev[3] ^ value) & M32
                known = self.model.rmw_bits.get(word, 0)
                if bits & ~known:
                    self.model.rmw_bits[word] = known | bits
                    if rec.category is Category.CSR and not rec.locked:
                        rec.cr_bitmask = known | bits
                        self.model.touch()

        cat = rec.category
        if cat is Category.CR or cat is Category.UNKNOWN:
            self._set_value(word, value)
            rec.stored_value = value
        elif cat is Category.CSR:
            mask = rec.cr_bitmask
            self._set_value(word, (old & ~mask & M32) | (value & mask))
            rec.stored_value = value
        elif cat is Category.DR:
            rt.dr_accesses += 1
            rt.outputs.append((word, value))
        # SR writes are dropped

        rec.writes += 1
        rt.watches.pop(word, None)
        rt.last[word] = ("write", m.frame_id, m.insn_count, value)
        rt.poll = (None, None, 0)
        if self.events is not None:
            self._record(m, word, "write", value, width)

    def condition(self, m, src: int) -> None:
        src &= ~3
        w = self.rt.watches.pop(src, None)
        if w is None:
            return
        rec = self.model.registers.get(src)
        if rec is None or not self.categorizer.on_condition(rec):
            return
        self._conf.clear()
        if w.snapshot is not None:
            raise Recategorized(src, w.snapshot)

    def branch(self, m, src: int) -> None:
        rec = self.model.registers.get(src & ~3)
        if rec is not None and (rec.category is Category.SR or rec.category is Category.CSR):
            m.frames[-1].guards.add(rec.peripheral_id)

    def _dr_input(self) -> int:
        if self.mode == "worker" or self.input_word is None:
            return 0
        return self.input_word() & M32
