"""Deterministic interpreter for the 32-bit firmware ISA.

The machine knows the fixed memory map and nothing about peripherals:
loads and stores that land in the peripheral window are handed to ``bus``,
writes to the system-control block go to ``scs``, and basic-block
boundaries are reported to ``block_hook``.  Faults are returned as
:class:`StepOutcome` values, never raised to the caller.
"""

from __future__ import annotations

import bisect
import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from . import isa
from .isa import (ADD, ADDI, AND, ANDI, BAL, BEQ, BL, BLT, BNE, CMP, CMPI, HALT,
                  IRET, LDB, LDI, LDW, LR, LUI, MOV, NOP, OR, ORI, POP, PUSH, RET, SHL,
                  SHLI, SP, STB, STW, SUB, SUBI, WFI, XOR, XORI)

FLASH_BASE = 0x00000000
FLASH_SIZE = 0x00100000
RAM_BASE = 0x20000000
RAM_SIZE = 0x00010000
RAM_END = RAM_BASE + RAM_SIZE
MMIO_BASE = 0x40000000
MMIO_END = 0x60000000
SCS_BASE = 0xE000E000
SCS_END = 0xE000F000
DEBUG_PORT = 0xE0000000

VECTOR_IRQ_BASE = 8        # word 2 of the vector table is IRQ 0
NUM_IRQS = 32
MAX_ISR_DEPTH = 8
IRQ_FRAME_TAG = 0xFFFFFF00  # stands in for a return address in call-stack signatures

_U32 = struct.Struct("<I")
M32 = 0xFFFFFFFF


class FaultKind(str, Enum):
    MEM_PERM = "MemPerm"
    UNDEF_INSN = "UndefInsn"
    BAD_VECTOR = "BadVector"
    STACK_MISMATCH = "StackMismatch"
    IRQ_NESTING = "IrqNesting"


class ImageTooLarge(ValueError):
    pass


class MalformedVectorTable(ValueError):
    pass


class MachineHalted(RuntimeError):
    pass


@dataclass(frozen=True)
class StepOutcome:
    kind: str  # "continued" | "halted" | "fault" | "frame_pop"
    fault: FaultKind | None = None
    addr: int = 0
    pc: int = 0

    @property
    def is_fault(self) -> bool:
        return self.kind == "fault"


CONTINUED = StepOutcome("continued")


@dataclass(frozen=True)
class Segment:
    base: int
    limit: int  # exclusive
    perms: str
    kind: str

    def __contains__(self, addr: int) -> bool:
        return self.base <= addr < self.limit


@dataclass(frozen=True)
class MemoryMap:
    segments: tuple[Segment, ...]

    def lookup(self, addr: int) -> Segment | None:
        for seg in self.segments:
            if addr in seg:
                return seg
        return None

    def permits(self, addr: int, perm: str) -> bool:
        seg = self.lookup(addr)
        return seg is not None and perm in seg.perms


MEMORY_MAP = MemoryMap((
    Segment(FLASH_BASE, FLASH_BASE + FLASH_SIZE, "RX", "flash"),
    Segment(RAM_BASE, RAM_END, "RW", "ram"),
    Segment(MMIO_BASE, MMIO_END, "RW", "mmio"),
    Segment(DEBUG_PORT, DEBUG_PORT + 4, "W", "debug"),
    Segment(SCS_BASE, SCS_END, "RW", "scs"),
))


class _Fault(Exception):
    def __init__(self, kind: FaultKind, addr: int, taint: int | None = None):
        super().__init__(kind, addr)
        self.kind = kind
        self.addr = addr
        self.taint = taint


class Frame:
    """One shadow-stack entry.  ``guards`` holds peripheral ids whose status
    register steered a conditional branch since the frame was entered."""

    __slots__ = ("ret", "frame_id", "irq", "guards")

    def __init__(self, ret: int | None, frame_id: int, irq: int | None = None, guards=None):
        self.ret = ret
        self.frame_id = frame_id
        self.irq = irq
        self.guards = set() if guards is None else guards

    def freeze(self):
        return (self.ret, self.frame_id, self.irq, frozenset(self.guards))

    @classmethod
    def thaw(cls, t) -> "Frame":
        return cls(t[0], t[1], t[2], set(t[3]))


class Firmware:
    """An immutable flash image plus its decode cache (shared by every run)."""

    def __init__(self, image: bytes):
        if len(image) > FLASH_SIZE:
            raise ImageTooLarge(f"image is {len(image)} bytes, flash holds {FLASH_SIZE}")
        if len(image) < 8:
            raise MalformedVectorTable("image too short for a vector table")
        pad = (-len(image)) % 4
        self.image = bytes(image) + b"\0" * pad
        self.size = len(self.image)
        self.initial_sp = _U32.unpack_from(self.image, 0)[0]
        self.reset = _U32.unpack_from(self.image, 4)[0]
        if self.reset % 4 or not (0 < self.reset < self.size):
            raise MalformedVectorTable(f"reset handler 0x{self.reset:08x} outside flash image")
        self.sha256 = hashlib.sha256(bytes(image)).hexdigest()
        self.code: dict[int, tuple] = {}
        self._leaders: list[int] | None = None
        self._block_of: dict[int, int] = {}

    def word(self, addr: int) -> int:
        if addr + 4 <= self.size:
            return _U32.unpack_from(self.image, addr)[0]
        return 0

    def byte(self, addr: int) -> int:
        return self.image[addr] if addr < self.size else 0

    def leaders(self) -> list[int]:
        """Static block starts: reset, vectors, branch targets and the
        instruction after every block-ending instruction."""
        if self._leaders is None:
            lead = {self.reset}
            lead.update(self.vector(i) for i in range(NUM_IRQS))
            for addr in range(0, self.size, 4):
                d = isa.decode(self.word(addr))
                if d is None:
                    continue
                if isa.BY_OPCODE[d.op].fmt == isa.F_BR:
                    lead.add((addr + 4 + d.imm * 4) & M32)
                if isa.is_control_transfer(d.op) or d.op == HALT:
                    lead.add(addr + 4)
            self._leaders = sorted(a for a in lead if 0 <= a < self.size)
        return self._leaders

    def block_of(self, pc: int) -> int:
        """Start address of the static basic block containing ``pc``."""
        b = self._block_of.get(pc)
        if b is None:
            leaders = self.leaders()
            i = bisect.bisect_right(leaders, pc)
            b = leaders[i - 1] if i else 0
            self._block_of[pc] = b
        return b

    def vector(self, irq: int) -> int:
        return self.word(VECTOR_IRQ_BASE + 4 * irq)

    def fetch(self, pc: int):
        ins = self.code.get(pc)
        if ins is None:
            if pc % 4 or not (FLASH_BASE <= pc < FLASH_BASE + FLASH_SIZE):
                raise _Fault(FaultKind.MEM_PERM, pc)
            d = isa.decode(self.word(pc))
            if d is None:
                raise _Fault(FaultKind.UNDEF_INSN, pc)
            ins = (d.op, d.rd, d.rs, d.imm)
            self.code[pc] = ins
        return ins


class NullBus:
    """Peripheral window with no model behind it: reads 0, writes vanish."""

    def read(self, m: "Machine", addr: int, width: int) -> int:
        return 0

    def write(self, m: "Machine", addr: int, value: int, width: int) -> None:
        pass

    def condition(self, m: "Machine", src: int) -> None:
        pass

    def branch(self, m: "Machine", src: int) -> None:
        pass


class PlainSCS:
    """System-control block as plain storage (no interrupt controller)."""

    def __init__(self):
        self.words: dict[int, int] = {}

    def read(self, m, addr):
        return self.words.get(addr, 0)

    def write(self, m, addr, value):
        self.words[addr] = value


@dataclass(frozen=True)
class MachineSnapshot:
    regs: tuple
    flags: tuple
    ram: bytes
    bb_count: int
    insn_count: int
    frames: tuple
    next_frame_id: int
    pending_irqs: frozenset
    in_isr: int
    cur_bbl: int
    prev_bbl: int
    debug: bytes
    taint: tuple
    flag_taint: int | None
    last_branch_taint: int | None


@dataclass
class Machine:
    fw: Firmware
    regs: list = field(default_factory=lambda: [0] * 16)
    z: bool = False
    n: bool = False
    c: bool = False
    ram: bytearray = field(default_factory=lambda: bytearray(RAM_SIZE))
    bb_count: int = 0
    insn_count: int = 0
    frames: list = field(default_factory=lambda: [Frame(None, 0)])
    next_frame_id: int = 1
    pending_irqs: set = field(default_factory=set)
    in_isr: int = 0
    cur_bbl: int = 0
    prev_bbl: int = 0
    debug: bytearray = field(default_factory=bytearray)
    taint: list = field(default_factory=lambda: [None] * 16)
    flag_taint: int | None = None
    last_branch_taint: int | None = None
    status: StepOutcome | None = None
    fault_taint: int | None = None
    read_mark: int = 0  # OR-ed into the taint tag of the next MMIO load
    # hooks
    bus: object = field(default_factory=NullBus)
    scs: object = field(default_factory=PlainSCS)
    block_hook: Callable | None = None
    irq_source: Callable | None = None
    irq_delivery: bool = True
    stop_below_depth: int | None = None
    _cs: tuple = field(default=(-1, 0), repr=False, compare=False)

    # -- state queries -------------------------------------------------
    @property
    def pc(self) -> int:
        return self.regs[15]

    @property
    def sp(self) -> int:
        return self.regs[SP]

    @property
    def depth(self) -> int:
        """Shadow-stack depth (0 at top level)."""
        return len(self.frames) - 1

    @property
    def frame_id(self) -> int:
        return self.frames[-1].frame_id

    @property
    def halted(self) -> bool:
        return self.status is not None

    @property
    def flags_word(self) -> int:
        return int(self.z) | (int(self.n) << 1) | (int(self.c) << 2)

    def call_signature(self) -> int:
        """64-bit hash of return addresses from the innermost ISR frame up."""
        # frame ids are unique within a run, so the top frame id keys the stack
        top = self.frames[-1].frame_id
        if self._cs[0] == top:
            return self._cs[1]
        rets = []
        for fr in reversed(self.frames[1:]):
            if fr.irq is not None:
                rets.append(IRQ_FRAME_TAG | fr.irq)
                break
            rets.append(fr.ret)
        h = hashlib.blake2b(digest_size=8)
        for r in reversed(rets):
            h.update(_U32.pack(r & M32))
        cs = int.from_bytes(h.digest(), "little")
        self._cs = (top, cs)
        return cs

    # -- snapshots -----------------------------------------------------
    def snapshot(self) -> MachineSnapshot:
        return MachineSnapshot(
            regs=tuple(self.regs), flags=(self.z, self.n, self.c), ram=bytes(self.ram),
            bb_count=self.bb_count, insn_count=self.insn_count,
            frames=tuple(f.freeze() for f in self.frames), next_frame_id=self.next_frame_id,
            pending_irqs=frozenset(self.pending_irqs), in_isr=self.in_isr,
            cur_bbl=self.cur_bbl, prev_bbl=self.prev_bbl, debug=bytes(self.debug),
            taint=tuple(self.taint), flag_taint=self.flag_taint,
            last_branch_taint=self.last_branch_taint,
        )

    def restore(self, s: MachineSnapshot) -> None:
        self.regs[:] = s.regs
        self.z, self.n, self.c = s.flags
        self.ram[:] = s.ram
        self.bb_count = s.bb_count
        self.insn_count = s.insn_count
        self.frames = [Frame.thaw(t) for t in s.frames]
        self._cs = (-1, 0)
        self.next_frame_id = s.next_frame_id
        self.pending_irqs = set(s.pending_irqs)
        self.in_isr = s.in_isr
        self.cur_bbl = s.cur_bbl
        self.prev_bbl = s.prev_bbl
        self.debug[:] = s.debug
        self.taint[:] = s.taint
        self.flag_taint = s.flag_taint
        self.last_branch_taint = s.last_branch_taint
        self.status = None
        self.fault_taint = None

    # -- memory helpers (slow paths) -----------------------------------
    def read32(self, addr: int, taint=None) -> int:
        if addr & 3:
            raise _Fault(FaultKind.MEM_PERM, addr, taint)
        if RAM_BASE <= addr < RAM_END:
            return _U32.unpack_from(self.ram, addr - RAM_BASE)[0]
        if MMIO_BASE <= addr < MMIO_END:
            return self.bus.read(self, addr, 32) & M32
        if addr < FLASH_SIZE:
            return self.fw.word(addr)
        if SCS_BASE <= addr < SCS_END:
            return self.scs.read(self, addr) & M32
        raise _Fault(FaultKind.MEM_PERM, addr, taint)

    def read8(self, addr: int, taint=None) -> int:
        if RAM_BASE <= addr < RAM_END:
            return self.ram[addr - RAM_BASE]
        if MMIO_BASE <= addr < MMIO_END:
            return self.bus.read(self, addr, 8) & 0xFF
        if addr < FLASH_SIZE:
            return self.fw.byte(addr)
        if SCS_BASE <= addr < SCS_END:
            return (self.scs.read(self, addr & ~3) >> (8 * (addr & 3))) & 0xFF
        raise _Fault(FaultKind.MEM_PERM, addr, taint)

    def write32(self, addr: int, value: int, taint=None) -> None:
        if addr & 3:
            raise _Fault(FaultKind.MEM_PERM, addr, taint)
        if RAM_BASE <= addr < RAM_END:
            _U32.pack_into(self.ram, addr - RAM_BASE, value & M32)
        elif MMIO_BASE <= addr < MMIO_END:
            self.bus.write(self, addr, value & M32, 32)
        elif addr == DEBUG_PORT:
            self.debug.append(value & 0xFF)
        elif SCS_BASE <= addr < SCS_END:
            self.scs.write(self, addr, value & M32)
        else:
            raise _Fault(FaultKind.MEM_PERM, addr, taint)

    def write8(self, addr: int, value: int, taint=None) -> None:
        if RAM_BASE <= addr < RAM_END:
            self.ram[addr - RAM_BASE] = value & 0xFF
        elif MMIO_BASE <= addr < MMIO_END:
            self.bus.write(self, addr, value & 0xFF, 8)
        elif DEBUG_PORT <= addr < DEBUG_PORT + 4:
            self.debug.append(value & 0xFF)
        elif SCS_BASE <= addr < SCS_END:
            word = addr & ~3
            shift = 8 * (addr & 3)
            old = self.scs.read(self, word)
            self.scs.write(self, word, (old & ~(0xFF << shift)) | ((value & 0xFF) << shift))
        else:
            raise _Fault(FaultKind.MEM_PERM, addr, taint)

    # -- control flow --------------------------------------------------
    def _enter_block(self, target: int) -> None:
        self.prev_bbl = self.cur_bbl
        self.cur_bbl = target
        self.bb_count += 1
        if self.block_hook is not None:
            self.block_hook(self, self.prev_bbl, target)
        if self.in_isr == 0 and self.irq_delivery:
            if self.irq_source is not None:
                irq = self.irq_source(self)
                if irq is not None:
                    self.pending_irqs.add(irq)
            if self.pending_irqs:
                irq = min(self.pending_irqs)
                self.pending_irqs.discard(irq)
                self._interrupt(irq)

    def _sleep(self) -> None:
        # WFI: let the block clock run ahead to the next scheduled firing
        src = self.irq_source
        if src is None or self.in_isr or not self.irq_delivery or self.pending_irqs:
            return
        next_fire = getattr(src, "next_fire", None)
        if next_fire is None:
            return
        at = next_fire()
        if at is not None and at - 1 > self.bb_count:
            self.bb_count = at - 1

    def _interrupt(self, irq: int) -> None:
        if not 0 <= irq < NUM_IRQS:
            raise _Fault(FaultKind.BAD_VECTOR, irq)
        if self.in_isr >= MAX_ISR_DEPTH:
            raise _Fault(FaultKind.IRQ_NESTING, irq)
        handler = self.fw.vector(irq)
        if handler % 4 or not (0 < handler < self.fw.size):
            raise _Fault(FaultKind.BAD_VECTOR, VECTOR_IRQ_BASE + 4 * irq)
        regs = self.regs
        sp = (regs[SP] - 8) & M32
        self.write32(sp + 4, regs[15])
        self.write32(sp, self.flags_word)
        regs[SP] = sp
        self.frames.append(Frame(regs[15], self.next_frame_id, irq))
        self.next_frame_id += 1
        self.in_isr += 1
        regs[15] = handler
        self._enter_block(handler)

    def enter_interrupt(self, irq: int) -> StepOutcome:
        """Dispatch ``irq`` now, regardless of the firing schedule."""
        if self.status is not None:
            raise MachineHalted(self.status)
        try:
            self._interrupt(irq)
        except _Fault as f:
            return self._set_fault(f)
        return CONTINUED

    def request_irq(self, irq: int) -> None:
        self.pending_irqs.add(irq)

    def _set_fault(self, f: _Fault) -> StepOutcome:
        self.fault_taint = f.taint
        self.status = StepOutcome("fault", f.kind, f.addr, self.regs[15])
        return self.status

    # -- execution -----------------------------------------------------
    def step(self) -> StepOutcome:
        return self.run(1)

    def run(self, max_insns: int) -> StepOutcome:
        """Execute up to ``max_insns`` instructions."""
        if self.status is not None:
            raise MachineHalted(self.status)
        try:
            return self._run(max_insns)
        except _Fault as f:
            return self._set_fault(f)

    def _run(self, max_insns: int) -> StepOutcome:
        regs = self.regs
        taint = self.taint
        ram = self.ram
        fw = self.fw
        code = fw.code
        unpack = _U32.unpack_from
        pack = _U32.pack_into
        bus = self.bus
        executed = 0
        while executed < max_insns:
            pc = regs[15]
            ins = code.get(pc)
            if ins is None:
                ins = fw.fetch(pc)
            op, rd, rs, imm = ins
            npc = pc + 4

            if op == LDW or op == STW:
                addr = (regs[rs] + imm) & M32
                if op == LDW:
                    if RAM_BASE <= addr < RAM_END - 3 and not addr & 3:
                        regs[rd] = unpack(ram, addr - RAM_BASE)[0]
                        taint[rd] = None
                    elif MMIO_BASE <= addr < MMIO_END and not addr & 3:
                        regs[rd] = bus.read(self, addr, 32) & M32
                        taint[rd] = addr | self.read_mark
                        self.read_mark = 0
                    else:
                        regs[rd] = self.read32(addr, taint[rs])
                        taint[rd] = None
                else:
                    if RAM_BASE <= addr < RAM_END - 3 and not addr & 3:
                        pack(ram, addr - RAM_BASE, regs[rd])
                    else:
                        self.write32(addr, regs[rd], taint[rs] or taint[rd])
                regs[15] = npc
            elif op >= ADDI and op <= CMPI:
                a = regs[rd]
                if op == ANDI:
                    regs[rd] = a & imm
                elif op == CMPI:
                    self._compare(a, imm & M32, taint[rd])
                elif op == ADDI:
                    regs[rd] = (a + imm) & M32
                elif op == ORI:
                    regs[rd] = a | imm
                elif op == SUBI:
                    regs[rd] = (a - imm) & M32
                elif op == XORI:
                    regs[rd] = a ^ imm
                elif op == SHLI:
                    regs[rd] = (a << imm) & M32
                else:
                    regs[rd] = a >> imm
                regs[15] = npc
            elif op >= BAL and op <= BL:
                if op == BAL:
                    take = True
                elif op == BL:
                    regs[LR] = npc
                    taint[LR] = None
                    self.frames.append(Frame(npc, self.next_frame_id))
                    self.next_frame_id += 1
                    take = True
                else:
                    if op == BEQ:
                        take = self.z
                    elif op == BNE:
                        take = not self.z
                    elif op == BLT:
                        take = self.n
                    else:
                        take = not self.n
                    src = self.flag_taint
                    if src is not None:
                        self.last_branch_taint = src
                        bus.branch(self, src)
                target = (npc + imm * 4) & M32 if take else npc
                regs[15] = target
                self.insn_count += 1
                executed += 1
                self._enter_block(target)
                continue
            elif op == LDI:
                regs[rd] = imm
                taint[rd] = None
                regs[15] = npc
            elif op == LUI:
                regs[rd] = (imm << 16) | (regs[rd] & 0xFFFF)
                regs[15] = npc
            elif op >= ADD and op <= CMP:
                a = regs[rd]
                b = regs[rs]
                t = taint[rd] if taint[rd] is not None else taint[rs]
                if op == CMP:
                    self._compare(a, b, t)
                else:
                    if op == ADD:
                        r = (a + b) & M32
                    elif op == SUB:
                        r = (a - b) & M32
                    elif op == AND:
                        r = a & b
                    elif op == OR:
                        r = a | b
                    elif op == XOR:
                        r = a ^ b
                    elif op == SHL:
                        r = (a << (b & 31)) & M32
                    else:
                        r = a >> (b & 31)
                    regs[rd] = r
                    taint[rd] = t
                regs[15] = npc
            elif op == MOV:
                regs[rd] = regs[rs]
                taint[rd] = taint[rs]
                regs[15] = npc
            elif op == RET:
                target = regs[LR]
                if len(self.frames) < 2 or self.frames[-1].irq is not None \
                        or self.frames[-1].ret != target:
                    raise _Fault(FaultKind.STACK_MISMATCH, target, taint[LR])
                self.frames.pop()
                regs[15] = target
                self.insn_count += 1
                executed += 1
                if self.stop_below_depth is not None and len(self.frames) - 1 < self.stop_below_depth:
                    self.status = StepOutcome("frame_pop", pc=target)
                    return self.status
                self._enter_block(target)
                continue
            elif op == PUSH or op == POP:
                sp = regs[SP]
                if op == PUSH:
                    sp = (sp - 4) & M32
                    self.write32(sp, regs[rd], taint[SP])
                    regs[SP] = sp
                else:
                    val = self.read32(sp, taint[SP])
                    regs[SP] = (sp + 4) & M32
                    regs[rd] = val
                    taint[rd] = None
                regs[15] = npc
            elif op == LDB or op == STB:
                addr = (regs[rs] + imm) & M32
                if op == LDB:
                    regs[rd] = self.read8(addr, taint[rs])
                    if MMIO_BASE <= addr < MMIO_END:
                        taint[rd] = (addr & ~3) | self.read_mark
                        self.read_mark = 0
                    else:
                        taint[rd] = None
                else:
                    self.write8(addr, regs[rd], taint[rs] or taint[rd])
                regs[15] = npc
            elif op == NOP:
                regs[15] = npc
            elif op == WFI:
                regs[15] = npc
                self.insn_count += 1
                executed += 1
                self._sleep()
                self._enter_block(npc)
                continue
            elif op == IRET:
                if self.in_isr == 0:
                    raise _Fault(FaultKind.UNDEF_INSN, pc)
                sp = regs[SP]
                flags = self.read32(sp)
                target = self.read32(sp + 4)
                fr = self.frames[-1]
                if fr.irq is None or fr.ret != target:
                    raise _Fault(FaultKind.STACK_MISMATCH, target)
                regs[SP] = (sp + 8) & M32
                self.z, self.n, self.c = bool(flags & 1), bool(flags & 2), bool(flags & 4)
                self.frames.pop()
                self.in_isr -= 1
                regs[15] = target
                self.insn_count += 1
                executed += 1
                if self.stop_below_depth is not None and len(self.frames) - 1 < self.stop_below_depth:
                    self.status = StepOutcome("frame_pop", pc=target)
                    return self.status
                self._enter_block(target)
                continue
            elif op == HALT:
                self.insn_count += 1
                self.status = StepOutcome("halted", pc=pc)
                return self.status
            else:  # pragma: no cover - decode() only yields known opcodes
                raise _Fault(FaultKind.UNDEF_INSN, pc)
            self.insn_count += 1
            executed += 1
        return CONTINUED

    def _compare(self, a: int, b: int, src: int | None) -> None:
        self.z = a == b
        sa = a - 0x100000000 if a & 0x80000000 else a
        sb = b - 0x100000000 if b & 0x80000000 else b
        self.n = sa < sb
        self.c = a >= b
        self.flag_taint = src
        if src is not None:
            self.bus.condition(self, src)


def load_firmware(image: bytes | Firmware) -> Machine:
    """Reset a machine from a vector-table-first flash image."""
    fw = image if isinstance(image, Firmware) else Firmware(image)
    m = Machine(fw)
    m.regs[SP] = fw.initial_sp
    m.regs[15] = fw.reset
    m.cur_bbl = fw.reset
    return m


@dataclass(frozen=True)
class Snapshot:
    """Everything needed to resume an execution: the machine plus the
    peripheral-model and interrupt runtime state.  ``harness`` carries
    run-level extras (input cursor, coverage) that explorer workers ignore."""

    snapshot_id: int
    machine: MachineSnapshot
    bus: object = None
    irq: object = None
    harness: object = None
