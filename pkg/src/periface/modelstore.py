"""The instantiated model and its text serialization.

A model file is sectioned, line oriented and canonical (save, load, save
gives identical bytes)::

    [meta]
    format_version 1
    firmware_hash <sha256 hex>
    session_seed 0x0000000000000001
    [registers]
    # addr category locked peripheral stored_value cr_bitmask reads writes rmw_bits
    0x40004400 CR 0 0x40004400 0x0000200c 0x00000000 4 3 0x0000000c
    [sr_handlers]
    # r cs bbl conf value
    0x40004404 0x1b0e... 0x000000f0 0x5d21... 0x00000080
    [interrupts]
    enable 28
    [tie_breaks]
    # r cs bbl conf chosen tied...
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

from .explore import SRHandlerTable, TieBreak
from .regmodel import Category, RegisterRecord, SRAccessContext

FORMAT_VERSION = 1
SECTIONS = ("meta", "registers", "sr_handlers", "interrupts", "tie_breaks")


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        self.line = line
        super().__init__(f"line {line}: {msg}")


class VersionMismatch(ValueError):
    pass


class InvariantViolation(ValueError):
    def __init__(self, record, msg: str):
        self.record = record
        super().__init__(msg)


class FirmwareMismatch(ValueError):
    pass


@dataclass
class InstantiatedModel:
    firmware_hash: str = ""
    session_seed: int = 0
    registers: dict[int, RegisterRecord] = field(default_factory=dict)
    sr_handlers: SRHandlerTable = field(default_factory=SRHandlerTable)
    interrupt_log: set[tuple[str, int]] = field(default_factory=set)
    tie_break_log: list[TieBreak] = field(default_factory=list)
    rmw_bits: dict[int, int] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    version: int = field(default=0, compare=False)  # bumps on every model change

    def touch(self) -> None:
        self.version += 1

    def copy(self) -> "InstantiatedModel":
        return InstantiatedModel(
            self.firmware_hash, self.session_seed,
            {a: copy.copy(r) for a, r in self.registers.items()},
            self.sr_handlers.copy(), set(self.interrupt_log), list(self.tie_break_log),
            dict(self.rmw_bits), self.format_version, self.version)

    def add_handler(self, ctx: SRAccessContext, value: int, tie: TieBreak | None = None) -> None:
        self.sr_handlers.insert(ctx, value)
        if tie is not None:
            self.tie_break_log.append(tie)
        self.touch()

    def note_irq(self, kind: str, irq: int) -> None:
        if (kind, irq) not in self.interrupt_log:
            self.interrupt_log.add((kind, irq))
            self.touch()

    def peripherals(self) -> list[int]:
        return sorted({r.peripheral_id for r in self.registers.values()})

    def categories(self) -> dict[int, Category]:
        return {a: r.category for a, r in self.registers.items()}

    def check(self) -> None:
        for rec in self.registers.values():
            try:
                rec.check()
            except ValueError as e:
                raise InvariantViolation(rec, str(e)) from None
        for ctx, value in self.sr_handlers.items():
            if ctx.r not in self.registers:
                raise InvariantViolation(ctx, f"handler for unknown register 0x{ctx.r:08x}")
            if value & (value - 1):
                raise InvariantViolation(ctx, f"handler value 0x{value:08x} is not one-hot or zero")


def _h32(v: int) -> str:
    return f"0x{v:08x}"


def _h64(v: int) -> str:
    return f"0x{v:016x}"


def dumps(model: InstantiatedModel) -> str:
    out = ["[meta]",
           f"format_version {model.format_version}",
           f"firmware_hash {model.firmware_hash or '-'}",
           f"session_seed {_h64(model.session_seed)}",
           "[registers]",
           "# addr category locked peripheral stored_value cr_bitmask reads writes rmw_bits"]
    for addr in sorted(model.registers):
        r = model.registers[addr]
        out.append(" ".join([_h32(addr), r.category.value, str(int(r.locked)), _h32(r.peripheral_id),
                             _h32(r.stored_value), _h32(r.cr_bitmask), str(r.reads), str(r.writes),
                             _h32(model.rmw_bits.get(addr, 0))]))
    out += ["[sr_handlers]", "# r cs bbl conf value"]
    for ctx, value in model.sr_handlers.items():
        out.append(f"{_h32(ctx.r)} {_h64(ctx.cs)} {_h32(ctx.bbl)} {_h64(ctx.conf)} {_h32(value)}")
    out.append("[interrupts]")
    for kind, irq in sorted(model.interrupt_log, key=lambda e: (e[1], e[0])):
        out.append(f"{kind} {irq}")
    out += ["[tie_breaks]", "# r cs bbl conf chosen tied..."]
    for t in model.tie_break_log:
        c = t.ctx
        tied = " ".join(_h32(v) for v in t.tied)
        out.append(f"{_h32(c.r)} {_h64(c.cs)} {_h32(c.bbl)} {_h64(c.conf)} {_h32(t.chosen)} {tied}")
    return "\n".join(out) + "\n"


def _int(tok: str, line: int, bits: int = 32) -> int:
    try:
        v = int(tok, 0)
    except ValueError:
        raise ParseError(line, f"bad number '{tok}'") from None
    if not 0 <= v < (1 << bits):
        raise ParseError(line, f"number '{tok}' out of range")
    return v


def loads(text: str) -> InstantiatedModel:
    model = InstantiatedModel(format_version=0)
    section = None
    seen = set()
    meta = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section not in SECTIONS:
                raise ParseError(n, f"unknown section [{section}]")
            if section in seen:
                raise ParseError(n, f"duplicate section [{section}]")
            seen.add(section)
            continue
        f = line.split()
        if section is None:
            raise ParseError(n, "data before the first section")
        if section == "meta":
            if len(f) != 2:
                raise ParseError(n, "expected 'key value'")
            meta[f[0]] = (f[1], n)
        elif section == "registers":
            if len(f) != 9:
                raise ParseError(n, f"register line needs 9 fields, got {len(f)}")
            try:
                cat = Category(f[1])
            except ValueError:
                raise ParseError(n, f"unknown category '{f[1]}'") from None
            if f[2] not in ("0", "1"):
                raise ParseError(n, f"locked must be 0 or 1, got '{f[2]}'")
            addr = _int(f[0], n)
            if addr in model.registers:
                raise ParseError(n, f"duplicate register 0x{addr:08x}")
            model.registers[addr] = RegisterRecord(
                addr, cat, _int(f[3], n), _int(f[4], n), _int(f[5], n), f[2] == "1",
                _int(f[6], n, 63), _int(f[7], n, 63))
            rmw = _int(f[8], n)
            if rmw:
                model.rmw_bits[addr] = rmw
        elif section == "sr_handlers":
            if len(f) != 5:
                raise ParseError(n, f"handler line needs 5 fields, got {len(f)}")
            ctx = SRAccessContext(_int(f[0], n), _int(f[1], n, 64), _int(f[2], n), _int(f[3], n, 64))
            if ctx in model.sr_handlers:
                raise ParseError(n, "duplicate handler context")
            model.sr_handlers.insert(ctx, _int(f[4], n))
        elif section == "interrupts":
            if len(f) != 2 or f[0] not in ("enable", "disable"):
                raise ParseError(n, "expected 'enable|disable irq'")
            irq = _int(f[1], n)
            if irq >= 32:
                raise ParseError(n, f"irq {irq} out of range")
            model.interrupt_log.add((f[0], irq))
        else:  # tie_breaks
            if len(f) < 7:
                raise ParseError(n, "tie-break line needs a context, a choice and 2+ tied values")
            ctx = SRAccessContext(_int(f[0], n), _int(f[1], n, 64), _int(f[2], n), _int(f[3], n, 64))
            tied = tuple(_int(t, n) for t in f[5:])
            chosen = _int(f[4], n)
            if chosen not in tied:
                raise ParseError(n, "chosen value is not among the tied values")
            model.tie_break_log.append(TieBreak(ctx, tied, chosen))
    if "format_version" not in meta:
        raise ParseError(0, "missing format_version")
    ver_tok, ver_line = meta["format_version"]
    version = _int(ver_tok, ver_line)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, expected {FORMAT_VERSION}")
    model.format_version = version
    fh = meta.get("firmware_hash", ("-", 0))[0]
    model.firmware_hash = "" if fh == "-" else fh
    if "session_seed" in meta:
        model.session_seed = _int(meta["session_seed"][0], meta["session_seed"][1], 64)
    model.check()
    return model


def save(model: InstantiatedModel, path) -> None:
    Path(path).write_text(dumps(model))


def load(path, firmware_hash: str | None = None) -> InstantiatedModel:
    model = loads(Path(path).read_text())
    if firmware_hash is not None and model.firmware_hash and model.firmware_hash != firmware_hash:
        raise FirmwareMismatch(f"model is for firmware {model.firmware_hash[:16]}..., "
                               f"image is {firmware_hash[:16]}...")
    return model


@dataclass(frozen=True, order=True)
class Change:
    order: tuple
    kind: str  # added | removed | recategorized | handler
    text: str

    def __str__(self) -> str:
        return self.text


def diff(a: InstantiatedModel, b: InstantiatedModel) -> list[Change]:
    """What changed from ``a`` to ``b`` (registers first, then new handlers)."""
    if a.firmware_hash != b.firmware_hash:
        raise FirmwareMismatch("models were instantiated for different firmware")
    changes = []
    for addr in sorted(set(a.registers) | set(b.registers)):
        ra, rb = a.registers.get(addr), b.registers.get(addr)
        if ra is None:
            changes.append(Change((0, addr), "added", f"+ 0x{addr:08x} {rb.category.value}"))
        elif rb is None:
            changes.append(Change((0, addr), "removed", f"- 0x{addr:08x} {ra.category.value}"))
        elif ra.category is not rb.category:
            changes.append(Change((0, addr), "recategorized",
                                  f"~ 0x{addr:08x} {ra.category.value} -> {rb.category.value}"))
    for ctx, value in b.sr_handlers.items():
        if ctx not in a.sr_handlers:
            changes.append(Change((1, ctx.r, ctx.bbl, ctx.cs, ctx.conf), "handler",
                                  f"+ handler {ctx} value=0x{value:08x}"))
    return changes
