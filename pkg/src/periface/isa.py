"""Instruction set shared by the interpreter, assembler and disassembler.

Every instruction is one little-endian 32-bit word::

    31      24 23  20 19  16 15            0
    | opcode  |  rd  |  rs  |     imm16     |

Fields an instruction does not use must be zero; a word with a nonzero
unused field does not decode (the disassembler falls back to ``.word``).
r15 is the program counter and never appears as an operand.
"""

from __future__ import annotations

from dataclasses import dataclass

# operand formats
F_NONE = "none"      # NOP
F_RIMM = "rimm"      # LDI rd, #u16
F_RR = "rr"          # ADD rd, rs
F_RSIMM = "rsimm"    # ADD rd, #s16
F_RUIMM = "ruimm"    # AND rd, #u16
F_RSHIFT = "rshift"  # SHL rd, #0..31
F_MEM = "mem"        # LDW rd, [rs, #s16]
F_BR = "br"          # BEQ target (s16 word offset from pc+4)
F_R = "r"            # PUSH rd


@dataclass(frozen=True)
class OpInfo:
    opcode: int
    mnemonic: str
    fmt: str
    summary: str


_OPS = [
    OpInfo(0x00, "NOP", F_NONE, "no operation"),
    OpInfo(0x01, "HALT", F_NONE, "stop execution (run verdict ok)"),
    OpInfo(0x02, "WFI", F_NONE, "end the block and yield to the interrupt scheduler"),
    OpInfo(0x03, "RET", F_NONE, "pc <- lr; pops one shadow frame"),
    OpInfo(0x04, "IRET", F_NONE, "pop flags and pc from the stack; leave the ISR"),
    OpInfo(0x10, "LDI", F_RIMM, "rd <- zext(imm)"),
    OpInfo(0x11, "LUI", F_RIMM, "rd <- (imm << 16) | (rd & 0xffff)"),
    OpInfo(0x12, "MOV", F_RR, "rd <- rs"),
    OpInfo(0x20, "ADD", F_RR, "rd <- rd + rs"),
    OpInfo(0x21, "SUB", F_RR, "rd <- rd - rs"),
    OpInfo(0x22, "AND", F_RR, "rd <- rd & rs"),
    OpInfo(0x23, "OR", F_RR, "rd <- rd | rs"),
    OpInfo(0x24, "XOR", F_RR, "rd <- rd ^ rs"),
    OpInfo(0x25, "SHL", F_RR, "rd <- rd << (rs & 31)"),
    OpInfo(0x26, "SHR", F_RR, "rd <- rd >> (rs & 31), logical"),
    OpInfo(0x27, "CMP", F_RR, "flags <- compare(rd, rs)"),
    OpInfo(0x30, "ADD", F_RSIMM, "rd <- rd + sext(imm)"),
    OpInfo(0x31, "SUB", F_RSIMM, "rd <- rd - sext(imm)"),
    OpInfo(0x32, "AND", F_RUIMM, "rd <- rd & zext(imm)"),
    OpInfo(0x33, "OR", F_RUIMM, "rd <- rd | zext(imm)"),
    OpInfo(0x34, "XOR", F_RUIMM, "rd <- rd ^ zext(imm)"),
    OpInfo(0x35, "SHL", F_RSHIFT, "rd <- rd << imm"),
    OpInfo(0x36, "SHR", F_RSHIFT, "rd <- rd >> imm, logical"),
    OpInfo(0x37, "CMP", F_RSIMM, "flags <- compare(rd, sext(imm))"),
    OpInfo(0x40, "LDW", F_MEM, "rd <- mem32[rs + sext(imm)]"),
    OpInfo(0x41, "LDB", F_MEM, "rd <- mem8[rs + sext(imm)]"),
    OpInfo(0x42, "STW", F_MEM, "mem32[rs + sext(imm)] <- rd"),
    OpInfo(0x43, "STB", F_MEM, "mem8[rs + sext(imm)] <- rd & 0xff"),
    OpInfo(0x50, "BAL", F_BR, "branch always"),
    OpInfo(0x51, "BEQ", F_BR, "branch if Z"),
    OpInfo(0x52, "BNE", F_BR, "branch if not Z"),
    OpInfo(0x53, "BLT", F_BR, "branch if N (signed less-than)"),
    OpInfo(0x54, "BGE", F_BR, "branch if not N"),
    OpInfo(0x55, "BL", F_BR, "lr <- pc + 4; branch; pushes one shadow frame"),
    OpInfo(0x60, "PUSH", F_R, "sp <- sp - 4; mem32[sp] <- rd"),
    OpInfo(0x61, "POP", F_R, "rd <- mem32[sp]; sp <- sp + 4"),
]

BY_OPCODE: dict[int, OpInfo] = {op.opcode: op for op in _OPS}
# mnemonic -> {fmt: opcode}; ALU mnemonics have a register and an immediate form
BY_MNEMONIC: dict[str, dict[str, int]] = {}
for _op in _OPS:
    BY_MNEMONIC.setdefault(_op.mnemonic, {})[_op.fmt] = _op.opcode
BY_MNEMONIC["B"] = BY_MNEMONIC["BAL"]

# opcode constants used by the interpreter hot loop
NOP, HALT, WFI, RET, IRET = 0x00, 0x01, 0x02, 0x03, 0x04
LDI, LUI, MOV = 0x10, 0x11, 0x12
ADD, SUB, AND, OR, XOR, SHL, SHR, CMP = range(0x20, 0x28)
ADDI, SUBI, ANDI, ORI, XORI, SHLI, SHRI, CMPI = range(0x30, 0x38)
LDW, LDB, STW, STB = 0x40, 0x41, 0x42, 0x43
BAL, BEQ, BNE, BLT, BGE, BL = range(0x50, 0x56)
PUSH, POP = 0x60, 0x61

REG_NAMES = [f"r{i}" for i in range(13)] + ["sp", "lr"]
SP, LR, PC = 13, 14, 15


def sext16(v: int) -> int:
    return v - 0x10000 if v & 0x8000 else v


@dataclass(frozen=True)
class Insn:
    op: int
    rd: int
    rs: int
    imm: int  # already sign-extended where the format says so


def encode(opcode: int, rd: int = 0, rs: int = 0, imm: int = 0) -> int:
    return ((opcode & 0xFF) << 24) | ((rd & 0xF) << 20) | ((rs & 0xF) << 16) | (imm & 0xFFFF)


def decode(word: int) -> Insn | None:
    """Decode one word, or None when it is not a canonical instruction."""
    opcode = word >> 24
    info = BY_OPCODE.get(opcode)
    if info is None:
        return None
    rd = (word >> 20) & 0xF
    rs = (word >> 16) & 0xF
    raw = word & 0xFFFF
    fmt = info.fmt
    if fmt == F_NONE:
        ok = rd == 0 and rs == 0 and raw == 0
        imm = 0
    elif fmt in (F_RIMM, F_RUIMM):
        ok = rs == 0 and rd != PC
        imm = raw
    elif fmt == F_RR:
        ok = raw == 0 and rd != PC and rs != PC
        imm = 0
    elif fmt == F_RSIMM:
        ok = rs == 0 and rd != PC
        imm = sext16(raw)
    elif fmt == F_RSHIFT:
        ok = rs == 0 and rd != PC and raw < 32
        imm = raw
    elif fmt == F_MEM:
        ok = rd != PC and rs != PC
        imm = sext16(raw)
    elif fmt == F_BR:
        ok = rd == 0 and rs == 0
        imm = sext16(raw)
    else:  # F_R
        ok = rs == 0 and raw == 0 and rd != PC
        imm = 0
    if not ok:
        return None
    return Insn(opcode, rd, rs, imm)


def is_control_transfer(opcode: int) -> bool:
    """True for instructions that end a basic block."""
    return opcode in (BAL, BEQ, BNE, BLT, BGE, BL, RET, IRET, WFI)


_SYNTAX = {
    F_NONE: "{m}",
    F_RIMM: "{m} rd, #imm16",
    F_RR: "{m} rd, rs",
    F_RSIMM: "{m} rd, #simm16",
    F_RUIMM: "{m} rd, #imm16",
    F_RSHIFT: "{m} rd, #0..31",
    F_MEM: "{m} rd, [rs, #simm16]",
    F_BR: "{m} label",
    F_R: "{m} rd",
}


def reference() -> str:
    """Markdown reference for the instruction set (``periface isa doc``)."""
    lines = [
        "# Instruction set",
        "",
        "Every instruction is one little-endian 32-bit word:",
        "",
        "```",
        "31      24 23  20 19  16 15            0",
        "| opcode  |  rd  |  rs  |     imm16     |",
        "```",
        "",
        "Unused fields must be zero; other words do not decode.",
        f"Registers: {', '.join(REG_NAMES)} (r13 = sp, r14 = lr). "
        "r15 is the program counter and never an operand.",
        "Flags Z and N are set by CMP only. Branch offsets are signed word offsets "
        "from pc + 4; the assembler takes absolute targets.",
        "Memory: flash 0x00000000 (R+X), RAM 0x20000000 (R+W), peripherals "
        "0x40000000-0x5fffffff (R+W), debug port 0xe0000000 (W), system control "
        "0xe000e000 (R+W). Anything else faults.",
        "",
        "| opcode | syntax | operation | ends block |",
        "|---|---|---|---|",
    ]
    for op in _OPS:
        syntax = _SYNTAX[op.fmt].format(m=op.mnemonic)
        ends = "yes" if is_control_transfer(op.opcode) or op.opcode == HALT else ""
        lines.append(f"| 0x{op.opcode:02x} | `{syntax}` | {op.summary} | {ends} |")
    lines += [
        "",
        "## Assembler extras",
        "",
        "| form | meaning |",
        "|---|---|",
        "| `LI rd, #imm32` | pseudo: LDI low half, then LUI high half (two words) |",
        "| `B label` | alias of BAL |",
        "| `.equ NAME, expr` | named constant |",
        "| `.word expr, ...` | literal words (labels allowed) |",
        "| `.org addr` | pad with zeros up to addr |",
        "",
        "Expressions: numbers, `'c'` character literals, symbols, "
        "`+ - * / % & | ^ << >> ~`, `lo(x)`, `hi(x)`. Comments start with `;`.",
        "",
    ]
    return "\n".join(lines)
