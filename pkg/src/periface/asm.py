"""Two-pass assembler and a matching disassembler.

Source syntax, one statement per line::

    .equ  USART_SR, 0x40004404     ; named constant
    .org  0x88                     ; pad with zeros up to an address
    .word reset, 0x2000F000        ; literal words
    loop: LDW r1, [r0, #4]         ; labels may share a line
          CMP r1, #0
          BEQ loop
          LI  r0, #USART_SR        ; pseudo: LDI low half + LUI high half

Immediates take a ``#`` prefix and may be expressions over numbers,
character literals, symbols, ``+ - * / % & | ^ << >> ~`` and the helpers
``lo(x)`` / ``hi(x)``.  Branch operands are absolute targets.
"""

from __future__ import annotations

import ast
import re
import struct
from dataclasses import dataclass, field

from . import isa
from .isa import (F_BR, F_NONE, F_R, F_RIMM, F_RR, F_RSHIFT, F_RSIMM, F_RUIMM,
                  REG_NAMES)

M32 = 0xFFFFFFFF
MAX_IMAGE = 0x00100000


class AsmError(ValueError):
    def __init__(self, msg: str, filename: str = "<input>", line: int = 0):
        self.msg = msg
        self.filename = filename
        self.line = line
        super().__init__(f"{filename}:{line}: {msg}")


class AsmSyntaxError(AsmError):
    pass


class UnresolvedLabel(AsmError):
    def __init__(self, name: str, filename: str = "<input>", line: int = 0):
        self.name = name
        super().__init__(f"unresolved symbol '{name}'", filename, line)


class AsmRangeError(AsmError):
    pass


@dataclass
class Assembly:
    image: bytes
    symbols: dict[str, int]
    lines: dict[int, int] = field(default_factory=dict)  # address -> source line

    def symbol_map(self) -> str:
        """Label-to-address sidecar text, sorted by address then name."""
        rows = sorted(self.symbols.items(), key=lambda kv: (kv[1], kv[0]))
        return "".join(f"0x{addr:08x} {name}\n" for name, addr in rows)


_REGS = {name: i for i, name in enumerate(REG_NAMES)}
_REGS.update({"r13": 13, "r14": 14})

_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.FloorDiv: lambda a, b: a // b,
    ast.Div: lambda a, b: a // b,
    ast.Mod: lambda a, b: a % b,
    ast.BitAnd: lambda a, b: a & b,
    ast.BitOr: lambda a, b: a | b,
    ast.BitXor: lambda a, b: a ^ b,
    ast.LShift: lambda a, b: a << b,
    ast.RShift: lambda a, b: a >> b,
}
_FUNCS = {
    "lo": lambda v: v & 0xFFFF,
    "hi": lambda v: (v >> 16) & 0xFFFF,
}


class _Unresolved(Exception):
    def __init__(self, name):
        self.name = name


def _eval(node, symbols):
    if isinstance(node, ast.Expression):
        return _eval(node.body, symbols)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool):
            raise ValueError("bad literal")
        if isinstance(node.value, int):
            return node.value
        if isinstance(node.value, str) and len(node.value) == 1:
            return ord(node.value)
        raise ValueError(f"bad literal {node.value!r}")
    if isinstance(node, ast.Name):
        if node.id not in symbols:
            raise _Unresolved(node.id)
        return symbols[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval(node.left, symbols), _eval(node.right, symbols))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, symbols)
        if isinstance(node.op, ast.USub):
            return -v
        if isinstance(node.op, ast.UAdd):
            return v
        if isinstance(node.op, ast.Invert):
            return ~v & M32
    if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
            and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords):
        return _FUNCS[node.func.id](_eval(node.args[0], symbols))
    raise ValueError("unsupported expression")


@dataclass
class _Stmt:
    line: int
    addr: int
    mnemonic: str  # upper-case mnemonic or directive (".word", ".org")
    operands: list[str]
    size: int


_LABEL_RE = re.compile(r"^\s*([A-Za-z_.][\w.]*)\s*:")
_MEM_RE = re.compile(r"^\[\s*(\w+)\s*(?:,\s*#(.+))?\]$")


def _split_operands(text: str) -> list[str]:
    """Split on commas that are not inside brackets or parentheses."""
    out, depth, cur = [], 0, []
    for ch in text:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail or out:
        out.append(tail)
    return out


def _strip_comment(line: str) -> str:
    # a ';' inside a character literal is not a comment
    quote = False
    for i, ch in enumerate(line):
        if ch == "'":
            quote = not quote
        elif ch == ";" and not quote:
            return line[:i]
    return line


class _Assembler:
    def __init__(self, source: str, filename: str):
        self.source = source
        self.filename = filename
        self.symbols: dict[str, int] = {}
        self.labels: set[str] = set()
        self.stmts: list[_Stmt] = []

    def err(self, cls, msg, line):
        return cls(msg, self.filename, line)

    def expr(self, text: str, line: int, symbols=None) -> int:
        text = text.strip()
        if not text:
            raise self.err(AsmSyntaxError, "missing expression", line)
        try:
            tree = ast.parse(text, mode="eval")
            return _eval(tree, self.symbols if symbols is None else symbols)
        except _Unresolved as u:
            raise UnresolvedLabel(u.name, self.filename, line) from None
        except (SyntaxError, ValueError, ZeroDivisionError, TypeError):
            raise self.err(AsmSyntaxError, f"bad expression '{text}'", line) from None

    def define(self, name: str, value: int, line: int) -> None:
        if name in self.symbols:
            raise self.err(AsmSyntaxError, f"duplicate symbol '{name}'", line)
        if name in _REGS or name in _FUNCS:
            raise self.err(AsmSyntaxError, f"reserved name '{name}'", line)
        self.symbols[name] = value

    # -- pass 1: layout ------------------------------------------------
    def layout(self) -> None:
        addr = 0
        for lineno, raw in enumerate(self.source.splitlines(), 1):
            text = _strip_comment(raw)
            while True:
                m = _LABEL_RE.match(text)
                if not m:
                    break
                self.define(m.group(1), addr, lineno)
                self.labels.add(m.group(1))
                text = text[m.end():]
            text = text.strip()
            if not text:
                continue
            parts = text.split(None, 1)
            mnem = parts[0].upper() if not parts[0].startswith(".") else parts[0].lower()
            ops = _split_operands(parts[1]) if len(parts) > 1 else []
            if mnem == ".equ":
                if len(ops) != 2 or not re.fullmatch(r"[A-Za-z_][\w]*", ops[0]):
                    raise self.err(AsmSyntaxError, ".equ expects NAME, value", lineno)
                self.define(ops[0], self.expr(ops[1], lineno), lineno)
                continue
            if mnem == ".org":
                if len(ops) != 1:
                    raise self.err(AsmSyntaxError, ".org expects one address", lineno)
                target = self.expr(ops[0], lineno)
                if target < addr:
                    raise self.err(AsmRangeError, f".org 0x{target:x} moves backwards", lineno)
                if target % 4:
                    raise self.err(AsmRangeError, ".org address must be word aligned", lineno)
                self.stmts.append(_Stmt(lineno, addr, ".org", ops, target - addr))
                addr = target
                continue
            if mnem == ".word":
                if not ops or any(not o for o in ops):
                    raise self.err(AsmSyntaxError, ".word expects values", lineno)
                size = 4 * len(ops)
            elif mnem.startswith("."):
                raise self.err(AsmSyntaxError, f"unknown directive '{mnem}'", lineno)
            elif mnem == "LI":
                size = 8
            elif mnem in isa.BY_MNEMONIC:
                size = 4
            else:
                raise self.err(AsmSyntaxError, f"unknown mnemonic '{parts[0]}'", lineno)
            self.stmts.append(_Stmt(lineno, addr, mnem, ops, size))
            addr += size
            if addr > MAX_IMAGE:
                raise self.err(AsmRangeError, "image exceeds flash size", lineno)

    # -- pass 2: encoding ----------------------------------------------
    def reg(self, text: str, line: int) -> int:
        r = _REGS.get(text.strip().lower())
        if r is None:
            raise self.err(AsmSyntaxError, f"expected register, got '{text}'", line)
        return r

    def imm(self, text: str, line: int, lo: int, hi: int) -> int:
        text = text.strip()
        if not text.startswith("#"):
            raise self.err(AsmSyntaxError, f"expected immediate '#...', got '{text}'", line)
        v = self.expr(text[1:], line)
        if not lo <= v <= hi:
            raise self.err(AsmRangeError, f"immediate {v} outside [{lo}, {hi}]", line)
        return v

    def encode(self, st: _Stmt) -> list[int]:
        line, ops = st.line, st.operands
        if st.mnemonic == ".word":
            words = []
            for o in ops:
                v = self.expr(o, line)
                if not -0x80000000 <= v <= M32:
                    raise self.err(AsmRangeError, f".word value {v} does not fit 32 bits", line)
                words.append(v & M32)
            return words
        if st.mnemonic == "LI":
            self.arity(ops, 2, line)
            rd = self.reg(ops[0], line)
            v = self.imm(ops[1], line, -0x80000000, M32) & M32
            return [isa.encode(isa.LDI, rd, 0, v & 0xFFFF), isa.encode(isa.LUI, rd, 0, v >> 16)]
        forms = isa.BY_MNEMONIC[st.mnemonic]
        if len(forms) == 1:
            fmt, opcode = next(iter(forms.items()))
        else:
            # register and immediate forms share a mnemonic
            self.arity(ops, 2, line)
            if ops[1].startswith("#"):
                fmt = next(f for f in forms if f != F_RR)
            else:
                fmt = F_RR
            opcode = forms[fmt]
        if fmt == F_NONE:
            self.arity(ops, 0, line)
            return [isa.encode(opcode)]
        if fmt == F_R:
            self.arity(ops, 1, line)
            return [isa.encode(opcode, self.reg(ops[0], line))]
        if fmt == F_BR:
            self.arity(ops, 1, line)
            target = self.expr(ops[0], line) & M32
            if target % 4:
                raise self.err(AsmRangeError, f"branch target 0x{target:x} not word aligned", line)
            delta = (target - (st.addr + 4)) & M32
            if delta & 0x80000000:
                delta -= 1 << 32
            off = delta // 4
            if not -0x8000 <= off <= 0x7FFF:
                raise self.err(AsmRangeError, "branch target out of range", line)
            return [isa.encode(opcode, 0, 0, off)]
        self.arity(ops, 2, line)
        rd = self.reg(ops[0], line)
        if fmt == F_RR:
            return [isa.encode(opcode, rd, self.reg(ops[1], line))]
        if fmt == F_RIMM or fmt == F_RUIMM:
            return [isa.encode(opcode, rd, 0, self.imm(ops[1], line, 0, 0xFFFF))]
        if fmt == F_RSIMM:
            return [isa.encode(opcode, rd, 0, self.imm(ops[1], line, -0x8000, 0x7FFF))]
        if fmt == F_RSHIFT:
            return [isa.encode(opcode, rd, 0, self.imm(ops[1], line, 0, 31))]
        # F_MEM
        m = _MEM_RE.match(ops[1].strip())
        if not m:
            raise self.err(AsmSyntaxError, f"expected memory operand '[reg, #off]', got '{ops[1]}'",
                           line)
        rs = self.reg(m.group(1), line)
        off = 0
        if m.group(2) is not None:
            off = self.imm("#" + m.group(2), line, -0x8000, 0x7FFF)
        return [isa.encode(opcode, rd, rs, off)]

    def arity(self, ops, n, line):
        if len(ops) != n:
            raise self.err(AsmSyntaxError, f"expected {n} operand(s), got {len(ops)}", line)

    def run(self) -> Assembly:
        self.layout()
        out = bytearray()
        lines = {}
        for st in self.stmts:
            if st.mnemonic == ".org":
                out.extend(b"\0" * st.size)
                continue
            for i, w in enumerate(self.encode(st)):
                lines[st.addr + 4 * i] = st.line
                out.extend(struct.pack("<I", w))
        labels = {k: v for k, v in self.symbols.items() if k in self.labels}
        return Assembly(bytes(out), labels, lines)


def assemble_program(source: str, filename: str = "<input>") -> Assembly:
    return _Assembler(source, filename).run()


def assemble(source: str, filename: str = "<input>") -> bytes:
    """Assemble source text to a flat image starting at address 0."""
    return assemble_program(source, filename).image


def _format(addr: int, word: int) -> str:
    ins = isa.decode(word)
    if ins is None:
        return f".word 0x{word:08x}"
    info = isa.BY_OPCODE[ins.op]
    name, fmt = info.mnemonic, info.fmt
    rd, rs = REG_NAMES[ins.rd], REG_NAMES[ins.rs]
    if fmt == F_NONE:
        return name
    if fmt == F_R:
        return f"{name} {rd}"
    if fmt == F_BR:
        return f"{name} 0x{(addr + 4 + ins.imm * 4) & M32:08x}"
    if fmt == F_RR:
        return f"{name} {rd}, {rs}"
    if fmt in (F_RSIMM, F_RSHIFT):
        return f"{name} {rd}, #{ins.imm}"
    if fmt in (F_RIMM, F_RUIMM):
        return f"{name} {rd}, #0x{ins.imm:04x}"
    if ins.imm:
        return f"{name} {rd}, [{rs}, #{ins.imm}]"
    return f"{name} {rd}, [{rs}]"


def disassemble(image: bytes, origin: int = 0) -> str:
    """One line per word; undecodable words become ``.word`` literals."""
    if len(image) % 4:
        raise ValueError("image length must be a multiple of 4")
    lines = []
    for off in range(0, len(image), 4):
        word = struct.unpack_from("<I", image, off)[0]
        lines.append(f"    {_format(origin + off, word)}")
    return "\n".join(lines) + ("\n" if lines else "")
