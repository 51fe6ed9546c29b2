import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from periface import isa
from periface.asm import (AsmRangeError, AsmSyntaxError, UnresolvedLabel, assemble,
                          assemble_program, disassemble)


def words(image):
    return list(struct.unpack(f"<{len(image) // 4}I", image))


def test_nop_is_one_word():
    assert assemble("NOP") == bytes(4)


def test_forward_branch_resolves():
    img = assemble("BEQ later\nNOP\nNOP\nlater: HALT\n")
    ins = isa.decode(words(img)[0])
    assert ins.op == isa.BEQ
    assert 0 + 4 + ins.imm * 4 == 12


def test_backward_branch():
    img = assemble("top: NOP\nBNE top\n")
    ins = isa.decode(words(img)[1])
    assert 4 + 4 + ins.imm * 4 == 0


def test_directives_and_expressions():
    src = """
        .equ BASE, 0x40004400
        .equ OFF, 4 * 3
        .word BASE + OFF, lo(BASE), hi(BASE), 'A'
        .org 0x20
        LDI r0, #OFF << 1
    """
    w = words(assemble(src))
    assert w[:4] == [0x4000440C, 0x4400, 0x4000, 0x41]
    assert w[4:8] == [0, 0, 0, 0]
    assert w[8] == isa.encode(isa.LDI, 0, 0, 24)


def test_li_expands_to_two_words():
    w = words(assemble("LI r3, #0x12345678"))
    assert w == [isa.encode(isa.LDI, 3, 0, 0x5678), isa.encode(isa.LUI, 3, 0, 0x1234)]


def test_symbol_map():
    asm = assemble_program("start: NOP\nend: HALT\n")
    assert asm.symbols == {"start": 0, "end": 4}
    assert asm.symbol_map() == "0x00000000 start\n0x00000004 end\n"


def test_syntax_error_carries_line():
    with pytest.raises(AsmSyntaxError) as e:
        assemble("NOP\nFROB r1\n", "x.s")
    assert str(e.value).startswith("x.s:2:")


def test_bad_operand_count():
    with pytest.raises(AsmSyntaxError):
        assemble("ADD r1")


def test_unresolved_label():
    with pytest.raises(UnresolvedLabel) as e:
        assemble("BAL nowhere")
    assert e.value.name == "nowhere"


def test_imm_overflow():
    with pytest.raises(AsmRangeError):
        assemble("LDI r0, #0x10000")


def test_shift_range():
    with pytest.raises(AsmRangeError):
        assemble("SHL r0, #32")


def test_branch_out_of_range():
    with pytest.raises(AsmRangeError):
        assemble("BAL far\n.org 0x40000\nfar: HALT\n")


def test_duplicate_label():
    with pytest.raises(AsmSyntaxError):
        assemble("a: NOP\na: NOP\n")


def test_org_backwards_rejected():
    with pytest.raises(AsmRangeError):
        assemble("NOP\nNOP\n.org 4\n")


def test_deterministic():
    src = "x: LDI r1, #3\nBL x\nHALT\n"
    assert assemble(src) == assemble(src)


def test_halt_round_trip():
    assert disassemble(assemble("HALT")).strip() == "HALT"


def test_disassemble_rejects_ragged():
    with pytest.raises(ValueError):
        disassemble(b"\0\0\0")


@settings(max_examples=200)
@given(st.binary(min_size=0, max_size=64).map(lambda b: b[: len(b) // 4 * 4]))
def test_random_bytes_round_trip(data):
    assert assemble(disassemble(data)) == data


@settings(max_examples=300)
@given(st.integers(0, 0xFFFFFFFF))
def test_decode_encode_agree(word):
    ins = isa.decode(word)
    if ins is not None:
        assert isa.encode(ins.op, ins.rd, ins.rs, ins.imm) == word


def test_corpus_round_trip(manifest):
    for e in manifest:
        img = e.image()
        text = disassemble(img)
        assert assemble(text) == img, e.name
        # token-for-token: disassembling the re-assembled image is a fixed point
        assert disassemble(assemble(text)) == text


def test_gpio_rmw_round_trip(manifest):
    img = manifest["gpio_rmw"].image()
    assert assemble(disassemble(img)) == img


def test_every_opcode_round_trips():
    for op in isa.BY_OPCODE.values():
        if op.fmt == isa.F_BR:
            word = isa.encode(op.opcode, imm=3)
        elif op.fmt == isa.F_NONE:
            word = isa.encode(op.opcode)
        elif op.fmt == isa.F_R:
            word = isa.encode(op.opcode, rd=4)
        elif op.fmt == isa.F_RR:
            word = isa.encode(op.opcode, rd=1, rs=2)
        elif op.fmt == isa.F_MEM:
            word = isa.encode(op.opcode, rd=1, rs=2, imm=-8)
        else:
            word = isa.encode(op.opcode, rd=5, imm=7)
        img = struct.pack("<I", word)
        assert assemble(disassemble(img)) == img, op.mnemonic


def test_reference_lists_every_opcode():
    doc = isa.reference()
    for op in isa.BY_OPCODE.values():
        assert f"0x{op.opcode:02x}" in doc
