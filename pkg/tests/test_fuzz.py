import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import program
from periface.fuzz import (CRASH, HANG, INPUT_EXHAUSTED, MODEL_MISS, MUTATORS, OK, Budgets,
                           CoverageMap, InputChannel, InputExhausted, byte_stream,
                           coverage_compare, derive_seed, fuzz_loop, mutate, run_once)
from periface.machine import Firmware
from periface.modelstore import InstantiatedModel
from periface.regmodel import Category
from periface.session import Session


def test_input_channel_words_little_endian():
    ch = InputChannel(bytes([1, 2, 3, 4, 5]))
    assert ch.next_word() == 0x04030201
    assert ch.next_word() == 0x05
    assert ch.next_word() == 0 and ch.exhausted


def test_strict_channel_raises():
    ch = InputChannel(b"", strict=True)
    with pytest.raises(InputExhausted):
        ch.next_word()


def test_byte_stream():
    assert byte_stream(b"AB") == b"A\0\0\0B\0\0\0"


def test_halting_firmware_is_ok():
    rep = run_once(program("HALT\n"), InstantiatedModel())
    assert rep.verdict == OK and rep.bucket is None


def test_crash_bucket():
    rep = run_once(program("LI r1, #0x30000000\nLDW r0, [r1]\n"), InstantiatedModel())
    assert rep.verdict == CRASH
    assert rep.bucket == ("MemPerm", rep.pc)
    assert rep.addr == 0x30000000


def test_spin_is_hang():
    rep = run_once(program("spin: BAL spin\n"), InstantiatedModel(), budgets=Budgets(500))
    assert rep.verdict == HANG


def test_stub_usart_rx_hangs(manifest):
    # under the stub every status read is zero, so the receive poll never exits
    rep = run_once(manifest["usart_rx"].image(), InstantiatedModel(), bytes(64),
                   mode="stub", budgets=Budgets(5000))
    assert rep.verdict == HANG


def test_fixed_mode_reports_model_miss():
    img = program("LI r1, #0x40004400\npoll: LDW r0, [r1]\nAND r0, #1\nCMP r0, #0\nBEQ poll\nHALT\n")
    rep = run_once(img, InstantiatedModel(), mode="fixed")
    assert rep.verdict == MODEL_MISS and rep.miss


def test_fixed_model_replays_usart(sessions, manifest):
    e = manifest["usart_rx"]
    rep = run_once(e.image(), sessions["usart_rx"].model, bytes(256), mode="fixed")
    assert rep.verdict == OK and rep.markers == e.markers


def test_input_exhausted_verdict(sessions, manifest):
    rep = run_once(manifest["usart_rx"].image(), sessions["usart_rx"].model, b"\x01",
                   mode="fixed", strict_input=True)
    assert rep.verdict == INPUT_EXHAUSTED


def test_coverage_map_counts_edges():
    cov = CoverageMap()
    assert cov.hit(0, 0x100)
    assert not cov.hit(0, 0x100)
    assert cov.hit(0x100, 0x104)
    assert len(cov.edges()) == 2


@settings(max_examples=200)
@given(st.binary(max_size=64), st.integers(0, 2**32), st.sampled_from(MUTATORS))
def test_mutators_are_seeded(data, seed, op):
    a = mutate(data, random.Random(seed), [data, b"xyz"], op)
    b = mutate(data, random.Random(seed), [data, b"xyz"], op)
    assert a == b


@settings(max_examples=200)
@given(st.binary(min_size=1, max_size=64), st.integers(0, 2**32),
       st.sampled_from([m for m in MUTATORS if m != "splice"]))
def test_mutators_preserve_length(data, seed, op):
    assert len(mutate(data, random.Random(seed), op=op)) == len(data)


def test_derive_seed_separates_labels():
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") == derive_seed(1, "a")


def test_empty_seed_list_rejected():
    with pytest.raises(ValueError):
        fuzz_loop(program("HALT\n"), InstantiatedModel(), [], 0, 10)


def test_fuzz_loop_deterministic(sessions, manifest):
    e = manifest["usart_rx"]
    model = sessions["usart_rx"].model
    runs = [fuzz_loop(e.image(), model, e.seeds, 7, 300) for _ in range(2)]
    (c1, s1), (c2, s2) = runs
    assert s1.render() == s2.render()
    assert c1.queue == c2.queue
    assert s1.execs == 300


def test_fuzz_loop_counts_all_verdicts(sessions, manifest):
    e = manifest["usart_rx"]
    _, stats = fuzz_loop(e.image(), sessions["usart_rx"].model, e.seeds, 1, 120)
    assert sum(stats.verdicts.values()) == stats.execs == 120


def test_coverage_compare_identity(sessions, manifest):
    e = manifest["spi"]
    m = sessions["spi"].model
    ratio, a, b = coverage_compare(e.image(), m, m, [bytes(64), bytes(range(64))])
    assert ratio == 1.0 and a == b > 0


def test_stub_baseline_covers_less(sessions, manifest):
    e = manifest["usart_rx"]
    ratio, a, b = coverage_compare(e.image(), InstantiatedModel(), sessions["usart_rx"].model,
                                   [bytes(64)], mode_a="stub",
                                   budgets=Budgets(5000))
    assert b > a and ratio > 1


def _reader(n):
    # each read sits in its own block so the polling rule does not apply
    return "".join(f"        BAL  b{k}\nb{k}:     LDW  r0, [r1, #4]\n" for k in range(n))


READER = program("""
        LI   r1, #0x40004400
        LDI  r0, #0
        STW  r0, [r1, #4]       ; DR by first write
""" + _reader(8) + "        HALT\n")


@settings(max_examples=20, deadline=None)
@given(st.binary(max_size=128))
def test_input_conservation(data):
    # eight DR reads consume eight words, or the whole input if shorter
    s = Session(Firmware(READER), seed=0)
    rep = s.run_input(data)
    assert rep.verdict == OK
    assert rep.input_consumed == min(32, -(-len(data) // 4) * 4)
    assert s.model.registers[0x40004404].category is Category.DR
