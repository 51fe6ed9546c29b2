import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import program
from periface.explore import (BUDGET_EXHAUSTED, CANDIDATES, CRASHED, RAN_TO_FRAME_POP, STALLED,
                              CandidateResult, NoQualifiedCandidate, SRHandlerTable,
                              qualify_and_rank)
from periface.machine import Firmware
from periface.regmodel import SRAccessContext
from periface.session import Session

CTX = SRAccessContext(0x40004400, 0x1234, 0x100, 0)


def res(value, outcome=RAN_TO_FRAME_POP, dr=0, dep=False):
    return CandidateResult(value, outcome, dr, dep)


def test_candidates_are_one_hot_then_zero():
    assert len(CANDIDATES) == 33
    assert CANDIDATES[-1] == 0
    assert all(bin(v).count("1") == 1 for v in CANDIDATES[:32])
    assert len(set(CANDIDATES)) == 33


def test_highest_dr_count_wins():
    results = [res(1, dr=0), res(2, dr=3), res(4, STALLED, dr=9, dep=True), res(0, dr=1)]
    r = qualify_and_rank(results, 0)
    assert r.winner == 2
    assert r.qualified == (1, 2, 0)
    assert r.tied == (2,)


def test_budget_exhausted_counts_as_clean():
    r = qualify_and_rank([res(1, BUDGET_EXHAUSTED, dr=2), res(2, CRASHED, dr=5)], 0)
    assert r.winner == 1


def test_fallback_to_independent_failures():
    results = [res(1, STALLED, dr=4, dep=True), res(2, STALLED, dr=1), res(0, CRASHED, dr=2)]
    r = qualify_and_rank(results, 0)
    assert r.qualified == (2, 0)
    assert r.winner == 0


def test_nothing_qualifies():
    with pytest.raises(NoQualifiedCandidate) as e:
        qualify_and_rank([res(v, STALLED, dep=True) for v in CANDIDATES], 0, CTX)
    assert e.value.ctx == CTX and len(e.value.results) == 33


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(0, 3), min_size=33, max_size=33))
def test_tie_break_is_seeded(seed, counts):
    results = [res(v, dr=c) for v, c in zip(CANDIDATES, counts)]
    a = qualify_and_rank(results, random.Random(seed))
    b = qualify_and_rank(results, random.Random(seed))
    assert a == b
    assert a.winner in a.tied
    assert all(dict(zip(CANDIDATES, counts))[v] == max(counts) for v in a.tied)


def test_handler_table():
    t = SRHandlerTable()
    assert t.lookup(CTX) is None
    t.insert(CTX, 0x80)
    assert t.lookup(CTX) == 0x80
    t.insert(CTX, 0x80)
    with pytest.raises(ValueError):
        t.insert(CTX, 0x40)
    other = CTX._replace(conf=1)
    assert t.lookup(other) is None


def test_usart_rx_rxne_is_chosen(sessions):
    # RXNE (bit 7) guards the data read, so it unlocks the most DR traffic
    handlers = dict(sessions["usart_rx"].model.sr_handlers.items())
    assert 0x80 in handlers.values()


def test_every_event_evaluates_all_candidates(sessions):
    for ev in sessions["usart_rx"].events:
        assert tuple(r.candidate_value for r in ev.results) == CANDIDATES
        assert ev.winner in ev.qualified


def test_explore_is_deterministic(manifest):
    def run():
        s = Session(Firmware(manifest["spi"].image()), seed=3)
        s.run_input(bytes(64))
        return [(e.ctx, e.winner, e.qualified) for e in s.events]
    assert run() == run()


def test_parallel_workers_match_sequential(manifest):
    fw = Firmware(manifest["usart_rx"].image())
    seq = Session(fw, seed=0)
    seq.run_input(bytes(16))
    par = Session(fw, seed=0, jobs=2)
    par.run_input(bytes(16))
    assert [e.results for e in seq.events] == [e.results for e in par.events]


def test_poll_without_dr_effect_ties_and_records_tie():
    # no data register anywhere: every clean candidate ties on zero
    s = Session(Firmware(program("""
        LI   r1, #0x40004400
poll:   LDW  r0, [r1]
        AND  r0, #0x1
        CMP  r0, #0
        BEQ  poll
        HALT
""")), seed=0)
    s.run_input(b"")
    (ev,) = s.events
    assert ev.winner & 1
    assert ev.qualified == (1,) or ev.tie is None or ev.winner in ev.tie.tied


def test_crash_outcome_recorded():
    s = Session(Firmware(program("""
        LI   r1, #0x40004400
        LDW  r0, [r1]
        AND  r0, #0x2
        CMP  r0, #0
        BEQ  ok
        .word 0xFFFFFFFF
ok:     HALT
""")), seed=0)
    s.run_input(b"")
    (ev,) = s.events
    bad = [r for r in ev.results if r.candidate_value == 2]
    # control dependence alone does not taint the fault
    assert bad[0].outcome == CRASHED and not bad[0].sr_dependent_failure
    assert ev.winner != 2


def test_crash_on_sr_derived_address_is_dependent():
    s = Session(Firmware(program("""
        LI   r1, #0x40004400
        LDW  r0, [r1]
        CMP  r0, #0
        BEQ  ok
        LDW  r2, [r0]           ; address taken from the status value
ok:     HALT
""")), seed=0)
    s.run_input(b"")
    (ev,) = s.events
    by_value = {r.candidate_value: r for r in ev.results}
    assert by_value[2].outcome == CRASHED and by_value[2].sr_dependent_failure
    assert by_value[0].outcome == RAN_TO_FRAME_POP
    assert by_value[ev.winner].clean
