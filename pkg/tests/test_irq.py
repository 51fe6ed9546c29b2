import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from periface.irq import (ICER, ISER, FiringStrategy, IrqController, IrqState, audit_timeline,
                          on_scs_write, parse_script, tick)

RR = FiringStrategy.round_robin(1000)


def test_iser_icer():
    s = on_scs_write(IrqState(), ISER, 0x84)
    assert s.enabled == 0x84
    s = on_scs_write(s, ICER, 0x04)
    assert s.enabled == 0x80
    assert on_scs_write(s, 0xE000E200, 0xFF) == s


def test_round_robin_order():
    s = on_scs_write(RR.initial_state(), ISER, (1 << 2) | (1 << 7))
    fired = []
    for bb in range(1, 5001):
        irq, s = tick(bb, s, RR)
        if irq is not None:
            fired.append((bb, irq))
    assert fired == [(1000, 2), (2000, 7), (3000, 2), (4000, 7), (5000, 2)]


def test_nothing_enabled_never_fires():
    s = RR.initial_state()
    for bb in range(0, 10_000, 7):
        irq, s = tick(bb, s, RR)
        assert irq is None


def test_disabled_interrupt_is_skipped():
    s = on_scs_write(RR.initial_state(), ISER, 0b111)
    irq, s = tick(1000, s, RR)
    assert irq == 0
    s = on_scs_write(s, ICER, 0b010)
    irq, s = tick(2000, s, RR)
    assert irq == 2


def test_scripted_fires_only_enabled():
    strat = parse_script("# bb irq\n100 3\n200 4\n300 3\n")
    assert strat.script == ((100, 3), (200, 4), (300, 3))
    s = on_scs_write(strat.initial_state(), ISER, 1 << 3)
    fired = []
    for bb in range(400):
        irq, s = tick(bb, s, strat)
        if irq is not None:
            fired.append((bb, irq))
    assert fired == [(100, 3), (300, 3)]


def test_strategy_validation():
    with pytest.raises(ValueError):
        FiringStrategy("sometimes")
    with pytest.raises(ValueError):
        FiringStrategy.round_robin(0)
    with pytest.raises(ValueError):
        FiringStrategy.scripted([(1, 40)])


def test_none_strategy_is_silent():
    strat = FiringStrategy.none()
    s = on_scs_write(strat.initial_state(), ISER, 0xFFFFFFFF)
    assert tick(10**6, s, strat)[0] is None


def test_audit():
    tl = [("enable", 0, 0b100), ("fire", 10, 2), ("disable", 20, 0b100), ("fire", 30, 2)]
    assert audit_timeline(tl) == [(30, 2)]


def test_controller_snapshot_restore():
    class M:
        bb_count = 0

    ctl = IrqController(RR)
    m = M()
    ctl.write(m, ISER, 1 << 6)
    snap = ctl.snapshot()
    m.bb_count = 1000
    assert ctl(m) == 6
    ctl.restore(snap)
    assert ctl.fired == [] and ctl.state.enabled == 1 << 6
    assert ctl(m) == 6


@settings(max_examples=100)
@given(st.integers(1, 0xFFFFFFFF), st.integers(1, 50))
def test_round_robin_is_fair(mask, interval):
    strat = FiringStrategy.round_robin(interval)
    s = on_scs_write(strat.initial_state(), ISER, mask)
    n = bin(mask).count("1")
    fired = []
    bb = 0
    while len(fired) < 2 * n:
        bb += interval
        irq, s = tick(bb, s, strat)
        fired.append(irq)
    assert all(mask >> i & 1 for i in fired)
    # every enabled interrupt fires exactly once per cycle of n firings
    assert sorted(fired[:n]) == sorted(fired[n:]) == [i for i in range(32) if mask >> i & 1]
