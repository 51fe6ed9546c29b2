"""Interrupt identification and firing.

Enabled interrupts are learned from writes to the interrupt controller's
set-enable (ISER) and clear-enable (ICER) words.  Firing is driven by the
executed-block counter so that a run replays exactly: round-robin over the
enabled set every ``interval`` blocks, an explicit (bb_count, irq) script,
or nothing at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

ISER = 0xE000E100
ICER = 0xE000E180
DEFAULT_INTERVAL = 1000
NUM_IRQS = 32
M32 = 0xFFFFFFFF


@dataclass(frozen=True)
class IrqState:
    enabled: int = 0
    rr_cursor: int = 0
    interval: int = DEFAULT_INTERVAL
    last_fire_bb: int = 0
    script_pos: int = 0


@dataclass(frozen=True)
class FiringStrategy:
    kind: str = "round_robin"  # round_robin | scripted | none
    interval: int = DEFAULT_INTERVAL
    script: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.kind not in ("round_robin", "scripted", "none"):
            raise ValueError(f"unknown firing strategy {self.kind!r}")
        if self.interval <= 0:
            raise ValueError("interval must be positive")
        if list(self.script) != sorted(self.script, key=lambda e: e[0]):
            raise ValueError("script entries must be sorted by block count")
        for _, irq in self.script:
            if not 0 <= irq < NUM_IRQS:
                raise ValueError(f"irq {irq} out of range")

    @classmethod
    def round_robin(cls, interval: int = DEFAULT_INTERVAL) -> "FiringStrategy":
        return cls("round_robin", interval)

    @classmethod
    def scripted(cls, entries) -> "FiringStrategy":
        return cls("scripted", DEFAULT_INTERVAL, tuple(sorted((int(b), int(i)) for b, i in entries)))

    @classmethod
    def none(cls) -> "FiringStrategy":
        return cls("none")

    def initial_state(self) -> IrqState:
        return IrqState(interval=self.interval)


def parse_script(text: str) -> FiringStrategy:
    """Parse ``bb_count irq`` lines (``#`` comments allowed)."""
    entries = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {n}: expected 'bb_count irq'")
        entries.append((int(parts[0], 0), int(parts[1], 0)))
    return FiringStrategy.scripted(entries)


def on_scs_write(state: IrqState, address: int, value: int) -> IrqState:
    if address == ISER:
        return replace(state, enabled=state.enabled | (value & M32))
    if address == ICER:
        return replace(state, enabled=state.enabled & ~value & M32)
    return state


def _next_enabled(enabled: int, cursor: int) -> int:
    for k in range(NUM_IRQS):
        i = (cursor + k) % NUM_IRQS
        if enabled >> i & 1:
            return i
    raise ValueError("no interrupt enabled")


def next_fire(state: IrqState, strategy: FiringStrategy) -> int | None:
    """Earliest block count at which ``tick`` can act, or None if never."""
    if strategy.kind == "round_robin":
        return state.last_fire_bb + state.interval if state.enabled else None
    if strategy.kind == "scripted" and state.script_pos < len(strategy.script):
        return strategy.script[state.script_pos][0]
    return None


def tick(bb_count: int, state: IrqState, strategy: FiringStrategy) -> tuple[int | None, IrqState]:
    """Decide whether an interrupt fires at this block boundary."""
    if strategy.kind == "round_robin":
        if state.enabled and bb_count - state.last_fire_bb >= state.interval:
            irq = _next_enabled(state.enabled, state.rr_cursor)
            return irq, replace(state, rr_cursor=(irq + 1) % NUM_IRQS, last_fire_bb=bb_count)
        return None, state
    if strategy.kind == "scripted":
        pos = state.script_pos
        script = strategy.script
        if pos < len(script) and script[pos][0] <= bb_count:
            irq = script[pos][1]
            state = replace(state, script_pos=pos + 1)
            if state.enabled >> irq & 1:
                return irq, replace(state, last_fire_bb=bb_count)
            # a scripted firing of a disabled interrupt is dropped
        return None, state
    return None, state


@dataclass
class IrqController:
    """Interrupt-controller device for one execution.

    Serves the system-control block (ISER/ICER plus plain storage) and
    supplies the machine's ``irq_source``.  ``timeline`` records enable
    changes and firings in execution order for auditing.
    """

    strategy: FiringStrategy = field(default_factory=FiringStrategy)
    state: IrqState | None = None
    words: dict = field(default_factory=dict)
    fired: list = field(default_factory=list)      # (bb_count, irq)
    timeline: list = field(default_factory=list)   # ("enable"|"disable"|"fire", bb, value)
    frozen: bool = False
    on_change: object = None  # callback(kind, irq) for newly seen enable events

    def __post_init__(self):
        if self.state is None:
            self.state = self.strategy.initial_state()

    # system-control block
    def read(self, m, addr: int) -> int:
        if addr in (ISER, ICER):
            return self.state.enabled
        return self.words.get(addr, 0)

    def write(self, m, addr: int, value: int) -> None:
        if addr not in (ISER, ICER):
            self.words[addr] = value
            return
        self.state = on_scs_write(self.state, addr, value)
        kind = "enable" if addr == ISER else "disable"
        self.timeline.append((kind, m.bb_count, value & M32))
        if self.on_change is not None:
            for i in range(NUM_IRQS):
                if value >> i & 1:
                    self.on_change(kind, i)

    # firing
    def __call__(self, m) -> int | None:
        if self.frozen:
            return None
        irq, self.state = tick(m.bb_count, self.state, self.strategy)
        if irq is not None:
            self.fired.append((m.bb_count, irq))
            self.timeline.append(("fire", m.bb_count, irq))
        return irq

    def next_fire(self) -> int | None:
        if self.frozen:
            return None
        return next_fire(self.state, self.strategy)

    def snapshot(self):
        return (self.state, dict(self.words), len(self.fired), len(self.timeline))

    def restore(self, snap) -> None:
        self.state, words, nf, nt = snap
        self.words = dict(words)
        del self.fired[nf:]
        del self.timeline[nt:]


def audit_timeline(timeline) -> list[tuple[int, int]]:
    """Firings of interrupts that were not enabled at the time."""
    enabled = 0
    bad = []
    for kind, bb, value in timeline:
        if kind == "enable":
            enabled |= value
        elif kind == "disable":
            enabled &= ~value & M32
        elif not enabled >> value & 1:
            bad.append((bb, value))
    return bad
