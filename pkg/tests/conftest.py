import pytest

from periface.asm import assemble
from periface.corpus_check import instantiate_entry
from periface.machine import load_firmware
from periface.manifest import load_manifest

VECTORS = """
        .word 0x20010000, reset
        .word irq0, irq1, irq2, irq3, irq4, irq5, irq6, irq7
        .word dead, dead, dead, dead, dead, dead, dead, dead
        .word dead, dead, dead, dead, dead, dead, dead, dead
        .word dead, dead, dead, dead, dead, dead, dead, dead
dead:   BAL dead
"""
IRQ_STUBS = "".join(f"irq{i}:\n        IRET\n" for i in range(8))


def program(body: str, handlers: str = IRQ_STUBS) -> bytes:
    """Image with a full vector table; ``body`` starts at ``reset``."""
    return assemble(VECTORS + handlers + "reset:\n" + body)


def machine(body: str, handlers: str = IRQ_STUBS):
    return load_firmware(program(body, handlers))


@pytest.fixture(scope="session")
def manifest():
    return load_manifest()


class _Sessions:
    """Each corpus firmware is instantiated once per test session."""

    def __init__(self, manifest):
        self.manifest = manifest
        self.cache = {}

    def __getitem__(self, name):
        if name not in self.cache:
            self.cache[name] = instantiate_entry(self.manifest[name], seed=0)
        return self.cache[name]


@pytest.fixture(scope="session")
def sessions(manifest):
    return _Sessions(manifest)
