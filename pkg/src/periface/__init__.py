"""Peripheral-interface model instantiation for firmware fuzzing.

Firmware for a small 32-bit instruction set runs on an interpreter whose
memory-mapped peripherals are answered by a model that is learned from the
firmware's own access patterns: registers are categorized as control,
status, data or control-status, status reads get values chosen by
explorative execution, and interrupts fire on a block-count schedule.
"""

__version__ = "0.1.0"
