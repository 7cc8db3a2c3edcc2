"""Execution traces, event counters and reuse statistics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, TextIO, Tuple

EVENT_KINDS = (
    "mac",
    "shared_read",
    "shared_write",
    "rf_read_word",
    "rf_write_word",
    "global_transaction",
    "stall_cycle",
    "instruction_issue",
    "controller_cycle",
)


class TraceError(ValueError):
    pass


@dataclass
class ExecutionTrace:
    """Cycle count plus aggregated event counters of one simulation.

    ``requests`` counts memory requests keyed ``(operand, space, op,
    coalesced)``; ``stats`` carries non-energy bookkeeping such as overlap
    cycles. ``events`` is the optional per-cycle stream
    ``(cycle, unit, event, detail)``.
    """

    total_cycles: int = 0
    peak_macs_per_cycle: int = 1
    counters: Counter = field(default_factory=Counter)
    requests: Counter = field(default_factory=Counter)
    stats: Dict[str, int] = field(default_factory=dict)
    events: Optional[List[Tuple[int, str, str, str]]] = None
    valid: bool = True

    def count(self, kind: str, n: int = 1) -> None:
        if kind not in EVENT_KINDS:
            raise TraceError(f"unknown event kind {kind!r}")
        self.counters[kind] += n

    def request(self, operand: str, space: str, op: str, coalesced: bool, n: int = 1) -> None:
        self.requests[(operand, space, op, bool(coalesced))] += n

    def uncoalesced(self, operand: str) -> int:
        return sum(v for (o, _, _, c), v in self.requests.items() if o == operand and not c)

    def coalesced(self, operand: str) -> int:
        return sum(v for (o, _, _, c), v in self.requests.items() if o == operand and c)

    @property
    def macs(self) -> int:
        return self.counters["mac"]

    def add_stat(self, key: str, n: int) -> None:
        self.stats[key] = self.stats.get(key, 0) + n

    def absorb(self, other: "ExecutionTrace", times: int = 1) -> None:
        """Add ``times`` copies of another trace's counters (not its cycles)."""
        for k, v in other.counters.items():
            self.counters[k] += v * times
        for k, v in other.requests.items():
            self.requests[k] += v * times
        for k, v in other.stats.items():
            self.stats[k] = self.stats.get(k, 0) + v * times
        self.valid = self.valid and other.valid

    def emit_events(self, fh: TextIO) -> None:
        for cycle, unit, event, detail in self.events or ():
            fh.write(f"{cycle} {unit} {event} {detail}\n")


@dataclass(frozen=True)
class ReuseStats:
    macs: int
    a_reads_from_memory: int
    b_reads_from_memory: int
    c_writes_to_memory: int

    @property
    def a_reuse_factor(self) -> float:
        return self.macs / self.a_reads_from_memory

    @property
    def b_reuse_factor(self) -> float:
        return self.macs / self.b_reads_from_memory


def flops_efficiency(trace: ExecutionTrace, peak_macs_per_cycle: Optional[int] = None) -> float:
    """Achieved FLOPS over peak FLOPS: (2 macs / cycles) / (2 peak)."""
    if trace.total_cycles <= 0:
        raise TraceError("zero-cycle trace")
    peak = peak_macs_per_cycle or trace.peak_macs_per_cycle
    return (2 * trace.macs / trace.total_cycles) / (2 * peak)
