"""Shared-memory banking, register-file ports and global coalescing."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, TextIO

from .config import MachineConfig

SPACES = ("global", "shared", "rf")
OPS = ("read", "write")


class MemoryAccessError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryRequest:
    space: str
    op: str
    addresses: Sequence[int]
    width_bytes: int = 4
    operand: str = ""

    def __post_init__(self) -> None:
        if self.space not in SPACES:
            raise MemoryAccessError(f"unknown space {self.space!r}")
        if self.op not in OPS:
            raise MemoryAccessError(f"unknown op {self.op!r}")
        if len(self.addresses) == 0:
            raise MemoryAccessError("request has no addresses")
        if self.width_bytes <= 0:
            raise MemoryAccessError("width_bytes must be positive")
        for addr in self.addresses:
            if addr < 0 or addr % self.width_bytes:
                raise MemoryAccessError(f"address {addr} not aligned to {self.width_bytes} bytes")


@dataclass(frozen=True)
class AccessVerdict:
    cycles: int
    coalesced: bool
    bank_conflict_degree: int
    transactions: int


def _contiguous(words: Iterable[int]) -> bool:
    ws = sorted(set(words))
    return ws[-1] - ws[0] + 1 == len(ws)


def shared_access(req: MemoryRequest, banks: int, word_bytes: int = 4) -> AccessVerdict:
    """Word-interleaved banking; repeated addresses are broadcast for free."""
    if req.space != "shared":
        raise MemoryAccessError("shared_access needs a shared-space request")
    if req.width_bytes % word_bytes and word_bytes % req.width_bytes:
        raise MemoryAccessError("width_bytes incompatible with word size")
    words = {addr // word_bytes for addr in req.addresses}
    degree = max(Counter(w % banks for w in words).values())
    return AccessVerdict(cycles=degree, coalesced=_contiguous(words),
                         bank_conflict_degree=degree, transactions=degree)


def rf_access(req: MemoryRequest, words_per_bank_cycle: int, word_bytes: int = 4) -> AccessVerdict:
    """One register-file bank delivering ``words_per_bank_cycle`` words per cycle."""
    if req.space != "rf":
        raise MemoryAccessError("rf_access needs an rf-space request")
    words = {addr // word_bytes for addr in req.addresses}
    cycles = max(1, math.ceil(len(words) / words_per_bank_cycle))
    return AccessVerdict(cycles=cycles, coalesced=_contiguous(words),
                         bank_conflict_degree=1, transactions=cycles)


def coalesce(req: MemoryRequest, line_bytes: int) -> AccessVerdict:
    if req.space != "global":
        raise MemoryAccessError("coalesce needs a global-space request")
    lines = set()
    unique_bytes = set()
    for addr in req.addresses:
        lines.update(range(addr // line_bytes, (addr + req.width_bytes - 1) // line_bytes + 1))
        unique_bytes.add(addr)
    n_bytes = len(unique_bytes) * req.width_bytes
    minimum = math.ceil(n_bytes / line_bytes)
    return AccessVerdict(cycles=len(lines), coalesced=len(lines) == minimum,
                         bank_conflict_degree=1, transactions=len(lines))


@dataclass
class AccessRecord:
    cycle: int
    space: str
    op: str
    operand: str
    degree: int
    transactions: int
    coalesced: bool


@dataclass
class MemorySystem:
    """Per-simulation handle binding the verdict functions to a machine.

    Set ``record=True`` to keep one ``AccessRecord`` per request for
    ``dump_csv``; it is off by default because the engines issue one
    request per simulated cycle.
    """

    shared_banks: int = 32
    word_bytes: int = 4
    rf_words_per_bank_per_cycle: int = 32
    line_bytes: int = 128
    record: bool = False
    records: List[AccessRecord] = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg: MachineConfig, record: bool = False) -> "MemorySystem":
        return cls(shared_banks=cfg.shared_mem_banks, word_bytes=cfg.word_bytes,
                   rf_words_per_bank_per_cycle=cfg.rf_words_per_bank_per_cycle,
                   line_bytes=cfg.line_bytes, record=record)

    def access(self, req: MemoryRequest, cycle: int = 0,
               banks: Optional[int] = None) -> AccessVerdict:
        if req.space == "shared":
            verdict = shared_access(req, banks or self.shared_banks, self.word_bytes)
        elif req.space == "rf":
            verdict = rf_access(req, self.rf_words_per_bank_per_cycle, self.word_bytes)
        else:
            verdict = coalesce(req, self.line_bytes)
        if self.record:
            self.records.append(AccessRecord(cycle, req.space, req.op, req.operand,
                                             verdict.bank_conflict_degree, verdict.transactions,
                                             verdict.coalesced))
        return verdict

    def dump_csv(self, fh: TextIO) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cycle", "space", "op", "operand", "degree", "transactions", "coalesced"])
        for r in self.records:
            writer.writerow([r.cycle, r.space, r.op, r.operand, r.degree, r.transactions,
                             int(r.coalesced)])
