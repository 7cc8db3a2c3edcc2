"""
Systolic controller: LSMA issue/sync semantics for the SMA units of one SM.

``LSMA`` computes ``C[out] <- A[in] x B + C[in]`` for a K x 8 x 8 block:
A (``k_height`` x cols words, row-major) is streamed from shared memory,
C (``k_height`` x rows words, row-major) is read-modified-written in the
register file, and the 8x8 weight block is held stationary in the PEs.

Issue is asynchronous. Results become visible to SIMD code only after
``sync_lsma``; reading the in-flight C region earlier is a race that
``detect_race`` flags (the controller's trace is then marked invalid).

Timing per unit: weight preload, then one A row per cycle, then
``cols - 1`` drain cycles. One further instruction may be queued; its
preload starts when its predecessor stops injecting A rows, so
back-to-back instructions overlap preload with drain.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import MachineConfig
from .engines import (_round_up, semi_broadcast_profile, systolic_accumulate,
                      weight_stationary_profile)
from .memory import MemoryRequest
from .trace import ExecutionTrace

WORD = 4
QUEUE_DEPTH = 2  # one streaming + one queued


class ControllerError(RuntimeError):
    pass


class UnitBusy(ControllerError):
    pass


@dataclass(frozen=True)
class LsmaInstruction:
    addr_a: int
    addr_c: int
    b_values: np.ndarray  # cols x rows, b_values[k, n] held by PE (n, k)
    k_height: int


@dataclass(frozen=True)
class Ticket:
    unit: int
    seq: int
    issue_cycle: int
    stream_start: int
    stream_end: int
    complete_cycle: int


@dataclass(frozen=True)
class SyncStats:
    wait_cycles: int
    complete_cycle: int


@dataclass(frozen=True)
class RaceVerdict:
    race: bool
    addresses: tuple = ()


@dataclass
class _Pending:
    ticket: Ticket
    a_block: Optional[np.ndarray]
    b_block: np.ndarray
    mask: np.ndarray
    c_word: int
    k_height: int
    width: int
    committed: bool = False


@dataclass
class AddressGenerator:
    base: int = 0
    stride: int = 0
    count: int = 0
    cursor: int = 0


@lru_cache(maxsize=1024)
def _mask_stats(raw: bytes, shape: Tuple[int, int]) -> Tuple[int, int, int]:
    """(active PE columns, active PE rows, active PEs) of a bool mask."""
    mask = np.frombuffer(raw, dtype=bool).reshape(shape)
    return int(mask.any(axis=0).sum()), int(mask.any(axis=1).sum()), int(mask.sum())


@dataclass
class SmaUnit:
    index: int
    rows: int
    cols: int
    preload: int
    banks: range
    active_mask: np.ndarray = None  # rows x cols, mask[n, k] for PE (n, k)
    agen_a: AddressGenerator = field(default_factory=AddressGenerator)
    agen_c: AddressGenerator = field(default_factory=AddressGenerator)
    stream_free_at: int = 0
    pending: List[_Pending] = field(default_factory=list)
    combined_into: Optional[int] = None

    def __post_init__(self) -> None:
        if self.active_mask is None:
            self.active_mask = np.ones((self.rows, self.cols), dtype=bool)

    def inflight(self, now: int) -> List[Ticket]:
        return [p.ticket for p in self.pending if p.ticket.complete_cycle > now]

    def status(self, now: int) -> str:
        for p in self.pending:
            t = p.ticket
            if t.issue_cycle <= now < t.stream_start:
                return "loading_weights"
            if t.stream_start <= now < t.stream_start + p.k_height:
                return "streaming"
            if now < t.complete_cycle:
                return "draining"
        return "idle"

    @property
    def storage_bytes(self) -> int:
        return 2 * self.rows * 8


@dataclass
class CombinedUnit:
    """Three units acting as one array 24 wide along n (shared A stream)."""

    members: tuple
    rows: int
    cols: int

    @property
    def index(self) -> int:
        return self.members[0]


class SmaController:
    """All SMA units of one SM plus the SM's shared memory and register file.

    ``now`` is the clock of the issuing warps; ``issue_lsma`` returns
    without advancing it, ``run_simd`` advances it by SIMD work.
    """

    def __init__(self, cfg: MachineConfig, functional: bool = True, verbose: bool = False) -> None:
        if cfg.sma_units_per_sm < 1:
            raise ControllerError("configuration has no SMA units")
        self.cfg = cfg
        self.functional = functional
        self.units = [
            SmaUnit(u, cfg.sma_array_rows, cfg.sma_array_cols, cfg.weight_preload_cycles,
                    range(u * cfg.sma_banks_assigned, (u + 1) * cfg.sma_banks_assigned))
            for u in range(cfg.sma_units_per_sm)
        ]
        self.smem = np.zeros(cfg.shared_mem_bytes // WORD, dtype=np.float32) if functional else None
        self.rf = np.zeros(cfg.rf_bytes_per_sm // WORD, dtype=np.float32) if functional else None
        self.now = 0
        # row pitch (words) of C staging in shared memory, weight-stationary only
        self.c_ld = 128
        self.trace = ExecutionTrace(peak_macs_per_cycle=cfg.sma_units_per_sm * cfg.sma_pes)
        self.trace.stats["overlap_cycles"] = 0
        self._seq = itertools.count()
        self._synced: set = set()
        self.state_log: Optional[List[str]] = [] if verbose else None

    # -- helpers ---------------------------------------------------------

    def _check_range(self, addr: int, words: int, space: str) -> None:
        limit = self.cfg.shared_mem_bytes if space == "shared" else self.cfg.rf_bytes_per_sm
        if addr < 0 or addr % WORD or addr + words * WORD > limit:
            raise ControllerError(f"{space} range [{addr}, {addr + words * WORD}) out of bounds or misaligned")

    def _log(self, unit: SmaUnit, cycle: int) -> None:
        if self.state_log is not None:
            self.state_log.append(
                f"{cycle} unit{unit.index} status={unit.status(cycle)} "
                f"mask={int(unit.active_mask.sum())} agen_a={unit.agen_a.cursor}/{unit.agen_a.count} "
                f"agen_c={unit.agen_c.cursor}/{unit.agen_c.count}"
            )

    def _profile(self, k_height: int, kc: int, nr: int, units: int, unit_index: int):
        cfg = self.cfg
        if cfg.dataflow == "weight_stationary":
            return weight_stationary_profile(
                k_height, kc, nr, cfg.sma_array_rows, cfg.sma_array_cols, cfg.shared_mem_banks,
                units, (unit_index * cfg.sma_array_rows) % cfg.shared_mem_banks,
                _round_up(k_height, cfg.shared_mem_banks), self.c_ld)
        return semi_broadcast_profile(k_height, kc, nr, cfg.sma_array_rows, cfg.sma_array_cols,
                                      cfg.sma_banks_assigned, cfg.rf_words_per_bank_per_cycle, units)

    def _fill(self, rows: int, cols: int) -> int:
        # cycles from the last A row entering to the last C row leaving
        if self.cfg.dataflow == "weight_stationary":
            return rows + cols - 2
        return cols - 1

    def streaming_busy_until(self) -> int:
        return max((u.stream_free_at for u in self.units), default=0)

    # -- instruction semantics ------------------------------------------

    def issue_lsma(self, unit, inst: LsmaInstruction, now: Optional[int] = None) -> Ticket:
        if now is not None:
            self.now = max(self.now, now)
        if isinstance(unit, CombinedUnit):
            members = [self.units[i] for i in unit.members]
            width = unit.rows * len(members)
        else:
            unit = self.units[unit] if isinstance(unit, int) else unit
            if unit.combined_into is not None:
                raise ControllerError(f"unit {unit.index} is part of a combined array")
            members = [unit]
            width = unit.rows
        lead = members[0]
        rows, cols = lead.rows, lead.cols
        if inst.k_height <= 0:
            raise ControllerError("k_height must be >= 1")
        b = np.array(inst.b_values, dtype=np.float32)  # latched into the PEs
        if b.shape != (cols, width):
            raise ControllerError(f"b_values must be {cols}x{width}, got {b.shape}")
        self._check_range(inst.addr_a, inst.k_height * cols, "shared")
        self._check_range(inst.addr_c, inst.k_height * width, "rf")
        self.retire()
        for u in members:
            if len(u.inflight(self.now)) >= QUEUE_DEPTH:
                raise UnitBusy(f"unit {u.index} already has {QUEUE_DEPTH} instructions in flight")

        if len(members) == 1:
            mask = lead.active_mask  # width x cols
        else:
            mask = np.concatenate([u.active_mask for u in members], axis=0)
        active_k, active_n, popcount = _mask_stats(mask.tobytes(), mask.shape)
        if popcount:
            nr = active_n if len(members) == 1 else rows
            prof = self._profile(inst.k_height, active_k, nr, len(members), lead.index)
            stalls = prof.stalls
        else:
            prof, stalls = None, 0
        preload = lead.preload
        start_preload = max(self.now, max(u.stream_free_at for u in members))
        stream_start = start_preload + preload
        stream_end = stream_start + inst.k_height + stalls
        complete = stream_end + self._fill(rows, cols)
        seq = next(self._seq)
        ticket = Ticket(lead.index, seq, self.now, stream_start, stream_end, complete)

        a_block = None
        if self.functional:
            w0 = inst.addr_a // WORD
            a_block = self.smem[w0:w0 + inst.k_height * cols].reshape(inst.k_height, cols).copy()
        pend = _Pending(ticket, a_block, b, mask.T.copy() if popcount else None,
                        inst.addr_c // WORD, inst.k_height, width)
        for u in members:
            u.stream_free_at = stream_end
            u.pending.append(pend)
            u.agen_a = AddressGenerator(inst.addr_a, cols * WORD, inst.k_height)
            u.agen_c = AddressGenerator(inst.addr_c, width * WORD, inst.k_height)

        ctr = self.trace.counters
        if prof is not None:
            for kind, v in prof.counters.items():
                if kind != "mac" and kind != "instruction_issue":
                    ctr[kind] += v
            self.trace.requests.update(prof.requests)
            ctr["mac"] += inst.k_height * popcount
        ctr["instruction_issue"] += 1
        ctr["controller_cycle"] += complete - start_preload
        self._log(lead, self.now)
        return ticket

    def _commit_through(self, ticket: Ticket) -> None:
        unit = self.units[ticket.unit]
        for p in list(unit.pending):
            if p.ticket.seq > ticket.seq:
                break
            if not p.committed:
                if self.functional and p.mask is not None:
                    c0 = p.c_word
                    n = p.k_height * p.width
                    c = self.rf[c0:c0 + n].reshape(p.k_height, p.width)
                    c[:] = systolic_accumulate(p.a_block, p.b_block, c, p.mask)
                p.committed = True
        for u in self.units:
            u.pending = [p for p in u.pending if not p.committed]

    def retire(self, now: Optional[int] = None) -> None:
        """Commit every instruction that has fully drained by ``now``."""
        now = self.now if now is None else now
        for u in self.units:
            done = [p for p in u.pending if p.ticket.complete_cycle <= now]
            if done:
                self._commit_through(done[-1].ticket)

    def seed(self, unit: int, stream_free_at: int, completes: Sequence[int]) -> None:
        """Timing-only: start a unit with placeholder in-flight work."""
        if self.functional:
            raise ControllerError("seed is only available in timing-only mode")
        u = self.units[unit]
        u.stream_free_at = stream_free_at
        for c in completes:
            t = Ticket(unit, next(self._seq), 0, 0, c, c)
            u.pending.append(_Pending(t, None, None, None, 0, 0, 0))

    def sync_lsma(self, ticket: Ticket, now: Optional[int] = None) -> SyncStats:
        if now is not None:
            self.now = max(self.now, now)
        if ticket.seq in self._synced:
            return SyncStats(0, ticket.complete_cycle)
        wait = max(0, ticket.complete_cycle - self.now)
        self.now += wait
        self._commit_through(ticket)
        self._synced.add(ticket.seq)
        return SyncStats(wait, ticket.complete_cycle)

    def sync_all(self) -> int:
        waited = 0
        for u in self.units:
            for p in list(u.pending):
                waited += self.sync_lsma(p.ticket).wait_cycles
        return waited

    def detect_race(self, ticket: Ticket, rf_read: MemoryRequest) -> RaceVerdict:
        if ticket.seq in self._synced:
            return RaceVerdict(False)
        unit = self.units[ticket.unit]
        pend = next((p for p in unit.pending if p.ticket.seq == ticket.seq), None)
        if pend is None:
            return RaceVerdict(False)
        lo = pend.c_word * WORD
        hi = lo + pend.k_height * pend.width * WORD
        hits = tuple(a for a in rf_read.addresses if lo <= a < hi)
        if hits:
            self.trace.valid = False
        return RaceVerdict(bool(hits), hits)

    def set_active_mask(self, unit, mask) -> None:
        """Set the mask used by subsequently issued instructions.

        The mask is latched when an instruction issues, so an instruction
        already in flight keeps the mask it started with.
        """
        unit = self.units[unit] if isinstance(unit, int) else unit
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (unit.rows, unit.cols):
            raise ControllerError(f"mask must be {unit.rows}x{unit.cols}, got {mask.shape}")
        unit.active_mask = mask.copy()

    def combine_units(self, indices: Sequence[int]) -> CombinedUnit:
        if len(indices) != 3:
            raise ControllerError("exactly three units combine into one array")
        members = [self.units[i] for i in indices]
        if len({(u.rows, u.cols) for u in members}) != 1:
            raise ControllerError("combined units must have identical dimensions")
        if any(u.inflight(self.now) for u in members):
            raise ControllerError("combined units must be idle")
        if any(u.combined_into is not None for u in members):
            raise ControllerError("unit already combined")
        for u in members:
            u.combined_into = members[0].index
        return CombinedUnit(tuple(indices), members[0].rows, members[0].cols)

    def split_units(self, combined: CombinedUnit) -> None:
        for i in combined.members:
            self.units[i].combined_into = None

    def run_simd(self, cycles: int) -> int:
        """Retire ``cycles`` of SIMD work on the warp clock; returns overlap."""
        start, end = self.now, self.now + cycles
        overlap = 0
        intervals = sorted({(p.ticket.stream_start, p.ticket.complete_cycle)
                            for u in self.units for p in u.pending})
        covered = 0
        cursor = start
        for s, e in intervals:
            s, e = max(s, cursor), min(e, end)
            if e > s:
                covered += e - s
                cursor = e
        overlap = covered
        self.trace.stats["overlap_cycles"] += overlap
        self.now = end
        return overlap

    @staticmethod
    def combined_storage_bytes(rows: int, units: int) -> int:
        # A-input staging shared by the units, C-output staging per unit
        return rows * 8 + units * rows * 8
