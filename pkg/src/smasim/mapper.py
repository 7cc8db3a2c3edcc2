"""
GEMM mapping onto an SM: thread-block tiling, double-buffered warp sets,
warp schedulers, and the chip-level estimate used by the experiments.

Each thread block owns a ``c_sub`` x ``c_sub`` block of C held in the
register file. The K loop walks tiles of width ``tile_k``; the B tile is
cut into ``c_sub / 8`` sub-tiles of 8 x 8 and each sub-tile becomes one
LSMA on one SMA unit (dealt round-robin in n order). Two warp sets swap
roles every iteration: one loads the next A/B tiles into the other
shared-memory buffer while the other issues the LSMAs.
"""

from __future__ import annotations

import heapq
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import MachineConfig
from .controller import QUEUE_DEPTH, LsmaInstruction, SmaController
from .engines import run_dot_product
from .memory import MemoryRequest, coalesce
from .oracle import GemmProblem, GemmShape
from .trace import ExecutionTrace

SCHEDULERS = ("gto", "round_robin_sma")
WARP_THREADS = 32
WARP_BYTES = WARP_THREADS * 4
SECTOR_BYTES = 32
SHARED_LATENCY = 20
TC_WARP_TILE = (64, 32)


class MappingError(ValueError):
    pass


def check_scheduler(sched: str, cfg: MachineConfig) -> None:
    if sched not in SCHEDULERS:
        raise MappingError(f"unknown scheduler {sched!r}; choose from {SCHEDULERS}")
    if sched == "round_robin_sma" and cfg.sma_units_per_sm < 1:
        raise MappingError("round_robin_sma needs systolic mode (sma_units_per_sm >= 1)")


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TilingPlan:
    m: int
    n: int
    k: int
    c_sub: int = 128
    tile_k: int = 8
    sub_n: int = 8
    units: int = 1
    warps_per_tb: int = 64
    warp_sets: Tuple[int, int] = (2, 32)

    @property
    def tb_grid(self) -> Tuple[int, int]:
        return (-(-self.m // self.c_sub), -(-self.n // self.c_sub))

    @property
    def k_iters(self) -> int:
        return -(-self.k // self.tile_k)

    @property
    def subtiles_per_tile(self) -> int:
        return self.c_sub // self.sub_n

    @property
    def threads_per_tb(self) -> int:
        return self.warps_per_tb * WARP_THREADS

    def tb_extent(self, i: int, j: int) -> Tuple[int, int, int, int]:
        """(row0, rows, col0, cols) of thread block (i, j)."""
        r0, c0 = i * self.c_sub, j * self.c_sub
        return r0, min(self.c_sub, self.m - r0), c0, min(self.c_sub, self.n - c0)

    def k_extent(self, it: int) -> Tuple[int, int]:
        k0 = it * self.tile_k
        return k0, min(self.tile_k, self.k - k0)

    def subtile_widths(self, cols: int) -> Tuple[int, ...]:
        """Active output columns of each non-empty sub-tile of a TB."""
        return tuple(min(self.sub_n, cols - s) for s in range(0, cols, self.sub_n))

    def unit_of(self, sub: int) -> int:
        return sub % self.units

    def regions(self):
        """Yield (tb_i, tb_j, sub, row0, rows, col0, width) output regions."""
        gi, gj = self.tb_grid
        for i in range(gi):
            for j in range(gj):
                r0, rows, c0, cols = self.tb_extent(i, j)
                for s, w in enumerate(self.subtile_widths(cols)):
                    yield i, j, s, r0, rows, c0 + s * self.sub_n, w

    def tb_shapes(self) -> Counter:
        gi, gj = self.tb_grid
        shapes: Counter = Counter()
        for i in range(gi):
            for j in range(gj):
                _, rows, _, cols = self.tb_extent(i, j)
                shapes[(rows, cols)] += 1
        return shapes

    def explain(self) -> str:
        gi, gj = self.tb_grid
        last_k = self.k - (self.k_iters - 1) * self.tile_k
        lines = [
            f"GEMM {self.m} x {self.n} x {self.k}",
            f"thread blocks: {gi} x {gj} of C_sub {self.c_sub} x {self.c_sub}",
            f"k iterations: {self.k_iters} of tile_k {self.tile_k} (last {last_k})",
            f"A tile {self.c_sub} x {self.tile_k}, B tile {self.tile_k} x {self.c_sub} "
            f"as {self.subtiles_per_tile} sub-tiles of {self.tile_k} x {self.sub_n}",
            f"warps per TB: {self.warps_per_tb} ({self.threads_per_tb} threads) in "
            f"{self.warp_sets[0]} sets of {self.warp_sets[1]}",
            f"SMA units: {self.units}; sub-tile s runs on unit s % {self.units}",
        ]
        for (rows, cols), cnt in sorted(self.tb_shapes().items(), reverse=True):
            widths = self.subtile_widths(cols)
            masked = sum(1 for w in widths if w < self.sub_n)
            lines.append(f"  {cnt} TB(s) of {rows} x {cols}: {len(widths)} sub-tiles, "
                         f"{masked} with masked columns")
        if last_k < self.tile_k:
            lines.append(f"  last k iteration masks {self.tile_k - last_k} PE columns")
        return "\n".join(lines)


def plan_tiling(p, cfg: MachineConfig, c_sub: int = 128, tile_k: int = 8) -> TilingPlan:
    if c_sub % cfg.sma_array_rows or c_sub <= 0:
        raise MappingError(f"c_sub {c_sub} must be a positive multiple of {cfg.sma_array_rows}")
    if c_sub * c_sub * cfg.word_bytes > cfg.rf_bytes_per_sm:
        raise MappingError(f"C_sub of {c_sub} x {c_sub} does not fit the register file")
    tile_bytes = 2 * 2 * c_sub * tile_k * cfg.word_bytes  # A and B, double-buffered
    if tile_bytes > cfg.shared_mem_bytes:
        raise MappingError("double-buffered tiles exceed shared memory")
    return TilingPlan(p.m, p.n, p.k, c_sub=c_sub, tile_k=tile_k, sub_n=cfg.sma_array_rows,
                      units=max(1, cfg.sma_units_per_sm))


# ---------------------------------------------------------------------------
# warp-issue model


@dataclass(frozen=True)
class Instr:
    op: str  # alu | lds | sts | ldg | lsma | wait | join
    unit: int = 0
    k_height: int = 0
    nbytes: int = 0
    not_before: int = 0


@dataclass
class WarpProgram:
    warp_set: int
    instrs: List[Instr]
    role: str = "compute"


@dataclass
class SchedulerStats:
    cycles: int
    issued: int
    idle_issue_cycles: int
    max_gap: Dict[int, int]
    overlap_cycles: int
    loader_done: int
    tickets: list = field(default_factory=list)
    replays: int = 0


@dataclass
class _Warp:
    prog: WarpProgram
    age: int
    pc: int = 0
    ready_at: int = 0
    data_ready: int = 0
    tickets: list = field(default_factory=list)
    done_at: Optional[int] = None
    t_next: float = 0.0  # cached earliest issue cycle


def _union_length(intervals: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
    out: List[Tuple[int, int]] = []
    for s, e in sorted(intervals):
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], e))
        else:
            out.append((s, e))
    return out


def _intersect(a: List[Tuple[int, int]], b: List[Tuple[int, int]]) -> int:
    total = 0
    for s1, e1 in a:
        for s2, e2 in b:
            total += max(0, min(e1, e2) - max(s1, s2))
    return total


def simulate_scheduler(sched: str, warps: Sequence[WarpProgram],
                       ctrl: Optional[SmaController] = None, start: int = 0,
                       global_latency: int = 400, bytes_per_cycle: int = 32,
                       preexisting_streams: Sequence[Tuple[int, int]] = ()) -> SchedulerStats:
    """Issue one instruction per cycle from ``warps`` until all retire.

    gto keeps issuing the last warp while it is ready, otherwise the
    oldest ready warp. round_robin_sma rotates over warp sets and applies
    greedy-then-oldest inside a set. An LSMA that finds its unit's queue
    full is replayed: it spends the issue slot and stays ready. ``max_gap`` is, per warp set, the
    longest run of cycles in which the set had a ready warp but did not
    issue.
    """
    if sched not in SCHEDULERS:
        raise MappingError(f"unknown scheduler {sched!r}")
    ws = [_Warp(p, i, ready_at=start, data_ready=start) for i, p in enumerate(warps)]
    sets = sorted({w.prog.warp_set for w in ws})
    gaps = {s: 0 for s in sets}
    max_gap = {s: 0 for s in sets}
    last: Optional[_Warp] = None
    last_in_set: Dict[int, _Warp] = {}
    last_set = sets[-1] if sets else 0
    gq_free = start
    now = start
    issued = idle = replays = 0
    loader_issue: List[int] = []
    tickets = []
    loaders = [w for w in ws if w.prog.role == "loader"]

    def earliest(w: _Warp) -> float:
        ins = w.prog.instrs[w.pc]
        t = max(w.ready_at, ins.not_before)
        if ins.op == "sts":
            t = max(t, w.data_ready)
        elif ins.op == "wait":
            t = max([t] + [tk.stream_end for tk in w.tickets])
        elif ins.op == "join":
            if any(lw.done_at is None for lw in loaders):
                return math.inf
            t = max([t] + [lw.done_at for lw in loaders])
        return t

    def pick_gto(cands: List[_Warp], prev: Optional[_Warp]) -> _Warp:
        if prev is not None and prev in cands:
            return prev
        return min(cands, key=lambda w: w.age)

    active = [w for w in ws if w.prog.instrs]
    for w in ws:
        if not w.prog.instrs:
            w.done_at = start
    for w in active:
        w.t_next = earliest(w)
    while active:
        # a warp's earliest cycle changes only when it issues or a loader retires
        times = [(w.t_next, w) for w in active]
        ready = [w for t, w in times if t <= now]
        if not ready:
            nxt = min(t for t, _ in times)
            if math.isinf(nxt):
                raise MappingError("warp program deadlock")
            idle += int(nxt) - now
            now = int(nxt)
            for s in sets:
                gaps[s] = 0
            continue
        if sched == "gto":
            w = pick_gto(ready, last)
        else:
            order = sets[sets.index(last_set) + 1:] + sets[:sets.index(last_set) + 1]
            for s in order:
                cands = [x for x in ready if x.prog.warp_set == s]
                if cands:
                    w = pick_gto(cands, last_in_set.get(s))
                    break
        ready_sets = {x.prog.warp_set for x in ready}
        for s in sets:
            if s in ready_sets and s != w.prog.warp_set:
                gaps[s] += 1
                max_gap[s] = max(max_gap[s], gaps[s])
            else:
                gaps[s] = 0

        ins = w.prog.instrs[w.pc]
        w.ready_at = now + 1
        if ins.op == "lds":
            w.ready_at = now + SHARED_LATENCY
        elif ins.op == "ldg":
            begin = max(now, gq_free)
            gq_free = begin + -(-ins.nbytes // bytes_per_cycle)
            w.data_ready = max(w.data_ready, gq_free + global_latency)
        elif ins.op == "lsma":
            busy = [p.ticket.complete_cycle for p in ctrl.units[ins.unit].pending
                    if p.ticket.complete_cycle > now]
            if len(busy) >= QUEUE_DEPTH:
                # Unit busy: the slot is spent and the warp retries. While
                # the ready set cannot change, the same choice repeats, so
                # fast-forward to the next event.
                steps = 1
                if sched == "gto" or ready_sets == {w.prog.warp_set}:
                    horizon = min([min(busy)] + [t for t, _ in times if t > now])
                    steps = max(1, int(horizon) - now)
                replays += steps
                for s in ready_sets - {w.prog.warp_set}:
                    gaps[s] += steps - 1
                    max_gap[s] = max(max_gap[s], gaps[s])
                last, last_in_set[w.prog.warp_set], last_set = w, w, w.prog.warp_set
                w.t_next = earliest(w)
                issued += steps
                now += steps
                continue
            else:
                blk = _ZERO_B[ctrl.cfg.sma_array_cols, ctrl.cfg.sma_array_rows]
                tk = ctrl.issue_lsma(ins.unit, LsmaInstruction(0, 0, blk, ins.k_height), now=now)
                w.tickets.append(tk)
                tickets.append(tk)
        w.pc += 1
        if w.prog.role == "loader":
            loader_issue.append(now)
        if w.pc == len(w.prog.instrs):
            w.done_at = now + 1
            active.remove(w)
            if w.prog.role == "loader":
                for x in active:
                    if x.prog.instrs[x.pc].op == "join":
                        x.t_next = earliest(x)
        else:
            w.t_next = earliest(w)
        last, last_in_set[w.prog.warp_set], last_set = w, w, w.prog.warp_set
        issued += 1
        now += 1

    streams = _union_length([(t.stream_start, t.stream_end) for t in tickets] + list(preexisting_streams))
    loader_busy = _union_length([(c, c + 1) for c in loader_issue])
    loader_done = max([w.done_at for w in loaders], default=start)
    return SchedulerStats(
        cycles=now - start, issued=issued, idle_issue_cycles=idle, max_gap=max_gap,
        overlap_cycles=_intersect(loader_busy, streams), loader_done=loader_done,
        tickets=tickets, replays=replays,
    )


class _ZeroBlocks(dict):
    def __missing__(self, key):
        self[key] = np.zeros(key, dtype=np.float32)
        return self[key]


_ZERO_B = _ZeroBlocks()


# ---------------------------------------------------------------------------
# global-memory traffic of tiles


def tile_traffic(layout: str, rows: int, cols: int, ld: int) -> Tuple[int, int]:
    """(transactions, sectors) to fetch a rows x cols block of a matrix.

    ``layout`` is the matrix's storage order and ``ld`` its leading
    dimension; the block starts at a line-aligned origin.
    """
    if layout == "row":
        runs, run_len = rows, cols
    else:
        runs, run_len = cols, rows
    nbytes = run_len * 4
    if runs == 0 or run_len == 0:
        return 0, 0
    if ld * 4 % WARP_BYTES == 0 or runs == 1:
        lines = runs * -(-nbytes // WARP_BYTES)
    else:
        addrs = [r * ld * 4 + c * 4 for r in range(runs) for c in range(run_len)]
        lines = coalesce(MemoryRequest("global", "read", addrs), WARP_BYTES).transactions
    sectors = runs * -(-nbytes // SECTOR_BYTES)
    return lines, sectors


# ---------------------------------------------------------------------------
# per-iteration SMA model


@dataclass(frozen=True)
class _Carry:
    stream_free: Tuple[int, ...]
    inflight: Tuple[Tuple[int, ...], ...]
    hazard: int  # stream end of the LSMAs reading the buffer about to be refilled


@dataclass
class _IterResult:
    duration: int
    counters: Counter
    requests: Counter
    stats: Counter
    carry: _Carry
    busy: int


_ITER_CACHE: Dict[tuple, _IterResult] = {}


def _loader_programs(load_sectors: int, hazard: int, set_id: int, per_set: int) -> List[WarpProgram]:
    n_ldg = -(-load_sectors * SECTOR_BYTES // WARP_BYTES)
    progs = []
    for j in range(per_set):
        mine = len(range(j, n_ldg, per_set))
        ins = [Instr("alu")] if mine else []
        ins += [Instr("ldg", nbytes=WARP_BYTES)] * mine
        ins += [Instr("sts", not_before=hazard)] * mine
        progs.append(WarpProgram(set_id, ins, "loader"))
    return progs


def _sma_iteration(cfg: MachineConfig, sched: str, serialized: bool, rows: int,
                   widths: Tuple[int, ...], kw: int, load_sectors: int, load_lines: int,
                   parity: int, carry: _Carry) -> _IterResult:
    key = (cfg, sched, serialized, rows, widths, kw, load_sectors, load_lines, parity, carry)
    hit = _ITER_CACHE.get(key)
    if hit is not None:
        return hit
    ctrl = SmaController(cfg, functional=False)
    for u, (free, comps) in enumerate(zip(carry.stream_free, carry.inflight)):
        ctrl.seed(u, free, comps)
    units = cfg.sma_units_per_sm
    sets, per_set = 2, 32
    compute_set, loader_set = parity, 1 - parity
    compute = []
    for s in range(per_set):
        ins: List[Instr] = []
        if serialized:
            ins.append(Instr("join"))
        if s < len(widths):
            mask_k = kw
            ins += [Instr("alu"), Instr("alu"), Instr("lds"),
                    Instr("lsma", unit=s % units, k_height=rows, nbytes=widths[s] * mask_k)]
            if serialized:
                ins.append(Instr("wait"))
        compute.append(WarpProgram(compute_set, ins, "compute"))
    loaders = _loader_programs(load_sectors, carry.hazard, loader_set, per_set)
    warps = (compute + loaders) if compute_set == 0 else (loaders + compute)

    # set masks per sub-tile: the LSMA latches the unit mask at issue
    masks = {}
    for s, w in enumerate(widths):
        m = np.zeros((cfg.sma_array_rows, cfg.sma_array_cols), dtype=bool)
        m[:w, :kw] = True
        masks[s] = m
    orig_issue = ctrl.issue_lsma
    order = iter(range(len(widths)))

    def issue_with_mask(unit, inst, now=None):
        ctrl.set_active_mask(unit, masks[next(order)])
        return orig_issue(unit, inst, now)

    ctrl.issue_lsma = issue_with_mask  # type: ignore[method-assign]
    pre_streams = [(0, f) for f in carry.stream_free if f > 0]
    st = simulate_scheduler(sched, warps, ctrl, 0, cfg.global_latency_cycles,
                            cfg.global_bytes_per_cycle, pre_streams)
    end = max(st.cycles, st.loader_done)
    duration = end + cfg.barrier_cycles
    counters = Counter(ctrl.trace.counters)
    requests = Counter(ctrl.trace.requests)
    counters["instruction_issue"] += st.issued - len(st.tickets)
    counters["shared_read"] += len(st.tickets) * cfg.sma_array_rows * cfg.sma_array_cols  # b_values
    counters["rf_write_word"] += len(st.tickets) * cfg.sma_array_rows * cfg.sma_array_cols
    if load_sectors:
        counters["global_transaction"] += load_lines
        counters["shared_write"] += load_sectors * SECTOR_BYTES // 4
        requests[("tile", "global", "read", True)] += load_lines
    stats = Counter(overlap_cycles=st.overlap_cycles, issue_idle_cycles=st.idle_issue_cycles)
    for s, g in st.max_gap.items():
        role = "loader" if s == loader_set else "compute"
        stats[f"max_gap_{role}"] = g
    busy = sum(t.stream_end - max(t.issue_cycle, t.stream_start - cfg.weight_preload_cycles)
               for t in st.tickets)
    nxt = _Carry(
        stream_free=tuple(max(0, u.stream_free_at - duration) for u in ctrl.units),
        inflight=tuple(tuple(sorted(max(0, p.ticket.complete_cycle - duration)
                                    for p in u.pending if p.ticket.complete_cycle > duration))
                       for u in ctrl.units),
        hazard=max([0] + [t.stream_end - duration for t in st.tickets]),
    )
    res = _IterResult(duration, counters, requests, stats, nxt, busy)
    _ITER_CACHE[key] = res
    return res


# ---------------------------------------------------------------------------
# thread-block timelines


@dataclass
class TbTiming:
    cycles: int
    trace: ExecutionTrace


def _prologue_epilogue(cfg: MachineConfig, rows: int, cols: int, c_layout: str,
                       tile_sectors: int, tile_lines: int, beta_nonzero: bool) -> Tuple[int, int, Counter]:
    c_lines, c_sectors = tile_traffic(c_layout, rows, cols, cols)
    load_sectors = tile_sectors + (c_sectors if beta_nonzero else 0)
    prologue = cfg.global_latency_cycles + -(-load_sectors * SECTOR_BYTES // cfg.global_bytes_per_cycle)
    prologue += cfg.barrier_cycles
    epilogue = -(-c_sectors * SECTOR_BYTES // cfg.global_bytes_per_cycle)
    ctr = Counter()
    words = rows * cols
    ctr["global_transaction"] += tile_lines + c_lines + (c_lines if beta_nonzero else 0)
    ctr["shared_write"] += tile_sectors * SECTOR_BYTES // 4
    ctr["rf_write_word"] += words if beta_nonzero else 0
    ctr["rf_read_word"] += words
    ctr["instruction_issue"] += 2 * -(-words // WARP_THREADS)
    return prologue, epilogue, ctr


def _tile_load(layout_a: str, layout_b: str, m: int, n: int, k: int, rows: int, cols: int,
               kw: int) -> Tuple[int, int]:
    la, sa = tile_traffic(layout_a, rows, kw, k if layout_a == "row" else m)
    lb, sb = tile_traffic(layout_b, kw, cols, n if layout_b == "row" else k)
    return la + lb, sa + sb


def sma_tb_timing(cfg: MachineConfig, sched: str, plan: TilingPlan, rows: int, cols: int,
                  layouts: Tuple[str, str, str] = ("row", "row", "row"),
                  beta_nonzero: bool = True, serialized: bool = False) -> TbTiming:
    """Cycle count and counters of one thread block on an SMA machine."""
    widths = plan.subtile_widths(cols)
    trace = ExecutionTrace(peak_macs_per_cycle=cfg.peak_macs_per_cycle)
    units = cfg.sma_units_per_sm
    carry = _Carry((0,) * units, ((),) * units, 0)
    k_iters = plan.k_iters
    loads = {}
    for it in range(k_iters):
        kw = plan.k_extent(it)[1]
        if kw not in loads:
            loads[kw] = _tile_load(layouts[0], layouts[1], plan.m, plan.n, plan.k, rows, cols, kw)
    t0_lines, t0_sectors = loads[plan.k_extent(0)[1]]
    prologue, epilogue, pe_ctr = _prologue_epilogue(cfg, rows, cols, layouts[2], t0_sectors,
                                                    t0_lines, beta_nonzero)
    trace.counters.update(pe_ctr)
    t = prologue
    busy = 0
    idle_issue = 0
    stats: Counter = Counter()
    max_loader_gap = max_compute_gap = 0
    for it in range(k_iters):
        kw = plan.k_extent(it)[1]
        if it + 1 < k_iters:
            lines, sectors = loads[plan.k_extent(it + 1)[1]]
        else:
            lines, sectors = 0, 0
        res = _sma_iteration(cfg, sched, serialized, rows, widths, kw, sectors, lines, it % 2, carry)
        t += res.duration
        trace.counters.update(res.counters)
        trace.requests.update(res.requests)
        stats["overlap_cycles"] += res.stats["overlap_cycles"]
        idle_issue += res.stats["issue_idle_cycles"]
        max_loader_gap = max(max_loader_gap, res.stats["max_gap_loader"])
        max_compute_gap = max(max_compute_gap, res.stats["max_gap_compute"])
        busy += res.busy
        carry = res.carry
    drain = max([0] + [c for comps in carry.inflight for c in comps])
    compute_span = t - prologue + drain
    t += drain + epilogue
    unit_idle = max(0, compute_span * units - busy)
    trace.counters["stall_cycle"] += unit_idle
    trace.total_cycles = t
    trace.stats.update(overlap_cycles=stats["overlap_cycles"], issue_idle_cycles=idle_issue,
                       unit_idle_cycles=unit_idle, max_gap_loader=max_loader_gap,
                       max_gap_compute=max_compute_gap)
    return TbTiming(t, trace)


def _loader_path(cfg: MachineConfig, sectors: int) -> int:
    n_ldg = -(-sectors * SECTOR_BYTES // WARP_BYTES)
    return n_ldg + cfg.global_latency_cycles + -(-sectors * SECTOR_BYTES // cfg.global_bytes_per_cycle) + n_ldg


def _simd_compute(cfg: MachineConfig, rows: int, cols: int, kw: int) -> Tuple[int, Counter]:
    macs = rows * cols * kw
    ctr = Counter()
    ctr["mac"] = macs
    # register-blocked FMA: three operand reads and one write per MAC,
    # shared-memory fragment reads amortized over an 8 x 8 micro-tile
    ctr["rf_read_word"] = 3 * macs
    ctr["rf_write_word"] = macs
    ctr["shared_read"] = -(-macs // 4)
    ctr["instruction_issue"] = -(-macs // WARP_THREADS)
    return -(-macs // cfg.simd_lanes_per_sm), ctr


def other_tb_timing(cfg: MachineConfig, plan: TilingPlan, rows: int, cols: int,
                    layouts: Tuple[str, str, str] = ("row", "row", "row"),
                    beta_nonzero: bool = True) -> TbTiming:
    """Thread block on the TensorCore or plain SIMD GEMM path.

    The same double-buffered tiling is used; an iteration takes the longer
    of its compute time and the loader's critical path.
    """
    trace = ExecutionTrace(peak_macs_per_cycle=cfg.peak_macs_per_cycle)
    cache: Dict[Tuple[int, int], Tuple[int, Counter, Counter]] = {}
    t0_lines, t0_sectors = _tile_load(layouts[0], layouts[1], plan.m, plan.n, plan.k, rows, cols,
                                      plan.k_extent(0)[1])
    prologue, epilogue, pe_ctr = _prologue_epilogue(cfg, rows, cols, layouts[2], t0_sectors,
                                                    t0_lines, beta_nonzero)
    trace.counters.update(pe_ctr)
    t = prologue
    stall = 0
    for it in range(plan.k_iters):
        kw = plan.k_extent(it)[1]
        nxt = plan.k_extent(it + 1)[1] if it + 1 < plan.k_iters else 0
        key = (kw, nxt)
        if key not in cache:
            if cfg.dataflow == "dot_product":
                _, tr, _ = run_dot_product(GemmShape(rows, cols, kw), cfg.tc_units_per_sm * 16,
                                           functional=False, pipeline_cycles=cfg.tc_pipeline_cycles)
                compute, ctr, req = tr.total_cycles, Counter(tr.counters), Counter(tr.requests)
                # fragments staged shared -> RF per warp tile of TC_WARP_TILE
                wm, wn = TC_WARP_TILE
                frag = rows * kw * -(-cols // wn) + kw * cols * -(-rows // wm)
                ctr["shared_read"] += frag
                ctr["rf_write_word"] += frag
                ctr["instruction_issue"] += -(-frag // WARP_THREADS)
            else:
                compute, ctr = _simd_compute(cfg, rows, cols, kw)
                req = Counter()
            load = 0
            if nxt:
                lines, sectors = _tile_load(layouts[0], layouts[1], plan.m, plan.n, plan.k,
                                            rows, cols, nxt)
                load = _loader_path(cfg, sectors)
                ctr["global_transaction"] += lines
                ctr["shared_write"] += sectors * SECTOR_BYTES // 4
                ctr["instruction_issue"] += 2 * -(-sectors * SECTOR_BYTES // WARP_BYTES)
                req[("tile", "global", "read", True)] += lines
            dur = max(compute, load) + cfg.barrier_cycles
            ctr["stall_cycle"] += dur - compute
            cache[key] = (dur, ctr, req)
        dur, ctr, req = cache[key]
        t += dur
        trace.counters.update(ctr)
        trace.requests.update(req)
    t += epilogue
    trace.total_cycles = t
    trace.stats.update(overlap_cycles=0, unit_idle_cycles=trace.counters["stall_cycle"])
    return TbTiming(t, trace)


# ---------------------------------------------------------------------------
# functional execution


def _functional_tb(ctrl: SmaController, plan: TilingPlan, a: np.ndarray, b: np.ndarray,
                   c: np.ndarray, i: int, j: int) -> np.ndarray:
    """Run one TB through the controller; returns its C block."""
    cfg = ctrl.cfg
    r0, rows, c0, cols = plan.tb_extent(i, j)
    widths = plan.subtile_widths(cols)
    sub, tk = plan.sub_n, plan.tile_k
    units = cfg.sma_units_per_sm
    tile_words = plan.c_sub * tk
    a_base = [0, 2 * tile_words * 4]
    b_base = [tile_words * 4, 3 * tile_words * 4]
    slice_words = rows * sub
    masks: Dict[Tuple[int, int], np.ndarray] = {}
    ctrl.rf[:len(widths) * slice_words] = 0
    for s, w in enumerate(widths):
        blk = np.zeros((rows, sub), dtype=np.float32)
        blk[:, :w] = c[r0:r0 + rows, c0 + s * sub:c0 + s * sub + w]
        ctrl.rf[s * slice_words:(s + 1) * slice_words] = blk.ravel()
    for it in range(plan.k_iters):
        buf = it % 2
        k0, kw = plan.k_extent(it)
        a_tile = np.zeros((rows, tk), dtype=np.float32)
        a_tile[:, :kw] = a[r0:r0 + rows, k0:k0 + kw]
        w0 = a_base[buf] // 4
        ctrl.smem[w0:w0 + rows * tk] = a_tile.ravel()
        b_tile = np.zeros((tk, plan.c_sub), dtype=np.float32)
        b_tile[:kw, :cols] = b[k0:k0 + kw, c0:c0 + cols]
        w0 = b_base[buf] // 4
        for s in range(len(widths)):
            ctrl.smem[w0 + s * tk * sub:w0 + (s + 1) * tk * sub] = b_tile[:, s * sub:(s + 1) * sub].ravel()
        for s, w in enumerate(widths):
            u = s % units
            unit = ctrl.units[u]
            inflight = unit.inflight(ctrl.now)
            if len(inflight) >= QUEUE_DEPTH:
                ctrl.sync_lsma(inflight[0])
            if (w, kw) not in masks:
                masks[w, kw] = np.zeros((cfg.sma_array_rows, cfg.sma_array_cols), dtype=bool)
                masks[w, kw][:w, :kw] = True
            ctrl.set_active_mask(u, masks[w, kw])
            bw = b_base[buf] // 4 + s * tk * sub
            b_vals = ctrl.smem[bw:bw + tk * sub].reshape(tk, sub)
            ctrl.issue_lsma(u, LsmaInstruction(a_base[buf], s * slice_words * 4, b_vals, rows))
    ctrl.sync_all()
    out = np.empty((rows, cols), dtype=np.float32)
    for s, w in enumerate(widths):
        blk = ctrl.rf[s * slice_words:(s + 1) * slice_words].reshape(rows, sub)
        out[:, s * sub:s * sub + w] = blk[:, :w]
    return out


# ---------------------------------------------------------------------------
# chip level


def _distribute(durations: List[int], sm_count: int) -> int:
    """Greedy list scheduling of TBs (in grid order), one TB per SM at a time."""
    heap = [0] * min(sm_count, len(durations))
    heapq.heapify(heap)
    for d in durations:
        heapq.heappush(heap, heapq.heappop(heap) + d)
    return max(heap)


def _chip(cfg: MachineConfig, plan: TilingPlan, sched: str, layouts, beta_nonzero: bool,
          serialized: bool) -> ExecutionTrace:
    timings: Dict[Tuple[int, int], TbTiming] = {}
    for shape in plan.tb_shapes():
        rows, cols = shape
        if cfg.dataflow in ("semi_broadcast", "weight_stationary"):
            timings[shape] = sma_tb_timing(cfg, sched, plan, rows, cols, layouts,
                                           beta_nonzero, serialized)
        else:
            timings[shape] = other_tb_timing(cfg, plan, rows, cols, layouts, beta_nonzero)
    gi, gj = plan.tb_grid
    durations = [timings[plan.tb_extent(i, j)[1::2]].cycles for i in range(gi) for j in range(gj)]
    trace = ExecutionTrace(peak_macs_per_cycle=cfg.peak_macs_per_cycle * cfg.sm_count)
    for shape, cnt in plan.tb_shapes().items():
        trace.absorb(timings[shape].trace, cnt)
    for key in ("max_gap_loader", "max_gap_compute"):
        trace.stats[key] = max([tm.trace.stats.get(key, 0) for tm in timings.values()])
    trace.total_cycles = _distribute(durations, cfg.sm_count)
    trace.stats["thread_blocks"] = gi * gj
    trace.stats["waves"] = -(-gi * gj // cfg.sm_count)
    return trace


def run_double_buffered(plan: TilingPlan, p, sched: str, cfg: MachineConfig,
                        functional: bool = True, serialized: bool = False):
    """Execute ``p`` with the double-buffered LSMA mapping.

    Returns ``(C, trace)``; ``C`` is None when ``functional`` is False or
    ``p`` carries only dimensions. ``serialized=True`` makes the compute
    set wait for each tile load instead of overlapping it.
    """
    if cfg.sma_units_per_sm < 1:
        raise MappingError("run_double_buffered needs an SMA configuration")
    check_scheduler(sched, cfg)
    if (plan.m, plan.n, plan.k) != (p.m, p.n, p.k) or plan.units != cfg.sma_units_per_sm:
        raise MappingError("plan does not match problem or configuration")
    layouts = tuple(getattr(p, f"layout_{x}", "row") for x in "abc")
    beta_nonzero = getattr(p, "beta", 0.0) != 0.0
    trace = _chip(cfg, plan, sched, layouts, beta_nonzero, serialized)
    result = None
    if functional and isinstance(p, GemmProblem):
        ctrl = SmaController(cfg, functional=True)
        a = (np.float32(p.alpha) * p.a).astype(np.float32)
        c = (np.float32(p.beta) * p.c).astype(np.float32)
        result = np.empty((p.m, p.n), dtype=np.float32)
        gi, gj = plan.tb_grid
        for i in range(gi):
            for j in range(gj):
                r0, rows, c0, cols = plan.tb_extent(i, j)
                result[r0:r0 + rows, c0:c0 + cols] = _functional_tb(ctrl, plan, a, p.b, c, i, j)
    return result, trace


def default_scheduler(cfg: MachineConfig) -> str:
    return "round_robin_sma" if cfg.sma_units_per_sm >= 1 else "gto"


def estimate_gemm(cfg: MachineConfig, m: int, n: int, k: int, sched: Optional[str] = None,
                  layouts: Tuple[str, str, str] = ("row", "row", "row"),
                  beta_nonzero: bool = False) -> ExecutionTrace:
    """Timing-only chip-level run of an m x n x k GEMM on any dataflow."""
    shape = GemmShape(m, n, k)
    plan = plan_tiling(shape, cfg)
    sched = sched or default_scheduler(cfg)
    check_scheduler(sched, cfg)
    return _chip(cfg, plan, sched, layouts, beta_nonzero, False)
