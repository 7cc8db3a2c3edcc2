"""
Cycle-level GEMM engines for the three dataflows.

* semi-broadcast weight-stationary (SMA): A elements are broadcast down
  array columns, partial sums flow right, a full C row leaves per cycle.
* weight-stationary (TPU): A enters skewed, partial sums flow down and C
  leaves skewed; A and C both touch several matrix rows per cycle.
* dot-product (TensorCore): 4x4x4 primitives fed from the register file.

Each engine returns ``(C, ExecutionTrace, ReuseStats)``. A problem larger
than one array pass is split into sub-problems (n-block x k-block) that
run back-to-back on the same array; the next pass preloads its weights
while the previous one drains. Pass ``functional=False`` to skip the
arithmetic and only produce the timing/counters.

Per-pass memory behaviour is simulated cycle by cycle once per distinct
pass shape and cached.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from .memory import MemoryRequest, MemorySystem, rf_access, shared_access
from .oracle import GemmProblem
from .trace import ExecutionTrace, ReuseStats

WORD = 4
TC_PRIMITIVE = 4
FEDP_PER_TC = 16
TC_MACS_PER_CYCLE = 32  # FP32-equivalent: 64 FP16 MAC units per TensorCore


class EngineError(ValueError):
    pass


@dataclass
class PassProfile:
    """Cost of one array pass (one LSMA-sized sub-problem)."""

    steps: int
    stalls: int
    counters: Counter = field(default_factory=Counter)
    requests: Counter = field(default_factory=Counter)


def _round_up(x: int, q: int) -> int:
    return -(-x // q) * q


# ---------------------------------------------------------------------------
# functional kernels


def systolic_accumulate(a: np.ndarray, b: np.ndarray, c: np.ndarray,
                        mask: Optional[np.ndarray] = None) -> np.ndarray:
    """``c + a @ b`` in float32: partial sums are reduced over k, then C is added.

    ``mask`` (k x n booleans) switches off PEs holding ``b[k, n]``.
    """
    b = np.asarray(b, dtype=np.float32)
    if mask is not None:
        b = np.where(mask, b, np.float32(0))
    a = np.asarray(a, dtype=np.float32)
    return np.asarray(c, dtype=np.float32) + a @ b


def _prescale(p: GemmProblem) -> Tuple[np.ndarray, np.ndarray]:
    # beta applied once to C before the K loop; alpha folded into A.
    a = (np.float32(p.alpha) * p.a).astype(np.float32)
    c = (np.float32(p.beta) * p.c).astype(np.float32)
    return a, c


# ---------------------------------------------------------------------------
# semi-broadcast


def _sweep_steps(steps: int, lo: int, hi: int, period: int, step) -> None:
    """Call ``step(t, times)`` so that every t in [0, steps) is covered once.

    Within [lo, hi] the per-step cost repeats with ``period`` (addresses only
    translate by a multiple of the bank count per period), so one period is
    evaluated and weighted by its repeat count.
    """
    if hi - lo + 1 < 2 * period:
        for t in range(steps):
            step(t, 1)
        return
    reps = (hi - lo + 1) // period
    for t in range(lo):
        step(t, 1)
    for t in range(lo, lo + period):
        step(t, reps)
    for t in range(lo + reps * period, steps):
        step(t, 1)


@lru_cache(maxsize=4096)
def semi_broadcast_profile(m_rows: int, kc: int, nr: int, rows: int = 8, cols: int = 8,
                           banks: int = 8, rf_words: int = 32, units: int = 1) -> PassProfile:
    """One pass of ``units`` semi-broadcast arrays sharing the A stream.

    The A tile sits row-major (``cols`` words per row) in the unit's
    assigned banks, so the skewed column feed touches one bank per column.
    ``units > 1`` is the combined array: A is read once, C rows are
    ``units * nr`` words wide.
    """
    if kc > cols or nr > rows:
        raise EngineError(f"pass {kc}x{nr} exceeds the {cols}x{rows} array")
    if banks < cols:
        raise EngineError(f"{banks} assigned banks cannot feed {cols} columns")
    steps = m_rows + cols - 1
    prof = PassProfile(steps=steps, stalls=0)
    width = units * nr

    def step(t: int, times: int) -> None:
        addrs = [((t - k) * cols + k) * WORD for k in range(kc) if 0 <= t - k < m_rows]
        cost = 1
        if addrs:
            v = shared_access(MemoryRequest("shared", "read", addrs), banks)
            cost = max(cost, v.cycles)
            prof.counters["shared_read"] += len(addrs) * times
            prof.requests[("a", "shared", "read", v.coalesced)] += times
        if t < m_rows:
            rd = rf_access(MemoryRequest("rf", "read", [(t * width + j) * WORD for j in range(width)]), rf_words)
            cost = max(cost, rd.cycles)
            prof.counters["rf_read_word"] += width * times
            prof.requests[("c", "rf", "read", rd.coalesced)] += times
        i = t - (cols - 1)
        if 0 <= i < m_rows:
            wr = rf_access(MemoryRequest("rf", "write", [(i * width + j) * WORD for j in range(width)]), rf_words)
            cost = max(cost, wr.cycles)
            prof.counters["rf_write_word"] += width * times
            prof.requests[("c", "rf", "write", wr.coalesced)] += times
        prof.stalls += (cost - 1) * times

    _sweep_steps(steps, cols - 1, m_rows - 1, banks, step)
    # stationary weights come from the issuing warps' registers
    prof.counters["rf_read_word"] += kc * width
    prof.requests[("b", "rf", "read", True)] += 1
    prof.counters["mac"] += m_rows * kc * width
    prof.counters["instruction_issue"] += 1
    prof.counters["stall_cycle"] += prof.stalls
    return prof


# ---------------------------------------------------------------------------
# weight-stationary


@lru_cache(maxsize=4096)
def weight_stationary_profile(m_rows: int, kc: int, nr: int, rows: int = 8, cols: int = 8,
                              banks: int = 32, units: int = 1, n_offset: int = 0,
                              ld_a: int = 128, ld_c: int = 128) -> PassProfile:
    """One pass of ``units`` lockstep TPU-style arrays on the general bank pool.

    PE (k, n) holds B[k][n]. A[i][k] enters array row k at step i + k and
    moves right; partial sums move down and C[i][n] leaves the bottom of
    column n at step i + n + cols - 1, where it is read-modified-written
    in a row-major C staging area (``ld_c`` words per row). The A tile is
    stored k-major with ``ld_a`` words per k. Units work on adjacent
    n-slices of the same A tile.
    """
    if kc > cols or nr > rows:
        raise EngineError(f"pass {kc}x{nr} exceeds the {cols}x{rows} array")
    steps = m_rows + rows + cols - 2
    prof = PassProfile(steps=steps, stalls=0)
    c_base = _round_up(ld_a * cols, banks)

    def step(t: int, times: int) -> None:
        a_words = [k * ld_a + (t - k) for k in range(kc) if 0 <= t - k < m_rows]
        c_words: List[int] = []
        for u in range(units):
            n0 = n_offset + u * rows
            c_words += [c_base + (t - n - cols + 1) * ld_c + n0 + n
                        for n in range(nr) if 0 <= t - n - cols + 1 < m_rows]
        words = a_words + c_words
        if not words:
            return
        v = shared_access(MemoryRequest("shared", "read", [w * WORD for w in words]), banks)
        prof.stalls += (v.cycles - 1) * times
        if a_words:
            va = shared_access(MemoryRequest("shared", "read", [w * WORD for w in a_words]), banks)
            prof.counters["shared_read"] += len(a_words) * times
            prof.requests[("a", "shared", "read", va.coalesced)] += times
        if c_words:
            vc = shared_access(MemoryRequest("shared", "write", [w * WORD for w in c_words]), banks)
            prof.counters["shared_read"] += len(c_words) * times
            prof.counters["shared_write"] += len(c_words) * times
            prof.requests[("c", "shared", "read", vc.coalesced)] += times
            prof.requests[("c", "shared", "write", vc.coalesced)] += times

    # every array row and column is busy for t in [max(kc, nr + cols - 1) - 1, m_rows - 1]
    _sweep_steps(steps, max(kc - 1, nr + cols - 2), m_rows - 1, banks, step)
    prof.counters["rf_read_word"] += kc * nr * units
    prof.requests[("b", "rf", "read", True)] += 1
    prof.counters["mac"] += m_rows * kc * nr * units
    prof.counters["instruction_issue"] += 1
    prof.counters["stall_cycle"] += prof.stalls
    return prof


# ---------------------------------------------------------------------------
# shared driver for the two systolic engines


def _blocks(total: int, size: int) -> List[Tuple[int, int]]:
    return [(s, min(size, total - s)) for s in range(0, total, size)]


def _run_systolic(p: GemmProblem, rows: int, cols: int, mem: Optional[MemorySystem],
                  preload: int, functional: bool, kind: str,
                  assigned_banks: int) -> Tuple[Optional[np.ndarray], ExecutionTrace, ReuseStats]:
    trace = ExecutionTrace(peak_macs_per_cycle=rows * cols)
    n_blocks = _blocks(p.n, rows)
    k_blocks = _blocks(p.k, cols)
    shared_banks = mem.shared_banks if mem else 32
    rf_words = mem.rf_words_per_bank_per_cycle if mem else 32
    ld_a = _round_up(p.m, shared_banks)
    ld_c = _round_up(p.n, shared_banks)

    # group identical passes; n offset only matters modulo the bank count
    shapes: Counter = Counter()
    for n0, nr in n_blocks:
        for _, kc in k_blocks:
            shapes[(kc, nr, n0 % shared_banks)] += 1

    busy = 0
    passes = 0
    for (kc, nr, n_off), count in sorted(shapes.items()):
        if kind == "semi_broadcast":
            prof = semi_broadcast_profile(p.m, kc, nr, rows, cols, assigned_banks, rf_words)
        else:
            prof = weight_stationary_profile(p.m, kc, nr, rows, cols, shared_banks, 1,
                                             n_off, ld_a, ld_c)
        trace.counters.update({k: v * count for k, v in prof.counters.items()})
        trace.requests.update({k: v * count for k, v in prof.requests.items()})
        busy += count * (preload + p.m + prof.stalls)
        passes += count
    fill = (cols - 1) if kind == "semi_broadcast" else (rows + cols - 2)
    trace.total_cycles = busy + fill
    trace.counters["controller_cycle"] += trace.total_cycles
    trace.stats["passes"] = passes

    if mem is not None and mem.record:
        _record_first_pass(p, rows, cols, mem, kind, assigned_banks, ld_a, ld_c, preload)

    reuse = ReuseStats(
        macs=p.macs,
        a_reads_from_memory=p.m * p.k * len(n_blocks),
        b_reads_from_memory=p.k * p.n,
        c_writes_to_memory=p.m * p.n * len(k_blocks),
    )
    result = None
    if functional:
        a, c = _prescale(p)
        result = systolic_accumulate(a, p.b, c)
    return result, trace, reuse


def _record_first_pass(p, rows, cols, mem, kind, assigned_banks, ld_a, ld_c, preload) -> None:
    """Replay the first pass request by request into the memory recorder."""
    kc, nr = min(cols, p.k), min(rows, p.n)
    if kind == "semi_broadcast":
        for t in range(p.m + cols - 1):
            addrs = [((t - k) * cols + k) * WORD for k in range(kc) if 0 <= t - k < p.m]
            if addrs:
                mem.access(MemoryRequest("shared", "read", addrs, operand="a"), preload + t,
                           banks=assigned_banks)
            i = t - (cols - 1)
            if 0 <= i < p.m:
                mem.access(MemoryRequest("rf", "write", [(i * nr + j) * WORD for j in range(nr)],
                                         operand="c"), preload + t)
    else:
        for t in range(p.m + rows + cols - 2):
            a_words = [k * ld_a + (t - k) for k in range(kc) if 0 <= t - k < p.m]
            if a_words:
                mem.access(MemoryRequest("shared", "read", [w * WORD for w in a_words], operand="a"),
                           preload + t)
            c_words = [(t - n - cols + 1) * ld_c + n for n in range(nr) if 0 <= t - n - cols + 1 < p.m]
            if c_words:
                mem.access(MemoryRequest("shared", "write", [w * WORD for w in c_words], operand="c"),
                           preload + t)


def run_semi_broadcast(p: GemmProblem, rows: int = 8, cols: int = 8,
                       mem: Optional[MemorySystem] = None, preload: Optional[int] = None,
                       assigned_banks: int = 8, functional: bool = True):
    if preload is None:
        preload = rows
    return _run_systolic(p, rows, cols, mem, preload, functional, "semi_broadcast", assigned_banks)


def run_weight_stationary(p: GemmProblem, rows: int = 8, cols: int = 8,
                          mem: Optional[MemorySystem] = None, preload: Optional[int] = None,
                          functional: bool = True):
    if preload is None:
        preload = rows
    return _run_systolic(p, rows, cols, mem, preload, functional, "weight_stationary", 0)


# ---------------------------------------------------------------------------
# dot-product


def primitive_cost(mi: int, ni: int, ki: int, rf_words: int = 32) -> Tuple[int, Counter]:
    """Cycles and counters of one (possibly edge-clipped) 4x4x4 primitive.

    Operand reads (A, B and the C accumulator) and the C write-back share
    the partition's operand-collector port, so their port cycles add up;
    the MAC array needs ``macs / 32`` cycles and overlaps with the port.
    """
    macs = mi * ni * ki
    reads = mi * ki + ki * ni + mi * ni
    writes = mi * ni
    port = (math.ceil(reads / rf_words)) + (math.ceil(writes / rf_words))
    cycles = max(port, math.ceil(macs / TC_MACS_PER_CYCLE))
    ctr = Counter(mac=macs, rf_read_word=reads, rf_write_word=writes, instruction_issue=1)
    return cycles, ctr


def _edge_sizes(total: int, size: int) -> List[Tuple[int, int]]:
    """(block size, how many blocks of that size)."""
    full, rest = divmod(total, size)
    out = []
    if full:
        out.append((size, full))
    if rest:
        out.append((rest, 1))
    return out


def run_dot_product(p: GemmProblem, fedp_units: int = 64, mem: Optional[MemorySystem] = None,
                    functional: bool = True, pipeline_cycles: int = 4):
    """TensorCore-style execution on ``fedp_units / 16`` TensorCores.

    Primitives are enumerated output-block major with k innermost and dealt
    round-robin to the TensorCores.
    """
    if fedp_units < FEDP_PER_TC or fedp_units % FEDP_PER_TC:
        raise EngineError("fedp_units must be a positive multiple of 16")
    n_tc = fedp_units // FEDP_PER_TC
    rf_words = mem.rf_words_per_bank_per_cycle if mem else 32
    trace = ExecutionTrace(peak_macs_per_cycle=n_tc * TC_MACS_PER_CYCLE)

    mb = -(-p.m // TC_PRIMITIVE)
    nb = -(-p.n // TC_PRIMITIVE)
    kb = -(-p.k // TC_PRIMITIVE)

    def sizes(total: int, nblk: int) -> np.ndarray:
        s = np.full(nblk, TC_PRIMITIVE, dtype=np.int64)
        if total % TC_PRIMITIVE:
            s[-1] = total % TC_PRIMITIVE
        return s

    ms, ns, ks = sizes(p.m, mb), sizes(p.n, nb), sizes(p.k, kb)
    # cost table over the (at most 2 x 2 x 2) distinct primitive shapes
    cost_of: Dict[Tuple[int, int, int], int] = {}
    for mi, _ in _edge_sizes(p.m, TC_PRIMITIVE):
        for ni, _ in _edge_sizes(p.n, TC_PRIMITIVE):
            for ki, _ in _edge_sizes(p.k, TC_PRIMITIVE):
                cyc, ctr = primitive_cost(mi, ni, ki, rf_words)
                cost_of[(mi, ni, ki)] = cyc
    counts_m = dict(_edge_sizes(p.m, TC_PRIMITIVE))
    counts_n = dict(_edge_sizes(p.n, TC_PRIMITIVE))
    counts_k = dict(_edge_sizes(p.k, TC_PRIMITIVE))
    n_prims = 0
    for (mi, ni, ki), _ in cost_of.items():
        cnt = counts_m[mi] * counts_n[ni] * counts_k[ki]
        _, ctr = primitive_cost(mi, ni, ki, rf_words)
        trace.counters.update({k: v * cnt for k, v in ctr.items()})
        trace.request("a", "rf", "read", True, cnt)
        trace.request("b", "rf", "read", True, cnt)
        trace.request("c", "rf", "read", True, cnt)
        trace.request("c", "rf", "write", True, cnt)
        n_prims += cnt

    # Per-TC busy time with round-robin dealing. Block row i starts dealing
    # at offset i * nb * kb, which only rotates the row's per-TC histogram.
    per_tc = np.zeros(n_tc, dtype=np.int64)
    row_len = nb * kb
    lane = np.arange(row_len) % n_tc
    for mi in sorted(set(int(x) for x in ms)):
        grid = np.array([[cost_of[(mi, int(nj), int(kk))] for kk in ks] for nj in ns],
                        dtype=np.int64).ravel()
        hist = np.bincount(lane, weights=grid, minlength=n_tc).astype(np.int64)
        rows_of_type = np.nonzero(ms == mi)[0]
        shifts = Counter(int(i * row_len % n_tc) for i in rows_of_type) if n_tc > 1 else {0: len(rows_of_type)}
        for shift, cnt in shifts.items():
            per_tc += np.roll(hist, shift) * cnt
    trace.total_cycles = int(per_tc.max()) + pipeline_cycles
    trace.counters["stall_cycle"] += int(trace.total_cycles * n_tc - per_tc.sum())
    trace.stats["primitives"] = n_prims

    reuse = ReuseStats(
        macs=p.macs,
        a_reads_from_memory=p.m * p.k * nb,
        b_reads_from_memory=p.k * p.n * mb,
        c_writes_to_memory=p.m * p.n * kb,
    )
    result = None
    if functional:
        a, c = _prescale(p)
        b = p.b
        for k0 in range(0, p.k, TC_PRIMITIVE):
            c += a[:, k0:k0 + TC_PRIMITIVE] @ b[k0:k0 + TC_PRIMITIVE]
        result = c
    return result, trace, reuse


# ---------------------------------------------------------------------------
# event-level reference for one semi-broadcast pass


def simulate_lsma_events(a: np.ndarray, b: np.ndarray, c_in: np.ndarray, preload: int = 8,
                         record: bool = False):
    """PE-by-PE simulation of one semi-broadcast pass.

    ``a`` is M x cols, ``b`` cols x rows (PE (n, k) holds ``b[k, n]``),
    ``c_in`` M x rows. Returns ``(c_out, total_cycles, events)`` where
    events are ``(cycle, "pe<n>.<k>", "mac", "row <i>")`` and
    ``(cycle, "array", "write_c", "row <i>")`` tuples.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    m_rows, cols = a.shape
    rows = b.shape[1]
    c_out = np.zeros((m_rows, rows), dtype=np.float32)
    psum = np.zeros((rows, cols), dtype=np.float32)  # register at PE (n, k)
    events = [] if record else None
    t = 0
    last = -1
    while True:
        active = False
        new = psum.copy()
        for k in range(cols):
            i = t - k
            if not 0 <= i < m_rows:
                continue
            active = True
            incoming = np.asarray(c_in[i], dtype=np.float32) if k == 0 else psum[:, k - 1]
            new[:, k] = incoming + a[i, k] * b[k, :]
            if record:
                for n in range(rows):
                    events.append((preload + t, f"pe{n}.{k}", "mac", f"row {i}"))
            if k == cols - 1:
                c_out[i] = new[:, k]
                last = t
                if record:
                    events.append((preload + t, "array", "write_c", f"row {i}"))
        psum = new
        if not active:
            break
        t += 1
    return c_out, preload + last + 1, events
