import numpy as np
import pytest
from hypothesis import given, strategies as st

from smasim.engines import (EngineError, run_dot_product, run_semi_broadcast,
                            run_weight_stationary, semi_broadcast_profile, simulate_lsma_events,
                            weight_stationary_profile)
from smasim.memory import MemorySystem
from smasim.oracle import GemmProblem, GemmShape, gemm_reference, matches_reference, random_problem
from smasim.trace import flops_efficiency

ENGINES = (run_semi_broadcast, run_weight_stationary, run_dot_product)


def problem(m, n, k, seed=0, **kw):
    return random_problem(np.random.default_rng(seed), m, n, k, **kw)


def test_single_lsma_143_cycles():
    _, trace, reuse = run_semi_broadcast(problem(128, 8, 8))
    assert trace.total_cycles == 8 + 128 + 7
    assert trace.counters["stall_cycle"] == 0
    assert reuse.a_reuse_factor == 8
    assert flops_efficiency(trace) == pytest.approx(128 / 143)


def test_single_row_pass():
    p = problem(1, 8, 8)
    c, trace, _ = run_semi_broadcast(p)
    assert trace.total_cycles == 8 + 1 + 7
    np.testing.assert_allclose(c, gemm_reference(p), rtol=1e-5)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_event_simulation_hand_counts(m):
    # row i enters column 0 at step i and leaves column 7 at step i + 7
    rng = np.random.default_rng(m)
    a, b, c = rng.standard_normal((m, 8)), rng.standard_normal((8, 8)), rng.standard_normal((m, 8))
    out, cycles, events = simulate_lsma_events(a, b, c, record=True)
    assert cycles == 8 + (m - 1) + 7 + 1
    assert sum(e[2] == "mac" for e in events) == 64 * m
    writes = [e[0] for e in events if e[2] == "write_c"]
    assert writes == [8 + i + 7 for i in range(m)]
    np.testing.assert_allclose(out, c + a @ b, rtol=1e-5)


def test_event_simulation_agrees_with_engine():
    p = problem(128, 8, 8, alpha=1.0, beta=1.0)
    out, cycles, _ = simulate_lsma_events(p.a, p.b, p.c)
    c, trace, _ = run_semi_broadcast(p)
    assert cycles == trace.total_cycles == 143
    assert matches_reference(out, p) and matches_reference(c, p)


def test_weight_stationary_conflicts():
    p = problem(128, 8, 8)
    _, sb, _ = run_semi_broadcast(p)
    c, ws, reuse = run_weight_stationary(p)
    assert ws.counters["stall_cycle"] > 0
    assert ws.total_cycles > sb.total_cycles
    assert ws.macs == sb.macs
    assert reuse.a_reuse_factor == 8
    assert matches_reference(c, p)


def test_dot_product_primitive():
    p = problem(4, 4, 4)
    _, trace, reuse = run_dot_product(p, fedp_units=16)
    assert trace.macs == 64
    assert trace.counters["rf_read_word"] == 48
    assert trace.counters["rf_write_word"] == 16
    assert reuse.a_reuse_factor == 4
    with pytest.raises(EngineError):
        run_dot_product(p, fedp_units=24)


def test_semi_broadcast_beats_dot_product_efficiency():
    shape = GemmShape(512, 512, 512)
    _, sb, _ = run_semi_broadcast(shape, functional=False)
    _, dp, _ = run_dot_product(shape, functional=False)
    assert flops_efficiency(dp) < flops_efficiency(sb)


@pytest.mark.parametrize("size", [256, 512, 1024])
def test_weight_stationary_slower_in_sweep(size):
    shape = GemmShape(size, size, size)
    _, sb, _ = run_semi_broadcast(shape, functional=False)
    _, ws, _ = run_weight_stationary(shape, functional=False)
    assert ws.total_cycles > sb.total_cycles


def test_coalescing_signatures():
    shape = GemmShape(256, 256, 256)
    _, sb, _ = run_semi_broadcast(shape, functional=False)
    _, ws, _ = run_weight_stationary(shape, functional=False)
    _, dp, _ = run_dot_product(shape, functional=False)
    assert sb.uncoalesced("b") == sb.uncoalesced("c") == 0 and sb.uncoalesced("a") > 0
    assert ws.uncoalesced("a") > 0 and ws.uncoalesced("c") > 0
    assert sum(dp.uncoalesced(x) for x in "abc") == 0


def test_pass_limits():
    with pytest.raises(EngineError):
        semi_broadcast_profile(8, 9, 8)
    with pytest.raises(EngineError):
        semi_broadcast_profile(8, 8, 8, banks=4)
    with pytest.raises(EngineError):
        weight_stationary_profile(8, 8, 9)


def test_memory_recording():
    mem = MemorySystem(record=True)
    run_semi_broadcast(problem(16, 8, 8), mem=mem)
    assert any(r.operand == "a" for r in mem.records)


def test_deterministic_traces():
    p = problem(40, 20, 30, seed=3)
    for engine in ENGINES:
        _, t1, _ = engine(p)
        _, t2, _ = engine(p.copy())
        assert (t1.total_cycles, t1.counters, t1.requests) == (t2.total_cycles, t2.counters, t2.requests)


dims = st.integers(1, 96)


@given(dims, dims, dims, st.integers(0, 2**32 - 1),
       st.tuples(*[st.sampled_from(["row", "col"])] * 3))
def test_engines_match_oracle_and_conserve_macs(m, n, k, seed, layouts):
    p = problem(m, n, k, seed=seed, layouts=layouts)
    ref = gemm_reference(p)
    for engine in ENGINES:
        c, trace, _ = engine(p)
        assert matches_reference(c, p, 1e-5, reference=ref), engine.__name__
        assert trace.macs == m * n * k


@given(st.integers(1, 64), st.integers(1, 16).map(lambda x: 8 * x), st.integers(1, 64))
def test_reuse_on_full_arrays(m, n, k):
    shape = GemmShape(m, n, k)
    assert run_semi_broadcast(shape, functional=False)[2].a_reuse_factor == 8
    assert run_weight_stationary(shape, functional=False)[2].a_reuse_factor == 8
    assert run_dot_product(shape, functional=False)[2].a_reuse_factor == 4


@pytest.mark.parametrize("profile", ["semi_broadcast_profile", "weight_stationary_profile"])
@pytest.mark.parametrize("m_rows,kc,nr", [(128, 8, 8), (257, 5, 3), (40, 8, 6), (1000, 7, 8)])
def test_periodic_summation_equals_full_stepping(profile, m_rows, kc, nr, monkeypatch):
    import smasim.engines as eng
    fn = getattr(eng, profile).__wrapped__
    fast = fn(m_rows, kc, nr)

    def every_step(steps, lo, hi, period, step):
        for t in range(steps):
            step(t, 1)
    monkeypatch.setattr(eng, "_sweep_steps", every_step)
    slow = fn(m_rows, kc, nr)
    assert (fast.steps, fast.stalls) == (slow.steps, slow.stalls)
    assert fast.counters == slow.counters and fast.requests == slow.requests
