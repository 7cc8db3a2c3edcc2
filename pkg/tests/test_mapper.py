import numpy as np
import pytest
from hypothesis import given, strategies as st

from smasim.config import preset
from smasim.mapper import (SCHEDULERS, Instr, MappingError, TilingPlan, WarpProgram,
                           estimate_gemm, plan_tiling, run_double_buffered, simulate_scheduler)
from smasim.oracle import GemmShape, gemm_reference, matches_reference, random_problem
from smasim.trace import flops_efficiency


def sma(units):
    return preset("2-sma").with_(name=f"{units}-sma", sma_units_per_sm=units,
                                 simd_lanes_per_sm=64 * units)


def test_plan_4096():
    plan = plan_tiling(GemmShape(4096, 4096, 4096), preset("2-sma"))
    assert plan.tb_grid == (32, 32)
    assert plan.k_iters == 512 and plan.tile_k == 8
    assert plan.subtiles_per_tile == 16


def test_plan_single_tile():
    plan = plan_tiling(GemmShape(128, 128, 8), preset("2-sma"))
    assert plan.tb_grid == (1, 1) and plan.k_iters == 1


def test_edge_tiles_match_oracle():
    cfg = preset("2-sma")
    p = random_problem(np.random.default_rng(0), 130, 12, 20)
    plan = plan_tiling(p, cfg)
    assert plan.tb_grid == (2, 1)
    c, trace = run_double_buffered(plan, p, "round_robin_sma", cfg)
    assert matches_reference(c, p)
    assert trace.macs == p.macs
    assert "masked" in plan.explain()


def test_plan_capacity_checks():
    cfg = preset("2-sma")
    with pytest.raises(MappingError):
        plan_tiling(GemmShape(8, 8, 8), cfg, c_sub=12)
    with pytest.raises(MappingError):
        plan_tiling(GemmShape(8, 8, 8), cfg, c_sub=512)


def test_scheduler_checks():
    p = GemmShape(64, 64, 64)
    with pytest.raises(MappingError):
        estimate_gemm(preset("4-tc"), 64, 64, 64, sched="round_robin_sma")
    with pytest.raises(MappingError):
        estimate_gemm(preset("2-sma"), 64, 64, 64, sched="lrr")
    with pytest.raises(MappingError):
        run_double_buffered(plan_tiling(p, preset("2-sma")), p, "gto", preset("4-tc"))
    with pytest.raises(MappingError):
        run_double_buffered(plan_tiling(p, preset("2-sma")), GemmShape(64, 64, 32), "gto",
                            preset("2-sma"))


def test_saturation_at_4096():
    trace = estimate_gemm(preset("2-sma"), 4096, 4096, 4096)
    assert flops_efficiency(trace) > 0.90
    stall_share = trace.counters["stall_cycle"] / (trace.total_cycles * 2 * 80)
    assert stall_share < 0.05


def test_single_iteration_has_no_overlap():
    cfg = preset("2-sma")
    p = GemmShape(128, 128, 8)
    _, trace = run_double_buffered(plan_tiling(p, cfg), p, "round_robin_sma", cfg,
                                   functional=False)
    assert trace.stats["overlap_cycles"] == 0
    _, deep = run_double_buffered(plan_tiling(GemmShape(128, 128, 256), cfg),
                                  GemmShape(128, 128, 256), "round_robin_sma", cfg,
                                  functional=False)
    assert deep.stats["overlap_cycles"] > 0


def test_schedulers_agree_functionally():
    cfg = sma(3)
    p = random_problem(np.random.default_rng(5), 200, 72, 40)
    plan = plan_tiling(p, cfg)
    c_gto, _ = run_double_buffered(plan, p, "gto", cfg)
    c_rr, _ = run_double_buffered(plan, p, "round_robin_sma", cfg)
    np.testing.assert_array_equal(c_gto, c_rr)


@pytest.mark.parametrize("units", [1, 2, 3])
def test_round_robin_bounds_loader_gap(units):
    cfg = sma(units)
    gto = estimate_gemm(cfg, 512, 512, 256, sched="gto")
    rr = estimate_gemm(cfg, 512, 512, 256, sched="round_robin_sma")
    assert rr.stats["max_gap_loader"] <= 2  # two warp sets, issue width 1
    assert gto.stats["max_gap_loader"] > rr.stats["max_gap_loader"]
    assert rr.counters["stall_cycle"] <= gto.counters["stall_cycle"]


def _programs(sets):
    progs = []
    for s in sets:
        for _ in range(3):
            progs.append(WarpProgram(s, [Instr("alu"), Instr("lds"), Instr("alu")]))
    return progs


def test_single_warp_set_schedulers_identical():
    from smasim.controller import SmaController
    a = simulate_scheduler("gto", _programs([0]), SmaController(sma(1), functional=False))
    b = simulate_scheduler("round_robin_sma", _programs([0]),
                           SmaController(sma(1), functional=False))
    assert (a.cycles, a.issued, a.idle_issue_cycles, a.max_gap) == \
           (b.cycles, b.issued, b.idle_issue_cycles, b.max_gap)
    with pytest.raises(MappingError):
        simulate_scheduler("fifo", _programs([0]))


def test_tile_coverage_4096_counts():
    plan = TilingPlan(300, 200, 50, units=2)
    cover = np.zeros((300, 200), dtype=int)
    for _, _, _, r0, rows, c0, w in plan.regions():
        cover[r0:r0 + rows, c0:c0 + w] += 1
    assert (cover == 1).all()


@given(st.integers(1, 700), st.integers(1, 700), st.integers(1, 8))
def test_tile_coverage(m, n, units):
    plan = TilingPlan(m, n, 8, units=units)
    cover = np.zeros((m, n), dtype=np.int8)
    for _, _, s, r0, rows, c0, w in plan.regions():
        assert plan.unit_of(s) < units
        cover[r0:r0 + rows, c0:c0 + w] += 1
    assert (cover == 1).all()


@given(st.integers(1, 600), st.integers(1, 600), st.integers(1, 600))
def test_monotone_resource_scaling(m, n, k):
    cycles = [estimate_gemm(sma(u), m, n, k).total_cycles for u in (1, 2, 3)]
    assert cycles[2] <= cycles[1] <= cycles[0]


@given(st.integers(1, 600), st.integers(1, 600), st.integers(1, 600), st.integers(1, 3),
       st.sampled_from(SCHEDULERS))
def test_double_buffering_never_stalls_more(m, n, k, units, sched):
    cfg = sma(units)
    p = GemmShape(m, n, k)
    plan = plan_tiling(p, cfg)
    _, db = run_double_buffered(plan, p, sched, cfg, functional=False)
    _, ser = run_double_buffered(plan, p, sched, cfg, functional=False, serialized=True)
    assert db.counters["stall_cycle"] <= ser.counters["stall_cycle"]
    assert db.total_cycles <= ser.total_cycles


@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 300), st.integers(1, 3),
       st.sampled_from(SCHEDULERS), st.integers(0, 2**32 - 1))
def test_mapper_matches_oracle(m, n, k, units, sched, seed):
    cfg = sma(units)
    p = random_problem(np.random.default_rng(seed), m, n, k)
    c, trace = run_double_buffered(plan_tiling(p, cfg), p, sched, cfg)
    assert matches_reference(c, p, reference=gemm_reference(p))
    assert trace.macs == m * n * k
