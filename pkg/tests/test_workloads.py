import numpy as np
import pytest
from hypothesis import given, strategies as st

from smasim.config import preset
from smasim.oracle import ConvLayer, conv_reference, gemm_reference, img2col
from smasim.workloads import (GemmOp, ModelDescriptor, PipelineSpec, SimdOp, Task,
                              UnsupportedOp, WorkloadError, bundled_models, emit_model,
                              frame_latencies, latency_reduction, load_model, load_pipeline,
                              parse_model, parse_pipeline, run_model, run_pipeline)

CONV_COUNTS = {"alexnet": 5, "vgg-a": 8, "googlenet": 57, "mask-rcnn": 132, "deeplab": 108}


@pytest.mark.parametrize("name,count", sorted(CONV_COUNTS.items()))
def test_bundled_conv_counts(name, count):
    assert load_model(name).conv_count == count


def test_bundled_models_round_trip():
    for name in bundled_models():
        m = load_model(name)
        assert parse_model(emit_model(m)) == m


def test_alexnet_mac_conservation():
    m = load_model("alexnet")
    res = run_model(m, preset("2-sma"))
    assert res.macs == m.macs == sum(op.macs for op in m.ops)
    assert res.trace.macs == m.macs
    assert sum(r["macs"] for r in res.ops) == m.macs
    assert sum(r["cycles"] for r in res.ops) == res.cycles


def test_lowering_preserves_conv_semantics():
    layer = ConvLayer(9, 7, 3, 3, 3, 5, stride=2, pad=1, batch=2)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 9, 7, 3)).astype(np.float32)
    w = rng.standard_normal((3, 3, 3, 5)).astype(np.float32)
    p = img2col(layer, x, w)
    assert (p.m, p.n, p.k) == layer.gemm_dims
    got = gemm_reference(p).reshape(2, layer.out_h, layer.out_w, 5)
    np.testing.assert_allclose(got, conv_reference(layer, x, w), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("name", ["alexnet", "vgg-a", "googlenet"])
def test_three_sma_beats_four_tc(name):
    m = load_model(name)
    assert run_model(m, preset("3-sma")).cycles < run_model(m, preset("4-tc")).cycles


def test_simd_only_model_ignores_sma_units():
    m = load_model("orb-slam")
    base = preset("3-sma")
    a = run_model(m, base)
    b = run_model(m, base.with_(sma_units_per_sm=1, name="1u"))
    assert a.cycles == b.cycles and a.macs == 0


def test_simd_op_cycle_formula():
    cfg = preset("3-sma")
    op = SimdOp("x", 10**9, utilization=0.5)
    res = run_model(ModelDescriptor("x", (op,)), cfg)
    rate = 2 * cfg.simd_lanes_per_sm * cfg.sm_count * 0.5
    assert res.cycles == int(np.ceil(10**9 / rate))


def test_systolic_only_config_rejects_simd_ops():
    with pytest.raises(UnsupportedOp, match="unsupported op"):
        run_model(load_model("orb-slam"), preset("tpu-dataflow"))


def test_mode_switch_cost():
    ops = (GemmOp(64, 64, 64), SimdOp("s", 10**6), GemmOp(64, 64, 64))
    m = ModelDescriptor("mixed", ops)
    cfg = preset("3-sma")
    plain = run_model(m, cfg.with_(mode_switch_cycles=0, name="a"))
    costly = run_model(m, cfg.with_(mode_switch_cycles=100, name="b"))
    assert costly.cycles - plain.cycles == 200
    tc = preset("4-tc")
    assert run_model(m, tc.with_(mode_switch_cycles=100, name="c")).cycles == run_model(m, tc).cycles


@pytest.mark.parametrize("text", [
    "name: x\nops: []",
    "schema_version: 1\nops: []",
    "schema_version: 1\nops:\n- warp: {m: 1}",
    "schema_version: 1\nops:\n- gemm: {m: 0, n: 1, k: 1}",
    "schema_version: 1\nops:\n- conv: {in_h: 2, in_w: 2, in_c: 1, kernel_r: 3, kernel_s: 3, out_c: 1}",
    "schema_version: 1\nops:\n- simd_op: {name: s, flop_count: 10, utilization: 0}",
])
def test_model_errors(text):
    with pytest.raises(WorkloadError):
        parse_model(text)


def test_unknown_model():
    with pytest.raises(WorkloadError):
        load_model("no-such-net")


# pipeline


def fixed(det, tra, loc, n=1, concurrent=True):
    return PipelineSpec(Task(latency_ms=det), Task(latency_ms=tra), Task(latency_ms=loc), n,
                        concurrent_loc=concurrent)


def test_interval_one_is_chain_or_loc():
    r = run_pipeline(fixed(60, 20, 30), preset("3-sma"))
    assert r.frame_ms == [80.0] and r.average_ms == 80.0 and r.meets_target
    assert run_pipeline(fixed(60, 20, 90), preset("3-sma")).average_ms == 90.0
    assert run_pipeline(fixed(60, 20, 30, concurrent=False), preset("3-sma")).average_ms == 110.0


def test_fixed_latency_reduction():
    # N=4: (80 + 3 * 20) / 4 = 35 versus 80 at N=1
    spec = fixed(60, 20, 10)
    assert latency_reduction(spec, preset("3-sma"), 4) == pytest.approx(1 - 35 / 80)


def test_frame_series_periodic():
    assert frame_latencies(60, 20, 10, 3, frames=7) == [80, 20, 20, 80, 20, 20, 80]


@given(st.floats(0, 200), st.floats(0, 200), st.floats(0, 200), st.booleans())
def test_average_non_increasing_in_interval(det, tra, loc, conc):
    avgs = [sum(p) / n for n in range(1, 9)
            for p in [frame_latencies(det, tra, loc, n, conc)]]
    assert all(b <= a + 1e-9 for a, b in zip(avgs, avgs[1:]))


def test_bundled_pipeline_reduction():
    spec = load_pipeline()
    assert spec.detection_interval == 4
    red = latency_reduction(spec, preset("3-sma"), 4)
    assert 0.40 <= red <= 0.55


def test_more_units_never_slower():
    spec = load_pipeline().with_interval(1)
    base = preset("3-sma")
    avgs = [run_pipeline(spec, base.with_(sma_units_per_sm=u, simd_lanes_per_sm=64 * u,
                                          name=f"{u}u")).average_ms for u in (1, 2, 3)]
    assert avgs[2] <= avgs[1] <= avgs[0]


@pytest.mark.parametrize("text", [
    "schema_version: 1\ntasks: {DET: 1, TRA: 1}",
    "schema_version: 1\ndetection_interval: 0\ntasks: {DET: 1, TRA: 1, LOC: 1}",
    "schema_version: 1\nlatency_target_ms: 0\ntasks: {DET: 1, TRA: 1, LOC: 1}",
    "schema_version: 1\ntasks: {DET: {flops: 3}, TRA: 1, LOC: 1}",
    "tasks: {DET: 1, TRA: 1, LOC: 1}",
])
def test_pipeline_errors(text):
    with pytest.raises(WorkloadError):
        parse_pipeline(text)


def test_task_needs_exactly_one_source():
    with pytest.raises(WorkloadError):
        Task()
    with pytest.raises(WorkloadError):
        Task(model=load_model("alexnet"), latency_ms=1.0)
