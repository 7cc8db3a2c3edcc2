import io

import pytest

from smasim.trace import ExecutionTrace, ReuseStats, TraceError, flops_efficiency


def test_counters_and_requests():
    t = ExecutionTrace(total_cycles=10, peak_macs_per_cycle=4)
    t.count("mac", 40)
    t.request("a", "shared", "read", False, 3)
    t.request("a", "shared", "read", True)
    assert t.macs == 40 and t.uncoalesced("a") == 3 and t.coalesced("a") == 1
    with pytest.raises(TraceError):
        t.count("flop")


def test_full_utilization_is_one():
    t = ExecutionTrace(total_cycles=10, peak_macs_per_cycle=4)
    t.count("mac", 40)
    assert flops_efficiency(t) == 1.0


def test_single_lsma_efficiency():
    t = ExecutionTrace(total_cycles=143, peak_macs_per_cycle=64)
    t.count("mac", 64 * 128)
    assert flops_efficiency(t) == pytest.approx(128 / 143)


def test_absorb_scales():
    a = ExecutionTrace()
    a.count("mac", 2)
    a.add_stat("passes", 1)
    b = ExecutionTrace()
    b.absorb(a, 3)
    assert b.macs == 6 and b.stats["passes"] == 3


def test_reuse_and_events():
    r = ReuseStats(macs=64, a_reads_from_memory=16, b_reads_from_memory=16, c_writes_to_memory=16)
    assert r.a_reuse_factor == 4
    t = ExecutionTrace(events=[(1, "pe0.0", "mac", "row 0")])
    out = io.StringIO()
    t.emit_events(out)
    assert out.getvalue() == "1 pe0.0 mac row 0\n"
    with pytest.raises(TraceError):
        flops_efficiency(ExecutionTrace())
