import io
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from smasim.config import preset
from smasim.memory import (MemoryAccessError, MemoryRequest, MemorySystem, coalesce, rf_access,
                           shared_access)


def shared(words):
    return MemoryRequest("shared", "read", [4 * w for w in words])


def test_distinct_banks():
    v = shared_access(shared(range(8)), 32)
    assert (v.bank_conflict_degree, v.cycles) == (1, 1)


def test_same_bank_stride():
    v = shared_access(shared([32 * i for i in range(8)]), 32)
    assert (v.bank_conflict_degree, v.cycles) == (8, 8)


def test_column_of_row_major_tile():
    # row stride 8 words: rows 0..7 land on banks 0, 8, 16, 24, 0, 8, ...
    v = shared_access(shared([8 * i for i in range(8)]), 32)
    assert v.bank_conflict_degree == 2


def test_broadcast_is_free():
    assert shared_access(shared([5, 5, 5]), 32).cycles == 1


def test_rf_bandwidth():
    rf = lambda n: MemoryRequest("rf", "read", [4 * w for w in range(n)])
    assert rf_access(rf(8), 32).cycles == 1
    assert rf_access(rf(32), 32).cycles == 1
    assert rf_access(rf(48), 32).cycles == 2


def test_coalescing():
    g = lambda addrs: MemoryRequest("global", "read", addrs)
    v = coalesce(g([4 * i for i in range(32)]), 128)
    assert (v.transactions, v.coalesced) == (1, True)
    v = coalesce(g([128 * i for i in range(32)]), 128)
    assert (v.transactions, v.coalesced) == (32, False)
    assert coalesce(g([4 * i for i in range(8)]), 128).transactions == 1


def test_request_validation():
    with pytest.raises(MemoryAccessError):
        MemoryRequest("texture", "read", [0])
    with pytest.raises(MemoryAccessError):
        MemoryRequest("shared", "read", [])
    with pytest.raises(MemoryAccessError):
        MemoryRequest("shared", "read", [3])
    with pytest.raises(MemoryAccessError):
        shared_access(MemoryRequest("rf", "read", [0]), 32)


def test_memory_system_records_csv():
    mem = MemorySystem.from_config(preset("2-sma"), record=True)
    mem.access(shared(range(4)), cycle=3)
    mem.access(MemoryRequest("global", "write", [0, 512]), cycle=4)
    out = io.StringIO()
    mem.dump_csv(out)
    lines = out.getvalue().splitlines()
    assert lines[0] == "cycle,space,op,operand,degree,transactions,coalesced"
    assert lines[1].startswith("3,shared,read") and lines[2].endswith(",2,0")


words = st.lists(st.integers(0, 4095), min_size=1, max_size=48)


@given(words, st.randoms(use_true_random=False))
def test_degree_permutation_invariant(ws, rnd):
    shuffled = list(ws)
    rnd.shuffle(shuffled)
    assert shared_access(shared(ws), 32) == shared_access(shared(shuffled), 32)


@given(st.sets(st.integers(0, 31), min_size=1), st.lists(st.integers(0, 20), min_size=32, max_size=32))
def test_distinct_banks_degree_one(banks, rows):
    ws = [b + 32 * rows[b] for b in banks]
    hist = Counter(w % 32 for w in ws)
    assert max(hist.values()) == 1
    assert shared_access(shared(ws), 32).bank_conflict_degree == 1


@given(words, st.integers(0, 4095))
def test_adding_address_never_faster(ws, extra):
    assert shared_access(shared(ws + [extra]), 32).cycles >= shared_access(shared(ws), 32).cycles
