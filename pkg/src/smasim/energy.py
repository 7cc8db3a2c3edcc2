"""Linear event-cost energy model with per-structure breakdowns."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional

import yaml

from .trace import EVENT_KINDS, ExecutionTrace

STRUCTURES = ("compute", "register file", "shared memory", "global", "control")

# trace event kind -> (table field, structure); stall cycles cost nothing
EVENT_MAP = {
    "mac": ("mac", "compute"),
    "rf_read_word": ("rf_word_read", "register file"),
    "rf_write_word": ("rf_word_write", "register file"),
    "shared_read": ("shared_word_read", "shared memory"),
    "shared_write": ("shared_word_write", "shared memory"),
    "global_transaction": ("global_transaction", "global"),
    "instruction_issue": ("instruction_issue", "control"),
    "controller_cycle": ("controller_cycle", "control"),
    "stall_cycle": (None, "control"),
}
assert set(EVENT_MAP) == set(EVENT_KINDS)


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class EnergyTable:
    """Cost per event in picojoules.

    The defaults are rough 28 nm-class magnitudes (shared-memory word >
    register-file word > FP32 MAC); they are an estimate, not a measurement.
    """

    mac: float = 1.0
    rf_word_read: float = 1.6
    rf_word_write: float = 1.8
    shared_word_read: float = 3.2
    shared_word_write: float = 3.5
    global_transaction: float = 250.0
    instruction_issue: float = 8.0
    controller_cycle: float = 0.5
    source: str = "bundled-estimate"

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name == "source":
                continue
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                raise EnergyError(f"cost {f.name} must be a non-negative number, got {v!r}")

    def cost(self, kind: str) -> float:
        if kind not in EVENT_MAP:
            raise EnergyError(f"unknown event kind {kind!r}")
        name = EVENT_MAP[kind][0]
        return 0.0 if name is None else float(getattr(self, name))


def load_energy_table(text: str) -> EnergyTable:
    """Parse a YAML cost table: ``schema_version: 1``, ``source``, ``costs``."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise EnergyError(f"cannot parse energy table: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema_version") != 1:
        raise EnergyError("energy table needs schema_version: 1")
    costs = doc.get("costs", {})
    known = {f.name for f in fields(EnergyTable)} - {"source"}
    unknown = set(costs) - known
    if unknown:
        raise EnergyError(f"unknown cost fields: {sorted(unknown)}")
    return EnergyTable(**costs, source=str(doc.get("source", "user")))


def emit_energy_table(table: EnergyTable) -> str:
    costs = {k: v for k, v in asdict(table).items() if k != "source"}
    return yaml.safe_dump({"schema_version": 1, "source": table.source, "costs": costs},
                          sort_keys=False)


@dataclass(frozen=True)
class EnergyReport:
    total_pj: float
    breakdown: Dict[str, float]
    source: str

    def to_json(self) -> str:
        return json.dumps({"total_pj": self.total_pj, "breakdown": self.breakdown,
                           "source": self.source}, sort_keys=True)


def account(trace: ExecutionTrace, table: Optional[EnergyTable] = None) -> EnergyReport:
    table = table or EnergyTable()
    breakdown = {s: 0.0 for s in STRUCTURES}
    for kind, count in sorted(trace.counters.items()):
        cost = table.cost(kind)
        breakdown[EVENT_MAP[kind][1]] += count * cost
    return EnergyReport(sum(breakdown.values()), breakdown, table.source)


@dataclass(frozen=True)
class EnergyComparison:
    total_ratio: float
    ratios: Dict[str, float]
    deltas: Dict[str, float]
    dominant: str


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else float("inf")
    return a / b


def compare_energy(a: EnergyReport, b: EnergyReport) -> EnergyComparison:
    """Ratios ``a / b`` per structure; ``dominant`` has the largest |a - b|."""
    if a.source != b.source:
        raise EnergyError(f"reports use different cost tables ({a.source!r} vs {b.source!r})")
    deltas = {s: a.breakdown[s] - b.breakdown[s] for s in STRUCTURES}
    ratios = {s: _ratio(a.breakdown[s], b.breakdown[s]) for s in STRUCTURES}
    dominant = max(STRUCTURES, key=lambda s: (abs(deltas[s]), -STRUCTURES.index(s)))
    return EnergyComparison(_ratio(a.total_pj, b.total_pj), ratios, deltas, dominant)
