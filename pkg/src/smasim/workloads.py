"""DNN workload descriptors and the detection/tracking/localization frame pipeline."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import yaml

from .config import MachineConfig
from .mapper import estimate_gemm
from .oracle import ConvLayer, ShapeError
from .trace import ExecutionTrace

TASKS = ("DET", "TRA", "LOC")
SIMD_FLOPS_PER_LANE = 2  # one FMA per lane per cycle


class WorkloadError(ValueError):
    pass


class UnsupportedOp(WorkloadError):
    """The configuration has no execution path for an op."""


@dataclass(frozen=True)
class GemmOp:
    m: int
    n: int
    k: int
    name: str = ""

    def __post_init__(self) -> None:
        if min(self.m, self.n, self.k) < 1:
            raise WorkloadError(f"gemm {self.name!r}: m, n, k must be positive")

    @property
    def gemm_dims(self) -> Tuple[int, int, int]:
        return (self.m, self.n, self.k)

    @property
    def macs(self) -> int:
        return self.m * self.n * self.k


@dataclass(frozen=True)
class SimdOp:
    """GEMM-incompatible work, costed by flop count and achieved lane utilization."""

    name: str
    flop_count: int
    utilization: float = 1.0
    simd_only: bool = True

    def __post_init__(self) -> None:
        if self.flop_count < 0:
            raise WorkloadError(f"simd_op {self.name!r}: flop_count must be non-negative")
        if not 0 < self.utilization <= 1:
            raise WorkloadError(f"simd_op {self.name!r}: utilization must be in (0, 1]")


Op = Union[ConvLayer, GemmOp, SimdOp]


def op_kind(op: Op) -> str:
    if isinstance(op, ConvLayer):
        return "conv"
    if isinstance(op, GemmOp):
        return "gemm"
    return "simd_op"


@dataclass(frozen=True)
class ModelDescriptor:
    name: str
    ops: Tuple[Op, ...]
    note: str = ""

    def __post_init__(self) -> None:
        if not self.ops:
            raise WorkloadError(f"model {self.name!r} has no ops")

    @property
    def conv_count(self) -> int:
        return sum(isinstance(op, ConvLayer) for op in self.ops)

    @property
    def macs(self) -> int:
        return sum(op.macs for op in self.ops if not isinstance(op, SimdOp))


def _parse_op(entry: dict) -> Op:
    if not isinstance(entry, dict) or len(entry) != 1:
        raise WorkloadError(f"op entry must have exactly one key: {entry!r}")
    (kind, body), = entry.items()
    if not isinstance(body, dict):
        raise WorkloadError(f"{kind} entry must be a mapping")
    try:
        if kind == "conv":
            return ConvLayer(**body)
        if kind == "gemm":
            return GemmOp(**body)
        if kind == "simd_op":
            return SimdOp(**body)
    except (TypeError, ShapeError) as exc:
        raise WorkloadError(f"bad {kind} entry {body!r}: {exc}") from exc
    raise WorkloadError(f"unknown op kind {kind!r}")


def parse_model(text: str) -> ModelDescriptor:
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or doc.get("schema_version") != 1:
        raise WorkloadError("model descriptor needs schema_version: 1")
    ops = tuple(_parse_op(e) for e in doc.get("ops") or ())
    return ModelDescriptor(str(doc.get("name", "model")), ops, str(doc.get("note", "")))


def _op_entry(op: Op) -> dict:
    if isinstance(op, ConvLayer):
        body = {f: getattr(op, f) for f in ("name", "in_h", "in_w", "in_c", "kernel_r",
                                            "kernel_s", "out_c", "stride", "pad", "batch")}
        return {"conv": body}
    if isinstance(op, GemmOp):
        return {"gemm": {"name": op.name, "m": op.m, "n": op.n, "k": op.k}}
    return {"simd_op": {"name": op.name, "flop_count": op.flop_count,
                        "utilization": op.utilization}}


def emit_model(m: ModelDescriptor) -> str:
    doc = {"schema_version": 1, "name": m.name, "note": m.note,
           "ops": [_op_entry(op) for op in m.ops]}
    return yaml.safe_dump(doc, sort_keys=False)


def _data_dir(kind: str) -> Path:
    return Path(str(resources.files("smasim") / "data" / kind))


def bundled_models() -> List[str]:
    return sorted(p.stem for p in _data_dir("models").glob("*.yaml"))


def load_model(ref: str) -> ModelDescriptor:
    """Load a bundled model by name or a descriptor file by path."""
    path = Path(ref)
    if not path.is_file():
        path = _data_dir("models") / f"{ref}.yaml"
        if not path.is_file():
            raise WorkloadError(f"no model {ref!r}; bundled: {', '.join(bundled_models())}")
    return parse_model(path.read_text())


# ---------------------------------------------------------------------------
# per-model execution


@dataclass
class ModelResult:
    model: str
    config: str
    cycles: int
    latency_ms: float
    macs: int
    ops: List[dict]
    trace: ExecutionTrace = field(repr=False)

    def to_dict(self) -> dict:
        return {"model": self.model, "config": self.config, "cycles": self.cycles,
                "latency_ms": self.latency_ms, "macs": self.macs, "ops": self.ops}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def cycles_to_ms(cfg: MachineConfig, cycles: int) -> float:
    return cycles / (cfg.clock_ghz * 1e6)


def simd_op_trace(op: SimdOp, cfg: MachineConfig) -> ExecutionTrace:
    if not cfg.simd_mode or cfg.simd_lanes_per_sm < 1:
        raise UnsupportedOp(f"unsupported op: {op.name!r} needs SIMD lanes, "
                            f"config {cfg.name!r} is systolic-only")
    rate = SIMD_FLOPS_PER_LANE * cfg.simd_lanes_per_sm * cfg.sm_count * op.utilization
    fmas = -(-op.flop_count // SIMD_FLOPS_PER_LANE)
    tr = ExecutionTrace(total_cycles=math.ceil(op.flop_count / rate),
                        peak_macs_per_cycle=cfg.peak_macs_per_cycle * cfg.sm_count)
    tr.count("mac", fmas)
    tr.count("rf_read_word", 3 * fmas)
    tr.count("rf_write_word", fmas)
    tr.count("instruction_issue", -(-fmas // 32))
    return tr


def _integrated(cfg: MachineConfig) -> bool:
    return cfg.sma_units_per_sm > 0 and cfg.simd_mode


@lru_cache(maxsize=None)
def run_model(m: ModelDescriptor, cfg: MachineConfig, sched: Optional[str] = None) -> ModelResult:
    """Run every op in order: GEMM-shaped ops on the GEMM path, the rest on SIMD lanes.

    On a configuration whose SMA units double as SIMD lanes, each change
    between GEMM and SIMD work costs ``cfg.mode_switch_cycles``.
    """
    total = ExecutionTrace(peak_macs_per_cycle=cfg.peak_macs_per_cycle * cfg.sm_count)
    records: List[dict] = []
    cycles = 0
    prev_mode = None
    for op in m.ops:
        kind = op_kind(op)
        mode = "simd" if kind == "simd_op" else "gemm"
        if kind == "simd_op":
            tr = simd_op_trace(op, cfg)
            dims = (None, None, None)
            macs = 0
        else:
            dims = op.gemm_dims
            tr = estimate_gemm(cfg, *dims, sched=sched)
            macs = op.macs
        switch = cfg.mode_switch_cycles if (_integrated(cfg) and prev_mode
                                            and mode != prev_mode) else 0
        prev_mode = mode
        op_cycles = tr.total_cycles + switch
        cycles += op_cycles
        total.absorb(tr)
        eff = macs / (tr.total_cycles * total.peak_macs_per_cycle) if macs else 0.0
        records.append({"name": op.name, "kind": kind, "m": dims[0], "n": dims[1], "k": dims[2],
                        "macs": macs, "cycles": op_cycles, "switch_cycles": switch,
                        "latency_ms": cycles_to_ms(cfg, op_cycles), "efficiency": eff})
    total.total_cycles = cycles
    return ModelResult(m.name, cfg.name, cycles, cycles_to_ms(cfg, cycles), m.macs, records, total)


# ---------------------------------------------------------------------------
# frame pipeline


@dataclass(frozen=True)
class Task:
    """A pipeline stage given either by a model or by a fixed latency."""

    model: Optional[ModelDescriptor] = None
    latency_ms: Optional[float] = None

    def __post_init__(self) -> None:
        if (self.model is None) == (self.latency_ms is None):
            raise WorkloadError("a task needs exactly one of model or latency_ms")
        if self.latency_ms is not None and self.latency_ms < 0:
            raise WorkloadError("task latency must be non-negative")

    def latency(self, cfg: MachineConfig) -> float:
        if self.model is None:
            return float(self.latency_ms)
        return run_model(self.model, cfg).latency_ms


@dataclass(frozen=True)
class PipelineSpec:
    """DET feeds TRA on the same frame; LOC is independent of both.

    ``concurrent_loc`` runs LOC on SIMD lanes alongside the DET/TRA chain.
    """

    det: Task
    tra: Task
    loc: Task
    detection_interval: int = 1
    latency_target_ms: float = 100.0
    concurrent_loc: bool = True
    name: str = "pipeline"

    def __post_init__(self) -> None:
        if int(self.detection_interval) != self.detection_interval or self.detection_interval < 1:
            raise WorkloadError("detection_interval must be an integer >= 1")
        if self.latency_target_ms <= 0:
            raise WorkloadError("latency_target_ms must be positive")

    def with_interval(self, n: int) -> "PipelineSpec":
        return PipelineSpec(self.det, self.tra, self.loc, n, self.latency_target_ms,
                            self.concurrent_loc, self.name)


def _task(doc) -> Task:
    if isinstance(doc, (int, float)) and not isinstance(doc, bool):
        return Task(latency_ms=float(doc))
    if not isinstance(doc, dict):
        raise WorkloadError(f"bad task entry {doc!r}")
    if "latency_ms" in doc:
        return Task(latency_ms=float(doc["latency_ms"]))
    if "model" in doc:
        return Task(model=load_model(str(doc["model"])))
    raise WorkloadError(f"task needs model or latency_ms: {doc!r}")


def parse_pipeline(text: str) -> PipelineSpec:
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or doc.get("schema_version") != 1:
        raise WorkloadError("pipeline spec needs schema_version: 1")
    tasks = doc.get("tasks") or {}
    missing = [t for t in TASKS if t not in tasks]
    if missing:
        raise WorkloadError(f"pipeline spec lacks tasks {missing}")
    return PipelineSpec(_task(tasks["DET"]), _task(tasks["TRA"]), _task(tasks["LOC"]),
                        int(doc.get("detection_interval", 1)),
                        float(doc.get("latency_target_ms", 100.0)),
                        bool(doc.get("concurrent_loc", True)), str(doc.get("name", "pipeline")))


def load_pipeline(ref: str = "driving") -> PipelineSpec:
    path = Path(ref)
    if not path.is_file():
        path = _data_dir("pipelines") / f"{ref}.yaml"
        if not path.is_file():
            raise WorkloadError(f"no pipeline spec {ref!r}")
    return parse_pipeline(path.read_text())


def frame_latencies(det: float, tra: float, loc: float, interval: int,
                    concurrent_loc: bool = True, frames: Optional[int] = None) -> List[float]:
    """Latency of frames 0..frames-1; frame f runs DET when f is a multiple of ``interval``."""
    out = []
    for f in range(interval if frames is None else frames):
        chain = (det if f % interval == 0 else 0.0) + tra
        out.append(max(chain, loc) if concurrent_loc else chain + loc)
    return out


@dataclass
class PipelineResult:
    config: str
    detection_interval: int
    task_ms: Dict[str, float]
    frame_ms: List[float]
    average_ms: float
    target_ms: float
    meets_target: bool

    def to_dict(self) -> dict:
        return {"config": self.config, "detection_interval": self.detection_interval,
                "task_ms": self.task_ms, "frame_ms": self.frame_ms,
                "average_ms": self.average_ms, "target_ms": self.target_ms,
                "meets_target": self.meets_target}


def task_latencies(spec: PipelineSpec, cfg: MachineConfig) -> Dict[str, float]:
    return {"DET": spec.det.latency(cfg), "TRA": spec.tra.latency(cfg),
            "LOC": spec.loc.latency(cfg)}


def run_pipeline(spec: PipelineSpec, cfg: MachineConfig,
                 frames: Optional[int] = None) -> PipelineResult:
    """Per-frame latency series; the average is over one detection period."""
    lat = task_latencies(spec, cfg)
    n = spec.detection_interval
    series = frame_latencies(lat["DET"], lat["TRA"], lat["LOC"], n, spec.concurrent_loc, frames)
    period = frame_latencies(lat["DET"], lat["TRA"], lat["LOC"], n, spec.concurrent_loc)
    avg = sum(period) / n
    return PipelineResult(cfg.name, n, lat, series, avg, spec.latency_target_ms,
                          avg <= spec.latency_target_ms)


def latency_reduction(spec: PipelineSpec, cfg: MachineConfig, n: int) -> float:
    """Fractional drop of the average frame latency at interval ``n`` versus 1."""
    base = run_pipeline(spec.with_interval(1), cfg).average_ms
    return 1.0 - run_pipeline(spec.with_interval(n), cfg).average_ms / base


def sum_traces(results: Sequence[ModelResult]) -> ExecutionTrace:
    total = ExecutionTrace()
    for r in results:
        total.absorb(r.trace)
        total.total_cycles += r.cycles
    return total
