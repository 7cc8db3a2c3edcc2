"""
Machine configuration for the simulated streaming multiprocessor.

A ``MachineConfig`` fixes every hardware parameter a simulation needs: the
SIMD lanes, TensorCore-style dot-product units, systolic (SMA) units, the
banked shared memory and register file, and the chip-wide SM count.

Config documents are YAML mappings carrying a ``schema_version`` key::

    schema_version: 1
    name: my-sma
    base: 3-sma            # optional: start from a preset
    sma_units_per_sm: 2
    memory:                # nested sections are flattened
      shared_mem_banks: 32

Presets ``volta-baseline``, ``2-sma``, ``3-sma``, ``4-tc`` and
``tpu-dataflow`` are built in.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

SCHEMA_VERSION = 1

DATAFLOWS = ("simd", "dot_product", "semi_broadcast", "weight_stationary")

KIB = 1024

# FP16 MAC units per TensorCore (16 four-wide dot-product units).
TC_FP16_UNITS = 64
FEDP_PER_TC = 16
# One FP32 MAC occupies the area of two FP16 MACs.
FP16_PER_FP32 = 2


class ConfigError(ValueError):
    """Raised for unparsable documents or violated config invariants."""


@dataclass(frozen=True)
class MachineConfig:
    name: str = "custom"
    dataflow: str = "simd"
    sm_count: int = 80
    simd_lanes_per_sm: int = 64
    tc_units_per_sm: int = 0
    sma_units_per_sm: int = 0
    sma_array_rows: int = 8
    sma_array_cols: int = 8
    shared_mem_banks: int = 32
    shared_mem_bytes: int = 96 * KIB
    sma_banks_assigned: int = 8
    rf_bytes_per_sm: int = 256 * KIB
    rf_words_per_bank_per_cycle: int = 32
    word_bytes: int = 4
    weight_preload_cycles: Optional[int] = None
    clock_ghz: float = 1.53
    # False models a systolic-only machine that cannot run SIMD code at all.
    simd_mode: bool = True
    line_bytes: int = 128
    global_latency_cycles: int = 400
    global_bytes_per_cycle: int = 32
    barrier_cycles: int = 16
    mode_switch_cycles: int = 0
    tc_pipeline_cycles: int = 4

    def __post_init__(self) -> None:
        if self.weight_preload_cycles is None:
            object.__setattr__(self, "weight_preload_cycles", self.sma_array_rows)
        validate(self)

    @property
    def peak_macs_per_cycle(self) -> int:
        """FP32-equivalent MACs per cycle per SM on the configured GEMM path."""
        return gemm_fp16_units(self) // FP16_PER_FP32

    @property
    def sma_pes(self) -> int:
        return self.sma_array_rows * self.sma_array_cols

    def with_(self, **changes: Any) -> "MachineConfig":
        return replace(self, **changes)


def validate(cfg: MachineConfig) -> None:
    if cfg.dataflow not in DATAFLOWS:
        raise ConfigError(f"dataflow: must be one of {DATAFLOWS}, got {cfg.dataflow!r}")
    positive = (
        "sm_count", "simd_lanes_per_sm", "sma_array_rows", "sma_array_cols",
        "shared_mem_banks", "shared_mem_bytes", "sma_banks_assigned", "rf_bytes_per_sm",
        "rf_words_per_bank_per_cycle", "word_bytes", "weight_preload_cycles",
        "line_bytes", "global_bytes_per_cycle",
    )
    for name in positive:
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
            raise ConfigError(f"invariant violated: {name} must be a positive integer, got {value!r}")
    non_negative = (
        "tc_units_per_sm", "sma_units_per_sm", "global_latency_cycles",
        "barrier_cycles", "mode_switch_cycles", "tc_pipeline_cycles",
    )
    for name in non_negative:
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise ConfigError(f"invariant violated: {name} must be a non-negative integer, got {value!r}")
    if not cfg.clock_ghz > 0:
        raise ConfigError(f"invariant violated: clock_ghz must be positive, got {cfg.clock_ghz!r}")
    if cfg.shared_mem_bytes > 96 * KIB:
        raise ConfigError("invariant violated: shared_mem_bytes <= 96 KiB")
    if cfg.sma_banks_assigned > cfg.shared_mem_banks:
        raise ConfigError("invariant violated: sma_banks_assigned <= shared_mem_banks")
    if cfg.sma_units_per_sm * cfg.sma_banks_assigned > cfg.shared_mem_banks:
        raise ConfigError(
            "invariant violated: sma_units_per_sm * sma_banks_assigned <= shared_mem_banks"
        )
    if cfg.dataflow in ("semi_broadcast", "weight_stationary") and cfg.sma_units_per_sm < 1:
        raise ConfigError(f"invariant violated: dataflow {cfg.dataflow} needs sma_units_per_sm >= 1")
    if cfg.dataflow == "dot_product" and cfg.tc_units_per_sm < 1:
        raise ConfigError("invariant violated: dataflow dot_product needs tc_units_per_sm >= 1")


# ---------------------------------------------------------------------------
# presets

PRESETS: Dict[str, Dict[str, Any]] = {
    # SIMD-only GEMM on the Volta SM; the TensorCores exist but are not used.
    "volta-baseline": dict(dataflow="simd", simd_lanes_per_sm=64, tc_units_per_sm=4),
    "4-tc": dict(dataflow="dot_product", simd_lanes_per_sm=64, tc_units_per_sm=4),
    # SMA units double as SIMD lanes in SIMD mode (temporal integration).
    "2-sma": dict(dataflow="semi_broadcast", simd_lanes_per_sm=128, sma_units_per_sm=2),
    "3-sma": dict(dataflow="semi_broadcast", simd_lanes_per_sm=192, sma_units_per_sm=3),
    "tpu-dataflow": dict(
        dataflow="weight_stationary", simd_lanes_per_sm=128, sma_units_per_sm=2, simd_mode=False
    ),
}


def preset(name: str) -> MachineConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    return MachineConfig(name=name, **PRESETS[name])


# ---------------------------------------------------------------------------
# documents

_FIELD_NAMES = {f.name for f in fields(MachineConfig)}


def _flatten(doc: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            out.update(_flatten(value, prefix=f"{prefix}{key}."))
        else:
            if key in out:
                raise ConfigError(f"field {key!r} given twice (under {prefix or 'top level'})")
            out[key] = value
    return out


def load_config(source: str) -> MachineConfig:
    """Parse a YAML config document (text, not a path)."""
    try:
        doc = yaml.safe_load(source)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"parse error at {where}: {exc.problem}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("parse error: config document must be a mapping")
    version = doc.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"field schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    base = doc.pop("base", None)
    values = _flatten(doc)
    unknown = sorted(set(values) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(unknown)}")
    merged: Dict[str, Any] = {}
    if base is not None:
        merged.update(asdict(preset(base)))
        merged["weight_preload_cycles"] = None if "sma_array_rows" in values else merged["weight_preload_cycles"]
    merged.update(values)
    try:
        return MachineConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def emit_config(cfg: MachineConfig) -> str:
    doc = {"schema_version": SCHEMA_VERSION, **asdict(cfg)}
    return yaml.safe_dump(doc, sort_keys=False)


def resolve_config(ref: str) -> MachineConfig:
    """Resolve a preset name, a file under ``SMASIM_CONFIG_DIR`` or a path."""
    if ref in PRESETS:
        return preset(ref)
    candidates = []
    search = os.environ.get("SMASIM_CONFIG_DIR")
    if search:
        for d in search.split(os.pathsep):
            candidates += [Path(d) / ref, Path(d) / f"{ref}.yaml", Path(d) / f"{ref}.yml"]
    candidates.append(Path(ref))
    for path in candidates:
        if path.is_file():
            return load_config(path.read_text())
    raise ConfigError(f"no preset or config file named {ref!r}")


# ---------------------------------------------------------------------------
# resource accounting


@dataclass(frozen=True)
class ResourceFootprint:
    fp16_equiv_units: int
    mac_units_fp32: int
    extra_storage_bytes: int

    def overhead_ratio(self, cfg: MachineConfig) -> float:
        """Controller storage as a fraction of on-chip RF + shared storage."""
        return self.extra_storage_bytes / (cfg.rf_bytes_per_sm + cfg.shared_mem_bytes)


def gemm_fp16_units(cfg: MachineConfig) -> int:
    """FP16-equivalent MAC units per SM that the GEMM path can use."""
    if cfg.dataflow == "dot_product":
        return cfg.tc_units_per_sm * TC_FP16_UNITS
    if cfg.dataflow in ("semi_broadcast", "weight_stationary"):
        return cfg.sma_units_per_sm * cfg.sma_pes * FP16_PER_FP32
    return cfg.simd_lanes_per_sm * FP16_PER_FP32


def iso_flop_pair(a: MachineConfig, b: MachineConfig) -> bool:
    return gemm_fp16_units(a) == gemm_fp16_units(b)


def controller_storage_bytes(cfg: MachineConfig) -> int:
    # 8 B per row of A-input staging, shared by the units; 8 B per row of
    # C-output staging for each unit (8x8B + 24x8B for three 8x8 units).
    if cfg.sma_units_per_sm == 0:
        return 0
    rows = cfg.sma_array_rows
    return rows * 8 + cfg.sma_units_per_sm * rows * 8


def iso_area_units(cfg: MachineConfig) -> ResourceFootprint:
    # SMA units are built from the SIMD datapath, so the two never add up.
    datapath = max(cfg.simd_lanes_per_sm * FP16_PER_FP32,
                   cfg.sma_units_per_sm * cfg.sma_pes * FP16_PER_FP32)
    total = datapath + cfg.tc_units_per_sm * TC_FP16_UNITS
    return ResourceFootprint(
        fp16_equiv_units=total,
        mac_units_fp32=total // FP16_PER_FP32,
        extra_storage_bytes=controller_storage_bytes(cfg),
    )
