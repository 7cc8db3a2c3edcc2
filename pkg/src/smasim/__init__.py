"""Cycle-level model of systolic GEMM units built from GPU SIMD lanes."""

__version__ = "0.1.0"
