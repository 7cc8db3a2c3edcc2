"""Functional ground truth: GEMM, convolution and its img2col lowering."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

LAYOUTS = ("row", "col")


class ShapeError(ValueError):
    pass


@dataclass
class GemmProblem:
    """``C <- alpha * A @ B + beta * C`` with A m x k, B k x n, C m x n.

    Matrices are held logically (row index first); the ``layout_*`` tags
    say how each one is laid out in global memory.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray = None
    alpha: float = 1.0
    beta: float = 0.0
    layout_a: str = "row"
    layout_b: str = "row"
    layout_c: str = "row"
    m: int = field(init=False)
    n: int = field(init=False)
    k: int = field(init=False)

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32)
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ShapeError("A and B must be 2-D")
        self.m, self.k = self.a.shape
        k2, self.n = self.b.shape
        if k2 != self.k:
            raise ShapeError(f"dimension mismatch: A is {self.a.shape}, B is {self.b.shape}")
        if min(self.m, self.n, self.k) < 1:
            raise ShapeError("m, n, k must be positive")
        if self.c is None:
            self.c = np.zeros((self.m, self.n), dtype=np.float32)
        self.c = np.asarray(self.c, dtype=np.float32)
        if self.c.shape != (self.m, self.n):
            raise ShapeError(f"dimension mismatch: C is {self.c.shape}, expected {(self.m, self.n)}")
        self.alpha = float(np.float32(self.alpha))
        self.beta = float(np.float32(self.beta))
        for name in ("layout_a", "layout_b", "layout_c"):
            if getattr(self, name) not in LAYOUTS:
                raise ShapeError(f"{name} must be one of {LAYOUTS}")
        for name in ("a", "b", "c"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ShapeError(f"matrix {name.upper()} has non-finite values")
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ShapeError("alpha and beta must be finite")

    @property
    def macs(self) -> int:
        return self.m * self.n * self.k

    def buffer(self, name: str) -> np.ndarray:
        """Flat storage of A, B or C in its declared layout."""
        mat = getattr(self, name)
        order = "C" if getattr(self, f"layout_{name}") == "row" else "F"
        return mat.ravel(order=order)

    def copy(self) -> "GemmProblem":
        return GemmProblem(self.a.copy(), self.b.copy(), self.c.copy(), self.alpha, self.beta,
                           self.layout_a, self.layout_b, self.layout_c)


@dataclass(frozen=True)
class GemmShape:
    """Dimensions only; enough for timing-only simulation."""

    m: int
    n: int
    k: int

    def __post_init__(self) -> None:
        if min(self.m, self.n, self.k) < 1:
            raise ShapeError("m, n, k must be positive")

    @property
    def macs(self) -> int:
        return self.m * self.n * self.k


def random_problem(rng: np.random.Generator, m: int, n: int, k: int,
                   alpha: float = None, beta: float = None,
                   layouts: tuple = None) -> GemmProblem:
    if alpha is None:
        alpha = rng.uniform(-2, 2)
    if beta is None:
        beta = rng.uniform(-2, 2)
    if layouts is None:
        layouts = tuple(rng.choice(LAYOUTS, size=3))
    return GemmProblem(
        rng.standard_normal((m, k)).astype(np.float32),
        rng.standard_normal((k, n)).astype(np.float32),
        rng.standard_normal((m, n)).astype(np.float32),
        alpha, beta, *layouts,
    )


def _accumulate(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Sequential over the reduction index, 64-bit, so that img2col + GEMM
    # and direct convolution add terms in the same order.
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    acc = np.zeros((a.shape[0], b.shape[1]))
    for kk in range(a.shape[1]):
        acc += np.outer(a[:, kk], b[kk])
    return acc


def gemm_reference(p: GemmProblem) -> np.ndarray:
    acc = _accumulate(p.a, p.b)
    out = p.alpha * acc + p.beta * p.c.astype(np.float64)
    return out.astype(np.float32)


def gemm_term_scale(p: GemmProblem) -> np.ndarray:
    """Per-element magnitude |alpha| |A||B| + |beta| |C| used for tolerances."""
    mag = np.abs(p.a).astype(np.float64) @ np.abs(p.b).astype(np.float64)
    return abs(p.alpha) * mag + abs(p.beta) * np.abs(p.c).astype(np.float64)


def matches_reference(result: np.ndarray, p: GemmProblem, rtol: float = 1e-5,
                      reference: np.ndarray = None) -> bool:
    """Element-wise relative check against the oracle.

    The error is measured relative to the magnitude of the summed terms,
    so cancellation to near-zero does not turn reassociation noise into
    a false mismatch.
    """
    if reference is None:
        reference = gemm_reference(p)
    scale = np.maximum(gemm_term_scale(p), np.abs(reference.astype(np.float64)))
    err = np.abs(result.astype(np.float64) - reference.astype(np.float64))
    return bool(np.all(err <= rtol * scale + 1e-30))


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvLayer:
    in_h: int
    in_w: int
    in_c: int
    kernel_r: int
    kernel_s: int
    out_c: int
    stride: int = 1
    pad: int = 0
    batch: int = 1
    name: str = ""

    def __post_init__(self) -> None:
        for f in ("in_h", "in_w", "in_c", "kernel_r", "kernel_s", "out_c", "stride", "batch"):
            if getattr(self, f) < 1:
                raise ShapeError(f"{f} must be positive")
        if self.pad < 0:
            raise ShapeError("pad must be non-negative")
        for extent, kernel in ((self.in_h, self.kernel_r), (self.in_w, self.kernel_s)):
            if extent + 2 * self.pad < kernel:
                raise ShapeError(f"kernel larger than padded input for {self}")

    @property
    def out_h(self) -> int:
        return (self.in_h + 2 * self.pad - self.kernel_r) // self.stride + 1

    @property
    def out_w(self) -> int:
        return (self.in_w + 2 * self.pad - self.kernel_s) // self.stride + 1

    @property
    def gemm_dims(self) -> tuple:
        """(m, n, k) of the lowered GEMM."""
        return (self.batch * self.out_h * self.out_w, self.out_c,
                self.kernel_r * self.kernel_s * self.in_c)

    @property
    def macs(self) -> int:
        m, n, k = self.gemm_dims
        return m * n * k


def _check_tensors(layer: ConvLayer, inp: np.ndarray, weights: np.ndarray) -> None:
    want_in = (layer.batch, layer.in_h, layer.in_w, layer.in_c)
    want_w = (layer.kernel_r, layer.kernel_s, layer.in_c, layer.out_c)
    if inp.shape != want_in:
        raise ShapeError(f"input shape {inp.shape} != {want_in} (NHWC)")
    if weights.shape != want_w:
        raise ShapeError(f"weight shape {weights.shape} != {want_w} (RSCK)")


def _padded(layer: ConvLayer, inp: np.ndarray) -> np.ndarray:
    p = layer.pad
    return np.pad(inp, ((0, 0), (p, p), (p, p), (0, 0)))


def img2col(layer: ConvLayer, inp: np.ndarray, weights: np.ndarray) -> GemmProblem:
    """Lower a convolution to a materialized GEMM (columns ordered r, s, c)."""
    inp = np.asarray(inp, dtype=np.float32)
    weights = np.asarray(weights, dtype=np.float32)
    _check_tensors(layer, inp, weights)
    x = _padded(layer, inp)
    e, f, st = layer.out_h, layer.out_w, layer.stride
    cols = np.empty((layer.batch, e, f, layer.kernel_r, layer.kernel_s, layer.in_c), dtype=np.float32)
    for r in range(layer.kernel_r):
        for s in range(layer.kernel_s):
            cols[:, :, :, r, s, :] = x[:, r:r + st * e:st, s:s + st * f:st, :]
    m, n, k = layer.gemm_dims
    return GemmProblem(cols.reshape(m, k), weights.reshape(k, n), alpha=1.0, beta=0.0)


def conv_reference(layer: ConvLayer, inp: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Direct sliding-window convolution; returns NHWC float32."""
    inp = np.asarray(inp, dtype=np.float32)
    weights = np.asarray(weights, dtype=np.float32)
    _check_tensors(layer, inp, weights)
    x = _padded(layer, inp).astype(np.float64)
    w = weights.astype(np.float64)
    e, f, st = layer.out_h, layer.out_w, layer.stride
    acc = np.zeros((layer.batch, e, f, layer.out_c))
    for r in range(layer.kernel_r):
        for s in range(layer.kernel_s):
            window = x[:, r:r + st * e:st, s:s + st * f:st, :]
            for ch in range(layer.in_c):
                acc += window[..., ch, None] * w[r, s, ch]
    return acc.astype(np.float32)


# ---------------------------------------------------------------------------
# matrix containers
#
# Binary layout (little-endian): b"SMAM", u16 version, u16 dtype code
# (1 = float32), u32 rows, u32 cols, then rows*cols float32 row-major.

_MAGIC = b"SMAM"
_HEADER = struct.Struct("<4sHHII")
_DTYPES = {1: np.dtype("<f4")}

PathLike = Union[str, Path]


def write_matrix(path: PathLike, mat: np.ndarray) -> None:
    mat = np.asarray(mat, dtype=np.float32)
    if mat.ndim != 2:
        raise ShapeError("only 2-D matrices can be stored")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, 1, *mat.shape))
        fh.write(mat.astype("<f4").tobytes(order="C"))


def read_matrix(path: PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float32))
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ShapeError(f"{path}: truncated header")
    magic, version, code, rows, cols = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1 or code not in _DTYPES:
        raise ShapeError(f"{path}: not a version-1 matrix container")
    body = np.frombuffer(raw, dtype=_DTYPES[code], offset=_HEADER.size)
    if body.size != rows * cols:
        raise ShapeError(f"{path}: expected {rows * cols} values, found {body.size}")
    return body.reshape(rows, cols).astype(np.float32)


def write_matrix_csv(path: PathLike, mat: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(mat), delimiter=",", fmt="%.9g")
