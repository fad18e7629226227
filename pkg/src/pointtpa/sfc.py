"""Space-filling curve codecs (Morton / Hilbert) and point serialization.

Grid coordinates are non-negative integers below ``2**order_bits`` on every
axis. All encoders accept either a single ``(x, y, z)`` triple, returning a
Python ``int``, or an ``N x 3`` integer array, returning an ``int64`` array.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

MAX_ORDER_BITS = 20


class GridCoord(NamedTuple):
    x: int
    y: int
    z: int


class Curve(str, enum.Enum):
    ZORDER = "z"
    ZORDER_PERMUTED = "z-trans"
    HILBERT = "hilbert"
    HILBERT_PERMUTED = "hilbert-trans"


@dataclass(frozen=True)
class CurveKind:
    variant: Curve
    axis_perm: tuple[int, int, int] = (0, 1, 2)

    def __post_init__(self):
        if sorted(self.axis_perm) != [0, 1, 2]:
            raise ValueError(f"axis_perm must be a permutation of (0, 1, 2), got {self.axis_perm}")

    @classmethod
    def parse(cls, name: str) -> "CurveKind":
        """Build a curve from its config name; permuted variants swap x and y."""
        variant = Curve(name)
        if variant in (Curve.ZORDER_PERMUTED, Curve.HILBERT_PERMUTED):
            return cls(variant, (1, 0, 2))
        return cls(variant)

    @property
    def name(self) -> str:
        return self.variant.value

    @property
    def is_hilbert(self) -> bool:
        return self.variant in (Curve.HILBERT, Curve.HILBERT_PERMUTED)

    def encode(self, grid: np.ndarray, order_bits: int) -> np.ndarray:
        grid = np.asarray(grid)
        permuted = grid[..., list(self.axis_perm)]
        if self.is_hilbert:
            return hilbert_encode(permuted, order_bits)
        return morton_encode(permuted, order_bits)


@dataclass(frozen=True)
class SerializedOrder:
    perm: np.ndarray
    inv_perm: np.ndarray
    curve: CurveKind
    order_bits: int
    codes: np.ndarray

    def __len__(self) -> int:
        return len(self.perm)


def _check_bits(order_bits: int) -> None:
    if not 1 <= order_bits <= MAX_ORDER_BITS:
        raise ValueError(f"order_bits must be in [1, {MAX_ORDER_BITS}], got {order_bits}")


def _as_grid(c, order_bits: int) -> tuple[np.ndarray, bool]:
    _check_bits(order_bits)
    arr = np.asarray(c, dtype=np.int64)
    scalar = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3:
        raise ValueError(f"grid coordinates must have 3 columns, got shape {arr.shape}")
    if np.any(arr < 0) or np.any(arr >= (1 << order_bits)):
        raise ValueError("coordinate out of range")
    return arr, scalar


def _as_code(code, order_bits: int) -> tuple[np.ndarray, bool]:
    _check_bits(order_bits)
    arr = np.asarray(code, dtype=np.int64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any(arr < 0) or np.any(arr >= (1 << (3 * order_bits))):
        raise ValueError("code out of range")
    return arr, scalar


def quantize(coords, order_bits: int, bbox=None) -> np.ndarray:
    """Map real coordinates onto the ``2**order_bits`` grid of ``bbox``.

    ``bbox`` is a ``(lower, upper)`` pair of 3-vectors; when omitted it is the
    tight box of ``coords``. Axes with zero extent collapse to cell 0.
    """
    _check_bits(order_bits)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(coords)):
        raise ValueError("invalid coordinate")
    if bbox is None:
        lower, upper = coords.min(axis=0), coords.max(axis=0)
    else:
        lower = np.asarray(bbox[0], dtype=np.float64)
        upper = np.asarray(bbox[1], dtype=np.float64)
    extent = upper - lower
    side = 1 << order_bits
    safe = np.where(extent > 0, extent, 1.0)
    cells = np.floor((coords - lower) / safe * side)
    cells = np.where(extent > 0, cells, 0.0)
    return np.clip(cells, 0, side - 1).astype(np.int64)


def morton_encode(c, order_bits: int):
    grid, scalar = _as_grid(c, order_bits)
    code = np.zeros(len(grid), dtype=np.int64)
    for j in range(order_bits):
        for axis in range(3):
            code |= ((grid[:, axis] >> j) & 1) << (3 * j + axis)
    return int(code[0]) if scalar else code


def morton_decode(code, order_bits: int):
    codes, scalar = _as_code(code, order_bits)
    grid = np.zeros((len(codes), 3), dtype=np.int64)
    for j in range(order_bits):
        for axis in range(3):
            grid[:, axis] |= ((codes >> (3 * j + axis)) & 1) << j
    return GridCoord(*map(int, grid[0])) if scalar else grid


# Hilbert codec: Skilling's transpose form ("Programming the Hilbert curve",
# AIP Conf. Proc. 707, 2004), vectorized over points.


def _axes_to_transpose(X: np.ndarray, order_bits: int) -> np.ndarray:
    X = X.copy()
    n = X.shape[1]
    q = 1 << (order_bits - 1)
    while q > 1:
        p = q - 1
        for i in range(n):
            hit = (X[:, i] & q) != 0
            t = (X[:, 0] ^ X[:, i]) & p
            X[:, 0] = np.where(hit, X[:, 0] ^ p, X[:, 0] ^ t)
            X[:, i] = np.where(hit, X[:, i], X[:, i] ^ t)
        q >>= 1
    for i in range(1, n):
        X[:, i] ^= X[:, i - 1]
    t = np.zeros(len(X), dtype=np.int64)
    q = 1 << (order_bits - 1)
    while q > 1:
        t = np.where((X[:, n - 1] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    X ^= t[:, None]
    return X


def _transpose_to_axes(X: np.ndarray, order_bits: int) -> np.ndarray:
    X = X.copy()
    n = X.shape[1]
    t = X[:, n - 1] >> 1
    for i in range(n - 1, 0, -1):
        X[:, i] ^= X[:, i - 1]
    X[:, 0] ^= t
    q = 2
    while q != (2 << (order_bits - 1)):
        p = q - 1
        for i in range(n - 1, -1, -1):
            hit = (X[:, i] & q) != 0
            t = (X[:, 0] ^ X[:, i]) & p
            X[:, 0] = np.where(hit, X[:, 0] ^ p, X[:, 0] ^ t)
            X[:, i] = np.where(hit, X[:, i], X[:, i] ^ t)
        q <<= 1
    return X


def hilbert_encode(c, order_bits: int):
    grid, scalar = _as_grid(c, order_bits)
    X = _axes_to_transpose(grid, order_bits)
    code = np.zeros(len(grid), dtype=np.int64)
    for j in range(order_bits - 1, -1, -1):
        for axis in range(3):
            code = (code << 1) | ((X[:, axis] >> j) & 1)
    return int(code[0]) if scalar else code


def hilbert_decode(code, order_bits: int):
    codes, scalar = _as_code(code, order_bits)
    X = np.zeros((len(codes), 3), dtype=np.int64)
    shift = 3 * order_bits
    for j in range(order_bits - 1, -1, -1):
        for axis in range(3):
            shift -= 1
            X[:, axis] |= ((codes >> shift) & 1) << j
    grid = _transpose_to_axes(X, order_bits)
    return GridCoord(*map(int, grid[0])) if scalar else grid


def serialize(coords, curve: CurveKind | str, order_bits: int = 10, bbox=None) -> SerializedOrder:
    """Order points along ``curve``; equal codes keep their original order."""
    if isinstance(curve, str):
        curve = CurveKind.parse(curve)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if len(coords) == 0:
        raise ValueError("empty point cloud")
    grid = quantize(coords, order_bits, bbox)
    codes = curve.encode(grid, order_bits)
    perm = np.argsort(codes, kind="stable")
    inv_perm = np.empty_like(perm)
    inv_perm[perm] = np.arange(len(perm))
    return SerializedOrder(perm, inv_perm, curve, order_bits, codes)
