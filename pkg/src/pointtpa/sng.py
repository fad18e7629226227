"""Serialization-based neighborhood grouping.

Tokens are layer-normalized, ordered along a space-filling curve and cut into
contiguous chunks of ``n = ceil(N / m)`` tokens; the last chunk is
zero-padded. :func:`sng_inverse` drops padding and restores the input order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import autodiff as ad
from .sfc import CurveKind, SerializedOrder, serialize

DEFAULT_CURVES = ("hilbert", "hilbert-trans", "z", "z-trans")


@dataclass
class SngConfig:
    """Grouping schedule shared by every dynamic site of a model.

    ``group_counts[i]`` is the group count of stage ``i`` (0-based) in
    ``"count"`` mode; ``"points"`` mode fixes tokens per group instead.
    ``enabled=False`` puts every token of a site into a single group.
    """

    group_counts: list[int] = field(default_factory=lambda: [32, 16, 8])
    mode: str = "count"
    points_per_group: int = 200
    curves: list[str] = field(default_factory=lambda: list(DEFAULT_CURVES))
    order_bits: int = 10
    enabled: bool = True

    def __post_init__(self):
        if self.mode not in ("count", "points"):
            raise ValueError(f"unknown grouping mode {self.mode!r}")
        if any(m < 1 for m in self.group_counts):
            raise ValueError("group counts must be >= 1")
        if self.points_per_group < 1:
            raise ValueError("points_per_group must be >= 1")
        if not self.curves:
            raise ValueError("curve schedule must not be empty")
        for c in self.curves:
            CurveKind.parse(c)

    @classmethod
    def halving(cls, first_stage_groups: int, num_stages: int, **kwargs) -> "SngConfig":
        counts = [max(1, int(first_stage_groups / 2**i + 0.5)) for i in range(num_stages)]
        return cls(group_counts=counts, **kwargs)

    def groups_for(self, stage: int, n_points: int) -> int:
        if not self.enabled:
            return 1
        if self.mode == "points":
            return math.ceil(n_points / self.points_per_group)
        return self.group_counts[min(stage, len(self.group_counts) - 1)]

    def curve_for(self, site: int) -> CurveKind:
        return CurveKind.parse(self.curves[site % len(self.curves)])

    def order_bits_for(self, stage: int) -> int:
        return max(1, self.order_bits - stage)


@dataclass
class GroupedTokens:
    values: torch.Tensor  # m x n x C
    mask: torch.Tensor  # m x n, True = real token
    order: SerializedOrder

    @property
    def group_count(self) -> int:
        return self.values.shape[0]

    @property
    def capacity(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def n_points(self) -> int:
        return len(self.order)

    def with_values(self, values: torch.Tensor) -> "GroupedTokens":
        return GroupedTokens(values, self.mask, self.order)


def partition(n_points: int, groups: int) -> tuple[int, int]:
    """Return ``(group_count, capacity)`` for ceil-chunking ``n_points`` tokens.

    Chunks that would hold no real token are dropped, so the effective group
    count may be below the requested one (e.g. 5 tokens in 4 groups -> 3).
    """
    if n_points < 1:
        raise ValueError("empty point cloud")
    groups = min(max(1, groups), n_points)
    capacity = math.ceil(n_points / groups)
    return math.ceil(n_points / capacity), capacity


def group_tokens(x: torch.Tensor, order: SerializedOrder, groups: int, fill: float = 0.0) -> GroupedTokens:
    """Reorder rows of ``x`` by ``order`` and split into padded groups.

    ``fill`` exists so padding inertness can be tested; keep it 0 otherwise.
    """
    n_points = len(x)
    if n_points != len(order):
        raise ValueError(f"order covers {len(order)} points but x has {n_points} rows")
    m, n = partition(n_points, groups)
    seq = ad.pad_rows(ad.gather_rows(x, order.perm), m * n, fill)
    mask = torch.arange(m * n) < n_points
    return GroupedTokens(seq.reshape(m, n, x.shape[1]), mask.reshape(m, n), order)


def sng_forward(
    x: torch.Tensor,
    coords,
    cfg: SngConfig,
    stage: int = 0,
    norm: torch.nn.Module | None = None,
    site: int = 0,
) -> GroupedTokens:
    if len(x) == 0:
        raise ValueError("empty point cloud")
    coords = np.asarray(coords, dtype=np.float64)
    if len(coords) != len(x):
        raise ValueError(f"coords has {len(coords)} rows but x has {len(x)}")
    if norm is not None:
        x = norm(x)
    order = serialize(coords, cfg.curve_for(site), cfg.order_bits_for(stage))
    return group_tokens(x, order, cfg.groups_for(stage, len(x)))


def sng_inverse(g: GroupedTokens) -> torch.Tensor:
    flat_mask = g.mask.reshape(-1)
    if int(flat_mask.sum()) != g.n_points:
        raise ValueError(f"mask holds {int(flat_mask.sum())} tokens but order covers {g.n_points}")
    flat = g.values.reshape(-1, g.values.shape[-1])
    return ad.gather_rows(flat[flat_mask], g.order.inv_perm)


def group_assignments(g: GroupedTokens) -> np.ndarray:
    """Rows of ``(point_index, group_index, slot_index, curve_code)`` by point."""
    k = np.arange(g.n_points)
    point = g.order.perm[k]
    rows = np.stack([point, k // g.capacity, k % g.capacity, g.order.codes[point]], axis=1)
    return rows[np.argsort(point)]
