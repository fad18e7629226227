"""Static bottleneck adapters and the block-level insertion plan."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import autodiff as ad
from .dpp import router_hidden_width

NONE, ADAPTER, DPP = "none", "adapter", "dpp"

STRATEGIES = (
    "Dense",
    "EveryTwo",
    "EveryThree",
    "LastBlockOnly",
    "FirstBlockPerStage",
    "LastBlockPerStage",
    # baselines: static adapters everywhere, and a bare linear probe
    "AdapterOnly",
    "LinearProbe",
)


class StaticAdapter(nn.Module):
    """Per-token residual bottleneck: ``x + s * (ReLU(LN(x) @ down) @ up + b)``."""

    def __init__(self, channels: int, bottleneck: int, scale: float = 1.0):
        super().__init__()
        self.norm = nn.LayerNorm(channels, dtype=ad.DTYPE)
        self.down = nn.Linear(channels, bottleneck, bias=False, dtype=ad.DTYPE)
        self.up = nn.Linear(bottleneck, channels, dtype=ad.DTYPE)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)
        self.scale = scale

    def delta(self, x: torch.Tensor, coords=None, order=None) -> torch.Tensor:
        return self.scale * self.up(ad.relu(self.down(self.norm(x))))

    def forward(self, x: torch.Tensor, coords=None, order=None) -> torch.Tensor:
        return x + self.delta(x)


def adapter_forward(x: torch.Tensor, a: StaticAdapter) -> torch.Tensor:
    return a(x)


@dataclass
class InsertionPlan:
    strategy: str
    tags: list[list[str]]  # tags[stage][block]

    def sites(self, kind: str) -> list[tuple[int, int]]:
        return [(i, j) for i, stage in enumerate(self.tags) for j, t in enumerate(stage) if t == kind]

    def count(self, kind: str) -> int:
        return len(self.sites(kind))


def build_insertion_plan(stages: list[int], strategy: str = "LastBlockPerStage", overrides=None) -> InsertionPlan:
    """Tag every block with ``none`` / ``adapter`` / ``dpp``.

    ``overrides`` maps a 1-based stage number to an explicit tag list for
    that stage and is applied after the named strategy.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown insertion strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    if not stages or any(b < 1 for b in stages):
        raise ValueError("every stage needs at least one block")
    total = sum(stages)
    tags, k = [], 0
    for blocks in stages:
        row = []
        for j in range(blocks):
            k += 1  # 1-based global block index
            dynamic = {
                "Dense": True,
                "EveryTwo": k % 2 == 0,
                "EveryThree": k % 3 == 0,
                "LastBlockOnly": k == total,
                "FirstBlockPerStage": j == 0,
                "LastBlockPerStage": j == blocks - 1,
                "AdapterOnly": False,
                "LinearProbe": False,
            }[strategy]
            if strategy == "LinearProbe":
                row.append(NONE)
            else:
                row.append(DPP if dynamic else ADAPTER)
        tags.append(row)
    for stage, row in (overrides or {}).items():
        i = int(stage) - 1
        if not 0 <= i < len(stages) or len(row) != stages[i]:
            raise ValueError(f"override for stage {stage} does not match the stage layout")
        bad = [t for t in row if t not in (NONE, ADAPTER, DPP)]
        if bad:
            raise ValueError(f"unknown block tags {bad}")
        tags[i] = list(row)
    return InsertionPlan(strategy, tags)


def overlay_census(
    plan: InsertionPlan,
    channels: list[int],
    bottlenecks: list[int],
    bases: list[int],
    router_hidden="half",
    num_classes: int = 0,
) -> int:
    """Closed-form trainable parameter count of the overlay plus the head."""
    total = channels[-1] * num_classes + num_classes
    for i, row in enumerate(plan.tags):
        c, d, k = channels[i], bottlenecks[i], bases[i]
        for tag in row:
            if tag == ADAPTER:
                total += 2 * c + c * d + d * c + c
            elif tag == DPP:
                h = router_hidden_width(c, k, router_hidden)
                total += 2 * c + k * c * d + (c * h + h + h * k + k) + d * c + c
    return total
