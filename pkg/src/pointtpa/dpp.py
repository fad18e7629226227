"""Dynamic parameter projector: routed per-group down-projection weights.

For every group of serialized tokens a small router produces softmax mixing
coefficients over ``K`` learnable bases; the mixed ``C x C_d`` matrix
projects that group's tokens. The result is ungrouped, passed through ReLU,
projected back to ``C`` channels and added as a scaled residual.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .sfc import SerializedOrder, serialize
from .sng import GroupedTokens, SngConfig, group_tokens, sng_inverse

POSITIONS = ("down", "up", "both")


def router_hidden_width(channels: int, bases: int, rule="half") -> int:
    if rule == "half":
        return max(bases, channels // 2)
    return int(rule)


class WeightRouter(nn.Module):
    """Pooled group descriptor -> MLP -> temperature softmax over the bases."""

    def __init__(self, channels: int, bases: int, hidden: int, temperature: float = 4.0):
        super().__init__()
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.fc1 = nn.Linear(channels, hidden, dtype=ad.DTYPE)
        self.fc2 = nn.Linear(hidden, bases, dtype=ad.DTYPE)
        self.temperature = temperature

    def logits(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(ad.relu(self.fc1(pooled)))

    def forward(self, g: GroupedTokens) -> torch.Tensor:
        if not bool(g.mask.any(dim=1).all()):
            raise ValueError("group without real tokens")
        pooled = ad.mean_rows_masked(g.values, g.mask)
        return ad.softmax_rows(self.logits(pooled), self.temperature)


def synthesize_weights(coeffs: torch.Tensor, bases: torch.Tensor) -> torch.Tensor:
    """Mix ``K x C x C_d`` bases with ``m x K`` coefficients -> ``m x C x C_d``."""
    if coeffs.shape[-1] != bases.shape[0]:
        raise ValueError(f"synthesize_weights: shape mismatch {tuple(coeffs.shape)} vs {tuple(bases.shape)}")
    return torch.einsum("mk,kcd->mcd", coeffs, bases)


def _uniform(shape, bound: float) -> nn.Parameter:
    return nn.Parameter(torch.empty(shape, dtype=ad.DTYPE).uniform_(-bound, bound))


class DppSite(nn.Module):
    def __init__(
        self,
        channels: int,
        bottleneck: int,
        bases: int,
        sng: SngConfig,
        stage: int = 0,
        site: int = 0,
        scale: float = 1.0,
        temperature: float = 4.0,
        router_hidden="half",
        position: str = "down",
    ):
        super().__init__()
        if bases < 1:
            raise ValueError("need at least one basis")
        if position not in POSITIONS:
            raise ValueError(f"unknown DPLayer position {position!r}")
        self.channels, self.bottleneck, self.num_bases = channels, bottleneck, bases
        self.sng, self.stage, self.site = sng, stage, site
        self.scale, self.position = scale, position

        self.norm = nn.LayerNorm(channels, dtype=ad.DTYPE)
        bound = channels**-0.5
        if position in ("down", "both"):
            self.bases = _uniform((bases, channels, bottleneck), bound)
        else:
            self.down = nn.Linear(channels, bottleneck, bias=False, dtype=ad.DTYPE)
        if position in ("up", "both"):
            self.up_bases = nn.Parameter(torch.zeros(bases, bottleneck, channels, dtype=ad.DTYPE))
            self.up_bias = nn.Parameter(torch.zeros(channels, dtype=ad.DTYPE))
        else:
            self.up = nn.Linear(bottleneck, channels, dtype=ad.DTYPE)
            nn.init.zeros_(self.up.weight)
            nn.init.zeros_(self.up.bias)
        hidden = router_hidden_width(channels, bases, router_hidden)
        self.router = WeightRouter(channels, bases, hidden, temperature)
        self.recording = False  # keep the last GroupedTokens for inspection
        self.last_grouped: GroupedTokens | None = None

    @property
    def curve(self):
        return self.sng.curve_for(self.site)

    @property
    def order_bits(self) -> int:
        return self.sng.order_bits_for(self.stage)

    def group(self, x: torch.Tensor, coords=None, order: SerializedOrder | None = None) -> GroupedTokens:
        if len(x) == 0:
            raise ValueError("empty point cloud")
        if order is None:
            order = serialize(coords, self.curve, self.order_bits)
        return group_tokens(self.norm(x), order, self.sng.groups_for(self.stage, len(x)))

    def route(self, g: GroupedTokens) -> torch.Tensor:
        return self.router(g)

    def dynamic_weights(self, g: GroupedTokens) -> torch.Tensor:
        bases = self.up_bases if self.position == "up" else self.bases
        return synthesize_weights(self.route(g), bases)

    def delta_grouped(self, g: GroupedTokens) -> torch.Tensor:
        coeffs = self.route(g)
        if self.position == "up":
            projected = g.values @ self.down.weight.T
        else:
            projected = torch.einsum("mnc,mcd->mnd", g.values, synthesize_weights(coeffs, self.bases))
        if self.position == "down":
            hidden = ad.relu(sng_inverse(g.with_values(projected)))
            return self.scale * self.up(hidden)
        up_w = synthesize_weights(coeffs, self.up_bases)
        out = torch.einsum("mnd,mdc->mnc", ad.relu(projected), up_w)
        return self.scale * (sng_inverse(g.with_values(out)) + self.up_bias)

    def delta(self, x: torch.Tensor, coords=None, order: SerializedOrder | None = None) -> torch.Tensor:
        g = self.group(x, coords, order)
        if self.recording:
            self.last_grouped = g
        return self.delta_grouped(g)

    def forward(self, x: torch.Tensor, coords=None, order: SerializedOrder | None = None) -> torch.Tensor:
        return x + self.delta(x, coords, order)


def cosine_similarity_matrix(weights: np.ndarray) -> np.ndarray:
    flat = weights.reshape(len(weights), -1)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = flat / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


def weight_similarity(site: DppSite, g: GroupedTokens) -> np.ndarray:
    """Cosine similarity between the flattened dynamic weights of every group pair."""
    with torch.no_grad():
        w = site.dynamic_weights(g).numpy()
    return cosine_similarity_matrix(w)


def routing_entropy(coeffs: torch.Tensor) -> np.ndarray:
    p = coeffs.detach().numpy()
    return -(p * np.log(p)).sum(axis=1)
