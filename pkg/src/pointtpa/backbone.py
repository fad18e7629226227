"""A small multi-stage point encoder with serialized-patch attention.

Every stage works on a voxel level of the scene: the first on the input
points, later ones on grid-pooled cell centroids. Blocks attend densely
within fixed-size patches of the serialized sequence. Final-stage features
are broadcast back to the input points through the composed pool maps and a
linear head produces per-point logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .adapter import ADAPTER, DPP, InsertionPlan, StaticAdapter, build_insertion_plan
from .config import BackboneConfig, PeftConfig, RunConfig
from .data import PointCloud
from .dpp import DppSite
from .sfc import CurveKind, SerializedOrder, serialize
from .sng import SngConfig

# -- geometry -----------------------------------------------------------------------


@dataclass
class PoolMap:
    cluster: np.ndarray  # fine index -> coarse index
    counts: np.ndarray
    coords: np.ndarray  # coarse cell centroids
    grid: np.ndarray  # coarse integer cells


def pool_map(coords: np.ndarray, grid: np.ndarray, factor: int) -> PoolMap:
    if factor < 2:
        raise ValueError(f"pool factor must be >= 2, got {factor}")
    cells, cluster = np.unique(grid // factor, axis=0, return_inverse=True)
    cluster = cluster.reshape(-1)
    counts = np.bincount(cluster, minlength=len(cells))
    centroid = np.zeros((len(cells), 3))
    np.add.at(centroid, cluster, coords)
    return PoolMap(cluster, counts, centroid / counts[:, None], cells)


def pool_features(x: torch.Tensor, pm: PoolMap) -> torch.Tensor:
    idx = torch.as_tensor(pm.cluster, dtype=torch.long)
    total = x.new_zeros((len(pm.counts), x.shape[1])).index_add(0, idx, x)
    return total / torch.as_tensor(pm.counts, dtype=x.dtype)[:, None]


def grid_pool(features: torch.Tensor, coords: np.ndarray, grid: np.ndarray, factor: int):
    """Mean-pool features of points sharing a coarsened cell.

    Returns ``(pooled_features, pooled_coords, pool_map)``.
    """
    pm = pool_map(coords, grid, factor)
    return pool_features(features, pm), pm.coords, pm


@dataclass
class Level:
    coords: np.ndarray
    grid: np.ndarray
    order_bits: int
    _orders: dict = field(default_factory=dict, repr=False)

    def order(self, curve: CurveKind | str) -> SerializedOrder:
        name = curve if isinstance(curve, str) else curve.name
        if name not in self._orders:
            self._orders[name] = serialize(self.coords, name, self.order_bits)
        return self._orders[name]

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class SceneGeometry:
    levels: list[Level]
    pools: list[PoolMap]

    def upsample_index(self) -> np.ndarray:
        idx = np.arange(len(self.levels[0]))
        for pm in self.pools:
            idx = pm.cluster[idx]
        return idx


def build_geometry(coords, cfg: BackboneConfig) -> SceneGeometry:
    coords = np.asarray(coords, dtype=np.float64)
    grid = np.floor((coords - coords.min(axis=0)) / cfg.voxel).astype(np.int64)
    levels = [Level(coords, grid, cfg.order_bits)]
    pools = []
    for i, stage in enumerate(cfg.stages[1:], start=1):
        pm = pool_map(levels[-1].coords, levels[-1].grid, stage.pool)
        pools.append(pm)
        levels.append(Level(pm.coords, pm.grid, max(1, cfg.order_bits - i)))
    return SceneGeometry(levels, pools)


@dataclass
class SceneInput:
    features: torch.Tensor
    geometry: SceneGeometry
    labels: np.ndarray


def prepare(cloud: PointCloud, cfg: BackboneConfig) -> SceneInput:
    if cloud.in_channels != cfg.in_channels:
        raise ValueError(f"feature width {cloud.in_channels} does not match embedding input {cfg.in_channels}")
    feats = torch.as_tensor(cloud.features, dtype=ad.DTYPE)
    return SceneInput(feats, build_geometry(cloud.coords, cfg), cloud.labels)


# -- modules ------------------------------------------------------------------------


class SerializedAttention(nn.Module):
    def __init__(self, channels: int, heads: int, patch: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels do not split into {heads} heads")
        self.heads, self.patch = heads, patch
        self.qkv = nn.Linear(channels, 3 * channels, dtype=ad.DTYPE)
        self.proj = nn.Linear(channels, channels, dtype=ad.DTYPE)

    def forward(self, x: torch.Tensor, order: SerializedOrder) -> torch.Tensor:
        n, c = x.shape
        p = min(self.patch, n)
        m = math.ceil(n / p)
        h, d = self.heads, c // self.heads
        seq = ad.pad_rows(ad.gather_rows(x, order.perm), m * p).reshape(m, p, c)
        q, k, v = self.qkv(seq).reshape(m, p, 3, h, d).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) * d**-0.5
        valid = (torch.arange(m * p) < n).reshape(m, 1, 1, p)
        att = torch.softmax(att.masked_fill(~valid, float("-inf")), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(m * p, c)[:n]
        return self.proj(ad.gather_rows(out, order.inv_perm))


class Block(nn.Module):
    """Attention sublayer, then FFN; a PEFT branch reads the FFN input in parallel."""

    def __init__(self, channels: int, heads: int, patch: int, mlp_ratio: int, curve: str):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels, dtype=ad.DTYPE)
        self.attn = SerializedAttention(channels, heads, patch)
        self.norm2 = nn.LayerNorm(channels, dtype=ad.DTYPE)
        self.mlp = nn.Sequential(
            nn.Linear(channels, mlp_ratio * channels, dtype=ad.DTYPE),
            nn.GELU(),
            nn.Linear(mlp_ratio * channels, channels, dtype=ad.DTYPE),
        )
        self.curve = curve
        self.peft: nn.Module | None = None

    def forward(self, x: torch.Tensor, level: Level) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), level.order(self.curve))
        out = x + self.mlp(self.norm2(x))
        if isinstance(self.peft, DppSite):
            out = out + self.peft.delta(x, order=level.order(self.peft.curve))
        elif self.peft is not None:
            out = out + self.peft.delta(x)
        return out


class Stage(nn.Module):
    def __init__(self, in_channels: int | None, channels: int, blocks: list[Block]):
        super().__init__()
        self.down = None
        if in_channels is not None:
            self.down = nn.Sequential(nn.Linear(in_channels, channels, dtype=ad.DTYPE), nn.LayerNorm(channels, dtype=ad.DTYPE))
        self.blocks = nn.ModuleList(blocks)


class PointEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c0 = cfg.stages[0].channels
        self.embed = nn.Sequential(nn.Linear(cfg.in_channels, c0, dtype=ad.DTYPE), nn.LayerNorm(c0, dtype=ad.DTYPE))
        stages, k, prev = [], 0, None
        for spec in cfg.stages:
            blocks = []
            for _ in range(spec.blocks):
                heads = max(1, spec.channels // cfg.head_dim)
                blocks.append(Block(spec.channels, heads, spec.patch, cfg.mlp_ratio, cfg.curves[k % len(cfg.curves)]))
                k += 1
            stages.append(Stage(prev, spec.channels, blocks))
            prev = spec.channels
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(cfg.stages[-1].channels, cfg.num_classes, dtype=ad.DTYPE)
        self.plan: InsertionPlan | None = None

    # overlay management

    def attach_overlay(self, peft: PeftConfig, sng: SngConfig) -> InsertionPlan:
        widths = [s.channels for s in self.cfg.stages]
        plan = build_insertion_plan([s.blocks for s in self.cfg.stages], peft.insertion.strategy, peft.insertion.overrides)
        dims = peft.bottlenecks(widths)
        bases = peft.bases_for(len(widths))
        site = 0
        for i, row in enumerate(plan.tags):
            for j, tag in enumerate(row):
                blk = self.stages[i].blocks[j]
                if tag == ADAPTER:
                    blk.peft = StaticAdapter(widths[i], dims[i], peft.adapter_scale)
                elif tag == DPP:
                    blk.peft = DppSite(
                        widths[i], dims[i], bases[i], sng, stage=i, site=site,
                        scale=peft.scale, temperature=peft.temperature,
                        router_hidden=peft.router_hidden, position=peft.position,
                    )
                    site += 1
                else:
                    blk.peft = None
        self.plan = plan
        return plan

    def dpp_sites(self, stage: int | None = None) -> list[DppSite]:
        out = []
        for i, st in enumerate(self.stages):
            if stage is not None and i != stage:
                continue
            out.extend(b.peft for b in st.blocks if isinstance(b.peft, DppSite))
        return out

    def is_backbone(self, name: str) -> bool:
        return not (name.startswith("head.") or ".peft." in name)

    def backbone_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if self.is_backbone(n)}

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def freeze_backbone(self) -> None:
        for n, p in self.named_parameters():
            p.requires_grad_(not self.is_backbone(n))

    def reset_head(self) -> None:
        self.head.reset_parameters()

    # forward

    def encode(self, features: torch.Tensor, geo: SceneGeometry) -> torch.Tensor:
        """Features of the coarsest level."""
        x = self.embed(features)
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = stage.down(pool_features(x, geo.pools[i - 1]))
            for blk in stage.blocks:
                x = blk(x, geo.levels[i])
        return x

    def features(self, features: torch.Tensor, geo: SceneGeometry) -> torch.Tensor:
        return ad.gather_rows(self.encode(features, geo), geo.upsample_index())

    def forward(self, features: torch.Tensor, geo: SceneGeometry) -> torch.Tensor:
        return ad.gather_rows(self.head(self.encode(features, geo)), geo.upsample_index())

    def logits(self, scene: SceneInput) -> torch.Tensor:
        return self(scene.features, scene.geometry)


def build_model(cfg: RunConfig, with_overlay: bool = True) -> PointEncoder:
    model = PointEncoder(cfg.backbone)
    if with_overlay:
        model.attach_overlay(cfg.peft, cfg.sng_config())
    return model


def backbone_forward(cloud: PointCloud, model: PointEncoder) -> torch.Tensor:
    return model.logits(prepare(cloud, model.cfg))
