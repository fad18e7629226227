"""Source -> target transfer experiment comparing PEFT overlays on one frozen backbone."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from . import autodiff as ad
from .config import RunConfig
from .data import metrics
from .train import backbone_entries, evaluate, finetune, finetune_model, make_clouds, prepare_all, pretrain_backbone

log = logging.getLogger(__name__)

METHODS = {
    "linear": "LinearProbe",
    "adapter": "AdapterOnly",
    "pointtpa": "LastBlockPerStage",
}


@dataclass
class TransferResult:
    seed: int
    miou: dict[str, float] = field(default_factory=dict)
    final_loss: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0


def with_strategy(cfg: RunConfig, strategy: str) -> RunConfig:
    out = RunConfig.from_dict(cfg.to_dict())
    out.peft.insertion.strategy = strategy
    return out


def transfer_run(cfg: RunConfig, seed: int, methods=None, steps: int | None = None, epochs: int | None = None) -> TransferResult:
    """Pretrain on the source distribution, then fine-tune each method on the target."""
    t0 = time.perf_counter()
    methods = methods or list(METHODS)
    d = cfg.data
    offset = 10_000 * seed
    source = prepare_all(make_clouds(d.pretrain_spec, d.pretrain_scenes, d.pretrain_seed + offset, d.points), cfg)
    backbone = pretrain_backbone(cfg, source, epochs, seed)
    entries = ad.decode_checkpoint(ad.encode_checkpoint(backbone_entries(backbone)))
    train = prepare_all(make_clouds(d.downstream_spec, d.train_scenes, d.train_seed + offset, d.points), cfg)
    val = prepare_all(make_clouds(d.downstream_spec, d.val_scenes, d.val_seed + offset, d.points), cfg)
    result = TransferResult(seed)
    for name in methods:
        run_cfg = with_strategy(cfg, METHODS[name])
        model = finetune_model(run_cfg, entries, seed)
        losses = finetune(model, run_cfg, train, steps, seed)
        result.miou[name] = metrics(evaluate(model, val)).miou
        result.final_loss[name] = sum(losses[-50:]) / max(1, len(losses[-50:]))
        log.info("seed %d %-8s mIoU %.4f", seed, name, result.miou[name])
    result.seconds = time.perf_counter() - t0
    return result


def mean_miou(results: list[TransferResult]) -> dict[str, float]:
    names = results[0].miou
    return {n: sum(r.miou[n] for r in results) / len(results) for n in names}
