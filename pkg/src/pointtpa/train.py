"""Pretraining, PEFT fine-tuning, evaluation and model-level gradient checks."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Mapping

import numpy as np
import torch

from . import autodiff as ad
from .backbone import PointEncoder, SceneInput, build_model, prepare
from .config import RunConfig, gradcheck_config
from .data import PointCloud, confusion_matrix, generate_scene, resolve_spec

log = logging.getLogger(__name__)


class CheckpointMismatch(ValueError):
    pass


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("PTPA_THREADS", "1")))
    except ValueError:
        return 1


def make_clouds(spec_name: str, count: int, first_seed: int, points: int | None = None) -> list[PointCloud]:
    spec = resolve_spec(spec_name, points)
    return [generate_scene(spec, seed=first_seed + i) for i in range(count)]


def prepare_all(clouds: list[PointCloud], cfg: RunConfig) -> list[SceneInput]:
    return [prepare(c, cfg.backbone) for c in clouds]


def scene_loss(model: PointEncoder, scene: SceneInput) -> torch.Tensor:
    return ad.cross_entropy(model.logits(scene), scene.labels)


# -- checkpoint <-> model ------------------------------------------------------------


def backbone_entries(model: PointEncoder) -> list[tuple[str, np.ndarray, bool]]:
    return [(n, a, t) for n, a, t in ad.model_entries(model) if model.is_backbone(n)]


def backbone_blob(model: PointEncoder) -> bytes:
    return ad.encode_checkpoint(backbone_entries(model))


def load_entries(model: PointEncoder, entries: Mapping[str, ad.CheckpointEntry]) -> None:
    """Copy checkpoint arrays into ``model``; every backbone parameter must be present."""
    params = dict(model.named_parameters())
    problems = [n for n in entries if n not in params]
    problems += [n for n, e in entries.items() if n in params and tuple(e.array.shape) != tuple(params[n].shape)]
    problems += [n for n in params if model.is_backbone(n) and n not in entries]
    if problems:
        raise CheckpointMismatch("checkpoint does not match config: " + ", ".join(sorted(set(problems))))
    with torch.no_grad():
        for n, e in entries.items():
            params[n].copy_(torch.as_tensor(e.array, dtype=ad.DTYPE))


def finetune_model(cfg: RunConfig, entries: Mapping[str, ad.CheckpointEntry], seed: int) -> PointEncoder:
    """Frozen pretrained backbone + freshly initialized overlay and head."""
    torch.manual_seed(seed)
    model = build_model(cfg)
    load_entries(model, entries)
    model.freeze_backbone()
    return model


# -- training ------------------------------------------------------------------------


def pretrain_backbone(
    cfg: RunConfig,
    scenes: list[SceneInput],
    epochs: int | None = None,
    seed: int | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> PointEncoder:
    """Supervised training of the whole encoder; returns it frozen with the head reset."""
    epochs = cfg.train.pretrain_epochs if epochs is None else epochs
    seed = cfg.train.seed if seed is None else seed
    torch.manual_seed(seed)
    model = build_model(cfg, with_overlay=False)
    params = dict(model.named_parameters())
    opt = ad.SGD(params, cfg.train.pretrain_lr, cfg.train.momentum)
    rng = np.random.default_rng(seed)
    step, last = 0, float("nan")
    for _ in range(epochs):
        for i in rng.permutation(len(scenes)):
            loss = scene_loss(model, scenes[i])
            if not torch.isfinite(loss):
                raise ad.NumericalError(f"pretraining diverged at step {step}; last finite loss {last:.6g}")
            last = loss.item()
            opt.step(ad.backward(loss, params))
            if on_step:
                on_step(step, last)
            step += 1
    model.freeze_backbone()
    for p in model.head.parameters():
        p.requires_grad_(False)
    return model


def finetune(
    model: PointEncoder,
    cfg: RunConfig,
    scenes: list[SceneInput],
    steps: int | None = None,
    seed: int | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """SGD on the trainable parameters only. Returns the per-step losses."""
    steps = cfg.train.steps if steps is None else steps
    seed = cfg.train.seed if seed is None else seed
    params = model.trainable_parameters()
    opt = ad.SGD(params, cfg.train.lr, cfg.train.momentum)
    rng = np.random.default_rng(seed)
    probe_only = not any(n for n in params if ".peft." in n)
    cache: dict[int, torch.Tensor] = {}

    def loss_of(i: int) -> torch.Tensor:
        scene = scenes[i]
        if not probe_only:
            return scene_loss(model, scene)
        if i not in cache:
            with torch.no_grad():
                cache[i] = model.encode(scene.features, scene.geometry)
        logits = ad.gather_rows(model.head(cache[i]), scene.geometry.upsample_index())
        return ad.cross_entropy(logits, scene.labels)

    losses = []
    for step in range(steps):
        batch = rng.integers(0, len(scenes), size=cfg.train.batch)
        loss = sum(loss_of(int(i)) for i in batch) / len(batch)
        if not torch.isfinite(loss):
            last = losses[-1] if losses else float("nan")
            raise ad.NumericalError(f"fine-tuning diverged at step {step}; last finite loss {last:.6g}")
        opt.step(ad.backward(loss, params))
        losses.append(loss.item())
        if on_step:
            on_step(step, losses[-1])
    return losses


def predict(model: PointEncoder, scene: SceneInput) -> np.ndarray:
    with torch.no_grad():
        return model.logits(scene).argmax(dim=1).numpy()


def evaluate(model: PointEncoder, scenes: list[SceneInput], threads: int | None = None) -> np.ndarray:
    """Summed confusion matrix over ``scenes``; scenes run on up to ``threads`` workers."""
    k = model.cfg.num_classes
    threads = thread_count() if threads is None else threads

    def one(scene: SceneInput) -> np.ndarray:
        return confusion_matrix(predict(model, scene), scene.labels, k)

    if threads <= 1:
        parts = [one(s) for s in scenes]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, scenes))
    return np.sum(parts, axis=0)


# -- gradient check --------------------------------------------------------------------


def gradcheck_setup(cfg: RunConfig | None = None, seed: int = 0, points: int = 48):
    """Miniature model with a perturbed overlay and one small scene.

    The overlay is moved away from its zero-initialized state so that every
    trainable tensor carries a nonzero gradient.
    """
    mini = gradcheck_config(cfg)
    torch.manual_seed(seed)
    model = build_model(mini)
    model.freeze_backbone()
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.trainable_parameters().values():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    spec = resolve_spec(mini.data.downstream_spec, points)
    scene = prepare(generate_scene(spec, seed=seed), mini.backbone)
    return model, scene


def run_gradcheck(cfg: RunConfig | None = None, seed: int = 0, h: float = 1e-5, tolerance: float = 1e-4) -> ad.GradcheckReport:
    model, scene = gradcheck_setup(cfg, seed)
    return ad.gradcheck(lambda: scene_loss(model, scene), model.trainable_parameters(), h, tolerance)
