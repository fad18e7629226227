"""Command-line driver.

Exit codes: 0 success, 1 usage/config/checkpoint error, 2 numerical failure
(NaN loss or failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .backbone import build_model, prepare
from .config import ConfigError, RunConfig
from .data import FormatError, class_histogram, generate_scene, metrics, read_cloud, resolve_spec, write_binary
from .dpp import routing_entropy, weight_similarity
from .sng import group_assignments, group_tokens
from .train import (
    CheckpointMismatch,
    backbone_entries,
    evaluate,
    finetune,
    finetune_model,
    load_entries,
    make_clouds,
    prepare_all,
    pretrain_backbone,
    run_gradcheck,
)

log = logging.getLogger("pointtpa")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _scene_clouds(directory, spec_name, count, first_seed, points):
    if directory:
        files = sorted(p for p in Path(directory).iterdir() if p.suffix in (".ptbin", ".ptxt"))
        if not files:
            raise UsageError(f"no .ptbin/.ptxt scenes in {directory}")
        return [read_cloud(p) for p in files]
    return make_clouds(spec_name, count, first_seed, points)


def _write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


def _model_from_checkpoint(cfg: RunConfig, ckpt, seed: int):
    model = finetune_model(cfg, ad.load_checkpoint(ckpt), seed)
    model.eval()
    return model


# -- subcommands -----------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = resolve_spec(args.spec, args.points)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e}") from None
    files, total = [], np.zeros(spec.num_classes, dtype=np.int64)
    for i in range(args.count):
        cloud = generate_scene(spec, seed=args.seed + i)
        path = out / f"scene_{i:04d}.ptbin"
        write_binary(path, cloud)
        hist = class_histogram(cloud.labels, spec.num_classes)
        total += hist
        files.append({"file": path.name, "sha256": hashlib.sha256(path.read_bytes()).hexdigest(), "points": len(cloud), "class_counts": hist.tolist()})
    manifest = {"spec": spec.to_dict(), "seed": args.seed, "count": args.count, "files": files, "class_counts": total.tolist()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    log.info("wrote %d scenes to %s", args.count, out)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    seed = cfg.train.seed if args.seed is None else args.seed
    clouds = _scene_clouds(args.scenes, cfg.data.pretrain_spec, cfg.data.pretrain_scenes, cfg.data.pretrain_seed, cfg.data.points)
    losses = []
    model = pretrain_backbone(cfg, prepare_all(clouds, cfg), args.epochs, seed, lambda s, l: losses.append((s, l)))
    out = args.out or cfg.io.checkpoint
    Path(out).write_bytes(ad.encode_checkpoint(backbone_entries(model)))
    if args.log:
        _write_rows(args.log, ["step", "loss"], [(s, repr(l)) for s, l in losses])
    log.info("pretrained backbone written to %s (final loss %.4f)", out, losses[-1][1] if losses else float("nan"))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = cfg.train.seed if args.seed is None else args.seed
    steps = cfg.train.steps if args.steps is None else args.steps
    model = finetune_model(cfg, ad.load_checkpoint(args.ckpt), seed)
    clouds = _scene_clouds(args.scenes, cfg.data.downstream_spec, cfg.data.train_scenes, cfg.data.train_seed, cfg.data.points)
    losses = finetune(model, cfg, prepare_all(clouds, cfg), steps, seed)
    out = args.out or cfg.io.checkpoint
    ad.save_checkpoint(out, model)
    _write_rows(args.log or cfg.io.loss_log, ["step", "loss"], [(i, repr(l)) for i, l in enumerate(losses)])
    log.info("fine-tuned %d steps; checkpoint written to %s", steps, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    model = _model_from_checkpoint(cfg, args.ckpt, cfg.train.seed)
    clouds = _scene_clouds(args.scenes, cfg.data.downstream_spec, cfg.data.val_scenes, cfg.data.val_seed, cfg.data.points)
    cm = evaluate(model, prepare_all(clouds, cfg))
    report = metrics(cm).to_dict()
    out = args.out or cfg.io.report
    Path(out).write_text(json.dumps(report, indent=2) + "\n")
    print(f"mIoU {report['miou']:.4f}  mAcc {report['macc']:.4f}  allAcc {report['allacc']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    report = run_gradcheck(cfg, args.seed, args.h)
    print(report.table())
    print("PASS" if report.passed else f"FAIL: {', '.join(report.failures)}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _stage_index(cfg: RunConfig, stage: int) -> int:
    if not 1 <= stage <= len(cfg.backbone.stages):
        raise UsageError(f"stage must be in [1, {len(cfg.backbone.stages)}], got {stage}")
    return stage - 1


def cmd_inspect(args) -> int:
    cfg = _load_config(args.config)
    i = _stage_index(cfg, args.stage)
    cloud = read_cloud(args.scene)
    level = prepare(cloud, cfg.backbone).geometry.levels[i]
    model = build_model(cfg)
    sites = model.dpp_sites(i)
    sng = cfg.sng_config()
    curve = sites[-1].curve if sites else sng.curve_for(i)
    order = level.order(curve)
    g = group_tokens(torch.zeros(len(level), 1, dtype=ad.DTYPE), order, sng.groups_for(i, len(level)))
    _write_rows(args.out, ["point_index", "group_index", "slot_index", "curve_code"], group_assignments(g).tolist())
    return EXIT_OK


def cmd_weights_sim(args) -> int:
    cfg = _load_config(args.config)
    i = _stage_index(cfg, args.site)
    model = _model_from_checkpoint(cfg, args.ckpt, cfg.train.seed)
    sites = model.dpp_sites(i)
    if not sites:
        raise UsageError(f"no dynamic site at stage {args.site}")
    site = sites[-1]
    scene = prepare(read_cloud(args.scene), cfg.backbone)
    site.recording = True
    with torch.no_grad():
        model.logits(scene)
    site.recording = False
    g = site.last_grouped
    sim = weight_similarity(site, g)
    with torch.no_grad():
        entropy = routing_entropy(site.route(g))
    m = len(sim)
    _write_rows(args.out, [str(j) for j in range(m)], [[f"{v:.9f}" for v in row] for row in sim])
    entropy_out = args.entropy_out
    if entropy_out is None and args.out not in (None, "-"):
        entropy_out = str(Path(args.out).with_name(Path(args.out).stem + "_entropy.csv"))
    if entropy_out:
        _write_rows(entropy_out, ["group_index", "entropy"], [(j, f"{e:.9f}") for j, e in enumerate(entropy)])
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = _load_config(args.config)
    text = cfg.dumps() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pointtpa", description="Test-time parameter adaptation for point-cloud encoders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", help="generate synthetic scenes")
    s.add_argument("--spec", required=True, help="scene spec JSON file, or 'pretrain' / 'downstream'")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=None)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("pretrain", help="supervised backbone pretraining on the source distribution")
    s.add_argument("--config")
    s.add_argument("--scenes", help="directory of scenes (default: generate from config)")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--log")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="PEFT fine-tuning on a frozen backbone")
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True, help="pretrained (or previously fine-tuned) checkpoint")
    s.add_argument("--scenes")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="segmentation metrics of a checkpoint")
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenes")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every trainable parameter")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect", help="group assignments of one stage as CSV")
    s.add_argument("--config")
    s.add_argument("--scene", required=True)
    s.add_argument("--stage", type=int, required=True, help="1-based stage number")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("weights-sim", help="cosine similarity of the dynamic weights of one site")
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--site", type=int, required=True, help="1-based stage number of the dynamic site")
    s.add_argument("--out", default="-")
    s.add_argument("--entropy-out")
    s.set_defaults(func=cmd_weights_sim)

    s = sub.add_parser("config", help="print the effective configuration as JSON")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ad.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointMismatch, ad.CheckpointError, FormatError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
