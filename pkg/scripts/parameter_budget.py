"""Trainable-parameter share of the overlay for a sweep of bottleneck ratios and depths."""

import argparse

from pointtpa.adapter import build_insertion_plan, overlay_census
from pointtpa.backbone import build_model
from pointtpa.config import RunConfig, StageSpec, paper_proportional_config


def share(cfg: RunConfig) -> tuple[int, int, int]:
    model = build_model(cfg)
    model.freeze_backbone()
    trainable = sum(p.numel() for p in model.trainable_parameters().values())
    total = sum(p.numel() for p in model.parameters())
    widths = [s.channels for s in cfg.backbone.stages]
    plan = build_insertion_plan([s.blocks for s in cfg.backbone.stages], cfg.peft.insertion.strategy, cfg.peft.insertion.overrides)
    census = overlay_census(plan, widths, cfg.peft.bottlenecks(widths), cfg.peft.bases_for(len(widths)), cfg.peft.router_hidden, cfg.backbone.num_classes)
    return trainable, total, census


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--ratios", type=int, nargs="+", default=[4, 8, 16, 32])
    p.add_argument("--depths", default="2,2,2;2,2,6", help="semicolon-separated block counts per stage")
    args = p.parse_args()

    base = paper_proportional_config()
    print(f"{'blocks':<10} {'rho':>4} {'trainable':>10} {'total':>10} {'share':>7}  census")
    for depth in args.depths.split(";"):
        blocks = [int(b) for b in depth.split(",")]
        for rho in args.ratios:
            cfg = RunConfig.from_dict(base.to_dict())
            cfg.backbone.stages = [StageSpec(s.channels, b, s.patch, s.pool, s.groups) for s, b in zip(base.backbone.stages, blocks)]
            cfg.peft.bottleneck_ratio = rho
            trainable, total, census = share(cfg.validate())
            ok = "exact" if census == trainable else f"MISMATCH {census}"
            print(f"{depth:<10} {rho:>4} {trainable:>10} {total:>10} {100 * trainable / total:6.2f}%  {ok}")


if __name__ == "__main__":
    main()
