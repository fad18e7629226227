"""Pretrain on the source distribution, then compare linear probe, static adapters
and dynamic sites on the target distribution over several seeds."""

import argparse
import json
import logging
import time

from pointtpa.config import RunConfig
from pointtpa.experiment import METHODS, mean_miou, transfer_run


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", help="run config JSON (default: built-in defaults)")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps", type=int, help="fine-tuning steps per method")
    p.add_argument("--epochs", type=int, help="pretraining epochs")
    p.add_argument("--methods", nargs="+", choices=list(METHODS), default=list(METHODS))
    p.add_argument("--out", help="write per-seed results as JSON")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    t0 = time.perf_counter()
    results = [transfer_run(cfg, seed, args.methods, args.steps, args.epochs) for seed in range(args.seeds)]
    elapsed = time.perf_counter() - t0
    means = mean_miou(results)
    for name in args.methods:
        per_seed = "  ".join(f"{r.miou[name]:.4f}" for r in results)
        print(f"{name:<9} mean mIoU {means[name]:.4f}   per seed {per_seed}")
    print(f"total {elapsed:.0f} s")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"mean": means, "seconds": elapsed, "runs": [r.__dict__ for r in results]}, f, indent=2)


if __name__ == "__main__":
    main()
