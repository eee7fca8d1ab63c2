"""Train the desk-scale codec and report held-out error.

    python3 scripts/train_codec.py --out codec.bnvc --seed 0
"""

import argparse
import json
import logging
import time

from latentfusion import dataio
from latentfusion.training import (default_shapes, desk_scale_configs, evaluate_codec, generate_patch_dataset,
                                   train_codec)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    patch_cfg, train_cfg = desk_scale_configs(seed=args.seed)
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    t0 = time.perf_counter()
    shapes = default_shapes()
    data = generate_patch_dataset(shapes, patch_cfg, seed=args.seed)
    held_out = generate_patch_dataset(shapes, desk_scale_configs(held_out=True)[0], seed=args.seed + 10_000)
    print(f"{len(data)} training patches, {len(held_out)} held-out patches")
    result = train_codec(data, train_cfg, patch_cfg.patch_radius)
    dataio.save_codec(args.out, result.codec)
    l1 = evaluate_codec(result.codec, held_out)
    print(json.dumps({"held_out_l1_mm": 1000 * l1, "target_mm": 1000 * 0.25 * patch_cfg.patch_radius,
                      "loss_curve_mm": [round(1000 * v, 3) for v in result.loss_curve],
                      "seconds": round(time.perf_counter() - t0, 1)}, indent=2))


if __name__ == "__main__":
    main()
