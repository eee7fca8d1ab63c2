"""Ablation arms on a synthetic scene: F1 at several thresholds per method and seed.

    python3 scripts/run_ablation.py --codec codec.bnvc --seeds 0 1 2 --every 5 --out ablation.json

Use ``--noise none`` for the noise-free sanity run.
"""

import argparse
import json
import statistics
import time

from latentfusion import dataio
from latentfusion.experiments import METHODS, evaluate_mesh, extract_mesh, fuse_sequence
from latentfusion.synth import NoiseModel, SyntheticSceneSpec, synth_scene


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--codec", required=True)
    p.add_argument("--spec", default="room-v1")
    p.add_argument("--noise", default="default")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--every", type=int, default=5)
    p.add_argument("--iters", type=int, default=None, help="global iterations per frame")
    p.add_argument("--thresholds", type=float, nargs="+", default=[0.01, 0.025, 0.05])
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--out", default=None)
    args = p.parse_args()

    codec = dataio.load_codec(args.codec)
    spec = SyntheticSceneSpec.builtin(args.spec) if not args.spec.endswith(".json") else SyntheticSceneSpec.load(args.spec)
    gt = None
    results = {}
    for seed in args.seeds:
        noise = NoiseModel.parse(args.noise)
        noise.seed = seed
        scene = synth_scene(spec, noise, with_mesh=gt is None)
        gt = gt or scene.gt_mesh
        results[seed] = {}
        for method in args.methods:
            t0 = time.perf_counter()
            res = fuse_sequence(scene.frames, method, codec, every=args.every, iters=args.iters, seed=seed)
            mesh = extract_mesh(res.volume, codec, args.step)
            metrics = evaluate_mesh(mesh, gt, tuple(args.thresholds), args.samples, seed)
            results[seed][method] = {"metrics": metrics, "fuse_seconds": res.seconds,
                                     "total_seconds": time.perf_counter() - t0, "voxels": len(res.volume)}
            f1 = "  ".join(f"F1@{k}={v['f1']:.2f}" for k, v in metrics.items())
            print(f"seed {seed}  {method:<20s} {f1}  ({time.perf_counter() - t0:.0f} s)", flush=True)

    key = f"{args.thresholds[len(args.thresholds) // 2]:g}"
    print(f"median F1@{key} over seeds:")
    for method in args.methods:
        print(f"  {method:<20s} {statistics.median(results[s][method]['metrics'][key]['f1'] for s in args.seeds):.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
