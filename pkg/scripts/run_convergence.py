"""Completeness versus global-fusion rounds from local and random initialization.

One round runs one global iteration per integrated frame.

    python3 scripts/run_convergence.py --codec codec.bnvc --seeds 0 1 2 --rounds 5
"""

import argparse
import json

from latentfusion import dataio
from latentfusion.experiments import convergence_curve
from latentfusion.synth import NoiseModel, SyntheticSceneSpec, synth_scene


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--codec", required=True)
    p.add_argument("--spec", default="room-v1")
    p.add_argument("--noise", default="default")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--every", type=int, default=5)
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--out", default=None)
    args = p.parse_args()

    codec = dataio.load_codec(args.codec)
    spec = SyntheticSceneSpec.builtin(args.spec) if not args.spec.endswith(".json") else SyntheticSceneSpec.load(args.spec)
    gt = None
    curves = {}
    for seed in args.seeds:
        noise = NoiseModel.parse(args.noise)
        noise.seed = seed
        scene = synth_scene(spec, noise, with_mesh=gt is None)
        gt = gt or scene.gt_mesh
        frames = scene.frames[::args.every]
        curves[seed] = {}
        for init in ("local", "random"):
            c = convergence_curve(frames, codec, gt, init, rounds=args.rounds, seed=seed, n=args.samples)
            curves[seed][init] = c
            print(f"seed {seed}  {init:<6s} " + " ".join(f"{v:6.2f}" for v in c), flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(curves, fh, indent=2)


if __name__ == "__main__":
    main()
