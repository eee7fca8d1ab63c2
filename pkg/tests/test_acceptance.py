"""Acceptance criteria 1-10.

Each test records and prints one line ``criterion N: PASS|FAIL ...``; the
collected lines are repeated in the pytest terminal summary. Tolerances are
fixed here and never relaxed to make a run pass.
"""

import json
import statistics

import numpy as np
import pytest

from latentfusion import dataio
from latentfusion.cli import main
from latentfusion.codec import Codec
from latentfusion.experiments import convergence_curve, evaluate_mesh, extract_mesh, fuse_sequence
from latentfusion.fusion import FusionConfig, local_fuse
from latentfusion.grid import trilinear_corners
from latentfusion.mesh import f1_score
from latentfusion.nn import finite_diff_check
from latentfusion.volume import ImplicitNeuralVolume

from conftest import ROOM_SEEDS

EVERY = 5  # every 5th of the 60 room-v1 frames
SAMPLES = 100_000  # points sampled per mesh for metrics
THRESHOLDS = (0.01, 0.025, 0.05)
NEURAL_ARMS = ("bnv", "local-only", "global-random-init")


def verdict(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    log.append(line)
    assert ok, line


def f1_table(metrics):
    return {t: round(m["f1"], 2) for t, m in metrics.items()}


# 1 ---------------------------------------------------------------------------

def test_c1_f1_arithmetic(acceptance_log):
    triples = [(68.34, 70.01, 69.17), (87.53, 94.77, 91.01), (92.57, 94.19, 93.37)]
    errs = [abs(f1_score(a, c) - f) for a, c, f in triples]
    verdict(acceptance_log, 1, max(errs) <= 0.01,
            "F1 of published (accuracy, completeness) pairs: " +
            ", ".join(f"{f1_score(a, c):.4f} vs {f}" for a, c, f in triples) + " (tol 0.01)")


# 2 ---------------------------------------------------------------------------

H = 1e-5  # central-difference step


def activation_pattern(net, rows):
    _, cache = net.forward(rows)
    return [z > 0 for z, layer in zip(cache.pre, net.layers) if layer.activation == "relu"]


def stencil_crosses_kink(net, rows, h=H):
    """True when perturbing any input entry by +-h flips a ReLU, making central differences invalid."""
    base = activation_pattern(net, rows)
    for i, j in np.ndindex(*rows.shape):
        for sign in (1.0, -1.0):
            moved = rows.copy()
            moved[i, j] += sign * h
            if any(np.any(a != b) for a, b in zip(activation_pattern(net, moved), base)):
                return True
    return False


def decoder_instance(rng, codec):
    lat, x = rng.normal(size=8), rng.uniform(-1, 1, size=3)
    if stencil_crosses_kink(codec.decoder, np.concatenate([lat, x])[None]):
        return None
    _, dl, dx = codec.decode_point_grad(lat, x)
    return max(finite_diff_check(lambda v: codec.decode_point(v, x), dl, lat, H),
               finite_diff_check(lambda v: codec.decode_point(lat, v), dx, x, H))


def encoder_instance(rng, codec):
    k = int(rng.integers(1, 8))
    nrm = rng.normal(size=(k, 3))
    patch = np.concatenate([rng.uniform(-1, 1, size=(k, 3)), nrm / np.linalg.norm(nrm, axis=1, keepdims=True)], 1)
    if stencil_crosses_kink(codec.encoder, patch):
        return None
    c = rng.normal(size=8)
    _, cache = codec.encode_batch(patch, np.zeros(k, np.int64), 1)
    dp, _ = codec.encode_backward(cache, c[None])
    return finite_diff_check(lambda p: float(codec.encode_patch(p) @ c), dp, patch, H)


def volume_instance(rng, codec):
    vol = ImplicitNeuralVolume(0.02, 8)
    ijk = np.stack(np.meshgrid(*[np.arange(2)] * 3, indexing="ij"), -1).reshape(-1, 3)
    rows = vol.allocate(ijk)
    vol.latents[rows] = rng.normal(size=(8, 8))
    vol.weights[rows] = 1.0
    q = rng.uniform(0.0, 0.02, size=3)
    local = (q - vol.centers(ijk)) / codec.patch_radius
    if stencil_crosses_kink(codec.decoder, np.concatenate([vol.latents[rows], local], 1)):
        return None
    grads = vol.decode_sdf_backward(codec, q, 1.0)
    g = np.stack([grads[tuple(int(v) for v in k)] for k in ijk])

    def f(lats):
        old = vol.latents[rows].copy()
        vol.latents[rows] = lats
        s = vol.decode_sdf(codec, q)
        vol.latents[rows] = old
        return s

    return finite_diff_check(f, g, vol.latents[rows].copy(), H)


def test_c2_gradients(acceptance_log):
    n = 100
    results = {}
    for name, make in (("decoder", decoder_instance), ("encoder", encoder_instance),
                       ("decode_sdf_backward", volume_instance)):
        errs, skipped, seed = [], 0, 0
        while len(errs) < n:
            e = make(np.random.default_rng(seed), Codec.create(seed=seed))
            seed += 1
            if e is None:
                skipped += 1
            else:
                errs.append(e)
        results[name] = (max(errs), skipped)
    worst = max(e for e, _ in results.values())
    verdict(acceptance_log, 2, worst < 1e-6,
            f"max relative FD error (h=1e-5) over {n} instances each: " +
            ", ".join(f"{k} {e:.2e}" for k, (e, _) in results.items()) +
            " (tol 1e-6); instances whose FD stencil flips a ReLU were resampled: " +
            ", ".join(f"{k} {s}" for k, (_, s) in results.items()))


# 3 ---------------------------------------------------------------------------

def blend_in_cell(vol, codec, base, x):
    """Trilinear blend over the cell with lowest corner ``base`` (N, 3), evaluated at ``x`` (N, 3)."""
    frac = (x - vol.centers(base)) / vol.voxel_size
    out = np.zeros(len(x))
    for c in np.ndindex(2, 2, 2):
        ijk = base + np.array(c)
        w = np.prod(np.where(np.array(c, bool), frac, 1.0 - frac), axis=1)
        lat = vol.latents[vol.grid.lookup(ijk)]
        s, _ = codec.decode_batch(lat, (x - vol.centers(ijk)) / codec.patch_radius)
        out += w * s * codec.patch_radius
    return out


def test_c3_interpolation(acceptance_log):
    rng = np.random.default_rng(0)
    n = 1000
    origin = np.array([0.013, -0.4, 1.1])
    vs = 0.02
    x = origin + rng.uniform(-5, 5, size=(n, 3))
    _, w = trilinear_corners(x, origin, vs)
    unity = float(np.max(np.abs(w.sum(axis=1) - 1.0)))
    negative = bool(np.any(w < 0))

    ijk = rng.integers(-1000, 1000, size=(n, 3))
    idx, w = trilinear_corners(origin + vs * ijk, origin, vs)
    at_center = np.all(idx == ijk[:, None, :], axis=2)
    delta = float(max(np.max(np.abs(np.sum(w * at_center, axis=1) - 1.0)), np.max(np.where(at_center, 0.0, w))))

    vol = ImplicitNeuralVolume(vs, 8, origin)
    block = np.stack(np.meshgrid(*[np.arange(5)] * 3, indexing="ij"), -1).reshape(-1, 3)
    rows = vol.allocate(block)
    vol.latents[rows] = rng.normal(size=(len(rows), 8))
    vol.weights[rows] = 1.0
    codec = Codec.create(seed=0)
    axis = rng.integers(3, size=n)
    face = rng.integers(1, 4, size=n)
    local = rng.uniform(0.0, 4.0, size=(n, 3))
    local[np.arange(n), axis] = face
    xq = origin + vs * local
    right = np.floor(local).astype(np.int64)
    right[np.arange(n), axis] = face
    left = right.copy()
    left[np.arange(n), axis] -= 1
    one_sided = float(np.max(np.abs(blend_in_cell(vol, codec, left, xq) - blend_in_cell(vol, codec, right, xq))))
    eps = np.zeros((n, 3))
    eps[np.arange(n), axis] = 5e-12
    straddle = float(np.nanmax(np.abs(vol.decode_sdf_batch(codec, xq - eps) - vol.decode_sdf_batch(codec, xq + eps))))
    ok = unity <= 1e-12 and not negative and delta <= 1e-12 and one_sided <= 1e-9 and straddle <= 1e-9
    verdict(acceptance_log, 3, ok,
            f"{n} queries each: partition of unity {unity:.1e} (tol 1e-12), center delta {delta:.1e} (tol 1e-12), "
            f"face one-sided limits {one_sided:.1e} and 1e-11 straddle {straddle:.1e} (tol 1e-9)")


# 4 ---------------------------------------------------------------------------

def single(lat, w):
    v = ImplicitNeuralVolume(0.02, 8)
    rows = v.allocate([[0, 0, 0]])
    v.latents[rows] = lat
    v.weights[rows] = w
    return v


def test_c4_fusion_algebra(acceptance_log):
    rng = np.random.default_rng(0)
    cfg = FusionConfig()
    uncapped = FusionConfig(weight_cap=1e12)
    zero_prior = assoc = idem = 0.0
    monotone = capped = True
    for _ in range(1000):
        a, b, prior = rng.normal(size=(3, 8))
        w1, w2, w0 = rng.uniform(0.5, 50, size=3)
        vol = ImplicitNeuralVolume(0.02, 8)
        local_fuse(vol, single(a, w1), cfg)
        zero_prior = max(zero_prior, float(np.max(np.abs(vol.latents[0] - a))), abs(vol.weights[0] - w1))
        one, two = single(prior, w0), single(prior, w0)
        local_fuse(one, single((w1 * a + w2 * b) / (w1 + w2), w1 + w2), uncapped)
        local_fuse(two, single(a, w1), uncapped)
        local_fuse(two, single(b, w2), uncapped)
        assoc = max(assoc, float(np.max(np.abs(one.latents - two.latents))))
        rep = ImplicitNeuralVolume(0.02, 8)
        prev = 0.0
        for _ in range(int(rng.integers(2, 8))):
            local_fuse(rep, single(a, w1), cfg)
            idem = max(idem, float(np.max(np.abs(rep.latents[0] - a))))
            monotone &= rep.weights[0] >= prev
            capped &= rep.weights[0] <= cfg.weight_cap
            prev = rep.weights[0]
    ok = zero_prior == 0.0 and assoc <= 1e-12 and idem <= 1e-12 and monotone and capped
    verdict(acceptance_log, 4, ok,
            f"1000 trials: zero-prior identity err {zero_prior:.1e} (exact), split-merge {assoc:.1e} (tol 1e-12), "
            f"repeat-fuse drift {idem:.1e} (tol 1e-12), weights monotone={monotone} capped at 100={capped}")


# 5 ---------------------------------------------------------------------------

def test_c5_codec_training(acceptance_log, desk_training):
    result, held_out = desk_training
    r = result.codec.patch_radius
    curve = result.loss_curve
    ok = held_out < 0.25 * r and curve[-1] < 0.5 * curve[0]
    verdict(acceptance_log, 5, ok,
            f"held-out mean |SDF error| {1000 * held_out:.2f} mm (< {1000 * 0.25 * r:.2f} mm), "
            f"epoch loss {1000 * curve[0]:.2f} -> {1000 * curve[-1]:.2f} mm (ratio {curve[-1] / curve[0]:.2f} < 0.5)")


# 6 ---------------------------------------------------------------------------

def test_c6_noise_free_room(acceptance_log, room_clean, trained_codec):
    f1 = {}
    for method in ("tsdf", "bnv"):
        res = fuse_sequence(room_clean.frames, method, trained_codec, every=EVERY, seed=0)
        mesh = extract_mesh(res.volume, trained_codec)
        f1[method] = evaluate_mesh(mesh, room_clean.gt_mesh, (0.025,), SAMPLES, seed=0)["0.025"]["f1"]
    verdict(acceptance_log, 6, min(f1.values()) >= 95.0,
            "noise-free room-v1, every 5th frame, F1@2.5cm: " +
            ", ".join(f"{k} {v:.2f}" for k, v in f1.items()) + " (need >= 95)")


# 7 and 9 ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation(room_noisy, trained_codec):
    """{seed: {method: metrics by threshold}} on default-noise room-v1."""
    out = {}
    for seed in ROOM_SEEDS:
        scene = room_noisy[seed]
        arms = NEURAL_ARMS + (("tsdf",) if seed == ROOM_SEEDS[0] else ())
        out[seed] = {}
        for method in arms:
            res = fuse_sequence(scene.frames, method, trained_codec, every=EVERY, seed=seed)
            mesh = extract_mesh(res.volume, trained_codec)
            out[seed][method] = evaluate_mesh(mesh, scene.gt_mesh, THRESHOLDS, SAMPLES, seed=seed)
        print(f"seed {seed}: " + json.dumps({m: f1_table(v) for m, v in out[seed].items()}))
    return out


def test_c7_ablation_ordering(acceptance_log, ablation):
    f1 = {m: statistics.median(ablation[s][m]["0.025"]["f1"] for s in ROOM_SEEDS) for m in NEURAL_ARMS}
    margin_local = f1["bnv"] - f1["local-only"]
    margin_random = f1["bnv"] - f1["global-random-init"]
    verdict(acceptance_log, 7, margin_local >= 3.0 and margin_random >= 3.0,
            f"median F1@2.5cm over seeds {list(ROOM_SEEDS)}: bnv {f1['bnv']:.2f}, local-only {f1['local-only']:.2f}, "
            f"global-random-init {f1['global-random-init']:.2f}; margins {margin_local:+.2f} and "
            f"{margin_random:+.2f} (need >= 3)")


def test_c9_threshold_monotonicity(acceptance_log, ablation):
    bad = []
    for seed, methods in ablation.items():
        for method, m in methods.items():
            f = [m[f"{t:g}"]["f1"] for t in THRESHOLDS]
            if not f[0] <= f[1] <= f[2]:
                bad.append(f"{method}/seed{seed} {f}")
    rows = ", ".join(f"{m} {f1_table(v)}" for m, v in ablation[ROOM_SEEDS[0]].items())
    verdict(acceptance_log, 9, not bad,
            f"F1@1cm <= F1@2.5cm <= F1@5cm for every method and seed; seed 0: {rows}" +
            (f"; violations: {bad}" if bad else ""))


# 8 ---------------------------------------------------------------------------

def test_c8_convergence(acceptance_log, room_noisy, trained_codec):
    curves = {}
    for seed in ROOM_SEEDS:
        frames = room_noisy[seed].frames[::EVERY]
        gt = room_noisy[seed].gt_mesh
        curves[seed] = {init: convergence_curve(frames, trained_codec, gt, init, rounds=5, seed=seed, n=SAMPLES)
                        for init in ("local", "random")}
        print(f"seed {seed}: " + json.dumps({k: [round(c, 2) for c in v] for k, v in curves[seed].items()}))
    ordered = all(c["local"][-1] >= c["random"][-1] for c in curves.values())
    smooth = all(b >= a - 1.0 for c in curves.values() for a, b in zip(c["local"], c["local"][1:]))
    verdict(acceptance_log, 8, ordered and smooth,
            "completeness@2.5cm after 5 rounds, local vs random init: " +
            ", ".join(f"seed {s} {c['local'][-1]:.2f} vs {c['random'][-1]:.2f}" for s, c in curves.items()) +
            f"; local curve non-decreasing within 1 point: {smooth}")


# 10 --------------------------------------------------------------------------

DET_SPEC = {
    "name": "determinism",
    "primitives": [{"type": "plane", "point": [0, 0, 0], "normal": [0, 0, 1]},
                   {"type": "sphere", "center": [0.05, 0, 0.12], "radius": 0.12}],
    "trajectory": {"type": "orbit", "center": [0, 0, 0.6], "target": [0, 0, 0], "radius": 0.5},
    "frame_count": 4,
    "image_size": [80, 60],
    "intrinsics": {"fx": 70.0, "fy": 70.0, "cx": 39.5, "cy": 29.5},
    "bounds": [[-0.25, -0.25, -0.05], [0.25, 0.25, 0.3]],
}


def run_pipeline(root, codec_path):
    root.mkdir()
    (root / "spec.json").write_text(json.dumps(DET_SPEC))
    cmds = [
        ["synth", "--spec", str(root / "spec.json"), "--noise", "default", "--seed", "7", "--gt-step", "0.02",
         "--out", str(root / "data")],
        ["train-codec", "--out", str(root / "c.bnvc"), "--seed", "3", "--epochs", "1", "--seeds-per-view", "2"],
    ]
    for method in ("bnv", "global-random-init", "tsdf"):
        vol = root / f"{method}.vol"
        codec = [] if method == "tsdf" else ["--codec", str(codec_path)]
        cmds += [
            ["fuse", "--dataset", str(root / "data"), "--method", method, "--iters", "2", "--seed", "5",
             "--out", str(vol), *codec],
            ["extract", "--volume", str(vol), "--step", "0.01", "--out", str(root / f"{method}.ply"), *codec],
            ["eval", "--pred", str(root / f"{method}.ply"), "--gt", str(root / "data" / "gt.ply"),
             "--threshold", "0.01", "0.025", "--samples", "20000", "--seed", "1",
             "--report", str(root / f"{method}.json")],
        ]
    for argv in cmds:
        assert main(argv) == 0, argv
    outputs = sorted(p for p in root.rglob("*") if p.is_file() and not p.name.endswith("stats.json"))
    return {p.relative_to(root): p.read_bytes() for p in outputs}


def test_c10_determinism(acceptance_log, tmp_path, trained_codec):
    codec_path = tmp_path / "trained.bnvc"
    dataio.save_codec(codec_path, trained_codec)
    a = run_pipeline(tmp_path / "a", codec_path)
    b = run_pipeline(tmp_path / "b", codec_path)
    differing = sorted(str(k) for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differing
    verdict(acceptance_log, 10, ok,
            f"two seeded runs of synth/train-codec/fuse/extract/eval: {len(a)} output files "
            f"(depth, trajectory, codec, volumes, meshes, reports) byte-identical" +
            (f"; differing: {differing}" if differing else ""))
