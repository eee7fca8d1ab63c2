import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentfusion.codec import Codec, CodecError
from latentfusion.nn import finite_diff_check
from latentfusion.shapes import Plane, Sphere
from latentfusion.training import (PatchConfig, TrainConfig, evaluate_codec, generate_patch_dataset, train_codec)


def random_patch(seed, k=10):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=(k, 3))
    return np.concatenate([rng.uniform(-1, 1, size=(k, 3)), n / np.linalg.norm(n, axis=1, keepdims=True)], 1)


def plane_patch(n=7):
    g = np.linspace(-0.9, 0.9, n)
    u, v = np.meshgrid(g, g)
    pos = np.stack([u.ravel(), v.ravel(), np.zeros(n * n)], 1)
    return np.concatenate([pos, np.tile([0.0, 0.0, 1.0], (n * n, 1))], 1)


TINY = PatchConfig(seeds_per_view=4, views_per_shape=1, queries_per_patch=40, max_points_per_patch=32)


def test_single_point_latent_is_encoder_output():
    codec = Codec.create(seed=0)
    p = random_patch(0, 1)
    np.testing.assert_allclose(codec.encode_patch(p), codec.encoder.forward(p)[0][0], atol=1e-15)


def test_encoder_is_permutation_and_duplication_invariant():
    codec = Codec.create(seed=1)
    p = random_patch(1, 12)
    lat = codec.encode_patch(p)
    np.testing.assert_allclose(codec.encode_patch(p[::-1]), lat, atol=1e-14)
    np.testing.assert_allclose(codec.encode_patch(np.concatenate([p, p])), lat, atol=1e-14)


def test_empty_patch_and_wrong_latent_dim():
    codec = Codec.create()
    with pytest.raises(CodecError):
        codec.encode_patch(np.zeros((0, 6)))
    with pytest.raises(CodecError):
        codec.decode_point(np.zeros(5), np.zeros(3))


def test_inference_encoding_matches_training_path():
    codec = Codec.create(seed=2)
    feats = np.concatenate([random_patch(s, 5) for s in range(4)])
    segs = np.repeat(np.arange(4), 5)
    exact, _ = codec.encode_batch(feats, segs, 4)
    np.testing.assert_allclose(codec.encode_inference(feats, segs, 4, dtype=np.float64), exact, atol=1e-13)
    np.testing.assert_allclose(codec.encode_inference(feats, segs, 4), exact, atol=1e-4)


def test_zero_decoder_gives_zero_sdf():
    codec = Codec.create()
    for layer in codec.decoder.layers:
        layer.weight[:] = 0.0
    codec.decoder.touch()
    assert codec.decode_point(np.ones(8), np.array([0.1, 0.2, 0.3])) == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_decode_point_gradients(seed):
    codec = Codec.create(seed=seed % 7)
    rng = np.random.default_rng(seed)
    lat, x = rng.normal(size=8), rng.uniform(-1, 1, size=3)
    _, dl, dx = codec.decode_point_grad(lat, x)
    assert finite_diff_check(lambda v: codec.decode_point(v, x), dl, lat) < 1e-6
    assert finite_diff_check(lambda v: codec.decode_point(lat, v), dx, x) < 1e-6


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_encoder_gradient_wrt_points(seed):
    codec = Codec.create(seed=seed % 5)
    p = random_patch(seed, 6)
    c = np.random.default_rng(seed).normal(size=8)
    _, cache = codec.encode_batch(p, np.zeros(6, np.int64), 1)
    dp, _ = codec.encode_backward(cache, c[None])
    assert finite_diff_check(lambda q: float(codec.encode_patch(q) @ c), dp, p) < 1e-6


def test_zero_noise_plane_dataset_is_exact():
    cfg = PatchConfig(seeds_per_view=5, views_per_shape=1, queries_per_patch=1000, surface_noise_sigma=0.0,
                      normal_perturb_sigma=0.0, max_points_per_patch=32)
    data = generate_patch_dataset([Plane([0, 0, 0], [0, 0, 1])], cfg, seed=0)
    assert data
    r = cfg.patch_radius
    for s in data:
        assert len(s.query_sdf) == 1000
        assert np.all(np.abs(s.query_sdf) <= r)
        np.testing.assert_allclose(s.local_points[:, 3:], np.tile([0.0, 0.0, 1.0], (len(s.local_points), 1)),
                                   atol=1e-6)
        # patch points lie on z=0 up to the sphere-tracing tolerance
        assert np.ptp(s.local_points[:, 2]) * r < 1e-6
        center_z = -s.local_points[0, 2] * r
        np.testing.assert_allclose(s.query_sdf, np.clip(s.query_points[:, 2] * r + center_z, -r, r), atol=1e-6)


def test_sphere_patch_labels_are_bounded():
    data = generate_patch_dataset([Sphere([0, 0, 0], 0.5)], TINY, seed=1)
    for s in data:
        assert np.all(np.abs(s.query_sdf) <= TINY.patch_radius)
        assert np.all(np.abs(s.local_points[:, :3]) <= 1.0 + 1e-12)


def test_dataset_generation_is_seeded():
    a = generate_patch_dataset([Sphere([0, 0, 0], 0.3)], TINY, seed=5)
    b = generate_patch_dataset([Sphere([0, 0, 0], 0.3)], TINY, seed=5)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.local_points, y.local_points)
        np.testing.assert_array_equal(x.query_sdf, y.query_sdf)


def test_training_with_zero_lr_keeps_weights():
    data = generate_patch_dataset([Plane([0, 0, 0], [0, 0, 1])], TINY, seed=0)
    init = Codec.create(seed=0)
    res = train_codec(data, TrainConfig(epochs=2, lr=0.0, seed=0), codec=init.copy())
    for a, b in zip(init.params(), res.codec.params()):
        np.testing.assert_array_equal(a, b)


def test_training_is_bit_reproducible():
    data = generate_patch_dataset([Sphere([0, 0, 0], 0.3)], TINY, seed=0)
    cfg = TrainConfig(epochs=2, batch_size=4, queries_per_step=16, seed=3)
    a, b = train_codec(data, cfg), train_codec(data, cfg)
    assert a.loss_curve == b.loss_curve
    for x, y in zip(a.codec.params(), b.codec.params()):
        np.testing.assert_array_equal(x, y)


def test_empty_dataset_is_rejected():
    with pytest.raises(ValueError):
        train_codec([], TrainConfig())


def test_trained_codec_plane_oracle(trained_codec):
    r = trained_codec.patch_radius
    lat = trained_codec.encode_patch(plane_patch())
    above = trained_codec.decode_point(lat, np.array([0.0, 0.0, 0.5]))
    below = trained_codec.decode_point(lat, np.array([0.0, 0.0, -0.5]))
    assert above == pytest.approx(0.5 * r, rel=0.2)
    assert below < 0


def test_trained_codec_beats_zero_predictor_on_planes(trained_codec):
    cfg = PatchConfig(seeds_per_view=10, views_per_shape=2, surface_noise_sigma=0.0, normal_perturb_sigma=0.0,
                      max_points_per_patch=64)
    data = generate_patch_dataset([Plane([0, 0, 0], [0.2, 0.1, 1.0])], cfg, seed=77)
    zero_l1 = float(np.mean(np.concatenate([np.abs(s.query_sdf) for s in data])))
    assert evaluate_codec(trained_codec, data) < zero_l1


def test_training_loss_curve_is_non_increasing_within_jitter(desk_training):
    curve = desk_training[0].loss_curve
    assert all(b <= 1.05 * a for a, b in zip(curve, curve[1:]))
