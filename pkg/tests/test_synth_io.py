import json

import numpy as np
import pytest

from latentfusion import dataio
from latentfusion.codec import Codec
from latentfusion.dataio import DatasetError, FormatError
from latentfusion.mesh import TriangleMesh
from latentfusion.synth import NoiseModel, SyntheticSceneSpec, synth_scene
from latentfusion.tsdf import TsdfVolume
from latentfusion.volume import ImplicitNeuralVolume

SMALL = {
    "name": "small",
    "primitives": [{"type": "plane", "point": [0, 0, 0], "normal": [0, 0, 1]},
                   {"type": "sphere", "center": [0, 0, 0.2], "radius": 0.2}],
    "trajectory": {"type": "orbit", "center": [0, 0, 1.0], "target": [0, 0, 0], "radius": 0.8},
    "frame_count": 3,
    "image_size": [64, 48],
    "bounds": [[-0.3, -0.3, -0.05], [0.3, 0.3, 0.45]],
}


def small_spec(**kw):
    return SyntheticSceneSpec.from_dict({**SMALL, **kw})


def unit_cube():
    v = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    return TriangleMesh(v, [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))])


def test_noiseless_render_matches_analytic_plane():
    spec = small_spec(primitives=[{"type": "plane", "point": [0, 0, 0], "normal": [0, 0, 1]}])
    scene = synth_scene(spec, NoiseModel(), with_mesh=False)
    for frame in scene.frames:
        intr, pose = frame.intrinsics, frame.pose
        vv, uu = np.mgrid[0:intr.height, 0:intr.width]
        d_cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu, float)], -1)
        d_world = d_cam @ pose.R.T
        with np.errstate(divide="ignore"):
            z = -pose.translation[2] / d_world[..., 2]
        hit = frame.depth.data > 0
        assert hit.mean() > 0.5
        assert np.max(np.abs(frame.depth.data[hit] - z[hit])) < 1e-4


def test_outlier_count_is_binomial():
    depth = np.full((240, 320), 2.0)
    out = NoiseModel(outlier_rate=0.01).apply(depth, np.random.default_rng(0))
    assert abs(int(np.sum(out != 2.0)) - 768) <= 100


def test_quantization_grid():
    depth = np.random.default_rng(0).uniform(0.5, 4.0, size=(48, 64))
    out = NoiseModel(sigma0=0.01, quantization=0.005).apply(depth, np.random.default_rng(1))
    units = out / 0.005
    assert np.max(np.abs(units - np.round(units))) < 1e-9


def test_noise_model_validation_and_parsing(tmp_path):
    with pytest.raises(ValueError):
        NoiseModel(sigma0=-1.0)
    with pytest.raises(ValueError):
        NoiseModel(outlier_rate=1.5)
    assert NoiseModel.parse("none") == NoiseModel()
    assert NoiseModel.parse("default") == NoiseModel.default()
    assert NoiseModel.parse("sigma0=0.002,seed=4") == NoiseModel(sigma0=0.002, seed=4)
    p = tmp_path / "noise.json"
    p.write_text(json.dumps({"outlier_rate": 0.1}))
    assert NoiseModel.parse(str(p)).outlier_rate == 0.1


def test_spec_validation_and_builtin():
    with pytest.raises(ValueError):
        small_spec(primitives=[])
    with pytest.raises(ValueError):
        small_spec(frame_count=0)
    room = SyntheticSceneSpec.builtin("room-v1")
    assert room.frame_count == 60 and room.image_size == (320, 240)
    assert len(room.poses()) == 60


def test_empty_frame_warns(caplog):
    spec = small_spec(trajectory={"type": "waypoints", "waypoints": [{"eye": [0, 0, 1], "target": [0, 0, 2]}]},
                      frame_count=1)
    scene = synth_scene(spec, NoiseModel(), with_mesh=False)
    assert len(scene.frames) == 1 and not scene.frames[0].depth.data.any()
    assert "sees no geometry" in caplog.text


def test_synth_is_seeded():
    a = synth_scene(small_spec(), NoiseModel.default(3), with_mesh=False)
    b = synth_scene(small_spec(), NoiseModel.default(3), with_mesh=False)
    c = synth_scene(small_spec(), NoiseModel.default(4), with_mesh=False)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa.depth.data, fb.depth.data)
    assert not np.array_equal(a.frames[0].depth.data, c.frames[0].depth.data)


def test_gt_mesh_of_small_scene():
    scene = synth_scene(small_spec(), NoiseModel(), gt_step=0.02)
    assert len(scene.gt_mesh) > 0
    lo, hi = np.array(SMALL["bounds"])
    assert np.all(scene.gt_mesh.vertices >= lo - 1e-9) and np.all(scene.gt_mesh.vertices <= hi + 1e-9)


def test_dataset_roundtrip_is_bit_exact(tmp_path):
    scene = synth_scene(small_spec(), NoiseModel.default(0), with_mesh=False)
    dataio.save_dataset(tmp_path, scene.frames, scene.intrinsics)
    m = dataio.load_dataset(tmp_path)
    assert m.indices == [0, 1, 2]
    assert m.intrinsics == scene.intrinsics
    for orig, loaded in zip(scene.frames, m.frames()):
        np.testing.assert_array_equal(loaded.depth.data, orig.depth.data)
        np.testing.assert_array_equal(loaded.pose.rotation, orig.pose.rotation)
        np.testing.assert_array_equal(loaded.pose.translation, orig.pose.translation)
    assert [f.pose.translation.tolist() for f in m.frames(2)] == \
        [scene.frames[0].pose.translation.tolist(), scene.frames[2].pose.translation.tolist()]


def test_short_trajectory_line_cites_line_number(tmp_path):
    scene = synth_scene(small_spec(), NoiseModel(), with_mesh=False)
    dataio.save_dataset(tmp_path, scene.frames, scene.intrinsics)
    lines = (tmp_path / "trajectory.txt").read_text().splitlines()
    lines[1] = " ".join(lines[1].split()[:7])
    (tmp_path / "trajectory.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match="line 2"):
        dataio.load_dataset(tmp_path)


def test_missing_and_wrong_size_depth(tmp_path):
    scene = synth_scene(small_spec(), NoiseModel(), with_mesh=False)
    dataio.save_dataset(tmp_path, scene.frames, scene.intrinsics)
    dataio.write_depth_png(tmp_path / "depth" / "frame_000001.png", np.ones((10, 10)), 0.001)
    m = dataio.load_dataset(tmp_path)
    with pytest.raises(DatasetError, match="frame_000001.png"):
        list(m.frames())
    (tmp_path / "depth" / "frame_000002.png").unlink()
    with pytest.raises(DatasetError, match="frame_000002.png"):
        dataio.load_dataset(tmp_path)


def test_depth_out_of_16bit_range():
    with pytest.raises(DatasetError):
        dataio.depth_to_units(np.array([[70.0]]), 0.001)


def test_codec_roundtrip_is_bit_identical(tmp_path):
    codec = Codec.create(seed=5)
    path = tmp_path / "codec.bnvc"
    dataio.save_codec(path, codec)
    loaded = dataio.load_codec(path)
    assert loaded.patch_radius == codec.patch_radius
    for a, b in zip(codec.params(), loaded.params()):
        np.testing.assert_array_equal(b, a.astype(np.float32).astype(np.float64))
    # weights stored once are reproduced bit for bit
    assert dataio.codec_to_bytes(loaded) == path.read_bytes()
    x = np.random.default_rng(0).normal(size=(5, 11))
    np.testing.assert_array_equal(loaded.decoder.predict(x), dataio.load_codec(path).decoder.predict(x))


def test_bad_magic_and_version(tmp_path):
    data = dataio.codec_to_bytes(Codec.create())
    with pytest.raises(FormatError, match="magic"):
        dataio.codec_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        dataio.codec_from_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(FormatError):
        dataio.codec_from_bytes(data[:-3])
    with pytest.raises(FormatError, match="magic"):
        dataio.volume_from_bytes(b"XXXX" + dataio.volume_to_bytes(ImplicitNeuralVolume())[4:])


def test_neural_volume_roundtrip():
    rng = np.random.default_rng(0)
    vol = ImplicitNeuralVolume(0.02, 8, origin=(0.1, -0.2, 0.3))
    rows = vol.allocate(rng.integers(-50, 50, size=(40, 3)))
    vol.latents[rows] = rng.normal(size=(len(rows), 8)).astype(np.float32)
    vol.weights[rows] = rng.integers(1, 100, size=len(rows))
    data = dataio.volume_to_bytes(vol)
    back = dataio.volume_from_bytes(data)
    assert isinstance(back, ImplicitNeuralVolume)
    assert back.voxel_size == vol.voxel_size and np.array_equal(back.origin, vol.origin)
    ijk = vol.indices()
    np.testing.assert_array_equal(back.latents[back.grid.lookup(ijk)], vol.latents)
    np.testing.assert_array_equal(back.weights[back.grid.lookup(ijk)], vol.weights)
    assert dataio.volume_to_bytes(back) == data


def test_tsdf_volume_roundtrip(tmp_path):
    vol = TsdfVolume(0.02)
    rows = vol.allocate(np.array([[0, 0, 0], [1, 2, 3]]))
    vol.tsdf[rows] = [0.015625, -0.03125]
    vol.weights[rows] = [3.0, 1.0]
    dataio.save_volume(tmp_path / "v.tsdv", vol)
    assert (tmp_path / "v.tsdv").read_bytes()[:4] == b"TSDV"
    back = dataio.load_volume(tmp_path / "v.tsdv")
    assert isinstance(back, TsdfVolume)
    np.testing.assert_array_equal(back.tsdf[back.grid.lookup(vol.indices())], vol.tsdf)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_unit_cube(tmp_path, binary):
    path = tmp_path / "cube.ply"
    dataio.save_ply(path, unit_cube(), binary=binary)
    back = dataio.load_ply(path)
    assert back.vertices.shape == (8, 3) and back.triangles.shape == (12, 3)
    np.testing.assert_array_equal(back.triangles, unit_cube().triangles)


def test_ply_precision(tmp_path):
    rng = np.random.default_rng(0)
    mesh = TriangleMesh(rng.normal(size=(30, 3)), rng.integers(0, 30, size=(20, 3)))
    for binary in (True, False):
        dataio.save_ply(tmp_path / "m.ply", mesh, binary=binary)
        back = dataio.load_ply(tmp_path / "m.ply")
        assert np.max(np.abs(back.vertices - mesh.vertices)) <= (0.0 if binary else 1e-6)


def test_ply_bad_magic(tmp_path):
    (tmp_path / "x.ply").write_bytes(b"XXXX\n")
    with pytest.raises(FormatError, match="magic"):
        dataio.load_ply(tmp_path / "x.ply")
