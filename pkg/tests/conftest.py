"""Session fixtures shared by the unit and acceptance suites.

The trained codec and the rendered room scenes are expensive, so each is
built once per session and reused.
"""

import pytest

from latentfusion.codec import Codec
from latentfusion.synth import NoiseModel, SyntheticSceneSpec, synth_scene
from latentfusion.training import (default_shapes, desk_scale_configs, evaluate_codec, generate_patch_dataset,
                                   train_codec)

ROOM_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def desk_training():
    """(TrainResult, held-out mean |SDF error|) of the desk-scale codec, seed 0."""
    patch_cfg, train_cfg = desk_scale_configs(seed=0)
    shapes = default_shapes()
    data = generate_patch_dataset(shapes, patch_cfg, seed=0)
    held_out = generate_patch_dataset(shapes, desk_scale_configs(held_out=True)[0], seed=10_000)
    result = train_codec(data, train_cfg, patch_cfg.patch_radius)
    return result, evaluate_codec(result.codec, held_out)


@pytest.fixture(scope="session")
def trained_codec(desk_training) -> Codec:
    return desk_training[0].codec


@pytest.fixture(scope="session")
def room_spec() -> SyntheticSceneSpec:
    return SyntheticSceneSpec.builtin("room-v1")


@pytest.fixture(scope="session")
def room_clean(room_spec):
    return synth_scene(room_spec, NoiseModel())


@pytest.fixture(scope="session")
def room_noisy(room_spec, room_clean):
    """Default-noise renders of room-v1 for each seed; the ground-truth mesh is shared."""
    scenes = {}
    for seed in ROOM_SEEDS:
        s = synth_scene(room_spec, NoiseModel.default(seed), with_mesh=False)
        s.gt_mesh = room_clean.gt_mesh
        scenes[seed] = s
    return scenes



_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
