import math
from dataclasses import replace

import numpy as np
import pytest

import config
from action_codec import ActionVector, quantize
from exceptions import ConfigError
from toy_env import (
    VARIANT_KINDS,
    Scene,
    SceneObject,
    TaskSpec,
    VariantSpec,
    render,
    run_expert_episode,
    sample_scene,
    sample_variant_scene,
    scripted_expert,
    step,
    success,
)


def _scene(**kwargs):
    objects = (
        SceneObject("square", "red", 0.3, 0.3, 0.15),
        SceneObject("circle", "blue", 0.7, 0.7, 0.15),
    )
    return Scene(objects=objects, effector=(0.5, 0.5), **kwargs)


def test_step_clips_effector_to_table():
    scene = _scene()
    moved = step(scene, ActionVector(dx=0.6, dy=-0.6))
    assert moved.effector == (1.0, 0.0)


def test_noop_returns_same_scene():
    scene = _scene()
    assert step(scene, ActionVector(dz=0.5, yaw=1.0)) is scene


def test_grasp_carry_release():
    scene = replace(_scene(), effector=(0.31, 0.3))
    grasped = step(scene, ActionVector(gripper=1))
    assert grasped.held == 0
    carried = step(grasped, ActionVector(dx=0.1, dy=0.05, gripper=1))
    assert carried.objects[0].x == pytest.approx(0.4)
    assert carried.objects[0].y == pytest.approx(0.35)
    released = step(carried, ActionVector())
    assert released.held is None and released.gripper == 0
    assert released.objects[0].x == pytest.approx(0.4)


def test_grasp_misses_out_of_reach_objects():
    grasped = step(_scene(), ActionVector(gripper=1))
    assert grasped.held is None and grasped.gripper == 1


def test_success_predicates():
    reach = TaskSpec("Reach", "red square")
    assert not success(_scene(), reach)
    assert success(replace(_scene(), effector=(0.33, 0.3)), reach)

    pick = TaskSpec("Pick", "red square", success_radius=config.GRASP_RADIUS)
    assert success(replace(_scene(), effector=(0.3, 0.3), held=0, gripper=1), pick)

    place = TaskSpec("PlaceNear", "red square", "blue circle", config.PLACE_SUCCESS_RADIUS)
    near = _scene()
    near = replace(near, objects=(replace(near.objects[0], x=0.65, y=0.68), near.objects[1]))
    assert success(near, place)
    assert not success(replace(near, held=0, gripper=1), place)


def test_task_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec("PlaceNear", "red square")
    with pytest.raises(ConfigError):
        TaskSpec("Reach", "red square", "blue circle")
    with pytest.raises(ConfigError):
        TaskSpec("Stack", "red square")


@pytest.mark.parametrize("seed", range(10))
def test_sample_scene_layout(seed):
    scene, task = sample_scene(np.random.default_rng(seed), "train", "PlaceNear")
    identities = [(o.shape, o.color) for o in scene.objects]
    assert len(identities) == len(set(identities))
    assert config.OBJECTS_PER_SCENE[0] <= len(scene.objects) <= config.OBJECTS_PER_SCENE[1]
    points = [scene.effector_position] + [o.position for o in scene.objects]
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            assert np.linalg.norm(points[i] - points[j]) >= config.SPAWN_SEPARATION
    assert task.target == scene.objects[0].descriptor
    assert task.reference == scene.objects[1].descriptor
    assert scene.background in config.VISUAL_POOLS["train"]["backgrounds"]


def test_scripted_expert_emits_quantized_chunk():
    scene, task = sample_scene(np.random.default_rng(3), "train", "Pick")
    chunk = scripted_expert(scene, task, horizon=3)
    assert len(chunk) == 3
    for action in chunk:
        assert action.dx == quantize(action.dx)
        assert abs(action.dx) <= config.EXPERT_MAX_DELTA
        assert action.dz == 0.0 and action.yaw == 0.0


@pytest.mark.parametrize("kind", config.TASK_KINDS)
def test_expert_solves_training_scenes(kind):
    solved = 0
    trials = 30
    for seed in range(trials):
        scene, task = sample_scene(np.random.default_rng(seed), "train", kind)
        _, _, done = run_expert_episode(scene, task, horizon=2, max_steps=30)
        solved += done
    assert solved / trials >= 0.9


def test_expert_episode_records_each_policy_call():
    scene, task = sample_scene(np.random.default_rng(0), "train", "Reach")
    calls, final, done = run_expert_episode(scene, task, horizon=2, max_steps=30)
    assert done and success(final, task)
    assert calls[0][0] is scene
    assert all(len(chunk) == 2 for _, chunk in calls)


def test_render_is_deterministic_and_quantized():
    scene, _ = sample_scene(np.random.default_rng(5), "train", "Pick")
    a, b = render(scene).pixels, render(scene).pixels
    assert a.shape == (config.IMAGE_SIZE, config.IMAGE_SIZE, 3)
    assert np.array_equal(a, b)
    levels = a.astype(np.float64) * config.PIXEL_LEVELS
    assert np.allclose(levels, np.round(levels), atol=1e-3)


def test_render_shows_objects_and_effector():
    scene = _scene()
    pixels = render(scene).pixels
    row, col = int(0.3 * config.IMAGE_SIZE), int(0.3 * config.IMAGE_SIZE)
    assert np.allclose(pixels[row, col], config.PALETTE["red"], atol=1 / 255)
    centre = int(0.5 * config.IMAGE_SIZE)
    assert np.allclose(pixels[centre, centre], config.EFFECTOR_COLOR)
    closed = render(replace(scene, gripper=1)).pixels
    assert np.allclose(closed[centre, centre], 0.0)


def test_masked_background_and_lighting():
    masked = render(_scene(masked=True)).pixels
    assert np.allclose(masked[0, 0], config.MASK_COLOR)
    bright = render(_scene()).pixels
    dim = render(_scene(lighting=0.6)).pixels
    assert dim.mean() < bright.mean()


@pytest.mark.parametrize("kind", [k for k in VARIANT_KINDS if k != "Distractors"])
def test_variants_perturb_one_factor(kind):
    variant = VariantSpec(kind)
    base, _ = sample_scene(np.random.default_rng(11), "train", "Reach")
    scene, task = sample_variant_scene(np.random.default_rng(11), variant, "Reach")
    assert scene.objects == base.objects
    holdout = config.VISUAL_POOLS["holdout"]
    if kind == "RandomBackground":
        assert scene.background in holdout["backgrounds"]
    elif kind == "RandomTexture":
        assert scene.texture in holdout["textures"]
    elif kind == "LightingShift":
        assert holdout["lighting"][0] <= scene.lighting <= holdout["lighting"][1]
    elif kind == "MaskedBackground":
        assert scene.masked
    elif kind in ("Matching", "Paraphrase"):
        assert scene == base


def test_similar_distractors_share_an_attribute():
    variant = VariantSpec("Distractors", n=2, similar=True)
    assert variant.name == "Distractors2Similar"
    for seed in range(5):
        scene, task = sample_variant_scene(np.random.default_rng(seed), variant, "Pick")
        target = scene.objects[0]
        extras = scene.objects[-2:]
        assert all(o.shape == target.shape or o.color == target.color for o in extras)
        assert len(scene.find(task.target)) == 1


def test_variant_spec_validation():
    with pytest.raises(ConfigError):
        VariantSpec("Distractors")
    with pytest.raises(ConfigError):
        VariantSpec("Fog")
    with pytest.raises(ConfigError):
        VariantSpec.from_dict({"kind": "Matching", "strength": 2})
    spec = VariantSpec.from_dict({"kind": "Distractors", "n": 1})
    assert VariantSpec.from_dict(spec.to_dict()) == spec


def test_camera_jitter_shifts_objects_not_state():
    scene = _scene(camera_jitter=(0.05, 0.0))
    assert render(scene).pixels.shape == render(_scene()).pixels.shape
    assert not np.array_equal(render(scene).pixels, render(_scene()).pixels)
    assert math.isclose(scene.objects[0].x, 0.3)


@pytest.mark.slow
def test_descriptors_resolve_uniquely_over_many_scenes():
    for i in range(10000):
        rng = np.random.default_rng(i)
        kind = config.TASK_KINDS[i % len(config.TASK_KINDS)]
        scene, task = sample_scene(rng, "train", kind, distractors=2 * (i % 2), similar=i % 4 == 3)
        descriptors = [obj.descriptor for obj in scene.objects]
        assert len(set(descriptors)) == len(descriptors), f"scene {i}: {descriptors}"
        assert scene.index_of(task.target) == 0
        if task.reference is not None:
            assert scene.index_of(task.reference) == 1
