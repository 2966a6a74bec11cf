"""
Procedural 2-D tabletop: scene sampling, physics step, rasterizer, success
checks, the scripted expert and the visual/language perturbation variants.

Coordinates live in the unit square with ``y`` growing downwards, so "above"
means a smaller ``y`` and row ``i`` of the image covers ``y in [i/H, (i+1)/H)``.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from action_codec import ActionChunk, ActionVector, quantize_action
from encoders import ImageObservation
from exceptions import ConfigError, SceneSamplingError
from paraphrase import canonical_instruction, descriptor

logger = logging.getLogger('vla.toy_env')

VARIANT_KINDS = (
    "Matching",
    "MaskedBackground",
    "RandomBackground",
    "RandomTexture",
    "Distractors",
    "CameraJitter",
    "LightingShift",
    "Paraphrase",
)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    x: float
    y: float
    size: float

    @property
    def descriptor(self) -> str:
        return descriptor(self.color, self.shape)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Scene:
    objects: Tuple[SceneObject, ...]
    effector: Tuple[float, float]
    held: Optional[int] = None
    gripper: int = 0
    background: int = 0
    texture: int = 0
    camera_jitter: Tuple[float, float] = (0.0, 0.0)
    lighting: float = 1.0
    masked: bool = False

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        for obj in self.objects:
            if not (0.0 <= obj.x <= 1.0 and 0.0 <= obj.y <= 1.0):
                raise ValueError(f"object {obj.descriptor} outside the table: ({obj.x}, {obj.y})")
        if self.held is not None and not 0 <= self.held < len(self.objects):
            raise ValueError(f"held index {self.held} out of range")

    def find(self, desc: str) -> List[int]:
        return [i for i, obj in enumerate(self.objects) if obj.descriptor == desc]

    def index_of(self, desc: str) -> int:
        matches = self.find(desc)
        if len(matches) != 1:
            raise ValueError(f"descriptor {desc!r} resolves to {len(matches)} objects")
        return matches[0]

    @property
    def effector_position(self) -> np.ndarray:
        return np.array(self.effector)


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    target: str
    reference: Optional[str] = None
    success_radius: float = config.REACH_SUCCESS_RADIUS

    def __post_init__(self):
        if self.kind not in config.TASK_KINDS:
            raise ConfigError(f"Unknown task kind {self.kind!r}")
        if (self.kind == "PlaceNear") != (self.reference is not None):
            raise ConfigError("exactly the PlaceNear task carries a reference object")

    @property
    def instruction(self) -> str:
        return canonical_instruction(self.kind, self.target, self.reference)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "target": self.target, "reference": self.reference,
                "success_radius": self.success_radius}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskSpec":
        return cls(data["kind"], data["target"], data.get("reference"), float(data["success_radius"]))


def success_radius_for(kind: str) -> float:
    return {
        "Reach": config.REACH_SUCCESS_RADIUS,
        "Pick": config.GRASP_RADIUS,
        "PlaceNear": config.PLACE_SUCCESS_RADIUS,
    }[kind]


@dataclass(frozen=True)
class VariantSpec:
    """A perturbation regime; every kind but Matching perturbs one factor from the holdout pool."""

    kind: str = "Matching"
    n: int = 0
    similar: bool = False

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"Unknown variant {self.kind!r}")
        if self.kind == "Distractors" and self.n < 1:
            raise ConfigError("Distractors variant needs n >= 1")

    @property
    def name(self) -> str:
        if self.kind == "Distractors":
            return f"Distractors{self.n}{'Similar' if self.similar else ''}"
        return self.kind

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "Distractors":
            out.update(n=self.n, similar=self.similar)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VariantSpec":
        unknown = set(data) - {"kind", "n", "similar"}
        if unknown:
            raise ConfigError(f"Unknown variant keys: {sorted(unknown)}")
        return cls(data["kind"], int(data.get("n", 0)), bool(data.get("similar", False)))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _visuals(rng: np.random.Generator, pool: str) -> Dict[str, Any]:
    spec = config.VISUAL_POOLS[pool]
    lo, hi = spec["lighting"]
    jitter = spec["camera_jitter"]
    return {
        "background": int(rng.choice(spec["backgrounds"])),
        "texture": int(rng.choice(spec["textures"])),
        "lighting": float(rng.uniform(lo, hi)) if hi > lo else float(lo),
        "camera_jitter": (
            (float(rng.uniform(-jitter, jitter)), float(rng.uniform(-jitter, jitter)))
            if jitter > 0 else (0.0, 0.0)
        ),
    }


def _place(rng: np.random.Generator, count: int, avoid: Sequence[np.ndarray] = ()) -> Optional[List[np.ndarray]]:
    lo, hi = config.SPAWN_MARGIN, 1.0 - config.SPAWN_MARGIN
    points: List[np.ndarray] = list(avoid)
    placed: List[np.ndarray] = []
    for _ in range(count):
        for _ in range(config.SPAWN_MAX_TRIES):
            candidate = rng.uniform(lo, hi, size=2)
            if all(np.linalg.norm(candidate - p) >= config.SPAWN_SEPARATION for p in points):
                points.append(candidate)
                placed.append(candidate)
                break
        else:
            return None
    return placed


def _pick_identities(rng: np.random.Generator, count: int, distractors: int,
                     similar: bool) -> List[Tuple[str, str]]:
    combos = [(s, c) for s in config.SHAPES for c in config.COLORS]
    order = rng.permutation(len(combos))
    chosen = [combos[i] for i in order[:count]]
    if distractors:
        target_shape, target_color = chosen[0]
        taken = set(chosen)
        pool = [c for c in combos if c not in taken]
        if similar:
            pool = [c for c in pool if c[0] == target_shape or c[1] == target_color]
        picks = rng.permutation(len(pool))[:distractors]
        chosen += [pool[i] for i in picks]
    return chosen


def sample_scene(
    rng: np.random.Generator,
    pool: str = "train",
    task_kind: str = "Pick",
    distractors: int = 0,
    similar: bool = False,
) -> Tuple[Scene, TaskSpec]:
    """
    Sample a solvable scene and its task.

    The first object is the target, the second the PlaceNear reference. Every
    object has a unique color+shape combination, objects and the effector are
    spawned at least ``SPAWN_SEPARATION`` apart.

    Args:
        rng (np.random.Generator): Episode stream
        pool (str): Visual pool, ``train`` or ``holdout``
        task_kind (str): Reach, Pick or PlaceNear
        distractors (int): Extra objects beyond the regular 2-3
        similar (bool): Distractors share the target's shape or color

    Returns:
        Tuple[Scene, TaskSpec]: The scene and its task

    Raises:
        SceneSamplingError: Rejection sampling did not find a layout
    """
    if pool not in config.VISUAL_POOLS:
        raise ConfigError(f"Unknown visual pool {pool!r}")
    if task_kind not in config.TASK_KINDS:
        raise ConfigError(f"Unknown task kind {task_kind!r}")
    lo, hi = config.OBJECTS_PER_SCENE
    count = int(rng.integers(lo, hi + 1))
    identities = _pick_identities(rng, count, distractors, similar)
    sizes = rng.uniform(*config.OBJECT_SIZE_RANGE, size=len(identities))
    positions = _place(rng, len(identities) + 1)
    if positions is None:
        raise SceneSamplingError(
            f"no layout for {len(identities)} objects after {config.SPAWN_MAX_TRIES} tries per object"
        )
    objects = tuple(
        SceneObject(shape, color, float(p[0]), float(p[1]), float(s))
        for (shape, color), p, s in zip(identities, positions[1:], sizes)
    )
    effector = (float(positions[0][0]), float(positions[0][1]))
    scene = Scene(objects=objects, effector=effector, **_visuals(rng, pool))
    target = objects[0].descriptor
    reference = objects[1].descriptor if task_kind == "PlaceNear" else None
    task = TaskSpec(task_kind, target, reference, success_radius_for(task_kind))
    return scene, task


def sample_variant_scene(
    rng: np.random.Generator, variant: VariantSpec, task_kind: str
) -> Tuple[Scene, TaskSpec]:
    """Sample a training-pool scene, then swap in the variant's holdout factor."""
    scene, task = sample_scene(
        rng, "train", task_kind,
        distractors=variant.n if variant.kind == "Distractors" else 0,
        similar=variant.similar,
    )
    holdout = _visuals(rng, "holdout")
    if variant.kind == "RandomBackground":
        scene = replace(scene, background=holdout["background"])
    elif variant.kind == "RandomTexture":
        scene = replace(scene, texture=holdout["texture"])
    elif variant.kind == "CameraJitter":
        scene = replace(scene, camera_jitter=holdout["camera_jitter"])
    elif variant.kind == "LightingShift":
        scene = replace(scene, lighting=holdout["lighting"])
    elif variant.kind == "MaskedBackground":
        scene = replace(scene, masked=True)
    return scene, task


# ---------------------------------------------------------------------------
# Physics and success
# ---------------------------------------------------------------------------

def step(scene: Scene, action: ActionVector) -> Scene:
    """
    Apply one action: translate the effector (clipped to the table), then grasp or release.

    ``dz`` and the rotations are inert. Closing the gripper with nothing held
    grasps the nearest object within ``GRASP_RADIUS``; opening it releases. A held
    object moves with the effector.
    """
    ex, ey = scene.effector
    nx = min(max(ex + action.dx, 0.0), 1.0)
    ny = min(max(ey + action.dy, 0.0), 1.0)
    moved_x, moved_y = nx - ex, ny - ey
    objects = list(scene.objects)
    held = scene.held
    if held is not None and (moved_x or moved_y):
        obj = objects[held]
        objects[held] = replace(
            obj,
            x=min(max(obj.x + moved_x, 0.0), 1.0),
            y=min(max(obj.y + moved_y, 0.0), 1.0),
        )
    if action.gripper == 1:
        if held is None:
            held = _nearest_within(objects, (nx, ny), config.GRASP_RADIUS)
    else:
        held = None
    if (nx, ny) == scene.effector and held == scene.held and action.gripper == scene.gripper:
        return scene
    return replace(scene, objects=tuple(objects), effector=(nx, ny), held=held, gripper=int(action.gripper))


def _nearest_within(objects: Sequence[SceneObject], point: Tuple[float, float], radius: float) -> Optional[int]:
    best, best_dist = None, radius
    for i, obj in enumerate(objects):
        dist = math.hypot(obj.x - point[0], obj.y - point[1])
        if dist <= best_dist:
            best, best_dist = i, dist
    return best


def success(scene: Scene, task: TaskSpec) -> bool:
    target = scene.index_of(task.target)
    obj = scene.objects[target]
    if task.kind == "Reach":
        return math.hypot(obj.x - scene.effector[0], obj.y - scene.effector[1]) <= task.success_radius
    if task.kind == "Pick":
        return scene.held == target
    ref = scene.objects[scene.index_of(task.reference)]
    near = math.hypot(obj.x - ref.x, obj.y - ref.y) <= task.success_radius
    return near and scene.held != target


# ---------------------------------------------------------------------------
# Scripted expert
# ---------------------------------------------------------------------------

def _toward(current: np.ndarray, goal: np.ndarray) -> np.ndarray:
    return np.clip(config.EXPERT_GAIN * (goal - current), -config.EXPERT_MAX_DELTA, config.EXPERT_MAX_DELTA)


def _place_goal(obj: SceneObject, ref: SceneObject) -> np.ndarray:
    offset = obj.position - ref.position
    norm = float(np.linalg.norm(offset))
    direction = offset / norm if norm > 1e-9 else np.array([1.0, 0.0])
    goal = ref.position + config.PLACE_OFFSET * direction
    return np.clip(goal, 0.0, 1.0)


def expert_action(scene: Scene, task: TaskSpec) -> ActionVector:
    """One proportional-control action toward the current subgoal: approach, grasp, transport, release."""
    target = scene.index_of(task.target)
    obj = scene.objects[target]
    eff = scene.effector_position
    grasp_trigger = 0.8 * config.GRASP_RADIUS

    if success(scene, task):
        return ActionVector(gripper=scene.gripper if task.kind == "Pick" else 0)
    if task.kind == "Reach":
        move = _toward(eff, obj.position)
        return quantize_action(ActionVector(dx=float(move[0]), dy=float(move[1])))

    if scene.held != target:
        move = _toward(eff, obj.position)
        landing = np.clip(eff + move, 0.0, 1.0)
        close = np.linalg.norm(landing - obj.position) <= grasp_trigger
        # The grasp picks the nearest object, so close only when the target is nearest
        if close:
            nearest = _nearest_within(scene.objects, tuple(landing), config.GRASP_RADIUS)
            close = nearest == target
        return quantize_action(ActionVector(dx=float(move[0]), dy=float(move[1]), gripper=int(close)))

    ref = scene.objects[scene.index_of(task.reference)]
    goal = _place_goal(obj, ref)
    move = _toward(obj.position, goal)
    effector_delta = np.clip(eff + move, 0.0, 1.0) - eff
    landing = np.clip(obj.position + effector_delta, 0.0, 1.0)
    release = np.linalg.norm(landing - ref.position) <= task.success_radius - 0.02
    return quantize_action(ActionVector(dx=float(move[0]), dy=float(move[1]), gripper=0 if release else 1))


def scripted_expert(scene: Scene, task: TaskSpec, horizon: int) -> ActionChunk:
    """
    Emit ``horizon`` quantized expert actions, simulating each on a private copy of the scene.

    Args:
        scene (Scene): Current state (not modified)
        task (TaskSpec): Task to solve
        horizon (int): Chunk length H

    Returns:
        ActionChunk: H actions
    """
    actions = []
    sim = scene
    for _ in range(horizon):
        action = expert_action(sim, task)
        actions.append(action)
        sim = step(sim, action)
    return ActionChunk(tuple(actions))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_SIZE = config.IMAGE_SIZE
_CENTERS = (np.arange(_SIZE) + 0.5) / _SIZE
_PY, _PX = np.meshgrid(_CENTERS, _CENTERS, indexing="ij")


def object_footprint(obj: SceneObject, jitter: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Boolean ``[H, W]`` raster mask of one object."""
    cx, cy = obj.x + jitter[0], obj.y + jitter[1]
    half = obj.size / 2.0
    dx, dy = _PX - cx, _PY - cy
    if obj.shape == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if obj.shape == "circle":
        return dx * dx + dy * dy <= half * half
    # Upward-pointing isosceles triangle inside the bounding square
    rel = (dy + half) / obj.size
    return (rel >= 0.0) & (rel <= 1.0) & (np.abs(dx) <= rel * half)


def effector_footprint(scene: Scene) -> Tuple[np.ndarray, np.ndarray]:
    """(cross arms, centre pixel) masks for the effector marker."""
    ex, ey = scene.effector[0] + scene.camera_jitter[0], scene.effector[1] + scene.camera_jitter[1]
    col = min(max(int(ex * _SIZE), 0), _SIZE - 1)
    row = min(max(int(ey * _SIZE), 0), _SIZE - 1)
    cols = np.arange(_SIZE)[None, :]
    rows = np.arange(_SIZE)[:, None]
    arms = ((rows == row) & (np.abs(cols - col) <= 2)) | ((cols == col) & (np.abs(rows - row) <= 2))
    centre = (rows == row) & (cols == col)
    return arms, centre


def table_pixels(scene: Scene) -> np.ndarray:
    if scene.masked:
        return np.broadcast_to(np.array(config.MASK_COLOR), (_SIZE, _SIZE, 3)).copy()
    base, period, strength = config.BACKGROUNDS[scene.background]
    img = np.broadcast_to(np.array(base), (_SIZE, _SIZE, 3)).copy()
    if period:
        stripes = np.where((np.arange(_SIZE) // period) % 2 == 0, strength, -strength)
        img += stripes[:, None, None]
    cell, amplitude = config.TEXTURES[scene.texture]
    if cell:
        rows = np.arange(_SIZE)[:, None] // cell
        cols = np.arange(_SIZE)[None, :] // cell
        checker = np.where((rows + cols) % 2 == 0, amplitude, -amplitude)
        img += checker[:, :, None]
    return img


def render(scene: Scene) -> ImageObservation:
    """
    Deterministically rasterize a scene at ``IMAGE_SIZE`` pixels.

    Objects are painted in index order with the held object last, then the
    effector cross (its centre pixel darkens while the gripper is closed).
    Lighting scales the whole image; pixels are rounded to 8-bit levels.
    """
    img = table_pixels(scene)
    order = [i for i in range(len(scene.objects)) if i != scene.held]
    if scene.held is not None:
        order.append(scene.held)
    for i in order:
        obj = scene.objects[i]
        img[object_footprint(obj, scene.camera_jitter)] = config.PALETTE[obj.color]
    arms, centre = effector_footprint(scene)
    img[arms] = config.EFFECTOR_COLOR
    if scene.gripper:
        img[centre] = (0.0, 0.0, 0.0)
    img = np.clip(img * scene.lighting, 0.0, 1.0)
    levels = np.round(img * config.PIXEL_LEVELS)
    return ImageObservation((levels / config.PIXEL_LEVELS).astype(np.float32))


def run_expert_episode(
    scene: Scene, task: TaskSpec, horizon: int, max_steps: int
) -> Tuple[List[Tuple[Scene, ActionChunk]], Scene, bool]:
    """
    Roll the scripted expert out, recording (state, chunk) for every policy call.

    Returns:
        Tuple: (recorded calls, final scene, success flag)
    """
    calls: List[Tuple[Scene, ActionChunk]] = []
    steps = 0
    done = success(scene, task)
    while not done and steps < max_steps:
        chunk = scripted_expert(scene, task, horizon)
        calls.append((scene, chunk))
        for action in chunk:
            scene = step(scene, action)
            steps += 1
            if success(scene, task) or steps >= max_steps:
                break
        done = success(scene, task)
    return calls, scene, done
