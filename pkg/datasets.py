"""
Synthetic dataset generators (robot demonstrations, vision-language QA,
shape/color classes) and the line-delimited dataset file format.

Every record is generated from its own stream seed ``derive_seed(seed, kind, index)``
so serial and parallel generation produce identical files.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from action_codec import ActionChunk, BinCodecConfig, CodecConfig, decode_scalar, encode_scalar
from encoders import ImageObservation
from exceptions import ConfigError, DatasetFormatError, GateFailure, SceneSamplingError
from paraphrase import all_descriptors, instruction_corpus
from toy_env import Scene, SceneObject, TaskSpec, render, run_expert_episode, sample_scene
from utils import canonical_json, ensure_directory, make_rng
from vocab import Vocabulary, build_vocab

logger = logging.getLogger('vla.datasets')

IMAGE_SHAPE = (config.IMAGE_SIZE, config.IMAGE_SIZE, config.IMAGE_CHANNELS)
CLASS_OBJECT_SIZE_RANGE = (0.28, 0.36)
RELATION_MARGIN = 0.05
MAX_EXPERT_ATTEMPTS = 20
POINT_CODEC = CodecConfig(decimals=config.POINT_DECIMALS)
RELATIONS = ("left of", "right of", "above", "below")
COUNT_WORDS = {shape: f"{shape}s" for shape in config.SHAPES}


@dataclass
class EpisodeStep:
    observation: ImageObservation
    instruction: str
    chunk: ActionChunk


@dataclass
class EpisodeRecord:
    steps: List[EpisodeStep]
    task: TaskSpec
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass
class VLSample:
    observation: ImageObservation
    question: str
    answer: str
    kind: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ClassSample:
    observation: ImageObservation
    label: int


def class_label(shape: str, color: str) -> int:
    return config.SHAPES.index(shape) * len(config.COLORS) + config.COLORS.index(color)


def num_classes() -> int:
    return len(config.SHAPES) * len(config.COLORS)


# ---------------------------------------------------------------------------
# Vision-language questions
# ---------------------------------------------------------------------------

def format_point(x: float, y: float) -> str:
    """``(0.31, 0.72)`` using the shared scalar encoding at two decimals."""
    return f"({''.join(encode_scalar(x, POINT_CODEC))}, {''.join(encode_scalar(y, POINT_CODEC))})"


def parse_point(text: str) -> Tuple[float, float]:
    if not (text.startswith("(") and text.endswith(")")) or ", " not in text:
        raise ValueError(f"not a point answer: {text!r}")
    xs, ys = text[1:-1].split(", ", 1)
    return decode_scalar(list(xs), POINT_CODEC), decode_scalar(list(ys), POINT_CODEC)


def relation_holds(a: SceneObject, b: SceneObject, relation: str) -> bool:
    return {
        "left of": a.x < b.x,
        "right of": a.x > b.x,
        "above": a.y < b.y,
        "below": a.y > b.y,
    }[relation]


def _relation_gap(a: SceneObject, b: SceneObject, relation: str) -> float:
    return abs(a.x - b.x) if relation in ("left of", "right of") else abs(a.y - b.y)


def question_relation(scene: Scene, rng: np.random.Generator) -> Tuple[str, str, Dict[str, Any]]:
    i, j = rng.permutation(len(scene.objects))[:2]
    a, b = scene.objects[i], scene.objects[j]
    relations = [r for r in RELATIONS if _relation_gap(a, b, r) >= RELATION_MARGIN]
    relation = relations[int(rng.integers(len(relations)))]
    answer = "yes" if relation_holds(a, b, relation) else "no"
    truth = {"relation": relation, "a": [a.x, a.y], "b": [b.x, b.y]}
    return f"is the {a.descriptor} {relation} the {b.descriptor}", answer, truth


def question_attribute(scene: Scene, rng: np.random.Generator) -> Tuple[str, str, Dict[str, Any]]:
    shapes = [o.shape for o in scene.objects]
    colors = [o.color for o in scene.objects]
    unique_shape = [o for o in scene.objects if shapes.count(o.shape) == 1]
    unique_color = [o for o in scene.objects if colors.count(o.color) == 1]
    ask_color = bool(unique_shape) and (not unique_color or rng.random() < 0.5)
    if ask_color:
        obj = unique_shape[int(rng.integers(len(unique_shape)))]
        return f"what color is the {obj.shape}", obj.color, {}
    obj = unique_color[int(rng.integers(len(unique_color)))]
    return f"what shape is the {obj.color} object", obj.shape, {}


def question_counting(scene: Scene, rng: np.random.Generator) -> Tuple[str, str, Dict[str, Any]]:
    choice = int(rng.integers(len(config.SHAPES) + 1))
    if choice == len(config.SHAPES):
        return "how many objects are there", str(len(scene.objects)), {}
    shape = config.SHAPES[choice]
    count = sum(1 for o in scene.objects if o.shape == shape)
    return f"how many {COUNT_WORDS[shape]} are there", str(count), {}


def question_pointing(scene: Scene, rng: np.random.Generator) -> Tuple[str, str, Dict[str, Any]]:
    obj = scene.objects[int(rng.integers(len(scene.objects)))]
    return f"point to the {obj.descriptor}", format_point(obj.x, obj.y), {"point": [obj.x, obj.y]}


def question_effector(scene: Scene, rng: np.random.Generator) -> Tuple[str, str, Dict[str, Any]]:
    x, y = scene.effector
    return "point to the gripper", format_point(x, y), {"point": [x, y]}


QUESTION_BUILDERS = {
    "relation": question_relation,
    "attribute": question_attribute,
    "counting": question_counting,
    "pointing": question_pointing,
    "effector": question_effector,
}


def vl_corpus() -> List[str]:
    """Every question and word answer the VL generator can emit."""
    descriptors = all_descriptors()
    out = ["yes", "no", "point to the gripper", "how many objects are there"]
    out += list(config.COLORS) + list(config.SHAPES)
    out += [f"is the {a} {r} the {b}" for a in descriptors for b in descriptors if a != b for r in RELATIONS]
    out += [f"what color is the {s}" for s in config.SHAPES]
    out += [f"what shape is the {c} object" for c in config.COLORS]
    out += [f"how many {COUNT_WORDS[s]} are there" for s in config.SHAPES]
    out += [f"point to the {d}" for d in descriptors]
    return out


def full_corpus() -> List[str]:
    return instruction_corpus() + vl_corpus()


def build_dataset_vocab(num_bins: Optional[int] = None) -> Vocabulary:
    """Vocabulary covering every string the generators emit, plus bin tokens when given."""
    return build_vocab(full_corpus(), BinCodecConfig(num_bins=num_bins) if num_bins else None)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _choose_task(rng: np.random.Generator, task_mix: Dict[str, float]) -> str:
    kinds = [k for k in config.TASK_KINDS if task_mix.get(k, 0.0) > 0]
    if not kinds:
        raise ConfigError("task_mix assigns zero weight to every task kind")
    unknown = set(task_mix) - set(config.TASK_KINDS)
    if unknown:
        raise ConfigError(f"Unknown task kinds in task_mix: {sorted(unknown)}")
    weights = np.array([task_mix[k] for k in kinds], dtype=np.float64)
    return kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]


def robot_episode(seed: int, index: int, task_mix: Dict[str, float], horizon: int,
                  max_steps: int) -> EpisodeRecord:
    """Roll the expert on fresh scenes until it succeeds; only successful trajectories are kept."""
    for attempt in range(MAX_EXPERT_ATTEMPTS):
        rng = make_rng(seed, "robot", index) if attempt == 0 else make_rng(seed, "robot", index, attempt)
        kind = _choose_task(rng, task_mix)
        scene, task = sample_scene(rng, "train", kind)
        calls, _, done = run_expert_episode(scene, task, horizon, max_steps)
        if done:
            break
        logger.debug(f"Expert failed episode {index} attempt {attempt} ({task.instruction}); resampling")
    else:
        raise SceneSamplingError(f"Expert failed episode {index} on {MAX_EXPERT_ATTEMPTS} sampled scenes")
    steps = [EpisodeStep(render(state), task.instruction, chunk) for state, chunk in calls]
    metadata = {"seed": seed, "index": index, "variant": "Matching", "success": True, "attempts": attempt + 1,
                "background": scene.background, "texture": scene.texture}
    return EpisodeRecord(steps, task, metadata)


def _parallel_map(fn, indices: Sequence[int], jobs: int) -> list:
    if jobs <= 1:
        return [fn(i) for i in indices]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, indices))


def gen_robot_dataset(seed: int, episodes: int, task_mix: Dict[str, float], horizon: int,
                      max_steps: int = 30, jobs: int = 1) -> List[EpisodeRecord]:
    """
    Generate scripted-expert demonstrations on training-pool scenes.

    Args:
        seed (int): Master seed
        episodes (int): Number of episodes
        task_mix (Dict[str, float]): Relative weight per task kind
        horizon (int): Actions per labeled chunk
        max_steps (int): Action budget per episode

    Returns:
        List[EpisodeRecord]: Episodes in index order

    Raises:
        SceneSamplingError: The expert failed every resampled scene of one episode
    """
    records = _parallel_map(
        lambda i: robot_episode(seed, i, task_mix, horizon, max_steps), range(episodes), jobs
    )
    resampled = sum(r.metadata["attempts"] - 1 for r in records)
    logger.info(f"Generated {episodes} robot episodes ({resampled} failed expert scenes resampled)")
    return records


def vl_sample(seed: int, index: int, question_kinds: Sequence[str]) -> VLSample:
    rng = make_rng(seed, "vl", index)
    kind = question_kinds[int(rng.integers(len(question_kinds)))]
    scene, _ = sample_scene(rng, "train", config.TASK_KINDS[int(rng.integers(len(config.TASK_KINDS)))])
    question, answer, truth = QUESTION_BUILDERS[kind](scene, rng)
    metadata = {"seed": seed, "index": index, **truth}
    return VLSample(render(scene), question, answer, kind, metadata)


def gen_vl_dataset(seed: int, samples: int, question_kinds: Sequence[str] = tuple(config.VL_QUESTION_KINDS),
                   jobs: int = 1) -> List[VLSample]:
    """Generate image-question-answer samples, question kinds drawn uniformly."""
    question_kinds = list(question_kinds)
    unknown = set(question_kinds) - set(QUESTION_BUILDERS)
    if unknown or not question_kinds:
        raise ConfigError(f"Invalid VL question kinds: {question_kinds}")
    out = _parallel_map(lambda i: vl_sample(seed, i, question_kinds), range(samples), jobs)
    logger.info(f"Generated {samples} VL samples ({', '.join(question_kinds)})")
    return out


def class_sample(seed: int, stream: str, index: int) -> ClassSample:
    rng = make_rng(seed, stream, index)
    label = int(rng.integers(num_classes()))
    shape = config.SHAPES[label // len(config.COLORS)]
    color = config.COLORS[label % len(config.COLORS)]
    size = float(rng.uniform(*CLASS_OBJECT_SIZE_RANGE))
    lo, hi = size / 2 + 0.02, 1.0 - size / 2 - 0.02
    x, y = rng.uniform(lo, hi, size=2)
    spec = config.VISUAL_POOLS["train"]
    scene = Scene(
        objects=(SceneObject(shape, color, float(x), float(y), size),),
        effector=(float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.05, 0.95))),
        background=int(rng.choice(spec["backgrounds"])),
        texture=int(rng.choice(spec["textures"])),
    )
    return ClassSample(render(scene), label)


def gen_class_dataset(seed: int, samples: int, stream: str = "class", jobs: int = 1) -> List[ClassSample]:
    """Single-object images labeled with their shape x color class (24 classes)."""
    return _parallel_map(lambda i: class_sample(seed, stream, i), range(samples), jobs)


def class_arrays(samples: Sequence[ClassSample]) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.observation.pixels for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# Generator self-checks
# ---------------------------------------------------------------------------

def check_vl_samples(samples: Sequence[VLSample], tolerance: float = 0.5 / config.IMAGE_SIZE) -> Dict[str, int]:
    """
    Re-derive every checkable answer from the scene ground truth kept in its metadata.

    Pointing answers must decode within ``tolerance`` (half a pixel) of the true
    centre; relation answers must agree with a direct coordinate comparison.

    Raises:
        GateFailure: Any inconsistent sample
    """
    counts = {"pointing": 0, "relation": 0}
    bad = []
    for i, sample in enumerate(samples):
        if sample.kind in ("pointing", "effector"):
            x, y = parse_point(sample.answer)
            true = sample.metadata["point"]
            if max(abs(x - true[0]), abs(y - true[1])) > tolerance:
                bad.append(i)
            counts["pointing"] += 1
        elif sample.kind == "relation":
            meta = sample.metadata
            a = SceneObject("square", "red", *meta["a"], size=0.0)
            b = SceneObject("square", "red", *meta["b"], size=0.0)
            expected = "yes" if relation_holds(a, b, meta["relation"]) else "no"
            if sample.answer != expected:
                bad.append(i)
            counts["relation"] += 1
    if bad:
        raise GateFailure(f"{len(bad)} VL samples failed the generator self-check",
                          {"bad_indices": bad[:20]})
    logger.info(f"VL self-check passed: {counts['pointing']} pointing, {counts['relation']} relation samples")
    return counts


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

def _image_payload(obs: ImageObservation) -> Dict[str, Any]:
    # Row-major 8-bit levels, hex encoded; pixel value = level / PIXEL_LEVELS
    return {"shape": list(obs.pixels.shape), "levels": obs.to_levels().reshape(-1).tobytes().hex()}


def _image_from_payload(payload: Dict[str, Any]) -> ImageObservation:
    levels = np.frombuffer(bytes.fromhex(payload["levels"]), dtype=np.uint8)
    return ImageObservation.from_levels(levels, payload["shape"])


def _chunk_payload(chunk: ActionChunk) -> List[List[float]]:
    return [list(a.as_tuple()) for a in chunk]


def episode_to_record(episode: EpisodeRecord) -> Dict[str, Any]:
    return {
        "type": "robot",
        "task": episode.task.to_dict(),
        "metadata": episode.metadata,
        "steps": [
            {"image": _image_payload(s.observation), "instruction": s.instruction,
             "chunk": _chunk_payload(s.chunk)}
            for s in episode.steps
        ],
    }


def record_to_episode(record: Dict[str, Any]) -> EpisodeRecord:
    steps = [
        EpisodeStep(_image_from_payload(s["image"]), s["instruction"], ActionChunk.from_array(s["chunk"]))
        for s in record["steps"]
    ]
    return EpisodeRecord(steps, TaskSpec.from_dict(record["task"]), record.get("metadata", {}))


def vl_to_record(sample: VLSample) -> Dict[str, Any]:
    return {"type": "vl", "kind": sample.kind, "question": sample.question, "answer": sample.answer,
            "metadata": sample.metadata, "image": _image_payload(sample.observation)}


def record_to_vl(record: Dict[str, Any]) -> VLSample:
    return VLSample(_image_from_payload(record["image"]), record["question"], record["answer"],
                    record.get("kind", ""), record.get("metadata", {}))


def class_to_record(sample: ClassSample) -> Dict[str, Any]:
    return {"type": "class", "label": sample.label, "image": _image_payload(sample.observation)}


def record_to_class(record: Dict[str, Any]) -> ClassSample:
    return ClassSample(_image_from_payload(record["image"]), int(record["label"]))


_ENCODERS = {"robot": episode_to_record, "vl": vl_to_record, "class": class_to_record}
_DECODERS = {"robot": record_to_episode, "vl": record_to_vl, "class": record_to_class}


def _record_type(item: Any) -> str:
    if isinstance(item, EpisodeRecord):
        return "robot"
    if isinstance(item, VLSample):
        return "vl"
    if isinstance(item, ClassSample):
        return "class"
    raise TypeError(f"Not a dataset item: {type(item).__name__}")


def write_dataset(path: Union[str, Path], items: Sequence[Any], vocab: Vocabulary, cfg_hash: str) -> Path:
    """
    Write items as line-delimited JSON after a header line.

    The header carries the format version, the config hash and the serialized
    vocabulary; each following line is one self-describing record.
    """
    path = Path(path)
    ensure_directory(path.parent)
    kinds = sorted({_record_type(item) for item in items})
    header = {
        "type": "header",
        "format_version": config.DATASET_FORMAT_VERSION,
        "config_hash": cfg_hash,
        "vocab": vocab.to_dict(),
        "record_types": kinds,
        "count": len(items),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(canonical_json(header) + "\n")
        for item in items:
            fh.write(canonical_json(_ENCODERS[_record_type(item)](item)) + "\n")
    logger.info(f"Wrote {len(items)} records to {path}")
    return path


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise DatasetFormatError(f"Dataset file not found: {path}; run gen-data first")
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: unreadable header: {e}") from e
    if header.get("type") != "header":
        raise DatasetFormatError(f"{path}: first line is not a header")
    if header.get("format_version") != config.DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: format version {header.get('format_version')} != {config.DATASET_FORMAT_VERSION}"
        )
    return header


def read_dataset(path: Union[str, Path]) -> Tuple[Dict[str, Any], List[Any]]:
    """
    Load a dataset file.

    Returns:
        Tuple[Dict[str, Any], List[Any]]: (header, decoded items)

    Raises:
        DatasetFormatError: Missing file, version mismatch or malformed record
    """
    header = read_header(path)
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                items.append(_DECODERS[record["type"]](record))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise DatasetFormatError(f"{path}:{line_no}: malformed record: {e}") from e
    if header.get("count") not in (None, len(items)):
        raise DatasetFormatError(f"{path}: header promises {header['count']} records, found {len(items)}")
    return header, items


def dataset_vocab(header: Dict[str, Any]) -> Vocabulary:
    return Vocabulary.from_dict(header["vocab"])
