"""
Closed-loop evaluation: rollouts, variant suites, paired paraphrase evaluation,
linear probes, report files and the acceptance checks built on top of them.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score
from sklearn.preprocessing import StandardScaler

import config
import tensor as T
from action_codec import ActionChunk, BinCodecConfig, CodecConfig, bin_decode_chunk, decode_chunk
from encoders import DualEncoderState, PatchEncoder, pooled_features
from exceptions import BinDecodeError, ConfigError, GateFailure, ParseError, ProbeError, ReportWriteError
from paraphrase import ParaphraseBank, paraphrase
from policy import FormatFailure, PolicyModel, predict_actions
from toy_env import (
    Scene,
    TaskSpec,
    VariantSpec,
    render,
    run_expert_episode,
    sample_variant_scene,
    scripted_expert,
    step,
    success,
)
from utils import array_digest, ensure_directory, format_rate, make_rng, wilson_interval
from vocab import Vocabulary

logger = logging.getLogger('vla.eval')

REPORT_FORMATS = ("records", "table", "plot")
NON_VISUAL_VARIANTS = ("Matching", "Paraphrase")

PolicyOutput = Union[ActionChunk, FormatFailure]


@dataclass(frozen=True)
class EvalSpec:
    tasks: Tuple[str, ...] = tuple(config.TASK_KINDS)
    variants: Tuple[VariantSpec, ...] = (VariantSpec("Matching"),)
    episodes_per_cell: int = 100
    max_steps: int = 30
    seeds: Tuple[int, ...] = (1000,)
    batch_size: int = 25
    jobs: int = 1

    def __post_init__(self):
        if self.episodes_per_cell < 1:
            raise ConfigError("episodes_per_cell must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if not self.seeds:
            raise ConfigError("eval needs at least one seed")
        unknown = set(self.tasks) - set(config.TASK_KINDS)
        if unknown:
            raise ConfigError(f"Unknown eval tasks: {sorted(unknown)}")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"Duplicate eval variants: {names}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], data_seed: Optional[int] = None) -> "EvalSpec":
        """
        Build the spec from the ``eval`` config section.

        Raises:
            ConfigError: Unknown keys, or an eval seed equal to the training data seed
        """
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown eval config keys: {sorted(unknown)}")
        seeds = tuple(int(s) for s in data.get("seeds", (1000,)))
        if data_seed is not None and int(data_seed) in seeds:
            raise ConfigError(f"eval seeds {list(seeds)} must differ from the training data seed {data_seed}")
        return cls(
            tasks=tuple(data.get("tasks", config.TASK_KINDS)),
            variants=tuple(VariantSpec.from_dict(v) for v in data.get("variants", [{"kind": "Matching"}])),
            episodes_per_cell=int(data.get("episodes_per_cell", 100)),
            max_steps=int(data.get("max_steps", 30)),
            seeds=seeds,
            batch_size=int(data.get("batch_size", 25)),
            jobs=int(data.get("jobs", 1)),
        )

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["variants"] = [v.to_dict() for v in self.variants]
        return out


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

class Policy:
    """Batched policy interface used by the rollout loop."""

    name = "policy"

    def act(self, scenes: Sequence[Scene], tasks: Sequence[TaskSpec], instructions: Sequence[str],
            rngs: Sequence[np.random.Generator]) -> List[PolicyOutput]:
        raise NotImplementedError


class ExpertPolicy(Policy):
    """The scripted expert behind the policy interface; reads the true state, ignores pixels and wording."""

    name = "expert"

    def __init__(self, horizon: int = 2):
        self.horizon = horizon

    def act(self, scenes, tasks, instructions, rngs):
        return [scripted_expert(scene, task, self.horizon) for scene, task in zip(scenes, tasks)]


class ModelPolicy(Policy):
    name = "model"

    def __init__(self, model: PolicyModel, codec_cfg: CodecConfig = CodecConfig(),
                 bin_cfg: Optional[BinCodecConfig] = None):
        self.model = model
        self.codec_cfg = codec_cfg
        self.bin_cfg = bin_cfg

    def act(self, scenes, tasks, instructions, rngs):
        images = np.stack([render(scene).pixels for scene in scenes])
        return predict_actions(self.model, images, instructions, self.codec_cfg, self.bin_cfg)


class RandomTokenPolicy(Policy):
    """Chance baseline: uniformly random token strings pushed through the model's codec."""

    name = "random"

    def __init__(self, vocab: Vocabulary, horizon: int = 2, codec_mode: str = "string",
                 codec_cfg: CodecConfig = CodecConfig(), bin_cfg: Optional[BinCodecConfig] = None):
        self.vocab = vocab
        self.horizon = horizon
        self.codec_mode = codec_mode
        self.codec_cfg = codec_cfg
        self.bin_cfg = bin_cfg or BinCodecConfig(num_bins=vocab.num_bins or 256)

    def _one(self, rng: np.random.Generator) -> PolicyOutput:
        length = 7 * self.horizon if self.codec_mode == "bin" else int(rng.integers(1, 7 * self.horizon * 8))
        tokens = [self.vocab.token(int(i)) for i in rng.integers(len(self.vocab), size=length)]
        try:
            if self.codec_mode == "bin":
                return bin_decode_chunk(tokens, self.bin_cfg)
            return decode_chunk(tokens, self.codec_cfg)
        except (ParseError, BinDecodeError) as e:
            return FormatFailure(str(e), tokens)

    def act(self, scenes, tasks, instructions, rngs):
        return [self._one(rng) for rng in rngs]


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

@dataclass
class RolloutResult:
    success: bool
    steps: int
    format_failures: int
    policy_calls: int


def rollout_batch(
    policy: Policy,
    scenes: Sequence[Scene],
    tasks: Sequence[TaskSpec],
    instructions: Sequence[str],
    max_steps: int,
    rngs: Optional[Sequence[np.random.Generator]] = None,
) -> List[RolloutResult]:
    """
    Run several episodes in lockstep: one batched policy call per round for every
    unfinished episode, then each returned chunk is applied action by action.

    An episode ends on success or when ``max_steps`` actions are used. A
    ``FormatFailure`` counts as one no-op step.
    """
    n = len(scenes)
    scenes = list(scenes)
    if rngs is None:
        rngs = [np.random.default_rng(i) for i in range(n)]
    steps = [0] * n
    failures = [0] * n
    calls = [0] * n
    done = [success(s, t) for s, t in zip(scenes, tasks)]
    active = [i for i in range(n) if not done[i]]
    while active:
        outputs = policy.act([scenes[i] for i in active], [tasks[i] for i in active],
                             [instructions[i] for i in active], [rngs[i] for i in active])
        still = []
        for i, out in zip(active, outputs):
            calls[i] += 1
            if isinstance(out, FormatFailure):
                failures[i] += 1
                steps[i] += 1
            else:
                for action in out:
                    scenes[i] = step(scenes[i], action)
                    steps[i] += 1
                    if success(scenes[i], tasks[i]) or steps[i] >= max_steps:
                        break
            done[i] = success(scenes[i], tasks[i])
            if not done[i] and steps[i] < max_steps:
                still.append(i)
        active = still
    return [RolloutResult(done[i], steps[i], failures[i], calls[i]) for i in range(n)]


def rollout(policy: Policy, scene: Scene, task: TaskSpec, max_steps: int = 30,
            instruction: Optional[str] = None, rng: Optional[np.random.Generator] = None) -> RolloutResult:
    """Single-episode rollout; the instruction defaults to the task's canonical wording."""
    rngs = [rng] if rng is not None else None
    return rollout_batch(policy, [scene], [task], [instruction or task.instruction], max_steps, rngs)[0]


# ---------------------------------------------------------------------------
# Success reports
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    task: str
    variant: str
    seed: int
    episodes: int = 0
    successes: int = 0
    format_failures: int = 0
    policy_calls: int = 0
    action_steps: int = 0

    def add(self, result: RolloutResult) -> None:
        self.episodes += 1
        self.successes += int(result.success)
        self.format_failures += result.format_failures
        self.policy_calls += result.policy_calls
        self.action_steps += result.steps

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

    @property
    def format_failure_rate(self) -> float:
        return self.format_failures / self.policy_calls if self.policy_calls else 0.0

    @property
    def interval(self) -> Tuple[float, float]:
        return wilson_interval(self.successes, self.episodes)


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")


@dataclass
class SuccessReport:
    label: str
    tasks: List[str]
    variants: List[str]
    cells: List[CellResult] = field(default_factory=list)
    config_hash: str = ""
    checkpoint_id: str = ""
    policy: str = "model"

    def cell(self, task: str, variant: str, seed: int) -> CellResult:
        for c in self.cells:
            if (c.task, c.variant, c.seed) == (task, variant, seed):
                return c
        c = CellResult(task, variant, seed)
        self.cells.append(c)
        return c

    def rate(self, task: str, variant: str) -> float:
        """Success rate of one (task, variant) cell, averaged over seeds."""
        return _mean(c.success_rate for c in self.cells if c.task == task and c.variant == variant)

    def variant_mean(self, variant: str) -> float:
        return _mean(self.rate(t, variant) for t in self.tasks)

    def task_mean(self, task: str) -> float:
        return _mean(self.rate(task, v) for v in self.variants)

    @property
    def matching_mean(self) -> float:
        return self.variant_mean("Matching")

    @property
    def aggregate_mean(self) -> float:
        """Unweighted mean over the visual variants (everything but Matching and Paraphrase)."""
        return _mean(self.variant_mean(v) for v in self.variants if v not in NON_VISUAL_VARIANTS)

    @property
    def overall_mean(self) -> float:
        return _mean(self.variant_mean(v) for v in self.variants)

    @property
    def episodes(self) -> int:
        return sum(c.episodes for c in self.cells)

    @property
    def successes(self) -> int:
        return sum(c.successes for c in self.cells)

    @property
    def format_failure_rate(self) -> float:
        calls = sum(c.policy_calls for c in self.cells)
        return sum(c.format_failures for c in self.cells) / calls if calls else 0.0

    def to_records(self) -> List[Dict[str, Any]]:
        head = {"type": "success_report", "format_version": config.REPORT_FORMAT_VERSION, "label": self.label,
                "tasks": self.tasks, "variants": self.variants, "config_hash": self.config_hash,
                "checkpoint_id": self.checkpoint_id, "policy": self.policy}
        rows = [{"type": "success_cell", "label": self.label, **asdict(c)} for c in self.cells]
        return [head] + rows

    @classmethod
    def from_records(cls, head: Dict[str, Any], rows: Sequence[Dict[str, Any]]) -> "SuccessReport":
        cells = [CellResult(**{k: v for k, v in r.items() if k not in ("type", "label")}) for r in rows]
        return cls(head["label"], list(head["tasks"]), list(head["variants"]), cells,
                   head["config_hash"], head["checkpoint_id"], head.get("policy", "model"))


@dataclass(frozen=True)
class _Episode:
    task: str
    variant: VariantSpec
    seed: int
    index: int


def _setup(ep: _Episode, bank: ParaphraseBank) -> Tuple[Scene, TaskSpec, str, np.random.Generator]:
    rng = make_rng(ep.seed, "eval", ep.task, ep.variant.name, ep.index)
    scene, task = sample_variant_scene(rng, ep.variant, ep.task)
    instruction = task.instruction
    if ep.variant.kind == "Paraphrase":
        instruction = paraphrase(instruction, bank, rng, "holdout")
    policy_rng = make_rng(ep.seed, "eval-policy", ep.task, ep.variant.name, ep.index)
    return scene, task, instruction, policy_rng


def _run_chunk(policy: Policy, episodes: Sequence[_Episode], bank: ParaphraseBank,
               max_steps: int) -> List[RolloutResult]:
    # no_grad is thread-local, so each worker enters it itself
    with T.no_grad():
        setups = [_setup(ep, bank) for ep in episodes]
        return rollout_batch(policy, [s[0] for s in setups], [s[1] for s in setups],
                             [s[2] for s in setups], max_steps, [s[3] for s in setups])


def _run_episodes(policy: Policy, episodes: List[_Episode], bank: ParaphraseBank, spec: EvalSpec) -> List[RolloutResult]:
    size = max(1, spec.batch_size)
    chunks = [episodes[i:i + size] for i in range(0, len(episodes), size)]
    if spec.jobs <= 1:
        results = [_run_chunk(policy, c, bank, spec.max_steps) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(lambda c: _run_chunk(policy, c, bank, spec.max_steps), chunks))
    return [r for chunk in results for r in chunk]


def eval_suite(policy: Policy, spec: EvalSpec, bank: Optional[ParaphraseBank] = None, label: str = "",
               config_hash: str = "", checkpoint_id: str = "") -> SuccessReport:
    """
    Evaluate every (task, variant, seed) cell of ``spec``.

    Episode ``e`` of a cell draws its scene from ``make_rng(seed, "eval", task, variant, e)``,
    so the report is a pure function of the policy, the spec and its seeds.

    Args:
        policy (Policy): Policy to evaluate
        spec (EvalSpec): Tasks, variants, episode counts and seeds
        bank (ParaphraseBank): Bank for the Paraphrase variant; default bank when omitted

    Returns:
        SuccessReport: Per-cell counts plus provenance
    """
    bank = bank or ParaphraseBank()
    episodes = [
        _Episode(task, variant, seed, i)
        for seed in spec.seeds
        for task in spec.tasks
        for variant in spec.variants
        for i in range(spec.episodes_per_cell)
    ]
    report = SuccessReport(label or policy.name, list(spec.tasks), [v.name for v in spec.variants],
                           config_hash=config_hash, checkpoint_id=checkpoint_id, policy=policy.name)
    for seed in spec.seeds:
        for task in spec.tasks:
            for variant in spec.variants:
                report.cell(task, variant.name, seed)
    results = _run_episodes(policy, episodes, bank, spec)
    for ep, result in zip(episodes, results):
        report.cell(ep.task, ep.variant.name, ep.seed).add(result)
    for variant in report.variants:
        logger.info(f"{report.label} {variant}: mean success {format_rate(report.variant_mean(variant))}%")
    logger.info(
        f"{report.label}: {report.successes}/{report.episodes} successes, "
        f"format failure rate {format_rate(report.format_failure_rate)}%"
    )
    return report


# ---------------------------------------------------------------------------
# Paraphrase evaluation
# ---------------------------------------------------------------------------

@dataclass
class ParaphraseEpisode:
    task: str
    seed: int
    index: int
    original: str
    paraphrased: str
    original_success: bool
    paraphrased_success: bool


@dataclass
class ParaphraseReport:
    label: str
    episodes: List[ParaphraseEpisode] = field(default_factory=list)
    config_hash: str = ""
    checkpoint_id: str = ""

    @property
    def tasks(self) -> List[str]:
        return sorted({e.task for e in self.episodes}, key=config.TASK_KINDS.index)

    def _rate(self, attr: str, task: Optional[str]) -> float:
        eps = [e for e in self.episodes if task is None or e.task == task]
        return sum(getattr(e, attr) for e in eps) / len(eps) if eps else float("nan")

    def original_rate(self, task: Optional[str] = None) -> float:
        return self._rate("original_success", task)

    def paraphrased_rate(self, task: Optional[str] = None) -> float:
        return self._rate("paraphrased_success", task)

    def gap(self, task: Optional[str] = None) -> float:
        return self.original_rate(task) - self.paraphrased_rate(task)

    def to_records(self) -> List[Dict[str, Any]]:
        head = {"type": "paraphrase_report", "format_version": config.REPORT_FORMAT_VERSION, "label": self.label,
                "config_hash": self.config_hash, "checkpoint_id": self.checkpoint_id,
                "design": "paired"}
        rows = [{"type": "paraphrase_episode", "label": self.label, **asdict(e)} for e in self.episodes]
        return [head] + rows

    @classmethod
    def from_records(cls, head: Dict[str, Any], rows: Sequence[Dict[str, Any]]) -> "ParaphraseReport":
        episodes = [ParaphraseEpisode(**{k: v for k, v in r.items() if k not in ("type", "label")}) for r in rows]
        return cls(head["label"], episodes, head["config_hash"], head["checkpoint_id"])


def paraphrase_eval(policy: Policy, tasks: Sequence[str], bank: Optional[ParaphraseBank] = None,
                    episodes: int = 100, seeds: Sequence[int] = (1000,), max_steps: int = 30,
                    split: str = "holdout", label: str = "", config_hash: str = "",
                    checkpoint_id: str = "", batch_size: int = 25) -> ParaphraseReport:
    """
    Paired evaluation: each training-pool scene is rolled out once with the canonical
    instruction and once with a paraphrase drawn from ``split``.

    Returns:
        ParaphraseReport: Per-episode outcomes, including the exact paraphrase used
    """
    bank = bank or ParaphraseBank()
    matching = VariantSpec("Matching")
    plan = []
    for seed in seeds:
        for task in tasks:
            for i in range(episodes):
                rng = make_rng(seed, "paraphrase-eval", task, i)
                scene, spec = sample_variant_scene(rng, matching, task)
                para = paraphrase(spec.instruction, bank, rng, split)
                plan.append((seed, task, i, scene, spec, para))

    report = ParaphraseReport(label or policy.name, config_hash=config_hash, checkpoint_id=checkpoint_id)
    with T.no_grad():
        for start in range(0, len(plan), max(1, batch_size)):
            chunk = plan[start:start + batch_size]
            scenes = [p[3] for p in chunk]
            specs = [p[4] for p in chunk]
            originals = rollout_batch(policy, scenes, specs, [s.instruction for s in specs], max_steps,
                                      [make_rng(p[0], "paraphrase-policy", p[1], p[2]) for p in chunk])
            paraphrased = rollout_batch(policy, scenes, specs, [p[5] for p in chunk], max_steps,
                                        [make_rng(p[0], "paraphrase-policy", p[1], p[2]) for p in chunk])
            for p, a, b in zip(chunk, originals, paraphrased):
                report.episodes.append(ParaphraseEpisode(p[1], p[0], p[2], p[4].instruction, p[5],
                                                         a.success, b.success))
    logger.info(
        f"{report.label} paraphrase eval: original {format_rate(report.original_rate())}%, "
        f"paraphrased {format_rate(report.paraphrased_rate())}%"
    )
    return report


# ---------------------------------------------------------------------------
# Linear probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeResult:
    role: str
    accuracy: float
    num_classes: int
    train_samples: int
    test_samples: int


@dataclass
class ProbeReport:
    label: str
    results: List[ProbeResult] = field(default_factory=list)
    config_hash: str = ""
    checkpoint_id: str = ""

    def accuracy(self, role: str) -> float:
        for r in self.results:
            if r.role == role:
                return r.accuracy
        raise KeyError(f"No probe result for {role!r}")

    @property
    def roles(self) -> List[str]:
        return [r.role for r in self.results]

    def to_records(self) -> List[Dict[str, Any]]:
        head = {"type": "probe_report", "format_version": config.REPORT_FORMAT_VERSION, "label": self.label,
                "config_hash": self.config_hash, "checkpoint_id": self.checkpoint_id}
        return [head] + [{"type": "probe_result", "label": self.label, **asdict(r)} for r in self.results]

    @classmethod
    def from_records(cls, head: Dict[str, Any], rows: Sequence[Dict[str, Any]]) -> "ProbeReport":
        results = [ProbeResult(**{k: v for k, v in r.items() if k not in ("type", "label")}) for r in rows]
        return cls(head["label"], results, head["config_hash"], head["checkpoint_id"])


def parameter_digest(module) -> str:
    return array_digest((n, p.data) for n, p in module.named_parameters())


def fit_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
              max_iter: int = 1000, c: float = 1.0) -> float:
    """
    Multinomial logistic regression on standardized features, fit full-batch to convergence.

    Returns:
        float: Held-out accuracy

    Raises:
        ProbeError: Fewer than two classes in the training labels
    """
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise ProbeError(f"linear probe needs at least two classes, got {classes.tolist()}")
    scaler = StandardScaler().fit(train_x)
    clf = LogisticRegression(max_iter=max_iter, C=c)
    clf.fit(scaler.transform(train_x), train_y)
    return float(accuracy_score(test_y, clf.predict(scaler.transform(test_x))))


def linear_probe(encoder: Union[PatchEncoder, DualEncoderState], train_images: np.ndarray, train_labels: np.ndarray,
                 test_images: np.ndarray, test_labels: np.ndarray, role: str = "encoder",
                 max_iter: int = 1000, c: float = 1.0) -> ProbeResult:
    """
    Probe mean-pooled encoder features; the encoder itself is never updated.

    Raises:
        ProbeError: Single-class data, or encoder parameters changed while probing
    """
    before = parameter_digest(encoder)
    train_x = pooled_features(encoder, train_images)
    test_x = pooled_features(encoder, test_images)
    accuracy = fit_probe(train_x, np.asarray(train_labels), test_x, np.asarray(test_labels), max_iter, c)
    if parameter_digest(encoder) != before:
        raise ProbeError(f"encoder parameters changed while probing {role}")
    result = ProbeResult(role, accuracy, int(len(np.unique(train_labels))), len(train_labels), len(test_labels))
    logger.info(f"Linear probe {role}: held-out accuracy {accuracy:.3f}")
    return result


def chance_probe(train_labels: np.ndarray, test_labels: np.ndarray, dim: int, seed: int,
                 max_iter: int = 1000, c: float = 1.0) -> ProbeResult:
    """Probe on label-independent Gaussian features: the chance-level reference."""
    rng = make_rng(seed, "chance-probe")
    train_x = rng.normal(size=(len(train_labels), dim))
    test_x = rng.normal(size=(len(test_labels), dim))
    accuracy = fit_probe(train_x, np.asarray(train_labels), test_x, np.asarray(test_labels), max_iter, c)
    return ProbeResult("chance", accuracy, int(len(np.unique(train_labels))), len(train_labels), len(test_labels))


def probe_model(model: PolicyModel, train: Tuple[np.ndarray, np.ndarray], test: Tuple[np.ndarray, np.ndarray],
                pretrained: Optional[PatchEncoder] = None, label: str = "", seed: int = 0,
                max_iter: int = 1000, c: float = 1.0, config_hash: str = "",
                checkpoint_id: str = "") -> ProbeReport:
    """
    Probe every encoder role of a policy: ``frozen`` and ``trainable`` for dual encoders,
    ``single`` otherwise, plus the ``pretrained`` reference and a ``chance`` baseline.
    """
    report = ProbeReport(label, config_hash=config_hash, checkpoint_id=checkpoint_id)
    encoder = model.encoder
    roles: List[Tuple[str, PatchEncoder]] = []
    if pretrained is not None:
        roles.append(("pretrained", pretrained))
    if isinstance(encoder, DualEncoderState):
        roles += [("frozen", encoder.frozen), ("trainable", encoder.trainable)]
    else:
        roles.append(("single", encoder))
    for role, enc in roles:
        report.results.append(linear_probe(enc, train[0], train[1], test[0], test[1], role, max_iter, c))
    report.results.append(chance_probe(train[1], test[1], encoder.cfg.embed_dim, seed, max_iter, c))
    return report


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

Report = Union[SuccessReport, ParaphraseReport, ProbeReport]
_HEAD_TYPES = {"success_report": SuccessReport, "paraphrase_report": ParaphraseReport, "probe_report": ProbeReport}


def _table_rows(report: Report) -> List[List[str]]:
    if isinstance(report, SuccessReport):
        rows = [["Task", *report.variants, "Avg"]]
        for task in report.tasks:
            rows.append([task, *(format_rate(report.rate(task, v)) for v in report.variants),
                         format_rate(report.task_mean(task))])
        rows.append(["Avg", *(format_rate(report.variant_mean(v)) for v in report.variants),
                     format_rate(report.overall_mean)])
        return rows
    if isinstance(report, ParaphraseReport):
        rows = [["Task", "Original", "Paraphrased", "Gap"]]
        for task in report.tasks + [None]:
            rows.append([task or "Avg", format_rate(report.original_rate(task)),
                         format_rate(report.paraphrased_rate(task)), format_rate(report.gap(task))])
        return rows
    rows = [["Encoder", "Accuracy"]]
    rows += [[r.role, format_rate(r.accuracy)] for r in report.results]
    return rows


def render_table(report: Report) -> str:
    """Plain-text table: one row per task (or encoder role), one column per variant."""
    rows = _table_rows(report)
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = [f"# {report.label}"]
    for row in rows:
        lines.append(" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _plot_points(report: Report) -> List[Tuple[str, float, str]]:
    if isinstance(report, SuccessReport):
        return [(v, report.variant_mean(v), report.label) for v in report.variants]
    if isinstance(report, ParaphraseReport):
        return [("original", report.original_rate(), report.label),
                ("paraphrased", report.paraphrased_rate(), report.label)]
    return [(r.role, r.accuracy, report.label) for r in report.results]


def write_report(reports: Sequence[Report], path: Union[str, Path], fmt: str = "records") -> Path:
    """
    Write reports as line-delimited records (the source of truth), a text table, or
    ``x,y,series`` plot data with one series per report label.

    Returns:
        Path: The written file

    Raises:
        ReportWriteError: The path is not writable
    """
    if fmt not in REPORT_FORMATS:
        raise ConfigError(f"report format must be one of {REPORT_FORMATS}, got {fmt!r}")
    path = Path(path)
    try:
        ensure_directory(path.parent)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if fmt == "records":
                for report in reports:
                    for record in report.to_records():
                        fh.write(json.dumps(record, sort_keys=True) + "\n")
            elif fmt == "table":
                fh.write("\n".join(render_table(r) for r in reports))
            else:
                writer = csv.writer(fh)
                writer.writerow(["x", "y", "series"])
                for report in reports:
                    writer.writerows(_plot_points(report))
    except OSError as e:
        logger.error(f"Error writing report {path}: {e}")
        raise ReportWriteError(f"Cannot write report {path}: {e}") from e
    logger.info(f"Wrote {len(reports)} report(s) to {path} ({fmt})")
    return path


def read_records(path: Union[str, Path]) -> List[Report]:
    """Rebuild reports from a records file written by ``write_report``."""
    reports: List[Report] = []
    head: Optional[Dict[str, Any]] = None
    rows: List[Dict[str, Any]] = []

    def flush():
        if head is not None:
            reports.append(_HEAD_TYPES[head["type"]].from_records(head, rows))

    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            if record["type"] in _HEAD_TYPES:
                flush()
                head, rows = record, []
            else:
                rows.append(record)
    flush()
    return reports


# ---------------------------------------------------------------------------
# Gates and acceptance checks
# ---------------------------------------------------------------------------

def expert_gate(tasks: Sequence[str] = tuple(config.TASK_KINDS), episodes: int = 1000, seed: int = 1000,
                horizon: int = 2, max_steps: int = 30, threshold: float = 0.99, jobs: int = 1) -> Dict[str, Any]:
    """
    Validate the scripted expert on training-pool scenes twice: directly, as the data
    generator runs it, and through the rollout harness. Both must reach ``threshold``
    per task and agree within one point.

    Raises:
        GateFailure: Either rate is below threshold, or the two disagree
    """
    spec = EvalSpec(tuple(tasks), (VariantSpec("Matching"),), episodes, max_steps, (seed,), jobs=jobs)
    harness = eval_suite(ExpertPolicy(horizon), spec, label="expert")
    diagnostics: Dict[str, Any] = {}
    failed = []
    for task in tasks:
        direct = 0
        for i in range(episodes):
            rng = make_rng(seed, "eval", task, "Matching", i)
            scene, spec_task = sample_variant_scene(rng, VariantSpec("Matching"), task)
            direct += int(run_expert_episode(scene, spec_task, horizon, max_steps)[2])
        direct_rate = direct / episodes
        harness_rate = harness.rate(task, "Matching")
        diagnostics[task] = {"generator": direct_rate, "harness": harness_rate}
        if direct_rate < threshold or harness_rate < threshold or abs(direct_rate - harness_rate) > 0.01:
            failed.append(task)
    if failed:
        raise GateFailure(f"expert gate failed for {failed}", diagnostics)
    logger.info(f"Expert gate passed: {diagnostics}")
    return diagnostics


def check_trainability_gate(report: SuccessReport, pick_threshold: float = 0.8,
                            parse_threshold: float = 0.99) -> Dict[str, float]:
    """
    In-distribution Pick success and parseable-output rate of the full-method arm.

    Raises:
        GateFailure: Either number is under its threshold
    """
    pick = report.rate("Pick", "Matching")
    parse_rate = 1.0 - report.format_failure_rate
    diagnostics = {"pick_success": pick, "parse_rate": parse_rate,
                   "pick_threshold": pick_threshold, "parse_threshold": parse_threshold}
    if not (pick >= pick_threshold and parse_rate >= parse_threshold):
        raise GateFailure(
            f"trainability gate failed: Pick success {format_rate(pick)}% (need {format_rate(pick_threshold)}%), "
            f"parse rate {format_rate(parse_rate)}% (need {format_rate(parse_threshold)}%)",
            diagnostics,
        )
    return diagnostics


@dataclass
class CheckResult:
    name: str
    passed: Optional[bool]
    value: float = float("nan")
    threshold: float = float("nan")
    detail: str = ""


# Arm roles the directional checks compare; the manifest maps arm names onto them
CHECK_ROLES = ("full", "baseline", "string_cotrain", "bin_cotrain", "dual_robot", "dual_string")


def _seed_mean(reports: Sequence[Any], fn) -> float:
    return _mean(fn(r) for r in reports)


def directional_checks(
    success_reports: Dict[str, Sequence[SuccessReport]],
    paraphrase_reports: Optional[Dict[str, Sequence[ParaphraseReport]]] = None,
    probe_reports: Optional[Dict[str, Sequence[ProbeReport]]] = None,
    margin: float = 0.05,
) -> List[CheckResult]:
    """
    Seed-averaged directional comparisons between arm roles. Checks whose arms are
    missing come back with ``passed=None``.
    """
    paraphrase_reports = paraphrase_reports or {}
    probe_reports = probe_reports or {}
    out: List[CheckResult] = []

    def matching(role):
        return _seed_mean(success_reports[role], lambda r: r.matching_mean)

    def drop(role):
        return _seed_mean(success_reports[role], lambda r: r.matching_mean - r.aggregate_mean)

    def have(mapping, *roles):
        return all(mapping.get(r) for r in roles)

    if have(success_reports, "string_cotrain", "bin_cotrain"):
        diff = matching("string_cotrain") - matching("bin_cotrain")
        out.append(CheckResult("string_codec_beats_bin_codec", diff >= margin, diff, margin))
    else:
        out.append(CheckResult("string_codec_beats_bin_codec", None, detail="arms missing"))

    if have(success_reports, "full", "baseline"):
        diff = matching("full") - matching("baseline")
        out.append(CheckResult("full_beats_baseline", diff >= 2 * margin, diff, 2 * margin))
        gain = drop("baseline") - drop("full")
        out.append(CheckResult("visual_robustness", gain >= margin, gain, margin,
                               f"drops: full {drop('full'):.3f}, baseline {drop('baseline'):.3f}"))
    else:
        out.append(CheckResult("full_beats_baseline", None, detail="arms missing"))
        out.append(CheckResult("visual_robustness", None, detail="arms missing"))

    if have(paraphrase_reports, "full", "baseline"):
        full_gap = _seed_mean(paraphrase_reports["full"], lambda r: r.gap())
        base_gap = _seed_mean(paraphrase_reports["baseline"], lambda r: r.gap())
        out.append(CheckResult("paraphrase_robustness", base_gap - full_gap >= margin, base_gap - full_gap, margin,
                               f"gaps: full {full_gap:.3f}, baseline {base_gap:.3f}"))
    else:
        out.append(CheckResult("paraphrase_robustness", None, detail="arms missing"))

    def trainable(role):
        return _seed_mean(probe_reports[role], lambda r: r.accuracy("trainable"))

    if have(probe_reports, "dual_robot"):
        frozen = _seed_mean(probe_reports["dual_robot"], lambda r: r.accuracy("frozen"))
        diff = frozen - trainable("dual_robot")
        out.append(CheckResult("frozen_copy_preserved", diff >= 0.0, diff, 0.0))
    else:
        out.append(CheckResult("frozen_copy_preserved", None, detail="arms missing"))

    # same encoder and codec, only co-training differs
    if have(probe_reports, "full", "dual_string"):
        diff = trainable("full") - trainable("dual_string")
        out.append(CheckResult("cotraining_preserves_trainable", diff >= 0.0, diff, 0.0))
    else:
        out.append(CheckResult("cotraining_preserves_trainable", None, detail="arms missing"))

    for check in out:
        verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[check.passed]
        logger.info(f"Directional check {check.name}: {verdict} (value {check.value:.3f}) {check.detail}".rstrip())
    return out
