"""
Co-training: exact-composition batch mixing, the training loop with resumable
checkpoints, and the encoder pretraining driver.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
import optim
import tensor as T
from action_codec import BinCodecConfig, CodecConfig, bin_encode_chunk, encode_chunk
from checkpoint import CheckpointState, load_checkpoint, load_into_module, save_checkpoint, state_from_module
from datasets import (
    EpisodeRecord,
    VLSample,
    class_arrays,
    dataset_vocab,
    num_classes,
    read_dataset,
)
from encoders import EncoderConfig, PatchEncoder, pretrain_encoder
from exceptions import ConfigError, DatasetFormatError, NonFiniteError
from logger import MetricsLog
from paraphrase import ParaphraseBank, paraphrase
from policy import (
    FormatFailure,
    PolicyBatch,
    PolicyConfig,
    PolicyModel,
    build_model,
    build_sequence,
    collate,
    component_losses,
    predict_actions,
)
from utils import array_digest, derive_seed, ensure_directory, make_rng
from vocab import Vocabulary, text_to_tokens, tokenize_text

logger = logging.getLogger('vla.cotrain')

DATASET_FILES = {
    "robot": "robot.jsonl",
    "vl": "vl.jsonl",
    "class": "class.jsonl",
    "class_holdout": "class_holdout.jsonl",
}
LAST_CHECKPOINT = "last.ckpt"
FINAL_CHECKPOINT = "final.ckpt"


@dataclass(frozen=True)
class MixerConfig:
    robot_fraction: float = 0.5
    batch_size: int = 16
    shuffle_seed: int = 0
    cotrain: bool = True

    def __post_init__(self):
        if not 0.0 <= self.robot_fraction <= 1.0:
            raise ConfigError(f"robot_fraction must lie in [0, 1], got {self.robot_fraction}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        exact = self.robot_fraction * self.batch_size
        if self.cotrain and abs(exact - round(exact)) > 1e-9:
            logger.warning(f"robot_fraction x batch_size = {exact} is not integral; rounding half up")

    @property
    def robot_count(self) -> int:
        """Robot samples per batch: ``floor(fraction * batch + 0.5)``, or the whole batch without co-training."""
        if not self.cotrain:
            return self.batch_size
        return int(math.floor(self.robot_fraction * self.batch_size + 0.5))

    @property
    def vl_count(self) -> int:
        return self.batch_size - self.robot_count


@dataclass(frozen=True)
class TrainConfig:
    """Flat view of one training arm; every ablation is a value change here."""

    steps: int = 20000
    batch_size: int = 16
    robot_fraction: float = 0.5
    cotrain: bool = True
    lr: float = config.ADAMW_LR
    betas: Tuple[float, float] = config.ADAMW_BETAS
    weight_decay: float = config.ADAMW_WEIGHT_DECAY
    eval_every: int = 2000
    checkpoint_every: int = 2000
    log_every: int = config.LOG_EVERY
    instruction_augmentation: bool = False
    augment_prob: float = 0.5
    dataset_dir: str = "data"
    encoder_checkpoint: str = "data/encoder.ckpt"
    seed: int = 0
    encoder_mode: str = "dual"
    codec_mode: str = "string"
    vl_question_kinds: Tuple[str, ...] = tuple(config.VL_QUESTION_KINDS)
    decimals: int = config.ACTION_DECIMALS
    num_bins: int = 256
    snapshot_samples: int = 8

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ConfigError("augment_prob must lie in [0, 1]")

    @classmethod
    def from_config(cls, cfg: Dict[str, Any]) -> "TrainConfig":
        train = dict(cfg["train"])
        train["betas"] = tuple(train["betas"])
        return cls(
            seed=int(cfg["seed"]),
            encoder_mode=cfg["policy"]["encoder_mode"],
            codec_mode=cfg["policy"]["codec_mode"],
            vl_question_kinds=tuple(cfg["data"]["vl_question_kinds"]),
            decimals=int(cfg["codec"]["decimals"]),
            num_bins=int(cfg["codec"]["num_bins"]),
            **train,
        )

    def mixer(self) -> MixerConfig:
        return MixerConfig(self.robot_fraction, self.batch_size, derive_seed(self.seed, "mixer"), self.cotrain)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainSample:
    image: np.ndarray
    instruction: str
    target: List[str]
    is_robot: bool


@dataclass
class MixedBatch:
    samples: List[TrainSample]

    @property
    def robot_count(self) -> int:
        return sum(1 for s in self.samples if s.is_robot)

    @property
    def vl_count(self) -> int:
        return len(self.samples) - self.robot_count


class SampleStream:
    """
    Endless shuffled pass over a fixed list.

    Epoch ``e`` uses permutation ``derive_seed(seed, "stream", name, e)``, so
    ``(epoch, position)`` is the whole resumable state.
    """

    def __init__(self, items: Sequence[Any], seed: int, name: str):
        if not items:
            raise DatasetFormatError(f"{name} stream is empty")
        self.items = list(items)
        self.seed = seed
        self.name = name
        self.epoch = 0
        self.position = 0
        self.order = self._permutation(0)

    def _permutation(self, epoch: int) -> np.ndarray:
        return make_rng(self.seed, "stream", self.name, epoch).permutation(len(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def next(self) -> Any:
        if self.position >= len(self.items):
            self.epoch += 1
            self.position = 0
            self.order = self._permutation(self.epoch)
            logger.info(f"{self.name} stream: epoch {self.epoch} begins (reshuffled {len(self.items)} samples)")
        item = self.items[int(self.order[self.position])]
        self.position += 1
        return item

    def take(self, n: int) -> List[Any]:
        return [self.next() for _ in range(n)]

    def state(self) -> Dict[str, int]:
        return {"epoch": self.epoch, "position": self.position}

    def load_state(self, state: Dict[str, int]) -> None:
        self.epoch = int(state["epoch"])
        self.position = int(state["position"])
        self.order = self._permutation(self.epoch)


def sample_batch(
    robot_stream: SampleStream,
    vl_stream: Optional[SampleStream],
    mixer: MixerConfig,
    rng: np.random.Generator,
) -> MixedBatch:
    """
    Draw exactly ``mixer.robot_count`` robot samples and the remainder VL samples,
    then shuffle their order within the batch.

    Raises:
        ConfigError: VL samples requested but no VL stream given
    """
    robot = robot_stream.take(mixer.robot_count)
    vl: List[Any] = []
    if mixer.vl_count:
        if vl_stream is None:
            raise ConfigError("co-training needs a VL stream")
        vl = vl_stream.take(mixer.vl_count)
    samples = robot + vl
    order = rng.permutation(len(samples))
    return MixedBatch([samples[int(i)] for i in order])


# ---------------------------------------------------------------------------
# Sample preparation
# ---------------------------------------------------------------------------

def robot_samples(episodes: Sequence[EpisodeRecord], codec_mode: str, codec_cfg: CodecConfig,
                  bin_cfg: BinCodecConfig) -> List[TrainSample]:
    out = []
    for episode in episodes:
        for s in episode.steps:
            target = encode_chunk(s.chunk, codec_cfg) if codec_mode == "string" else bin_encode_chunk(s.chunk, bin_cfg)
            out.append(TrainSample(s.observation.pixels, s.instruction, target, True))
    return out


def vl_samples(samples: Sequence[VLSample], kinds: Sequence[str]) -> List[TrainSample]:
    return [TrainSample(s.observation.pixels, s.question, text_to_tokens(s.answer), False)
            for s in samples if s.kind in kinds]


def to_policy_batch(batch: MixedBatch, vocab: Vocabulary, max_seq_len: int,
                    augment: Optional[Tuple[ParaphraseBank, float]] = None,
                    rng: Optional[np.random.Generator] = None) -> PolicyBatch:
    """Tokenize a mixed batch; robot instructions are paraphrased from the train-visible split when augmenting."""
    sequences, images, flags = [], [], []
    for sample in batch.samples:
        instruction = sample.instruction
        if augment is not None and sample.is_robot:
            bank, prob = augment
            if rng.random() < prob:
                instruction = paraphrase(instruction, bank, rng, "train")
        sequences.append(build_sequence(tokenize_text(instruction, vocab).ids, vocab.ids(sample.target),
                                        vocab, max_seq_len))
        images.append(sample.image)
        flags.append(sample.is_robot)
    return collate(images, sequences, vocab, flags)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    run_dir: Path
    final_checkpoint: Path
    steps: int
    final_loss: float
    frozen_digest: Optional[str] = None
    snapshots: List[Dict[str, Any]] = field(default_factory=list)


def load_encoder(path: Union[str, Path], cfg: EncoderConfig) -> PatchEncoder:
    state = load_checkpoint(path)
    if state.kind != "encoder":
        raise ConfigError(f"{path} holds a {state.kind} checkpoint, expected an encoder")
    encoder = PatchEncoder(cfg, np.random.default_rng(0))
    load_into_module(encoder, state)
    return encoder.bind_names("encoder.")


class Trainer:
    """One training arm: datasets, model, optimizer, streams and the step loop."""

    def __init__(self, cfg: Dict[str, Any], run_dir: Union[str, Path],
                 data_dir: Optional[Union[str, Path]] = None,
                 encoder_path: Optional[Union[str, Path]] = None):
        self.logger = logging.getLogger('vla.cotrain.trainer')
        self.cfg = cfg
        config.check_horizons(cfg)
        self.tc = TrainConfig.from_config(cfg)
        self.run_dir = Path(run_dir)
        self.data_dir = Path(data_dir if data_dir is not None else self.tc.dataset_dir)
        self.encoder_path = Path(encoder_path if encoder_path is not None else self.tc.encoder_checkpoint)
        self.policy_cfg = PolicyConfig.from_dict(cfg["policy"])
        self.encoder_cfg = EncoderConfig.from_dict(cfg["encoder"])
        self.codec_cfg = CodecConfig(decimals=self.tc.decimals)
        self.bin_cfg = BinCodecConfig(num_bins=self.tc.num_bins)
        self.mixer = self.tc.mixer()
        self.bank = ParaphraseBank()
        self.last_good: Optional[Path] = None

        self._load_data()
        self._build()

    def _load_data(self) -> None:
        robot_path = self.data_dir / DATASET_FILES["robot"]
        robot_header, episodes = read_dataset(robot_path)
        self.vocab = dataset_vocab(robot_header)
        lengths = {len(s.chunk) for e in episodes for s in e.steps}
        if lengths - {self.policy_cfg.horizon}:
            raise ConfigError(
                f"robot dataset holds chunks of length {sorted(lengths)}, "
                f"but policy.horizon={self.policy_cfg.horizon}"
            )
        self.train_robot = robot_samples(episodes, self.tc.codec_mode, self.codec_cfg, self.bin_cfg)
        self.train_vl: List[TrainSample] = []
        if self.mixer.vl_count:
            vl_header, vl = read_dataset(self.data_dir / DATASET_FILES["vl"])
            if dataset_vocab(vl_header) != self.vocab:
                raise DatasetFormatError("robot and VL datasets were generated with different vocabularies")
            self.train_vl = vl_samples(vl, self.tc.vl_question_kinds)
        self.logger.info(
            f"Loaded {len(self.train_robot)} robot samples from {len(episodes)} episodes, "
            f"{len(self.train_vl)} VL samples"
        )

    def _build(self) -> None:
        if self.encoder_path.is_file():
            encoder = load_encoder(self.encoder_path, self.encoder_cfg)
        elif self.tc.encoder_mode == "dual":
            raise ConfigError(
                f"dual encoder mode needs a pretrained encoder at {self.encoder_path}; run the pretrain command"
            )
        else:
            self.logger.warning(f"No pretrained encoder at {self.encoder_path}; single encoder starts from random init")
            encoder = PatchEncoder(self.encoder_cfg, make_rng(self.tc.seed, "encoder-init"))
        self.pretrained_encoder = encoder
        self.pretrained_digest = None
        if self.tc.encoder_mode == "dual":
            self.pretrained_digest = array_digest((n, p.data) for n, p in encoder.named_parameters())
        self.model = build_model(self.policy_cfg, self.vocab, encoder, make_rng(self.tc.seed, "init"))
        self.optimizer = optim.AdamW(self.model.parameters(), lr=self.tc.lr, betas=self.tc.betas,
                                     weight_decay=self.tc.weight_decay)
        self.rng = make_rng(self.tc.seed, "batches")
        self.robot_stream = SampleStream(self.train_robot, self.tc.seed, "robot")
        self.vl_stream = SampleStream(self.train_vl, self.tc.seed, "vl") if self.train_vl else None
        self.step = 0

    # -- checkpoint plumbing --------------------------------------------------

    def state(self) -> CheckpointState:
        extra = {"streams": {"robot": self.robot_stream.state()}}
        if self.vl_stream is not None:
            extra["streams"]["vl"] = self.vl_stream.state()
        extra["pretrained_frozen_digest"] = self.pretrained_digest
        return state_from_module(
            self.model, "policy", self.cfg, self.step,
            vocab=self.vocab.to_dict(),
            optimizer=self.optimizer.state_dict(),
            rng_state=self.rng.bit_generator.state,
            extra=extra,
        )

    def restore(self, state: CheckpointState) -> None:
        load_into_module(self.model, state)
        if state.optimizer is not None:
            self.optimizer.load_state_dict(state.optimizer)
        if state.rng_state is not None:
            self.rng.bit_generator.state = state.rng_state
        streams = state.extra.get("streams", {})
        self.robot_stream.load_state(streams["robot"])
        if self.vl_stream is not None and "vl" in streams:
            self.vl_stream.load_state(streams["vl"])
        self.step = state.step
        self.logger.info(f"Resumed from step {self.step}")

    def save(self, name: str = LAST_CHECKPOINT) -> Path:
        path = save_checkpoint(self.state(), self.run_dir / name)
        self.last_good = path
        return path

    def frozen_digest(self) -> Optional[str]:
        encoder = self.model.encoder
        return encoder.frozen_digest() if hasattr(encoder, "frozen_digest") else None

    # -- loop -------------------------------------------------------------------

    def next_batch(self) -> PolicyBatch:
        mixed = sample_batch(self.robot_stream, self.vl_stream, self.mixer, self.rng)
        augment = (self.bank, self.tc.augment_prob) if self.tc.instruction_augmentation else None
        return to_policy_batch(mixed, self.vocab, self.policy_cfg.max_seq_len, augment, self.rng)

    def snapshot(self) -> Dict[str, Any]:
        """Parse rate and exact-match rate of greedy action strings on a fixed robot probe set."""
        rng = make_rng(self.tc.seed, "snapshot")
        count = min(self.tc.snapshot_samples, len(self.train_robot))
        picks = rng.permutation(len(self.train_robot))[:count]
        samples = [self.train_robot[int(i)] for i in picks]
        outputs = predict_actions(self.model, np.stack([s.image for s in samples]),
                                  [s.instruction for s in samples], self.codec_cfg, self.bin_cfg)
        parsed = [o for o in outputs if not isinstance(o, FormatFailure)]
        return {"step": self.step, "type": "snapshot", "parse_rate": len(parsed) / max(1, count)}

    def run(self, resume: bool = False) -> TrainResult:
        ensure_directory(self.run_dir)
        last = self.run_dir / LAST_CHECKPOINT
        if resume and last.is_file():
            self.restore(load_checkpoint(last))
            self.last_good = last
        elif resume:
            self.logger.warning(f"--resume given but {last} does not exist; starting from scratch")
        metrics = MetricsLog(self.run_dir / "metrics.jsonl", append=resume)
        if resume:
            metrics.truncate_after(self.step)
        if self.step == 0:
            self.save()

        loss_value = float("nan")
        snapshots: List[Dict[str, Any]] = []
        while self.step < self.tc.steps:
            batch = self.next_batch()
            logits = self.model.logits(self.model.image_embeddings(batch.images), batch.inputs)
            loss = T.cross_entropy(logits, batch.labels, batch.loss_mask)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NonFiniteError(
                    f"loss became {loss_value} at step {self.step + 1}; last good checkpoint: {self.last_good}"
                )
            T.backward(loss)
            self.optimizer.step()
            self.optimizer.zero_grad()
            self.step += 1

            record = {"step": self.step, "type": "train", "loss": loss_value, "lr": self.tc.lr,
                      **component_losses(logits.data, batch)}
            metrics.write(record)
            if self.step % self.tc.log_every == 0:
                self.logger.info(f"step {self.step}/{self.tc.steps}: loss {loss_value:.4f}")
            else:
                self.logger.debug(f"step {self.step}: loss {loss_value:.4f}")
            if self.tc.checkpoint_every and self.step % self.tc.checkpoint_every == 0:
                self.save()
                self.logger.info(f"Checkpoint written at step {self.step}")
            if self.tc.eval_every and self.step % self.tc.eval_every == 0:
                snap = self.snapshot()
                snapshots.append(snap)
                metrics.write(snap)
                self.logger.info(f"Snapshot at step {self.step}: parse rate {snap['parse_rate']:.3f}")

        self.save()
        final = save_checkpoint(self.state(), self.run_dir / FINAL_CHECKPOINT)
        digest = self.frozen_digest()
        if digest != self.pretrained_digest:
            self.logger.error(
                f"Frozen encoder drifted from the pretrained checkpoint: {digest} != {self.pretrained_digest}"
            )
        self.logger.info(f"Training finished at step {self.step}; final checkpoint {final}")
        return TrainResult(self.run_dir, final, self.step, loss_value, digest, snapshots)


def train(cfg: Dict[str, Any], run_dir: Union[str, Path], resume: bool = False,
          data_dir: Optional[Union[str, Path]] = None,
          encoder_path: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Train one arm and write ``final.ckpt`` plus ``metrics.jsonl`` into ``run_dir``.

    Args:
        cfg (Dict[str, Any]): Merged configuration tree
        run_dir: Output directory of the arm
        resume (bool): Continue from ``run_dir/last.ckpt`` when present

    Returns:
        TrainResult: Paths and summary of the run

    Raises:
        NonFiniteError: Loss turned NaN/Inf; the message names the step and the last good checkpoint
    """
    return Trainer(cfg, run_dir, data_dir, encoder_path).run(resume)


def load_policy(path: Union[str, Path]) -> Tuple[PolicyModel, CheckpointState]:
    """Rebuild a policy from a checkpoint written by ``train``."""
    state = load_checkpoint(path)
    if state.kind != "policy":
        raise ConfigError(f"{path} holds a {state.kind} checkpoint, expected a policy")
    cfg = state.config
    vocab = Vocabulary.from_dict(state.vocab)
    encoder = PatchEncoder(EncoderConfig.from_dict(cfg["encoder"]), np.random.default_rng(0))
    model = build_model(PolicyConfig.from_dict(cfg["policy"]), vocab, encoder, np.random.default_rng(0))
    load_into_module(model, state)
    for name, p in model.named_parameters():
        if state.frozen.get(name):
            p.freeze()
    return model, state


# ---------------------------------------------------------------------------
# Encoder pretraining
# ---------------------------------------------------------------------------

def pretrain(cfg: Dict[str, Any], out_path: Union[str, Path],
             data_dir: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """
    Pretrain the shared encoder on the class dataset and save it as an encoder checkpoint.

    Returns:
        Dict[str, Any]: Pretraining summary (train accuracy, steps, class count)
    """
    data_dir = Path(data_dir if data_dir is not None else cfg["train"]["dataset_dir"])
    _, samples = read_dataset(data_dir / DATASET_FILES["class"])
    images, labels = class_arrays(samples)
    pcfg = cfg["pretrain"]
    encoder_cfg = EncoderConfig.from_dict(cfg["encoder"])
    encoder, report = pretrain_encoder(
        images, labels, encoder_cfg,
        steps=int(pcfg["steps"]),
        seed=derive_seed(int(cfg["seed"]), "pretrain"),
        batch_size=int(pcfg["batch_size"]),
        lr=float(pcfg["lr"]),
        target_accuracy=float(pcfg["target_accuracy"]),
        num_classes=num_classes(),
    )
    state = state_from_module(encoder, "encoder", cfg, report.steps, extra={"report": report.to_dict()})
    save_checkpoint(state, out_path)
    logger.info(f"Encoder checkpoint written to {out_path}")
    return report.to_dict()
