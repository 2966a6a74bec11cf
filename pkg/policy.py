"""
Language-conditioned autoregressive decoder over the unified vocabulary.

Layout of one sample: ``[image patch embeddings] [BOS] instruction [ANS] target [EOS]``.
Image positions attend to each other only; token positions attend to every image
position and causally to tokens. One output head serves action strings and VL
answers alike.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
import tensor as T
from action_codec import (
    ActionChunk,
    BinCodecConfig,
    CodecConfig,
    bin_decode_chunk,
    bin_token,
    decode_chunk,
)
from encoders import (
    DualEncoderState,
    EncoderConfig,
    ImageBatch,
    PatchEncoder,
    make_dual,
)
from exceptions import BinDecodeError, ConfigError, ParseError, SequenceTooLongError
from layers import Block, Embedding, LayerNorm, Linear, Module
from tensor import Tensor
from vocab import TokenSequence, Vocabulary, tokenize_text

logger = logging.getLogger('vla.policy')

NEG_INF = -1e9
ENCODER_MODES = ("single", "dual")
CODEC_MODES = ("string", "bin")


@dataclass(frozen=True)
class PolicyConfig:
    width: int = 128
    layers: int = 4
    heads: int = 4
    max_seq_len: int = 160  # token positions; image positions come on top
    horizon: int = 2
    encoder_mode: str = "dual"
    codec_mode: str = "string"

    def __post_init__(self):
        if self.encoder_mode not in ENCODER_MODES:
            raise ConfigError(f"encoder_mode must be one of {ENCODER_MODES}, got {self.encoder_mode!r}")
        if self.codec_mode not in CODEC_MODES:
            raise ConfigError(f"codec_mode must be one of {CODEC_MODES}, got {self.codec_mode!r}")
        if not 1 <= self.horizon <= config.MAX_HORIZON:
            raise ConfigError(f"horizon must lie in [1, {config.MAX_HORIZON}]")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by {self.heads} heads")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PolicyConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown policy config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class GenerationConfig:
    mode: str = "greedy"
    max_new_tokens: int = 120
    temperature: float = 1.0
    allowed_ids: Optional[Tuple[int, ...]] = None
    fixed_length: Optional[int] = None

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ConfigError(f"generation mode must be greedy or sample, got {self.mode!r}")
        if self.mode == "sample" and self.temperature <= 0:
            raise ConfigError("temperature must be > 0 when sampling")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")


@dataclass
class FormatFailure:
    """A generated action string that does not parse; scored as a no-op step."""

    error: str
    tokens: List[str] = field(default_factory=list)


class PolicyModel(Module):
    """Encoder (single or dual), input projection, causal decoder blocks, one vocabulary head."""

    def __init__(self, cfg: PolicyConfig, vocab: Vocabulary, encoder: Union[PatchEncoder, DualEncoderState],
                 rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = encoder
        self.proj = Linear(encoder.feature_dim, cfg.width, rng)
        self.tok_emb = Embedding(len(vocab), cfg.width, rng)
        self.pos_emb = Embedding(cfg.max_seq_len, cfg.width, rng)
        self.blocks = [Block(cfg.width, cfg.heads, rng) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.width)
        self.head = Linear(cfg.width, len(vocab), rng)
        self.bind_names()

    @property
    def encoder_cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    @property
    def num_image_positions(self) -> int:
        return self.encoder_cfg.num_patches

    def image_embeddings(self, images: ImageBatch) -> Tensor:
        return self.proj(self.encoder(images))

    def logits(self, image_emb: Tensor, ids: np.ndarray) -> Tensor:
        """
        Token logits ``[B, L, V]`` for input ids ``[B, L]`` given projected image embeddings.
        """
        ids = np.asarray(ids, dtype=np.int64)
        b, length = ids.shape
        if length > self.cfg.max_seq_len:
            raise SequenceTooLongError(f"{length} token positions exceed max_seq_len {self.cfg.max_seq_len}")
        n = image_emb.shape[1]
        positions = np.broadcast_to(np.arange(length), (b, length))
        tokens = T.add(self.tok_emb(ids), self.pos_emb(positions))
        x = T.concat([image_emb, tokens], axis=1)
        mask = attention_mask(n, length)
        for block in self.blocks:
            x = block(x, mask)
        x = T.slice_axis(self.ln_f(x), 1, n, n + length)
        return self.head(x)


def attention_mask(num_image: int, num_tokens: int) -> np.ndarray:
    """Additive mask: image rows see image columns; token rows see images and earlier tokens."""
    total = num_image + num_tokens
    allowed = np.zeros((total, total), dtype=bool)
    allowed[:num_image, :num_image] = True
    allowed[num_image:, :num_image] = True
    allowed[num_image:, num_image:] = np.tril(np.ones((num_tokens, num_tokens), dtype=bool))
    return np.where(allowed, 0.0, NEG_INF)


def build_model(cfg: PolicyConfig, vocab: Vocabulary, encoder: PatchEncoder, rng: np.random.Generator) -> PolicyModel:
    """Wrap a (pretrained) encoder according to the encoder mode and build the decoder."""
    if cfg.encoder_mode == "dual":
        wrapped: Union[PatchEncoder, DualEncoderState] = make_dual(encoder)
    else:
        wrapped = copy.deepcopy(encoder)
        for p in wrapped.parameters():
            p.frozen = False
            p.requires_grad = True
    model = PolicyModel(cfg, vocab, wrapped, rng)
    logger.info(
        f"Built policy ({cfg.encoder_mode} encoder, {cfg.codec_mode} codec): "
        f"{sum(p.size for p in model.parameters())} parameters, "
        f"{sum(p.size for p in model.parameters() if not p.frozen)} trainable"
    )
    return model


# ---------------------------------------------------------------------------
# Sequences and batches
# ---------------------------------------------------------------------------

def build_sequence(instruction_ids: Sequence[int], target_ids: Sequence[int], vocab: Vocabulary,
                   max_seq_len: int) -> TokenSequence:
    """
    ``[BOS] instruction [ANS] target [EOS]`` with the target and EOS positions supervised.

    Raises:
        SequenceTooLongError: Never truncates silently
    """
    ids = [vocab.bos_id, *instruction_ids, vocab.answer_start_id, *target_ids, vocab.eos_id]
    if len(ids) > max_seq_len:
        raise SequenceTooLongError(f"sequence of {len(ids)} tokens exceeds max_seq_len {max_seq_len}")
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(instruction_ids) + 2:] = True
    return TokenSequence(np.array(ids, dtype=np.int64), mask)


def prompt_ids(instruction_ids: Sequence[int], vocab: Vocabulary) -> List[int]:
    return [vocab.bos_id, *instruction_ids, vocab.answer_start_id]


@dataclass
class PolicyBatch:
    """Padded teacher-forcing batch: ``inputs[:, i]`` predicts ``labels[:, i]`` where ``loss_mask``."""

    images: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray
    loss_mask: np.ndarray
    is_robot: np.ndarray

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


def collate(images: Sequence[np.ndarray], sequences: Sequence[TokenSequence], vocab: Vocabulary,
            is_robot: Optional[Sequence[bool]] = None) -> PolicyBatch:
    length = max(len(s) for s in sequences)
    b = len(sequences)
    ids = np.full((b, length), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((b, length), dtype=bool)
    for i, seq in enumerate(sequences):
        ids[i, :len(seq)] = seq.ids
        mask[i, :len(seq)] = seq.mask
    robot = np.ones(b, dtype=bool) if is_robot is None else np.asarray(is_robot, dtype=bool)
    return PolicyBatch(np.stack(images), ids[:, :-1], ids[:, 1:], mask[:, 1:], robot)


def forward_loss(model: PolicyModel, batch: PolicyBatch) -> Tensor:
    """
    Teacher-forced cross-entropy averaged over every supervised position of the batch.

    Returns:
        Tensor: Scalar loss
    """
    logits = model.logits(model.image_embeddings(batch.images), batch.inputs)
    return T.cross_entropy(logits, batch.labels, batch.loss_mask)


def position_nll(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logp = T.log_softmax_rows(logits.astype(np.float64))
    return -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]


def per_sample_losses(model: PolicyModel, batch: PolicyBatch) -> np.ndarray:
    """Mean NLL over each sample's own supervised positions, computed without a graph."""
    with T.no_grad():
        logits = model.logits(model.image_embeddings(batch.images), batch.inputs).data
    nll = position_nll(logits, batch.labels)
    counts = batch.loss_mask.sum(axis=1)
    return (nll * batch.loss_mask).sum(axis=1) / np.maximum(counts, 1)


def component_losses(logits: np.ndarray, batch: PolicyBatch) -> Dict[str, float]:
    """Token-weighted loss restricted to robot samples and to VL samples."""
    nll = position_nll(logits, batch.labels)
    out = {}
    for name, rows in (("robot_loss", batch.is_robot), ("vl_loss", ~batch.is_robot)):
        mask = batch.loss_mask & rows[:, None]
        out[name] = float((nll * mask).sum() / mask.sum()) if mask.any() else float("nan")
    return out


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _pick(logits: np.ndarray, gen: GenerationConfig, rng: Optional[np.random.Generator]) -> int:
    logits = logits.astype(np.float64)
    if gen.allowed_ids is not None:
        restricted = np.full_like(logits, -np.inf)
        allowed = np.asarray(gen.allowed_ids)
        restricted[allowed] = logits[allowed]
        logits = restricted
    if gen.mode == "greedy":
        return int(np.argmax(logits))
    if rng is None:
        raise ConfigError("sampling needs an rng")
    z = logits / gen.temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def generate_batch(
    model: PolicyModel,
    images: ImageBatch,
    prompts: Sequence[Sequence[int]],
    gen: GenerationConfig = GenerationConfig(),
    rng: Optional[np.random.Generator] = None,
) -> List[TokenSequence]:
    """
    Decode a batch of prompts autoregressively; each sample stops at EOS, its own
    ``fixed_length``, or ``max_new_tokens``. The full forward pass is recomputed
    every step.

    Returns:
        List[TokenSequence]: Generated ids per sample, EOS excluded
    """
    vocab = model.vocab
    with T.no_grad():
        image_emb = model.image_embeddings(images)
        b = len(prompts)
        limit = gen.fixed_length or gen.max_new_tokens
        lengths = [len(p) for p in prompts]
        buffer = np.full((b, max(lengths) + limit), vocab.pad_id, dtype=np.int64)
        for i, p in enumerate(prompts):
            buffer[i, :len(p)] = p
        generated: List[List[int]] = [[] for _ in range(b)]
        active = list(range(b))
        for _ in range(limit):
            if not active:
                break
            width = max(lengths[i] for i in active)
            if width > model.cfg.max_seq_len:
                break
            rows = np.array(active)
            logits = model.logits(
                T.Tensor(image_emb.data[rows], dtype=image_emb.data.dtype), buffer[rows, :width]
            ).data
            still = []
            for r, i in enumerate(active):
                token = _pick(logits[r, lengths[i] - 1], gen, rng)
                if token == vocab.eos_id and gen.fixed_length is None:
                    continue
                generated[i].append(token)
                buffer[i, lengths[i]] = token
                lengths[i] += 1
                if len(generated[i]) < limit and lengths[i] < buffer.shape[1]:
                    still.append(i)
            active = still
    return [TokenSequence(np.array(g, dtype=np.int64), np.zeros(len(g), dtype=bool)) for g in generated]


def generate(model: PolicyModel, obs: ImageBatch, instruction: str,
             gen: GenerationConfig = GenerationConfig(), rng: Optional[np.random.Generator] = None) -> TokenSequence:
    prompt = prompt_ids(tokenize_text(instruction, model.vocab).ids.tolist(), model.vocab)
    return generate_batch(model, obs, [prompt], gen, rng)[0]


def action_generation_config(model: PolicyModel, codec_cfg: CodecConfig = CodecConfig(),
                             bin_cfg: Optional[BinCodecConfig] = None) -> GenerationConfig:
    """Bin mode decodes exactly 7*H bin tokens; string mode decodes freely up to a whole chunk plus EOS."""
    horizon = model.cfg.horizon
    if model.cfg.codec_mode == "bin":
        bin_cfg = bin_cfg or BinCodecConfig(num_bins=model.vocab.num_bins)
        allowed = tuple(model.vocab.id(bin_token(i)) for i in range(bin_cfg.num_bins))
        return GenerationConfig(allowed_ids=allowed, fixed_length=7 * horizon, max_new_tokens=7 * horizon)
    # sign, digit, point, decimals; six scalars plus six separators and the gripper per action
    longest_scalar = 3 + codec_cfg.decimals
    longest_chunk = horizon * (6 * longest_scalar + 7) + (horizon - 1)
    return GenerationConfig(max_new_tokens=longest_chunk + 1)


def decode_action_tokens(tokens: Sequence[str], model: PolicyModel, codec_cfg: CodecConfig,
                         bin_cfg: Optional[BinCodecConfig] = None) -> Union[ActionChunk, FormatFailure]:
    try:
        if model.cfg.codec_mode == "bin":
            return bin_decode_chunk(tokens, bin_cfg or BinCodecConfig(num_bins=model.vocab.num_bins))
        return decode_chunk(tokens, codec_cfg)
    except (ParseError, BinDecodeError) as e:
        return FormatFailure(str(e), list(tokens))


def predict_actions(model: PolicyModel, images: ImageBatch, instructions: Sequence[str],
                    codec_cfg: CodecConfig = CodecConfig(),
                    bin_cfg: Optional[BinCodecConfig] = None) -> List[Union[ActionChunk, FormatFailure]]:
    """Batched ``predict_action``: generate, then decode each output with the model's codec."""
    vocab = model.vocab
    prompts = [prompt_ids(tokenize_text(s, vocab).ids.tolist(), vocab) for s in instructions]
    outputs = generate_batch(model, images, prompts, action_generation_config(model, codec_cfg, bin_cfg))
    return [decode_action_tokens(vocab.token_strings(seq.ids), model, codec_cfg, bin_cfg) for seq in outputs]


def predict_action(model: PolicyModel, obs: ImageBatch, instruction: str,
                   codec_cfg: CodecConfig = CodecConfig(),
                   bin_cfg: Optional[BinCodecConfig] = None) -> Union[ActionChunk, FormatFailure]:
    """
    Generate an action string for one observation and parse it.

    Returns:
        Union[ActionChunk, FormatFailure]: The decoded chunk, or the parse failure
    """
    return predict_actions(model, obs, [instruction], codec_cfg, bin_cfg)[0]
