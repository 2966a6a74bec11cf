"""
Patch-transformer image encoder, its supervised pretraining, and the
partially-frozen dual-encoder wrapper.
"""

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

import config
import optim
import tensor as T
from exceptions import ConfigError, PretrainingError, ShapeError
from layers import Block, LayerNorm, Linear, Module
from tensor import Parameter, Tensor
from utils import array_digest

logger = logging.getLogger('vla.encoders')


@dataclass(frozen=True, eq=False)
class ImageObservation:
    """An RGB image in [0, 1], shape ``[height, width, 3]``."""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != config.IMAGE_CHANNELS:
            raise ShapeError("ImageObservation", pixels.shape, ("H", "W", config.IMAGE_CHANNELS))
        object.__setattr__(self, "pixels", np.clip(pixels, 0.0, 1.0))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    def to_levels(self) -> np.ndarray:
        return np.round(self.pixels * config.PIXEL_LEVELS).astype(np.uint8)

    @classmethod
    def from_levels(cls, levels, shape: Sequence[int]) -> "ImageObservation":
        levels = np.asarray(levels, dtype=np.float32).reshape(tuple(shape))
        return cls(levels / np.float32(config.PIXEL_LEVELS))


ImageBatch = Union[ImageObservation, Sequence[ImageObservation], np.ndarray]


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    image_size: int = config.IMAGE_SIZE

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} is not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by {self.num_heads} heads")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * config.IMAGE_CHANNELS

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EncoderConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown encoder config keys: {sorted(unknown)}")
        return cls(**data)


def as_image_array(images: ImageBatch, cfg: EncoderConfig) -> np.ndarray:
    """Stack observations into ``[B, H, W, 3]`` and check their size."""
    if isinstance(images, ImageObservation):
        arr = images.pixels[None]
    elif isinstance(images, np.ndarray):
        arr = images if images.ndim == 4 else images[None]
    else:
        arr = np.stack([obs.pixels for obs in images])
    expected = (cfg.image_size, cfg.image_size, config.IMAGE_CHANNELS)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ShapeError("encode", arr.shape, ("B",) + expected)
    return arr


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[B, H, W, C]`` -> ``[B, num_patches, p*p*C]`` in row-major patch order."""
    b, h, w, c = images.shape
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


class PatchEncoder(Module):
    """Linear patch embedding plus learned positions, then bidirectional transformer blocks."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.embed_dim, rng)
        self.pos = Parameter(rng.normal(0.0, config.INIT_STD, size=(cfg.num_patches, cfg.embed_dim)))
        self.blocks = [Block(cfg.embed_dim, cfg.num_heads, rng) for _ in range(cfg.num_layers)]
        self.ln_f = LayerNorm(cfg.embed_dim)

    def __call__(self, images: ImageBatch) -> Tensor:
        arr = as_image_array(images, self.cfg)
        patches = Tensor(patchify(arr - 0.5, self.cfg.patch_size))
        x = self.patch_embed(patches)
        b = x.shape[0]
        pos_ids = np.broadcast_to(np.arange(self.cfg.num_patches), (b, self.cfg.num_patches))
        x = T.add(x, T.embedding(self.pos, pos_ids))
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    @property
    def feature_dim(self) -> int:
        return self.cfg.embed_dim


class DualEncoderState(Module):
    """Frozen anchor copy plus trainable copy of one pretrained encoder."""

    def __init__(self, frozen: PatchEncoder, trainable: PatchEncoder):
        if frozen.cfg != trainable.cfg:
            raise ConfigError("dual encoder copies must share one config")
        self.cfg = frozen.cfg
        self.frozen = frozen
        self.trainable = trainable

    def __call__(self, images: ImageBatch) -> Tensor:
        return encode(self, images)

    @property
    def feature_dim(self) -> int:
        return 2 * self.cfg.embed_dim

    def frozen_digest(self) -> str:
        return array_digest((n, p.data) for n, p in self.frozen.named_parameters())


def make_dual(encoder: PatchEncoder) -> DualEncoderState:
    """
    Duplicate a pretrained encoder and freeze the first copy.

    Args:
        encoder (PatchEncoder): Pretrained encoder (left untouched)

    Returns:
        DualEncoderState: Byte-identical copies; ``frozen`` never receives updates
    """
    frozen = copy.deepcopy(encoder)
    trainable = copy.deepcopy(encoder)
    frozen.freeze()
    for p in trainable.parameters():
        p.frozen = False
        p.requires_grad = True
    state = DualEncoderState(frozen, trainable)
    logger.debug(f"Dual encoder created, frozen digest {state.frozen_digest()[:12]}")
    return state


def encode(state: DualEncoderState, images: ImageBatch) -> Tensor:
    """Per-patch concatenation: frozen features in the first d dims, trainable in the last d."""
    return T.concat([state.frozen(images), state.trainable(images)], axis=-1)


def encode_single(encoder: PatchEncoder, images: ImageBatch) -> Tensor:
    return encoder(images)


def pooled_features(encoder: Union[PatchEncoder, DualEncoderState], images: np.ndarray,
                    batch_size: int = 256) -> np.ndarray:
    """Mean-pooled patch features without recording a graph."""
    out = []
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            feats = encoder(images[start:start + batch_size])
            out.append(feats.data.mean(axis=1))
    return np.concatenate(out, axis=0).astype(np.float64)


class ClassificationHead(Module):
    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.fc = Linear(dim, num_classes, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return self.fc(T.mean(features, axis=1))


@dataclass
class PretrainReport:
    steps: int
    final_loss: float
    train_accuracy: float
    num_classes: int
    num_samples: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def classification_accuracy(encoder: PatchEncoder, head: ClassificationHead, images: np.ndarray,
                            labels: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    with T.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = head(encoder(images[start:start + batch_size])).data
            correct += int((logits.argmax(axis=-1) == labels[start:start + batch_size]).sum())
    return correct / max(1, images.shape[0])


def pretrain_encoder(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: EncoderConfig,
    steps: int,
    seed: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    target_accuracy: float = 0.9,
    num_classes: Optional[int] = None,
) -> Tuple[PatchEncoder, PretrainReport]:
    """
    Train encoder plus a linear head on the synthetic shape/color classes; the head is discarded.

    Args:
        images (np.ndarray): ``[N, H, W, 3]`` class images
        labels (np.ndarray): Integer class ids
        cfg (EncoderConfig): Encoder shape
        steps (int): Optimizer steps
        seed (int): Seed for initialization and minibatch order

    Returns:
        Tuple[PatchEncoder, PretrainReport]: The pretrained backbone and its training summary

    Raises:
        PretrainingError: Train accuracy below ``target_accuracy``
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = num_classes or int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    encoder = PatchEncoder(cfg, rng).bind_names("encoder.")
    head = ClassificationHead(cfg.embed_dim, num_classes, rng).bind_names("head.")
    opt = optim.AdamW(encoder.parameters() + head.parameters(), lr=lr, weight_decay=0.0)

    loss_value = float("nan")
    n = images.shape[0]
    order = rng.permutation(n)
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        loss = T.cross_entropy(head(encoder(images[idx])), labels[idx])
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise PretrainingError(f"Non-finite pretraining loss at step {step}")
        T.backward(loss)
        opt.step()
        opt.zero_grad()
        if step % config.LOG_EVERY == 0:
            logger.debug(f"pretrain step {step}: loss {loss_value:.4f}")

    accuracy = classification_accuracy(encoder, head, images, labels)
    report = PretrainReport(steps, loss_value, accuracy, num_classes, n)
    logger.info(f"Encoder pretraining finished: train accuracy {accuracy:.3f} after {steps} steps")
    if steps and accuracy < target_accuracy:
        raise PretrainingError(
            f"Pretraining reached {accuracy:.3f} train accuracy, below the {target_accuracy} target; "
            f"raise pretrain.steps or change pretrain.lr / seed ({seed})"
        )
    return encoder, report
