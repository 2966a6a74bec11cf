import numpy as np
import pytest

import optim
import tensor as T
from datasets import class_arrays, gen_class_dataset, num_classes
from encoders import (
    EncoderConfig,
    ImageObservation,
    encode,
    make_dual,
    patchify,
    pooled_features,
    pretrain_encoder,
)
from exceptions import ConfigError, PretrainingError, ShapeError

from conftest import TINY_ENCODER


def _images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, 32, 32, 3)).astype(np.float32)


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(patch_size=5)
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig.from_dict({"patch_size": 4, "depth": 3})
    assert EncoderConfig(patch_size=4).num_patches == 64


def test_patchify_row_major_order():
    img = np.arange(4 * 4 * 3, dtype=np.float32).reshape(1, 4, 4, 3)
    patches = patchify(img, 2)
    assert patches.shape == (1, 4, 12)
    assert np.array_equal(patches[0, 1], img[0, 0:2, 2:4].reshape(-1))
    assert np.array_equal(patches[0, 2], img[0, 2:4, 0:2].reshape(-1))


def test_image_observation_checks_shape():
    with pytest.raises(ShapeError):
        ImageObservation(np.zeros((32, 32)))
    obs = ImageObservation(np.full((32, 32, 3), 1.5))
    assert obs.pixels.max() == 1.0


def test_encoder_output_shape(encoder, encoder_cfg):
    out = encoder(_images(3))
    assert out.shape == (3, encoder_cfg.num_patches, encoder_cfg.embed_dim)
    with pytest.raises(ShapeError):
        encoder(np.zeros((1, 16, 16, 3), dtype=np.float32))


def test_make_dual_copies_and_freezes(encoder):
    dual = make_dual(encoder)
    assert all(not p.frozen for p in encoder.parameters())
    assert all(p.frozen for p in dual.frozen.parameters())
    assert all(not p.frozen for p in dual.trainable.parameters())
    for (_, a), (_, b) in zip(dual.frozen.named_parameters(), dual.trainable.named_parameters()):
        assert np.array_equal(a.data, b.data)
        assert a.data is not b.data


def test_dual_encode_concatenates_frozen_then_trainable(encoder, encoder_cfg):
    dual = make_dual(encoder)
    images = _images(2)
    out = encode(dual, images)
    d = encoder_cfg.embed_dim
    assert out.shape == (2, encoder_cfg.num_patches, 2 * d)
    assert dual.feature_dim == 2 * d
    assert np.allclose(out.data[..., :d], dual.frozen(images).data)
    assert np.allclose(out.data[..., d:], dual.trainable(images).data)


def test_training_through_dual_keeps_frozen_digest(encoder):
    dual = make_dual(encoder).bind_names("encoder.")
    before = dual.frozen_digest()
    opt = optim.AdamW(dual.parameters(), lr=1e-2)
    images = _images(2, seed=1)
    for _ in range(3):
        loss = T.tsum(T.mul(encode(dual, images), encode(dual, images)))
        T.backward(loss)
        assert all(p.grad is None for p in dual.frozen.parameters())
        assert all(p.grad is not None for p in dual.trainable.parameters())
        opt.step()
        opt.zero_grad()
    assert dual.frozen_digest() == before
    trained = dict(dual.trainable.named_parameters())
    assert not np.array_equal(trained["patch_embed.weight"].data, encoder.patch_embed.weight.data)


def test_pooled_features_shape(encoder, encoder_cfg):
    feats = pooled_features(encoder, _images(5), batch_size=2)
    assert feats.shape == (5, encoder_cfg.embed_dim)
    assert feats.dtype == np.float64


def test_pretrain_without_steps_skips_accuracy_target():
    images, labels = class_arrays(gen_class_dataset(0, 24))
    encoder, report = pretrain_encoder(images, labels, EncoderConfig(**TINY_ENCODER), steps=0, seed=0,
                                       num_classes=num_classes())
    assert report.steps == 0
    assert report.num_classes == 24 and report.num_samples == 24
    assert encoder.patch_embed.weight.name == "encoder.patch_embed.weight"


def test_pretrain_reports_missed_target():
    images, labels = class_arrays(gen_class_dataset(0, 16))
    with pytest.raises(PretrainingError, match="pretrain.steps"):
        pretrain_encoder(images, labels, EncoderConfig(**TINY_ENCODER), steps=1, seed=0, batch_size=8,
                         target_accuracy=1.01)


@pytest.mark.slow
def test_pretraining_reduces_loss():
    images, labels = class_arrays(gen_class_dataset(0, 64))
    cfg = EncoderConfig(**TINY_ENCODER)
    _, short = pretrain_encoder(images, labels, cfg, steps=1, seed=0, batch_size=16, target_accuracy=0.0)
    _, longer = pretrain_encoder(images, labels, cfg, steps=60, seed=0, batch_size=16, target_accuracy=0.0)
    assert longer.final_loss < short.final_loss
