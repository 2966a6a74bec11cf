import numpy as np
import pytest

import optim
import tensor as T
from action_codec import ActionChunk, ActionVector, BinCodecConfig, CodecConfig, bin_encode_chunk, encode_chunk
from encoders import EncoderConfig, PatchEncoder
from exceptions import ConfigError, SequenceTooLongError
from policy import (
    FormatFailure,
    GenerationConfig,
    PolicyConfig,
    action_generation_config,
    build_model,
    build_sequence,
    collate,
    component_losses,
    decode_action_tokens,
    forward_loss,
    generate,
    per_sample_losses,
    predict_action,
    predict_actions,
)
from vocab import tokenize_text

from conftest import TINY_ENCODER, TINY_POLICY, check_gradients


def _model(vocab, **overrides):
    cfg = PolicyConfig.from_dict({**TINY_POLICY, **overrides})
    encoder = PatchEncoder(EncoderConfig(**TINY_ENCODER), np.random.default_rng(0)).bind_names("encoder.")
    return build_model(cfg, vocab, encoder, np.random.default_rng(1))


def _batch(vocab, n=2, robot=True):
    rng = np.random.default_rng(3)
    chunk = ActionChunk((ActionVector(dx=0.05, dy=-0.1, gripper=1),))
    seqs, images = [], []
    for i in range(n):
        instruction = tokenize_text("pick the red square", vocab).ids.tolist()
        if robot:
            target = vocab.ids(encode_chunk(chunk))
        else:
            target = tokenize_text("yes" if i % 2 else "(0.31, 0.72)", vocab).ids.tolist()
        seqs.append(build_sequence(instruction, target, vocab, 160))
        images.append(rng.uniform(0, 1, size=(32, 32, 3)).astype(np.float32))
    return collate(images, seqs, vocab, [robot] * n)


def test_policy_config_validation():
    with pytest.raises(ConfigError):
        PolicyConfig(encoder_mode="triple")
    with pytest.raises(ConfigError):
        PolicyConfig(codec_mode="float")
    with pytest.raises(ConfigError):
        PolicyConfig(horizon=9)
    with pytest.raises(ConfigError):
        PolicyConfig(width=30, heads=4)
    with pytest.raises(ConfigError):
        GenerationConfig(mode="sample", temperature=0.0)


def test_build_sequence_supervises_answer_and_eos(vocab):
    seq = build_sequence([10, 11, 12], [20, 21], vocab, 16)
    assert seq.ids.tolist() == [vocab.bos_id, 10, 11, 12, vocab.answer_start_id, 20, 21, vocab.eos_id]
    assert seq.mask.tolist() == [False] * 5 + [True] * 3
    with pytest.raises(SequenceTooLongError):
        build_sequence(list(range(20)), [1], vocab, 16)


def test_collate_shifts_and_pads(vocab):
    a = build_sequence([10], [20], vocab, 16)
    b = build_sequence([10, 11, 12], [20, 21], vocab, 16)
    batch = collate([np.zeros((32, 32, 3))] * 2, [a, b], vocab)
    assert batch.inputs.shape == batch.labels.shape == (2, len(b) - 1)
    assert np.array_equal(batch.labels[1], b.ids[1:])
    assert batch.loss_mask[0].sum() == 2
    assert batch.inputs[0, -1] == vocab.pad_id
    assert batch.is_robot.all()


def test_dual_model_parameters(vocab):
    model = _model(vocab)
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))
    frozen = [p for p in model.parameters() if p.frozen]
    assert frozen and all(p.name.startswith("encoder.frozen.") for p in frozen)
    single = _model(vocab, encoder_mode="single")
    assert not any(p.frozen for p in single.parameters())
    assert single.proj.weight.shape[0] == model.proj.weight.shape[0] // 2


def test_policy_gradients_in_float64(vocab):
    with T.float64_mode():
        model = _model(vocab)
        batch = _batch(vocab)
        named = dict(model.named_parameters())
        params = [named[n] for n in ("head.bias", "ln_f.gain", "blocks.0.attn.qkv.bias", "proj.bias",
                                     "encoder.trainable.ln_f.gain", "encoder.trainable.patch_embed.bias")]
        check_gradients(lambda: forward_loss(model, batch), params)


def test_logits_ignore_later_tokens(vocab):
    model = _model(vocab)
    batch = _batch(vocab, n=1)
    original = batch.inputs.copy()
    cut = original.shape[1] // 2
    changed = original.copy()
    changed[:, cut:] = vocab.id("7")
    with T.no_grad():
        images = model.image_embeddings(batch.images)
        a = model.logits(images, original).data
        b = model.logits(images, changed).data
    np.testing.assert_allclose(a[:, :cut], b[:, :cut], atol=1e-5)
    assert not np.allclose(a[:, cut:], b[:, cut:])


@pytest.mark.slow
def test_single_sample_is_memorized(vocab):
    model = _model(vocab)
    chunk = ActionChunk((ActionVector(dx=0.05, dy=-0.1, gripper=1), ActionVector(dz=0.2, yaw=-0.5)))
    instruction = "pick the red square"
    image = np.random.default_rng(5).uniform(0, 1, size=(32, 32, 3)).astype(np.float32)
    seq = build_sequence(tokenize_text(instruction, vocab).ids.tolist(), vocab.ids(encode_chunk(chunk)), vocab, 160)
    batch = collate([image], [seq], vocab, [True])
    optimizer = optim.AdamW(model.parameters(), lr=3e-3, weight_decay=0.0)
    loss = float("inf")
    for _ in range(1500):
        step_loss = forward_loss(model, batch)
        loss = step_loss.item()
        if loss < 0.002:
            break
        T.backward(step_loss)
        optimizer.step()
        optimizer.zero_grad()
    assert loss < 0.01
    assert predict_action(model, image, instruction) == chunk


def test_frozen_encoder_gets_no_gradient(vocab):
    model = _model(vocab)
    T.backward(forward_loss(model, _batch(vocab)))
    for p in model.parameters():
        if p.frozen:
            assert p.grad is None
    assert model.encoder.trainable.patch_embed.weight.grad is not None


def test_per_sample_and_component_losses(vocab):
    model = _model(vocab)
    batch = _batch(vocab, n=3)
    per = per_sample_losses(model, batch)
    assert per.shape == (3,)
    # equal-length targets, so the token-weighted mean equals the sample mean
    assert forward_loss(model, batch).item() == pytest.approx(per.mean(), rel=1e-4)
    with T.no_grad():
        logits = model.logits(model.image_embeddings(batch.images), batch.inputs).data
    parts = component_losses(logits, batch)
    assert np.isfinite(parts["robot_loss"])
    assert np.isnan(parts["vl_loss"])
    assert forward_loss(model, batch).item() == pytest.approx(parts["robot_loss"], rel=1e-4)


def test_sequence_longer_than_positions_is_rejected(vocab):
    model = _model(vocab, max_seq_len=8)
    with pytest.raises(SequenceTooLongError):
        model.logits(model.image_embeddings(np.zeros((1, 32, 32, 3))), np.zeros((1, 9), dtype=np.int64))


def test_greedy_generation_is_deterministic(vocab):
    model = _model(vocab)
    obs = np.random.default_rng(0).uniform(0, 1, size=(32, 32, 3)).astype(np.float32)
    gen = GenerationConfig(max_new_tokens=6)
    a = generate(model, obs, "reach the red square", gen)
    b = generate(model, obs, "reach the red square", gen)
    assert np.array_equal(a.ids, b.ids)
    assert len(a) <= 6
    assert vocab.eos_id not in a.ids.tolist()


def test_sampling_respects_allowed_ids(vocab):
    model = _model(vocab)
    allowed = tuple(vocab.ids(["0", "1"]))
    gen = GenerationConfig(mode="sample", max_new_tokens=5, fixed_length=5, allowed_ids=allowed)
    seq = generate(model, np.zeros((32, 32, 3)), "reach the red square", gen, np.random.default_rng(0))
    assert len(seq) == 5
    assert set(seq.ids.tolist()) <= set(allowed)


def test_bin_policy_generates_fixed_length(vocab):
    model = _model(vocab, codec_mode="bin")
    gen = action_generation_config(model)
    assert gen.fixed_length == 7 * model.cfg.horizon
    out = predict_action(model, np.zeros((32, 32, 3)), "pick the red square")
    assert isinstance(out, ActionChunk)
    assert len(out) == model.cfg.horizon


@pytest.mark.parametrize("decimals", [2, 4, 6])
def test_string_budget_fits_longest_chunk(vocab, decimals):
    model = _model(vocab)
    codec = CodecConfig(decimals=decimals)
    widest = ActionVector(*([-0.123456] * 6), gripper=1)
    chunk = ActionChunk((widest,) * model.cfg.horizon)
    gen = action_generation_config(model, codec)
    assert gen.max_new_tokens >= len(encode_chunk(chunk, codec)) + 1
    assert gen.fixed_length is None


def test_string_policy_returns_chunk_or_format_failure(vocab):
    model = _model(vocab)
    obs = np.random.default_rng(1).uniform(0, 1, size=(2, 32, 32, 3)).astype(np.float32)
    outputs = predict_actions(model, obs, ["reach the red square", "pick the blue circle"])
    assert len(outputs) == 2
    assert all(isinstance(o, (ActionChunk, FormatFailure)) for o in outputs)


def test_decode_action_tokens(vocab):
    model = _model(vocab)
    chunk = ActionChunk((ActionVector(dx=0.1),))
    assert decode_action_tokens(encode_chunk(chunk), model, CodecConfig()) == chunk
    failure = decode_action_tokens(["0", "."], model, CodecConfig())
    assert isinstance(failure, FormatFailure)
    assert failure.tokens == ["0", "."]
    bin_model = _model(vocab, codec_mode="bin")
    tokens = bin_encode_chunk(chunk, BinCodecConfig())
    assert len(decode_action_tokens(tokens, bin_model, CodecConfig())) == 1
