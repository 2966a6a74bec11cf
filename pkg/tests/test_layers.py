import numpy as np
import pytest

import tensor as T
from layers import Block, Linear, Module, MultiHeadAttention
from policy import attention_mask
from tensor import Tensor

from conftest import check_gradients


class _Stack(Module):
    def __init__(self, rng):
        self.inp = Linear(4, 8, rng)
        self.blocks = [Block(8, 2, rng), Block(8, 2, rng)]


def test_named_parameters_follow_attribute_paths():
    stack = _Stack(np.random.default_rng(0)).bind_names("model.")
    names = [p.name for p in stack.parameters()]
    assert names[:2] == ["model.inp.weight", "model.inp.bias"]
    assert "model.blocks.1.attn.qkv.weight" in names
    assert "model.blocks.0.mlp.fc2.bias" in names
    assert len(names) == len(set(names))


def test_freeze_marks_every_parameter():
    stack = _Stack(np.random.default_rng(0))
    stack.freeze()
    assert all(p.frozen and not p.requires_grad for p in stack.parameters())


def test_load_arrays_copies_and_checks_shapes():
    rng = np.random.default_rng(0)
    src, dst = _Stack(rng), _Stack(rng)
    arrays = src.state_arrays()
    dst.load_arrays(arrays)
    for (name, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert np.array_equal(a.data, b.data), name
        assert a.data is not b.data

    bad = dict(arrays)
    bad["inp.weight"] = np.zeros((2, 2))
    with pytest.raises(ValueError, match="inp.weight"):
        dst.load_arrays(bad)
    del bad["inp.weight"]
    with pytest.raises(KeyError):
        dst.load_arrays(bad)


def test_attention_rejects_indivisible_width():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 3, np.random.default_rng(0))


def test_block_gradients_with_causal_mask(float64):
    rng = np.random.default_rng(5)
    block = Block(8, 2, rng).bind_names()
    x = Tensor(rng.normal(size=(2, 5, 8)))
    w = Tensor(rng.normal(size=(2, 5, 8)))
    mask = attention_mask(2, 3)

    check_gradients(lambda: T.tsum(T.mul(block(x, mask), w)), block.parameters())


def test_causal_mask_hides_later_tokens():
    rng = np.random.default_rng(2)
    block = Block(8, 2, rng)
    mask = attention_mask(2, 4)
    x = rng.normal(size=(1, 6, 8))
    changed = x.copy()
    changed[0, 5] += 1.0
    with T.no_grad():
        a = block(Tensor(x), mask).data
        b = block(Tensor(changed), mask).data
    # image positions and earlier tokens are unaffected by the last token
    assert np.allclose(a[0, :5], b[0, :5])
    assert not np.allclose(a[0, 5], b[0, 5])


def test_attention_mask_layout():
    mask = attention_mask(2, 3)
    allowed = mask == 0
    assert allowed[:2, :2].all() and not allowed[:2, 2:].any()
    assert allowed[2:, :2].all()
    assert np.array_equal(allowed[2:, 2:], np.tril(np.ones((3, 3), dtype=bool)))
