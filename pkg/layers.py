"""Parameterized building blocks shared by the image encoder and the policy decoder."""

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

import config
import tensor as T
from tensor import Parameter, Tensor


class Module:
    """
    Container of parameters and sub-modules.

    Parameter names are the attribute paths (``blocks.0.attn.qkv.weight``), bound
    by ``bind_names`` once the module tree is complete.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in self.__dict__.items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def bind_names(self, prefix: str = "") -> "Module":
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix)}

    def load_arrays(self, arrays: Dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in arrays:
                raise KeyError(f"Missing parameter {name!r}")
            value = np.asarray(arrays[name])
            if value.shape != p.data.shape:
                raise ValueError(f"Shape mismatch for {name!r}: {value.shape} vs {p.data.shape}")
            p.data = np.array(value, dtype=p.data.dtype, copy=True)


def _normal(rng: np.random.Generator, shape, std: float = config.INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_normal(rng, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(_normal(rng, (num, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.table, ids)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        b, n, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv = T.reshape(self.qkv(x), (b, n, 3, h, hd))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, H, N, hd]
        q, k, v = (T.reshape(T.slice_axis(qkv, 0, i, i + 1), (b, h, n, hd)) for i in range(3))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        if mask is not None:
            scores = T.add_mask(scores, mask)
        att = T.softmax(scores, axis=-1)
        out = T.transpose(T.matmul(att, v), (0, 2, 1, 3))
        return self.proj(T.reshape(out, (b, n, d)))


class MLP(Module):
    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4):
        self.fc1 = Linear(dim, expansion * dim, rng)
        self.fc2 = Linear(expansion * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block; the attention mask decides causal vs. bidirectional."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, rng)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), mask))
        return T.add(x, self.mlp(self.ln2(x)))
