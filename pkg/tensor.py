"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable op computes its forward value with numpy and, when gradient
recording is enabled and an input requires grad, attaches a node holding the
saved activations and a backward closure. ``backward(loss)`` orders the recorded
graph into a tape (reverse topological order, each node once) and replays it.
"""

import contextlib
import logging
import threading
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from exceptions import NonFiniteError, NoSupervisedPositionsError, ShapeError, StaleTapeError

logger = logging.getLogger('vla.tensor')

_default_dtype = np.dtype(config.DEFAULT_DTYPE)
_debug_checks = config.DEBUG_FINITE_CHECKS
_local = threading.local()

ArrayLike = Union[np.ndarray, Sequence, float, int]


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype)


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Create new tensors in 64-bit inside the block (gradient checks)."""
    previous = _default_dtype
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread (evaluation workers)."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Node:
    """A recorded operation: its inputs and the closure mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """A numpy buffer plus gradient bookkeeping."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype, copy=True)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, ())
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self, axis: Optional[int] = None):
        return mean(self, axis)


class Parameter(Tensor):
    """
    A trainable (or frozen) leaf tensor with a hierarchical name.

    A frozen parameter never requires grad, so no graph edge ever reaches it, and
    optimizers skip it as well.
    """

    def __init__(self, data: ArrayLike, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value), dtype=like.data.dtype)


def _make(op: str, out: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result._node = None
    result.requires_grad = False
    if grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = Node(op, inputs, backward_fn)
    return result


class Tape:
    """Recorded operations reachable from a loss, in topological order."""

    def __init__(self, tensors: List[Tensor]):
        self.tensors = tensors

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in visited:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.tensors)

    def replay(self, loss: Tensor) -> None:
        loss.grad = np.ones_like(loss.data)
        for t in reversed(self.tensors):
            node = t._node
            if t.grad is None:
                node.consumed = True
                node.backward_fn = None
                continue
            grads = node.backward_fn(t.grad)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if isinstance(inp, Parameter) and inp.frozen:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g
            # Saved activations are released; a second replay is a stale-tape error
            node.consumed = True
            node.backward_fn = None
            if t is not loss:
                t.grad = None


def backward(loss: Tensor) -> Tape:
    """
    Populate ``.grad`` on every leaf reachable from a scalar loss.

    Args:
        loss (Tensor): Scalar produced by a recorded forward pass

    Returns:
        Tape: The replayed tape (for inspection)
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, ())
    if loss._node is None:
        raise StaleTapeError("loss was not produced by a recorded forward pass")
    if loss._node.consumed:
        raise StaleTapeError("backward already ran on this graph; run a new forward pass first")
    tape = Tape.from_loss(loss)
    tape.replay(loss)
    return tape


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Same-shape add, or bias add of a 1-D tensor over the last axis."""
    if a.shape == b.shape:
        return _make("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _make("add", a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return add(b, a)
    raise ShapeError("add", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def add_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array broadcastable to ``a``, e.g. an attention mask."""
    mask = np.asarray(mask, dtype=a.data.dtype)
    try:
        out = a.data + mask
    except ValueError:
        raise ShapeError("add_mask", a.shape, mask.shape)
    if out.shape != a.shape:
        raise ShapeError("add_mask", a.shape, mask.shape)
    return _make("add_mask", out, (a,), lambda g: (g,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner),)

    return _make("gelu", out.astype(x.dtype, copy=False), (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _make("relu", np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))


# ---------------------------------------------------------------------------
# Linear algebra and layout
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product on the last two axes.

    Supports ``[m, k] x [k, n]``, ``[..., m, k] x [k, n]`` (shared right operand)
    and ``[..., m, k] x [..., k, n]`` with identical leading dimensions.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _make("matmul", out, (a, b), backward_fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", original, tuple(shape))
    return _make("reshape", out, (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError("concat", ref.shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        parts = []
        for i in range(len(tensors)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(index)])
        return tuple(parts)

    return _make("concat", out, tensors, backward_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError("slice_axis", a.shape, (axis, start, stop))
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = a.shape, a.data.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make("slice", a.data[index], (a,), backward_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, (int(ids.max()),))
    shape, dtype = table.shape, table.data.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make("embedding", table.data[ids], (table,), backward_fn)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make("sum", np.array(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.size
        return _make("mean", np.array(a.data.mean(), dtype=a.data.dtype), (a,),
                     lambda g: (np.broadcast_to(g / n, shape).copy(),))
    axis = axis % a.ndim
    n = shape[axis]
    return _make("mean", a.data.mean(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),))


# ---------------------------------------------------------------------------
# Normalization and losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction; slices along ``axis`` sum to 1."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError("softmax", x.shape, (axis,))
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        g_gain = (g * xhat).reshape(-1, n).sum(axis=0)
        g_bias = g.reshape(-1, n).sum(axis=0)
        dxhat = g * gain.data
        gx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _make("layer_norm", out.astype(x.data.dtype, copy=False), (x, gain, bias), backward_fn)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean negative log-likelihood over the unmasked positions.

    Args:
        logits (Tensor): ``[T, V]`` (or ``[..., V]``, flattened over leading axes)
        targets: Integer ids, one per row
        mask: Booleans, True where the position is supervised

    Returns:
        Tensor: Scalar loss
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError("cross_entropy", logits.shape, (int(targets.max()),))
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape != targets.shape:
        raise ShapeError("cross_entropy", targets.shape, mask.shape)
    count = int(mask.sum())
    if count == 0:
        raise NoSupervisedPositionsError()

    logp = log_softmax_rows(flat)
    rows = np.nonzero(mask)[0]
    nll = -logp[rows, targets[rows]]
    loss = np.array(nll.sum() / count, dtype=logits.data.dtype)
    shape = logits.shape

    def backward_fn(g):
        grad = np.zeros_like(flat)
        probs = np.exp(logp[rows])
        probs[np.arange(rows.size), targets[rows]] -= 1.0
        grad[rows] = probs * (g / count)
        return (grad.reshape(shape),)

    return _make("cross_entropy", loss, (logits,), backward_fn)
