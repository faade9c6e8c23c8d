"""Float64 tensors with a recorded tape for reverse-mode differentiation.

Every differentiable operation goes through ``record``: it validates shapes,
computes the forward value with numpy and, when a ``Tape`` is active on the
current thread, appends a node holding the saved inputs. ``backward`` walks
the tape once in reverse and returns gradients for every watched leaf.
"""

import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import GradientError, NumericError, ShapeError

logger = logging.getLogger(__name__)

Scalar = Union[int, float]

_local = threading.local()
_node_ids = itertools.count(1)


class Tensor:
    """An n-dimensional float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "node")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor operators

    def __init__(self, data: Any, node: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, other)
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(scale(self, -1.0), other)
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(value: Any) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value)


# --- tape --------------------------------------------------------------------


@dataclass
class Node:
    """One recorded primitive application."""

    id: int
    kind: str
    parents: Tuple[Optional[int], ...]
    inputs: Tuple[np.ndarray, ...]
    value: np.ndarray
    attrs: Dict[str, Any] = field(default_factory=dict)


class Tape:
    """Ordered record of primitive applications on one thread.

    Use as a context manager; nested tapes shadow outer ones. Tensors bound to
    another tape are treated as constants here.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._index: Dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __contains__(self, node_id: Optional[int]) -> bool:
        return node_id is not None and node_id in self._index

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value: Any) -> Tensor:
        """Register ``value`` as a differentiable leaf and return its tensor."""
        data = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        node = Node(next(_node_ids), "leaf", (), (), data)
        self._push(node)
        return Tensor(data, node.id)

    @property
    def leaves(self) -> List[Node]:
        return [node for node in self.nodes if node.kind == "leaf"]

    def _push(self, node: Node) -> None:
        self._index[node.id] = len(self.nodes)
        self.nodes.append(node)

    def _append(
        self,
        kind: str,
        tensors: Sequence[Tensor],
        arrays: Sequence[np.ndarray],
        value: np.ndarray,
        attrs: Dict[str, Any],
    ) -> int:
        parents = tuple(t.node if t.node in self else None for t in tensors)
        node = Node(next(_node_ids), kind, parents, tuple(arrays), value, attrs)
        self._push(node)
        return node.id

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to every leaf on this tape."""
        if loss.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node not in self:
            raise GradientError("loss is detached from the active tape")

        grads: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        last = self._index[loss.node]
        for node in reversed(self.nodes[: last + 1]):
            g = grads.get(node.id)
            if g is None or node.kind == "leaf":
                continue
            in_grads = PRIMITIVES[node.kind].vjp(g, node.value, *node.inputs, **node.attrs)
            for parent, grad in zip(node.parents, in_grads):
                if parent is None or grad is None:
                    continue
                grads[parent] = grads[parent] + grad if parent in grads else grad

        return {
            leaf.id: grads.get(leaf.id, np.zeros_like(leaf.value)) for leaf in self.leaves
        }


def _stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """Backward pass on the active tape; keys are leaf node ids."""
    tape = active_tape()
    if tape is None:
        raise GradientError("backward called with no active tape")
    return tape.backward(loss)


# --- primitives --------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Tuple[Optional[np.ndarray], ...]]
    check: Optional[Callable[..., None]] = None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _same_shape(kind: str, a: np.ndarray, b: np.ndarray, **_) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _check_matmul(kind: str, a: np.ndarray, b: np.ndarray, **_) -> None:
    if a.ndim == 0 or b.ndim == 0 or (a.ndim == 1 and b.ndim == 1):
        raise ShapeError(f"{kind}: unsupported operand ranks {a.shape} @ {b.shape}")
    inner = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner:
        raise ShapeError(f"{kind}: inner dimension mismatch {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"{kind}: batch dimensions differ {a.shape} @ {b.shape}")


def _matmul_vjp(g, out, a, b):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape)
    gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
    return ga.reshape(a.shape), gb.reshape(b.shape)


def _check_concat(kind: str, *arrays: np.ndarray, axis: int = -1) -> None:
    if not arrays:
        raise ShapeError(f"{kind}: no operands")
    ref = arrays[0]
    ax = axis % ref.ndim
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(arr.shape, ref.shape)) if i != ax
        ):
            raise ShapeError(f"{kind}: shapes {[x.shape for x in arrays]} differ off axis {axis}")


def _concat_vjp(g, out, *arrays, axis=-1):
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _check_slice(kind: str, a: np.ndarray, key=None) -> None:
    parts = key if isinstance(key, tuple) else (key,)
    for part in parts:
        if not isinstance(part, (slice, int, type(Ellipsis))) or isinstance(part, bool):
            raise ShapeError(f"{kind}: only basic slices are supported, got {part!r}")
    try:
        a[key]
    except IndexError as e:
        raise ShapeError(f"{kind}: {e} for shape {a.shape}")


def _slice_vjp(g, out, a, key=None):
    grad = np.zeros_like(a)
    grad[key] = g
    return (grad,)


def _check_take(kind: str, a: np.ndarray, indices=None, axis: int = 0) -> None:
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ShapeError(f"{kind}: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise ShapeError(f"{kind}: index out of range for axis {axis} of {a.shape}")


def _take_vjp(g, out, a, indices=None, axis=0):
    grad = np.zeros_like(a)
    np.add.at(np.moveaxis(grad, axis, 0), np.asarray(indices), np.moveaxis(g, axis, 0))
    return (grad,)


def _frame_index(length: int, size: int, hop: int) -> np.ndarray:
    count = 1 + (length - size) // hop
    return hop * np.arange(count)[:, None] + np.arange(size)[None, :]


def _check_frame(kind: str, a: np.ndarray, size: int = 1, hop: int = 1) -> None:
    if a.ndim == 0 or size < 1 or hop < 1 or size > a.shape[-1]:
        raise ShapeError(f"{kind}: cannot frame shape {a.shape} with size={size} hop={hop}")


def _frame_vjp(g, out, a, size=1, hop=1):
    grad = np.zeros_like(a)
    idx = _frame_index(a.shape[-1], size, hop)
    np.add.at(np.moveaxis(grad, -1, 0), idx, np.moveaxis(g, (-2, -1), (0, 1)))
    return (grad,)


def _check_broadcast(kind: str, a: np.ndarray, shape=()) -> None:
    try:
        target = np.broadcast_shapes(a.shape, tuple(shape))
    except ValueError:
        target = None
    if target != tuple(shape):
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} to {tuple(shape)}")


def _check_reshape(kind: str, a: np.ndarray, shape=()) -> None:
    try:
        np.empty(a.shape).reshape(shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot reshape {a.shape} to {shape}")


def _reduce_vjp(g, out, a, axis=None, keepdims=False, divide=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    grad = np.array(np.broadcast_to(g, a.shape))
    if divide:
        grad = grad / (a.size // max(out.size, 1))
    return (grad,)


def _check_positive(kind: str, a: np.ndarray) -> None:
    if np.any(a <= 0):
        raise NumericError(f"{kind}: input must be strictly positive")


def _check_reduce(kind: str, a: np.ndarray, axis=None, keepdims=False) -> None:
    if a.size == 0:
        raise ShapeError(f"{kind}: empty operand")


def _softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_vjp(g, out, a, axis=-1):
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


def _l1_vjp(g, out, a, b):
    d = np.sign(a - b) * (g / a.size)
    return d, -d


PRIMITIVES: Dict[str, Primitive] = {
    "add": Primitive(lambda a, b: a + b, lambda g, o, a, b: (g, g), _same_shape),
    "sub": Primitive(lambda a, b: a - b, lambda g, o, a, b: (g, -g), _same_shape),
    "mul": Primitive(lambda a, b: a * b, lambda g, o, a, b: (g * b, g * a), _same_shape),
    "scale": Primitive(lambda a, c=1.0: a * c, lambda g, o, a, c=1.0: (g * c,)),
    "add_scalar": Primitive(lambda a, c=0.0: a + c, lambda g, o, a, c=0.0: (g,)),
    "matmul": Primitive(np.matmul, _matmul_vjp, _check_matmul),
    "concat": Primitive(
        lambda *arrays, axis=-1: np.concatenate(arrays, axis=axis), _concat_vjp, _check_concat
    ),
    "slice": Primitive(lambda a, key=None: np.array(a[key]), _slice_vjp, _check_slice),
    "take": Primitive(
        lambda a, indices=None, axis=0: np.take(a, np.asarray(indices), axis=axis),
        _take_vjp,
        _check_take,
    ),
    "frame": Primitive(
        lambda a, size=1, hop=1: a[..., _frame_index(a.shape[-1], size, hop)],
        _frame_vjp,
        _check_frame,
    ),
    "broadcast": Primitive(
        lambda a, shape=(): np.array(np.broadcast_to(a, tuple(shape))),
        lambda g, o, a, shape=(): (_unbroadcast(g, a.shape),),
        _check_broadcast,
    ),
    "reshape": Primitive(
        lambda a, shape=(): a.reshape(shape),
        lambda g, o, a, shape=(): (g.reshape(a.shape),),
        _check_reshape,
    ),
    "transpose": Primitive(
        lambda a, axes=None: np.transpose(a, axes),
        lambda g, o, a, axes=None: (
            np.transpose(g, None if axes is None else np.argsort(axes)),
        ),
    ),
    "sum": Primitive(
        lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
        lambda g, o, a, axis=None, keepdims=False: _reduce_vjp(g, o, a, axis, keepdims),
        _check_reduce,
    ),
    "mean": Primitive(
        lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
        lambda g, o, a, axis=None, keepdims=False: _reduce_vjp(g, o, a, axis, keepdims, True),
        _check_reduce,
    ),
    "exp": Primitive(np.exp, lambda g, o, a: (g * o,)),
    "log": Primitive(np.log, lambda g, o, a: (g / a,), _check_positive),
    "tanh": Primitive(np.tanh, lambda g, o, a: (g * (1.0 - o * o),)),
    "relu": Primitive(lambda a: np.maximum(a, 0.0), lambda g, o, a: (g * (a > 0),)),
    "softmax": Primitive(_softmax, _softmax_vjp),
    "l1": Primitive(lambda a, b: np.mean(np.abs(a - b)), _l1_vjp, _same_shape),
}


def record(kind: str, *inputs: Any, **attrs: Any) -> Tensor:
    """Apply primitive ``kind`` and append it to the active tape, if any."""
    prim = PRIMITIVES.get(kind)
    if prim is None:
        raise ShapeError(f"unknown primitive {kind!r}")
    tensors = [as_tensor(x) for x in inputs]
    arrays = [t.data for t in tensors]
    if prim.check is not None:
        prim.check(kind, *arrays, **attrs)
    with np.errstate(all="ignore"):
        value = np.asarray(prim.forward(*arrays, **attrs), dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{kind} produced non-finite values (input shapes {[a.shape for a in arrays]})")

    tape = active_tape()
    node = tape._append(kind, tensors, arrays, value, attrs) if tape is not None else None
    return Tensor(value, node)


def add(a, b) -> Tensor:
    return record("add", a, b)


def sub(a, b) -> Tensor:
    return record("sub", a, b)


def mul(a, b) -> Tensor:
    return record("mul", a, b)


def scale(a, c: Scalar) -> Tensor:
    return record("scale", a, c=float(c))


def add_scalar(a, c: Scalar) -> Tensor:
    return record("add_scalar", a, c=float(c))


def matmul(a, b) -> Tensor:
    return record("matmul", a, b)


def concat(tensors: Sequence[Any], axis: int = -1) -> Tensor:
    return record("concat", *tensors, axis=axis)


def slice_(a, key) -> Tensor:
    return record("slice", a, key=key)


def take(a, indices, axis: int = 0) -> Tensor:
    return record("take", a, indices=np.asarray(indices, dtype=np.int64), axis=axis)


def frame(a, size: int, hop: int) -> Tensor:
    """Overlapping windows over the last axis: (..., L) -> (..., F, size)."""
    return record("frame", a, size=size, hop=hop)


def broadcast(a, shape: Sequence[int]) -> Tensor:
    return record("broadcast", a, shape=tuple(shape))


def reshape(a, shape: Sequence[int]) -> Tensor:
    return record("reshape", a, shape=tuple(shape))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    return record("transpose", a, axes=None if axes is None else tuple(axes))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    return record("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return record("mean", a, axis=axis, keepdims=keepdims)


def exp(a) -> Tensor:
    return record("exp", a)


def log(a) -> Tensor:
    return record("log", a)


def tanh(a) -> Tensor:
    return record("tanh", a)


def relu(a) -> Tensor:
    return record("relu", a)


def softmax(a, axis: int = -1) -> Tensor:
    return record("softmax", a, axis=axis)


def l1(a, b) -> Tensor:
    """Mean absolute difference, reduced to a scalar."""
    return record("l1", a, b)


# --- random numbers ----------------------------------------------------------

_MASK64 = (1 << 64) - 1


class Rng:
    """Counter-based generator (Philox) keyed by a 64-bit seed and a stream label.

    Streams with different labels are independent, so ablations that change
    how often one stream is drawn from leave the others untouched. Floats are
    derived explicitly from the raw 64-bit words.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed) & _MASK64
        self.label = label
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(label.encode("utf-8"))
        )
        self._bits = np.random.Philox(sequence)

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.label}/{label}")

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = ((self.raw(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def integers(self, low: int, high: int, size=None) -> Union[int, np.ndarray]:
        """Integers in [low, high)."""
        shape = () if size is None else size
        values = low + np.floor(self.uniform(shape) * (high - low)).astype(np.int64)
        return int(values) if size is None else values

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws by the Box-Muller transform."""
        n = int(np.prod(shape, dtype=np.int64))
        half = (n + 1) // 2
        u = self.uniform((2 * half,))
        radius = np.sqrt(-2.0 * np.log(u[:half]))
        theta = 2.0 * np.pi * u[half:]
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
        return z.reshape(shape)

    @property
    def state(self) -> Dict[str, Any]:
        """JSON-friendly snapshot of the generator position."""
        raw = self._bits.state
        return {
            "seed": self.seed,
            "label": self.label,
            "counter": [int(v) for v in raw["state"]["counter"]],
            "key": [int(v) for v in raw["state"]["key"]],
            "buffer": [int(v) for v in raw["buffer"]],
            "buffer_pos": int(raw["buffer_pos"]),
            "has_uint32": int(raw["has_uint32"]),
            "uinteger": int(raw["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> "Rng":
        rng = cls(state["seed"], state["label"])
        rng._bits.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng


def gauss(rng: Rng, shape) -> Tensor:
    """i.i.d. standard normal tensor."""
    return Tensor(rng.normal(tuple(shape) if not isinstance(shape, int) else (shape,)))
