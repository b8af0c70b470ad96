"""Contains the Tensor class, the gradient Tape
and the registry of differentiable operations
"""

# pylint: disable=global-statement, global-variable-not-assigned

from contextlib import contextmanager
from typing import Any, Callable, Iterator, Optional
import logging
import threading

import numpy as np
from attrs import define, field

from .errors import DimensionError, DomainError, TapeError
from .utils import sigmoid as _sigmoid

logger = logging.getLogger(__name__)

ACTIVE_TAPE: Optional["Tape"] = None
SUSPENDED = 0
SUSPEND_LOCK = threading.Lock()
FLOP_TALLY: Optional["FlopTally"] = None

ForwardFn = Callable[..., tuple[np.ndarray, Any]]
BackwardFn = Callable[[Any, np.ndarray], tuple[Optional[np.ndarray], ...]]


@define(frozen=True)
class OpDef:
    name: str
    forward: ForwardFn
    backward: BackwardFn


OPS: dict[str, OpDef] = {}


@define
class FlopTally:
    """Floating point operations executed while a count_flops block is open.
    Only matrix products are tallied, at 2 flops per multiply-accumulate"""

    total: int = 0
    by_op: dict[str, int] = field(factory=dict)

    def add(self, op: str, flops: int):
        self.total += flops
        self.by_op[op] = self.by_op.get(op, 0) + flops


@contextmanager
def count_flops() -> Iterator[FlopTally]:
    """Tallies the flops of every matmul run inside the block"""
    global FLOP_TALLY
    previous = FLOP_TALLY
    FLOP_TALLY = FlopTally()
    try:
        yield FLOP_TALLY
    finally:
        FLOP_TALLY = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspends recording on the active tape. Blocks may nest and
    may be opened from several threads at once"""
    global SUSPENDED
    with SUSPEND_LOCK:
        SUSPENDED += 1
    try:
        yield
    finally:
        with SUSPEND_LOCK:
            SUSPENDED -= 1


class Tensor:
    """A dense row-major float64 array that can take part in
    one gradient tape at a time
    """

    __slots__ = ("__data", "requires_grad", "grad", "tape_node")
    # numpy defers mixed arithmetic to the Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        array.flags.writeable = False
        self.__data = array

        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[TapeNode] = None

    @property
    def data(self) -> np.ndarray:
        """The read-only value buffer"""
        return self.__data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.__data.shape

    @property
    def ndim(self) -> int:
        return self.__data.ndim

    def numpy(self) -> np.ndarray:
        """A writable copy of the values"""
        return self.__data.copy()

    def item(self) -> float:
        return float(self.__data.item())

    def accumulate_grad(self, grad: np.ndarray):
        """Adds to the gradient buffer instead of overwriting it

        Args:
            grad (np.ndarray): gradient with the tensor's shape

        Raises:
            DimensionError: when the shapes differ
        """
        if grad.shape != self.shape:
            raise DimensionError(
                f"gradient of shape {grad.shape} for tensor of shape {self.shape}"
            )

        if self.grad is None:
            self.grad = np.zeros(self.shape)

        self.grad = self.grad + grad

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        """Backpropagates through the tape this tensor was recorded on"""
        if self.tape_node is None:
            raise TapeError("tensor was not produced on a gradient tape")

        self.tape_node.tape.backward(self, grad)

    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def sigmoid(self):
        return apply("sigmoid", self)

    def log(self):
        return apply("log", self)

    def tanh(self):
        return apply("tanh", self)

    def scale(self, factor: float):
        return apply("scale", self, factor=float(factor))

    def clip(self, low: float, high: float):
        return apply("clip", self, low=low, high=high)

    def transpose(self):
        """Swaps the last two axes"""
        return apply("transpose", self)

    def reshape(self, *shape: int):
        return apply("reshape", self, shape=shape)

    def logsumexp(self, axis: int = -1):
        return apply("logsumexp", self, axis=axis)

    def pick(self, labels):
        """Selects one entry per row along the last axis"""
        return apply("pick", self, labels=np.asarray(labels, dtype=np.int64))

    def gather_tokens(self, index):
        """Takes rows along axis 1, [B, N, D] -> [B, k, D]"""
        return apply("gather_tokens", self, index=np.asarray(index, dtype=np.int64))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@define(eq=False)
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: Any
    backward: BackwardFn
    tape: "Tape"
    index: int


class Tape:
    """An ordered record of differentiable operations.

    Used as a context manager; only one tape can be active and
    it is read back exactly once by backward.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.__finished = False

    def __enter__(self) -> "Tape":
        global ACTIVE_TAPE
        if ACTIVE_TAPE is not None:
            raise TapeError("a tape is already recording, nesting is not supported")

        ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global ACTIVE_TAPE
        ACTIVE_TAPE = None
        return False

    def record(
        self, op: str, inputs: tuple[Tensor, ...], output: Tensor, saved, backward
    ):
        for tensor in inputs:
            if tensor.tape_node is not None and tensor.tape_node.tape is not self:
                raise TapeError(f"{tensor!r} already belongs to another tape")

        node = TapeNode(op, inputs, output, saved, backward, self, len(self.nodes))
        output.requires_grad = True
        output.tape_node = node
        self.nodes.append(node)

    def backward(self, root: Tensor, grad: Optional[np.ndarray] = None):
        """Runs the recorded backward rules in reverse order,
        accumulating into the grad of every input that requires one

        Args:
            root (Tensor): the tensor to differentiate, usually a scalar loss
            grad (np.ndarray, optional): upstream gradient. Defaults to ones.

        Raises:
            TapeError: root is not on this tape or backward already ran
        """
        if root.tape_node is None or root.tape_node.tape is not self:
            raise TapeError("root tensor was not recorded on this tape")

        if self.__finished:
            raise TapeError("backward already ran on this tape")

        self.__finished = True
        if grad is None:
            grad = np.ones(root.shape)
        root.accumulate_grad(np.asarray(grad, dtype=np.float64))

        for node in reversed(self.nodes[: root.tape_node.index + 1]):
            if node.output.grad is None:
                continue

            grads = node.backward(node.saved, node.output.grad)

            for tensor, input_grad in zip(node.inputs, grads):
                if input_grad is None or not tensor.requires_grad:
                    continue

                tensor.accumulate_grad(_unbroadcast(input_grad, tensor.shape))


def register_custom_op(name: str, forward: ForwardFn, backward: BackwardFn) -> str:
    """Registers an operation with its own gradient rule.

    forward maps input arrays (and keyword params) to (output, saved);
    backward maps (saved, upstream gradient) to one gradient per input.
    Whatever forward computes internally is never recorded.

    Args:
        name (str): the operation id
        forward (ForwardFn): the forward function
        backward (BackwardFn): the backward function

    Raises:
        KeyError: when the name is already registered

    Returns:
        str: the operation id
    """
    if name in OPS:
        raise KeyError(f"operation {name!r} is already registered")

    OPS[name] = OpDef(name, forward, backward)
    return name


def apply(op_id: str, *inputs, **params) -> Tensor:
    """Runs a registered operation, recording it when a tape is active
    and at least one input requires a gradient"""
    op = OPS[op_id]
    tensors = tuple(as_tensor(value) for value in inputs)

    out_data, saved = op.forward(*(tensor.data for tensor in tensors), **params)
    output = Tensor(out_data)

    tape = ACTIVE_TAPE if SUSPENDED == 0 else None
    if tape is not None and any(tensor.requires_grad for tensor in tensors):
        tape.record(op_id, tensors, output, saved, op.backward)

    return output


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as error:
        raise DimensionError(
            f"operands of shape {a.shape} and {b.shape} do not broadcast"
        ) from error


def _check_axis(axis, ndim: int):
    axes = () if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    for item in axes:
        if not -ndim <= item < max(ndim, 1):
            raise DimensionError(f"axis {item} is invalid for a {ndim}-d tensor")


# elementwise family


def _add(a, b):
    _broadcast_shape(a, b)
    return a + b, None


def _sub(a, b):
    _broadcast_shape(a, b)
    return a - b, None


def _mul(a, b):
    _broadcast_shape(a, b)
    return a * b, (a, b)


def _div(a, b):
    _broadcast_shape(a, b)
    return a / b, (a, b)


def _log(x):
    if np.any(x <= 0):
        raise DomainError(f"log of non-positive input (min {x.min():.3e})")
    return np.log(x), x


def _sigmoid_forward(x):
    out = _sigmoid(x)
    return out, out


def _tanh(x):
    out = np.tanh(x)
    return out, out


def _clip(x, low: float, high: float):
    return np.clip(x, low, high), (x >= low) & (x <= high)


register_custom_op("add", _add, lambda _, g: (g, g))
register_custom_op("sub", _sub, lambda _, g: (g, -g))
register_custom_op("mul", _mul, lambda saved, g: (g * saved[1], g * saved[0]))
register_custom_op(
    "div",
    _div,
    lambda saved, g: (g / saved[1], -g * saved[0] / (saved[1] * saved[1])),
)
register_custom_op("neg", lambda x: (-x, None), lambda _, g: (-g,))
register_custom_op(
    "scale", lambda x, factor: (x * factor, factor), lambda factor, g: (g * factor,)
)
register_custom_op("log", _log, lambda x, g: (g / x,))
register_custom_op("sigmoid", _sigmoid_forward, lambda s, g: (g * s * (1.0 - s),))
register_custom_op("tanh", _tanh, lambda y, g: (g * (1.0 - y * y),))
register_custom_op("clip", _clip, lambda inside, g: (g * inside,))

ELEMENTWISE = (
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "log",
    "sigmoid",
    "tanh",
    "clip",
)


def elementwise(op: str, *operands, **params) -> Tensor:
    """Applies one member of the elementwise family

    Raises:
        KeyError: when op is not elementwise
    """
    if op not in ELEMENTWISE:
        raise KeyError(f"{op!r} is not an elementwise operation")

    return apply(op, *operands, **params)


# matrix product


def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as error:
        raise DimensionError(
            f"batch dimensions of {a.shape} and {b.shape} do not broadcast"
        ) from error

    if FLOP_TALLY is not None:
        m, p = a.shape[-2:]
        n = b.shape[-1]
        FLOP_TALLY.add("matmul", 2 * int(np.prod(batch, dtype=np.int64)) * m * n * p)

    return np.matmul(a, b), (a, b)


def _matmul_backward(saved, g):
    a, b = saved
    return np.matmul(g, np.swapaxes(b, -1, -2)), np.matmul(np.swapaxes(a, -1, -2), g)


register_custom_op("matmul", _matmul, _matmul_backward)


def matmul(a, b) -> Tensor:
    return apply("matmul", a, b)


# reductions


def _sum(x, axis, keepdims):
    _check_axis(axis, x.ndim)
    return np.sum(x, axis=axis, keepdims=keepdims), (x.shape, axis, keepdims, 1.0)


def _mean(x, axis, keepdims):
    _check_axis(axis, x.ndim)
    count = x.size
    if axis is not None:
        count = int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    mean = np.mean(x, axis=axis, keepdims=keepdims)
    return mean, (x.shape, axis, keepdims, 1.0 / count)


def _reduce_backward(saved, g):
    shape, axis, keepdims, factor = saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape) * factor,)


register_custom_op("sum", _sum, _reduce_backward)
register_custom_op("mean", _mean, _reduce_backward)


def reduce(op: str, tensor: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum or mean along an axis

    Raises:
        KeyError: op is not sum or mean
        DimensionError: the axis is invalid
    """
    if op not in ("sum", "mean"):
        raise KeyError(f"{op!r} is not a reduction")

    return apply(op, tensor, axis=axis, keepdims=keepdims)


# shape and selection


def _transpose(x):
    if x.ndim < 2:
        raise DimensionError(f"cannot transpose a {x.ndim}-d tensor")
    return np.swapaxes(x, -1, -2), None


def _reshape(x, shape):
    try:
        return x.reshape(shape), x.shape
    except ValueError as error:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from error


def _logsumexp(x, axis):
    _check_axis(axis, x.ndim)
    peak = np.max(x, axis=axis, keepdims=True)
    exps = np.exp(x - peak)
    total = np.sum(exps, axis=axis, keepdims=True)
    out = np.squeeze(peak + np.log(total), axis=axis)
    return out, (exps / total, axis)


def _pick(x, labels):
    if labels.shape != x.shape[:-1]:
        raise DimensionError(
            f"labels of shape {labels.shape} for values of shape {x.shape}"
        )
    picked = np.take_along_axis(x, labels[..., None], axis=-1)[..., 0]
    return picked, (x.shape, labels)


def _pick_backward(saved, g):
    shape, labels = saved
    grad = np.zeros(shape)
    np.put_along_axis(grad, labels[..., None], g[..., None], axis=-1)
    return (grad,)


def _gather_tokens(x, index):
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"cannot gather index {index.shape} from {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    return x[rows, index], (x.shape, index)


def _gather_backward(saved, g):
    shape, index = saved
    grad = np.zeros(shape)
    np.add.at(grad, (np.arange(shape[0])[:, None], index), g)
    return (grad,)


register_custom_op("transpose", _transpose, lambda _, g: (np.swapaxes(g, -1, -2),))
register_custom_op("reshape", _reshape, lambda shape, g: (g.reshape(shape),))
register_custom_op(
    "logsumexp",
    _logsumexp,
    lambda saved, g: (np.expand_dims(g, saved[1]) * saved[0],),
)
register_custom_op("pick", _pick, _pick_backward)
register_custom_op("gather_tokens", _gather_tokens, _gather_backward)
