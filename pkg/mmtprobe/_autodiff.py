"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations executed while a `GradientTape` is active are recorded on it when
any input requires a gradient. `backward(tape, loss)` then walks the tape in
reverse and fills gradient buffers keyed by node id:

with GradientTape() as tape:
    loss = masked_cross_entropy(matmul(x, w), targets, mask)
grads = backward(tape, loss)
grads[w.node_id]  # same shape as w

Binary elementwise operations accept identical shapes or row-broadcast, where
the smaller shape is a trailing suffix of the larger one (e.g. a bias vector
added to every row). Anything else is a `DimensionError`.

A tape belongs to the thread that opened it; tensors recorded on it must not
be shared with other threads while the tape is alive.
"""

import itertools
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from mmtprobe._core import (
    ConfigurationError,
    ContractError,
    DegenerateBatchError,
    DimensionError,
    TokenIndexError,
)

DTYPE = np.float64
L2_EPSILON = 1e-12

_node_ids = itertools.count(1)
_local = threading.local()

Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient tape.

    Attributes:
        data: The values, a numpy float64 array.
        requires_grad: Leaves with this flag receive gradients; operation
            outputs inherit it from their inputs.
        node_id: Unique handle used to key gradient buffers.
        name: (optional) Parameter name, used in diagnostics.

    """

    __slots__ = ("data", "name", "node_id", "requires_grad")

    def __init__(
        self,
        data: np.ndarray | float | Sequence,
        *,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        """Wrap data as float64 without copying when it already is float64."""
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the underlying array."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Number of dimensions."""
        return self.data.ndim

    @property
    def T(self) -> "Tensor":  # noqa: N802
        """Transpose of a matrix."""
        return transpose(self)

    def item(self) -> float:
        """Value of a single-element tensor."""
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """Copy of the values."""
        return self.data.copy()

    def __repr__(self) -> str:
        """Short description with shape and name."""
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        """Elementwise sum."""
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        """Elementwise difference."""
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        """Elementwise product, or scaling by a Python number."""
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        """Matrix product."""
        return matmul(self, other)


@dataclass
class _Node:
    """One recorded operation."""

    output_id: int
    inputs: tuple[Tensor, ...]
    backward: Backward


@dataclass
class GradientTape:
    """Ordered record of operations and, after `backward`, gradient buffers.

    Use as a context manager. Tapes nest; the innermost active tape records.
    """

    nodes: list[_Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def __enter__(self) -> "GradientTape":
        """Make this tape the active one for the current thread."""
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        """Stop recording."""
        _tape_stack().pop()

    def gradient(self, tensor: Tensor) -> np.ndarray | None:
        """Gradient buffer of a tensor after `backward`, None if unreached."""
        return self.gradients.get(tensor.node_id)


def _tape_stack() -> list[GradientTape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> GradientTape | None:
    """Innermost tape of the current thread, None when not recording."""
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Backward) -> Tensor:
    """Wrap an operation result and record it if a tape is listening."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out.node_id, inputs, backward_fn))
    return out


def backward(tape: GradientTape, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate gradients of a scalar loss into the tape's buffers.

    Returns:
        Mapping from node id to gradient, containing every trainable leaf the
        loss depends on.

    """
    if loss.data.ndim != 0:
        msg = f"backward() needs a scalar loss, got shape {loss.shape}."
        raise ContractError(msg)
    if not loss.requires_grad:
        msg = "The loss was not recorded on the tape, nothing requires a gradient."
        raise ContractError(msg)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        for inp, g_in in zip(node.inputs, node.backward(g), strict=True):
            if g_in is None or not inp.requires_grad:
                continue
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + g_in
            else:
                grads[inp.node_id] = g_in
    tape.gradients = grads
    return grads


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    if len(b) < len(a) and a[len(a) - len(b) :] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a) :] == a:
        return b
    msg = f"{op}: shapes {a} and {b} are neither equal nor row-broadcastable."
    raise DimensionError(msg)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, *shape).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b."""
    _broadcast_shape(a.shape, b.shape, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a - b."""
    _broadcast_shape(a.shape, b.shape, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b."""
    _broadcast_shape(a.shape, b.shape, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply every element by a constant."""
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent."""
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, computed through tanh to stay finite everywhere."""
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


ElementwiseKind = Literal["add", "sub", "mul", "scale", "tanh", "sigmoid"]


def apply_elementwise(kind: ElementwiseKind, *operands: Tensor | float) -> Tensor:
    """Dispatch an elementwise operation by name.

    `scale` takes a tensor and a number; the binary kinds take two tensors;
    `tanh` and `sigmoid` take one tensor.
    """
    match kind, operands:
        case "add", (Tensor() as a, Tensor() as b):
            return add(a, b)
        case "sub", (Tensor() as a, Tensor() as b):
            return sub(a, b)
        case "mul", (Tensor() as a, Tensor() as b):
            return mul(a, b)
        case "scale", (Tensor() as x, (int() | float()) as factor):
            return scale(x, float(factor))
        case "tanh", (Tensor() as x,):
            return tanh(x)
        case "sigmoid", (Tensor() as x,):
            return sigmoid(x)
    msg = f"Invalid operands for elementwise '{kind}': {operands}"
    raise ContractError(msg)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (..., m, k) by a matrix b (k, n).

    Leading dimensions of `a` are treated as extra rows.
    """
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        msg = f"matmul: cannot multiply {a.shape} by {b.shape}."
        raise DimensionError(msg)

    def _backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k, n = b.shape
        grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return g @ b.data.T, grad_b

    return _make(a.data @ b.data, (a, b), _backward)


def transpose(x: Tensor) -> Tensor:
    """Transpose of a matrix."""
    if x.ndim != 2:
        msg = f"transpose needs a matrix, got shape {x.shape}."
        raise DimensionError(msg)
    return _make(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Same values in a new shape."""
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything when axis is None."""
    y = x.data.sum(axis=axis)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), _backward)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis and repeat the values n times along it."""
    y = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _make(y, (x,), lambda g: (g.sum(axis=axis),))


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along an axis, removing that axis."""
    y = np.take(x.data, index, axis=axis)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        slicer = [slice(None)] * x.ndim
        slicer[axis] = index
        grad[tuple(slicer)] = g
        return (grad,)

    return _make(y, (x,), _backward)


def narrow(x: Tensor, start: int, length: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start, start + length) along an axis."""
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(start, start + length)
    key = tuple(slicer)

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        grad[key] = g
        return (grad,)

    return _make(x.data[key], (x,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors whose shapes agree except along `axis`."""
    if not tensors:
        msg = "concat needs at least one tensor."
        raise DimensionError(msg)
    ndim = tensors[0].ndim
    axis_ = axis % ndim
    reference = [d for i, d in enumerate(tensors[0].shape) if i != axis_]
    for t in tensors[1:]:
        if t.ndim != ndim or [d for i, d in enumerate(t.shape) if i != axis_] != reference:
            shapes = ", ".join(str(t.shape) for t in tensors)
            msg = f"concat along axis {axis}: incompatible shapes {shapes}."
            raise DimensionError(msg)
    splits = np.cumsum([t.shape[axis_] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis_),
        tuple(tensors),
        lambda g: np.split(g, splits, axis=axis_),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equally shaped tensors along a new axis."""
    if not tensors:
        msg = "stack needs at least one tensor."
        raise DimensionError(msg)
    if any(t.shape != tensors[0].shape for t in tensors):
        shapes = ", ".join(str(t.shape) for t in tensors)
        msg = f"stack: shapes differ: {shapes}."
        raise DimensionError(msg)
    y = np.stack([t.data for t in tensors], axis=axis)
    return _make(
        y,
        tuple(tensors),
        lambda g: [np.take(g, i, axis=axis) for i in range(len(tensors))],
    )


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable log-softmax of a plain array."""
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max-subtraction; positions where mask is 0 get weight 0."""
    z = x.data
    if mask is not None:
        valid = np.asarray(mask, dtype=bool)
        if not valid.any(axis=axis).all():
            msg = "softmax: every position of a slice is masked."
            raise ContractError(msg)
        z = np.where(valid, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def embedding_lookup(table: Tensor, ids: np.ndarray | Sequence[int]) -> Tensor:
    """Gather rows of `table`; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = ids[(ids < 0) | (ids >= vocab)]
    if bad.size:
        msg = f"Token id {int(bad[0])} is outside the table of {vocab} rows."
        raise TokenIndexError(msg, int(bad[0]))

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _make(table.data[ids], (table,), _backward)


def masked_cross_entropy(
    logits: Tensor,
    targets: np.ndarray | Sequence[int],
    mask: np.ndarray | Sequence[float],
) -> Tensor:
    """Mean negative log-likelihood of `targets` over unmasked positions.

    Args:
        logits: Scores of shape (..., V).
        targets: Integer ids of shape (...).
        mask: 1 for real positions, 0 for padding, shape (...).

    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=DTYPE)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        msg = f"Cross-entropy shapes disagree: {logits.shape}, {targets.shape}, {mask.shape}."
        raise DimensionError(msg)
    bad = targets[(targets < 0) | (targets >= vocab)]
    if bad.size:
        msg = f"Target id {int(bad[0])} is outside the vocabulary of {vocab}."
        raise TokenIndexError(msg, int(bad[0]))
    count = mask.sum()
    if count == 0:
        msg = "All positions of the batch are masked."
        raise DegenerateBatchError(msg)
    logp = log_softmax_array(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(logp)
        np.put_along_axis(
            grad,
            targets[..., None],
            np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        return (grad * (mask / count)[..., None] * g,)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), _backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p), inference is identity."""
    if not 0 <= p < 1:
        msg = f"Dropout probability must be in [0, 1), got {p}."
        raise ConfigurationError(msg)
    if not training or p == 0:
        return x
    if rng is None:
        msg = "Training-mode dropout needs a random generator."
        raise ContractError(msg)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale every vector along `axis` to unit Euclidean norm; zero stays zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, L2_EPSILON)
    y = x.data / denom

    def _backward(g: np.ndarray) -> tuple[np.ndarray]:
        projected = g - y * (g * y).sum(axis=axis, keepdims=True)
        return (np.where(norm > L2_EPSILON, projected, g) / denom,)

    return _make(y, (x,), _backward)


def finite_difference_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central finite differences.

    `f` is called with the tensor(s) in `x` as positional arguments and must
    return a scalar tensor. Perturbations are applied in place.

    Args:
        f: Deterministic scalar function.
        x: Tensor or tensors to differentiate with respect to.
        h: Finite difference step.
        max_coords: (optional) Check at most this many random coordinates per
            tensor instead of all of them.
        seed: Seed for the coordinate sample.

    Returns:
        Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    if f(*xs).item() != f(*xs).item():
        msg = "finite_difference_check needs a deterministic function (disable dropout)."
        raise ContractError(msg)

    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    try:
        with GradientTape() as tape:
            loss = f(*xs)
        grads = backward(tape, loss) if loss.requires_grad else {}
    finally:
        for t, flag in zip(xs, flags, strict=True):
            t.requires_grad = flag

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in xs:
        analytic = grads.get(t.node_id, np.zeros_like(t.data))
        coords = np.arange(t.data.size)
        if max_coords is not None and t.data.size > max_coords:
            coords = np.sort(rng.choice(t.data.size, size=max_coords, replace=False))
        for flat in coords:
            idx = np.unravel_index(flat, t.shape)
            original = t.data[idx]
            t.data[idx] = original + h
            plus = f(*xs).item()
            t.data[idx] = original - h
            minus = f(*xs).item()
            t.data[idx] = original
            numeric = (plus - minus) / (2 * h)
            error = abs(analytic[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, float(error))
    return worst
