"""Dense float64 tensors, a reverse-mode tape, and the SGD/cosine-LR optimizer.

Desk-scale engine: every value is a float64 numpy array, execution is
single-threaded, and a fixed seed gives bit-identical results. A ``Tape``
records primitive operations in execution order; ``Tape.backward`` walks the
record once in reverse, accumulating gradients additively, so creation order
doubles as the topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class DiffError(Exception):
    """Base error for the differentiation engine."""


class ShapeError(DiffError):
    """Operands have incompatible shapes."""


class NumericError(DiffError):
    """A non-finite value appeared where only finite values are allowed."""


class Tensor:
    """Immutable dense array of 64-bit floats.

    Construction validates that every entry is finite: a NaN/Inf in a
    parameter or stored feature is rejected at the boundary instead of
    poisoning downstream math silently.
    """

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericError("Tensor rejects non-finite entries")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        """Read-only row-major float64 array."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self._data.shape)

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def item(self) -> float:
        return float(self._data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _asarray(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


class Node:
    """One recorded value in a computation; holds value and accumulated grad."""

    __slots__ = ("tape", "value", "grad", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, tape, value, name, requires_grad, parents, backward):
        self.tape = tape
        self.value = value
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    def __repr__(self) -> str:
        return f"Node({self.name}, shape={self.shape})"


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self) -> None:
        self._nodes: list[Node] = []
        self._counter = 0

    def _register(self, node: Node) -> Node:
        self._nodes.append(node)
        return node

    def _name(self, op: str, name: str | None) -> str:
        self._counter += 1
        return name if name is not None else f"{op}_{self._counter}"

    def leaf(self, value, name: str) -> Node:
        """A differentiable input (parameter)."""
        arr = _asarray(value)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in node '{name}'")
        return self._register(Node(self, arr, name, True, (), None))

    def constant(self, value, name: str | None = None) -> Node:
        """A non-differentiable input (data, detached values, masks)."""
        arr = _asarray(value)
        node_name = self._name("const", name)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in node '{node_name}'")
        return self._register(Node(self, arr, node_name, False, (), None))

    def record(self, op: str, value: np.ndarray, parents: tuple[Node, ...],
               backward: Callable[[np.ndarray], None] | None,
               name: str | None = None) -> Node:
        node_name = self._name(op, name)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite values in node '{node_name}'")
        requires_grad = any(p.requires_grad for p in parents)
        return self._register(Node(self, value, node_name, requires_grad,
                                   parents, backward if requires_grad else None))

    def backward(self, root: Node) -> None:
        """Accumulate d(root)/d(leaf) into every node reachable from root.

        Visits each recorded node exactly once, in reverse creation order.
        """
        if root.tape is not self:
            raise DiffError("root node belongs to a different tape")
        if root.value.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
        for node in self._nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise DiffError("operands were recorded on different tapes")
    return tape


def _accumulate(parent: Node, grad: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.array(grad)
    else:
        parent.grad = parent.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a: Node, b: Node, name: str | None = None) -> Node:
    tape = _same_tape(a, b)
    value = a.value + b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return tape.record("add", value, (a, b), backward, name)


def sub(a: Node, b: Node, name: str | None = None) -> Node:
    tape = _same_tape(a, b)
    value = a.value - b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    return tape.record("sub", value, (a, b), backward, name)


def mul(a: Node, b: Node, name: str | None = None) -> Node:
    tape = _same_tape(a, b)
    value = a.value * b.value

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    return tape.record("mul", value, (a, b), backward, name)


def scale(a: Node, factor: float, name: str | None = None) -> Node:
    value = a.value * factor

    def backward(g):
        _accumulate(a, g * factor)

    return a.tape.record("scale", value, (a,), backward, name)


def neg(a: Node, name: str | None = None) -> Node:
    return scale(a, -1.0, name)


def matmul(a: Node, b: Node, name: str | None = None) -> Node:
    tape = _same_tape(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    value = a.value @ b.value

    def backward(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return tape.record("matmul", value, (a, b), backward, name)


def matvec(a: Node, v: Node, name: str | None = None) -> Node:
    tape = _same_tape(a, v)
    if a.value.ndim != 2 or v.value.ndim != 1 or a.value.shape[1] != v.value.shape[0]:
        raise ShapeError(f"matvec shapes {a.shape} x {v.shape}")
    value = a.value @ v.value

    def backward(g):
        _accumulate(a, np.outer(g, v.value))
        _accumulate(v, a.value.T @ g)

    return tape.record("matvec", value, (a, v), backward, name)


def transpose(a: Node, name: str | None = None) -> Node:
    value = a.value.T

    def backward(g):
        _accumulate(a, g.T)

    return a.tape.record("transpose", value, (a,), backward, name)


def reshape(a: Node, shape: tuple[int, ...], name: str | None = None) -> Node:
    value = a.value.reshape(shape)
    old_shape = a.value.shape

    def backward(g):
        _accumulate(a, g.reshape(old_shape))

    return a.tape.record("reshape", value, (a,), backward, name)


def concat_cols(a: Node, b: Node, name: str | None = None) -> Node:
    tape = _same_tape(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[0] != b.value.shape[0]:
        raise ShapeError(f"concat_cols shapes {a.shape} | {b.shape}")
    value = np.concatenate([a.value, b.value], axis=1)
    split = a.value.shape[1]

    def backward(g):
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return tape.record("concat_cols", value, (a, b), backward, name)


def take_col(a: Node, index: int, name: str | None = None) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("take_col expects a matrix")
    value = a.value[:, index].copy()

    def backward(g):
        full = np.zeros_like(a.value)
        full[:, index] = g
        _accumulate(a, full)

    return a.tape.record("take_col", value, (a,), backward, name)


def relu(a: Node, name: str | None = None) -> Node:
    mask = a.value > 0
    value = np.where(mask, a.value, 0.0)

    def backward(g):
        _accumulate(a, g * mask)

    return a.tape.record("relu", value, (a,), backward, name)


def log(a: Node, name: str | None = None) -> Node:
    if np.any(a.value <= 0):
        raise NumericError(f"log of non-positive value in node '{a.name}'")
    value = np.log(a.value)

    def backward(g):
        _accumulate(a, g / a.value)

    return a.tape.record("log", value, (a,), backward, name)


def clamp_min(a: Node, floor: float, name: str | None = None) -> Node:
    mask = a.value > floor
    value = np.where(mask, a.value, floor)

    def backward(g):
        _accumulate(a, g * mask)

    return a.tape.record("clamp_min", value, (a,), backward, name)


def sum_all(a: Node, name: str | None = None) -> Node:
    value = np.asarray(a.value.sum())

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.value.shape).copy())

    return a.tape.record("sum_all", value, (a,), backward, name)


def mean_all(a: Node, name: str | None = None) -> Node:
    n = a.value.size
    value = np.asarray(a.value.mean())

    def backward(g):
        _accumulate(a, np.broadcast_to(g / n, a.value.shape).copy())

    return a.tape.record("mean_all", value, (a,), backward, name)


def sum_axis(a: Node, axis: int, name: str | None = None) -> Node:
    value = a.value.sum(axis=axis)

    def backward(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy())

    return a.tape.record("sum_axis", value, (a,), backward, name)


def mean_axis(a: Node, axis: int, name: str | None = None) -> Node:
    n = a.value.shape[axis]
    value = a.value.mean(axis=axis)

    def backward(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g / n, axis), a.value.shape).copy())

    return a.tape.record("mean_axis", value, (a,), backward, name)


def softmax(a: Node, name: str | None = None) -> Node:
    """Row-wise softmax (last axis), numerically stable via max subtraction."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * value).sum(axis=-1, keepdims=True)
        _accumulate(a, value * (g - inner))

    return a.tape.record("softmax", value, (a,), backward, name)


def log_softmax(a: Node, name: str | None = None) -> Node:
    """Row-wise log-softmax; tolerates -1e30 mask entries without overflow."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    value = shifted - lse

    def backward(g):
        p = np.exp(value)
        _accumulate(a, g - p * g.sum(axis=-1, keepdims=True))

    return a.tape.record("log_softmax", value, (a,), backward, name)


def l2_normalize_rows(a: Node, name: str | None = None) -> Node:
    """Scale each row to unit Euclidean norm; zero rows are a numeric error."""
    if a.value.ndim != 2:
        raise ShapeError("l2_normalize_rows expects a matrix")
    norms = np.sqrt((a.value ** 2).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise NumericError(f"zero row cannot be normalized in node '{a.name}'")
    value = a.value / norms

    def backward(g):
        inner = (g * value).sum(axis=1, keepdims=True)
        _accumulate(a, (g - value * inner) / norms)

    return a.tape.record("l2_normalize_rows", value, (a,), backward, name)


BN_EPS = 1e-5


def batch_norm_train(x: Node, gamma: Node, beta: Node, name: str | None = None):
    """Batch normalization with batch statistics (training mode).

    Returns (node, batch_mean, batch_var_biased); the caller decides whether
    to fold the batch statistics into running buffers. Needs batch size >= 2.
    """
    tape = _same_tape(x, gamma, beta)
    if x.value.ndim != 2:
        raise ShapeError("batch_norm_train expects a (batch, features) matrix")
    n = x.value.shape[0]
    if n < 2:
        raise ShapeError("batch_norm_train needs at least 2 samples")
    mean = x.value.mean(axis=0)
    centered = x.value - mean
    var = (centered ** 2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = centered * inv_std
    value = gamma.value * x_hat + beta.value

    def backward(g):
        _accumulate(beta, g.sum(axis=0))
        _accumulate(gamma, (g * x_hat).sum(axis=0))
        gx_hat = g * gamma.value
        dvar = (gx_hat * centered).sum(axis=0) * (-0.5) * inv_std ** 3
        dmean = -(gx_hat.sum(axis=0)) * inv_std + dvar * (-2.0) * centered.mean(axis=0)
        _accumulate(x, gx_hat * inv_std + dvar * 2.0 * centered / n + dmean / n)

    node = tape.record("batch_norm_train", value, (x, gamma, beta), backward, name)
    return node, mean, var


def batch_norm_eval(x: Node, gamma: Node, beta: Node,
                    running_mean: np.ndarray, running_var: np.ndarray,
                    name: str | None = None) -> Node:
    """Batch normalization with frozen running statistics (inference mode)."""
    tape = _same_tape(x, gamma, beta)
    inv_std = 1.0 / np.sqrt(running_var + BN_EPS)
    x_hat = (x.value - running_mean) * inv_std
    value = gamma.value * x_hat + beta.value

    def backward(g):
        _accumulate(beta, g.sum(axis=0))
        _accumulate(gamma, (g * x_hat).sum(axis=0))
        _accumulate(x, g * gamma.value * inv_std)

    return tape.record("batch_norm_eval", value, (x, gamma, beta), backward, name)


# ---------------------------------------------------------------------------
# forward/backward drivers
# ---------------------------------------------------------------------------

LossBuilder = Callable[[Tape, dict[str, Node]], Node]


def forward_backward(params: Mapping[str, Tensor], loss_builder: LossBuilder,
                     ) -> tuple[float, dict[str, Tensor]]:
    """Evaluate a scalar loss and its gradient w.r.t. every parameter.

    ``loss_builder(tape, nodes)`` assembles the computation from leaf nodes
    (one per parameter, same keys) and returns the scalar loss node. The
    builder must be a pure function of the tape inputs. Parameters not on any
    path to the loss get an exactly-zero gradient.
    """
    tape = Tape()
    nodes = {key: tape.leaf(value, name=key) for key, value in params.items()}
    root = loss_builder(tape, nodes)
    if root.value.size != 1:
        raise ShapeError("loss builder must return a scalar node")
    tape.backward(root)
    grads = {}
    for key, node in nodes.items():
        if node.grad is None:
            grads[key] = Tensor(np.zeros_like(node.value))
        else:
            grads[key] = Tensor(node.grad)
    return float(root.value), grads


def loss_value(params: Mapping[str, Tensor], loss_builder: LossBuilder) -> float:
    """Forward-only evaluation of a loss builder (no gradients)."""
    tape = Tape()
    nodes = {key: tape.leaf(value, name=key) for key, value in params.items()}
    return float(loss_builder(tape, nodes).value)


def finite_diff_grad(params: Mapping[str, Tensor], loss_builder: LossBuilder,
                     eps: float = 1e-5) -> dict[str, Tensor]:
    """Central-difference gradient estimate, one scalar parameter at a time.

    Independent of the tape: only forward evaluations at perturbed parameter
    values. Intended as the oracle that analytic gradients are checked
    against.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    work = {key: np.array(value.data) for key, value in params.items()}

    def evaluate() -> float:
        return loss_value({k: Tensor(v) for k, v in work.items()}, loss_builder)

    grads = {}
    for key in params:
        flat = work[key].reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            hi = evaluate()
            flat[i] = original - eps
            lo = evaluate()
            flat[i] = original
            grad[i] = (hi - lo) / (2.0 * eps)
        grads[key] = Tensor(grad.reshape(work[key].shape))
    return grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def cosine_lr(base_lr: float, progress: float, full_cosine: bool = False) -> float:
    """Cosine-annealed learning rate at training progress ``a`` in [0, 1].

    Default half-period form reaches base_lr/2 at a=1; ``full_cosine`` gives
    the conventional full-period schedule that decays to zero.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    if full_cosine:
        return base_lr * 0.5 * (math.cos(progress * math.pi) + 1.0)
    return base_lr * 0.5 * (math.cos(progress * math.pi / 2.0) + 1.0)


@dataclass
class SgdState:
    """SGD with momentum, weight decay, and per-group LR multipliers."""

    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_multipliers: dict[str, float] = field(default_factory=dict)
    full_cosine: bool = False
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be >= 0")
        if self.base_lr <= 0.0:
            raise ValueError("base learning rate must be > 0")


def sgd_step(state: SgdState, params: Mapping[str, Tensor],
             grads: Mapping[str, "Tensor | np.ndarray"], progress: float) -> dict[str, Tensor]:
    """One SGD update: v <- mu*v + g + lambda*theta; theta <- theta - lr*mult*v.

    ``progress`` drives the cosine schedule; velocity buffers live in
    ``state`` and are updated in place.
    """
    lr = cosine_lr(state.base_lr, progress, state.full_cosine)
    updated: dict[str, Tensor] = {}
    for key, theta in params.items():
        raw = grads[key]
        grad = raw.data if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter '{key}'")
        velocity = state.velocities.get(key)
        if velocity is None:
            velocity = np.zeros_like(theta.data)
        velocity = state.momentum * velocity + grad + state.weight_decay * theta.data
        state.velocities[key] = velocity
        multiplier = state.lr_multipliers.get(key, 1.0)
        updated[key] = Tensor(theta.data - lr * multiplier * velocity)
    return updated
