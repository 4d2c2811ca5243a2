"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the result remembers its parents and a backward rule mapping the
output gradient to one gradient per parent. :class:`Tape` linearises that
graph into topological order and sweeps it in reverse.
"""
from __future__ import annotations

import numbers
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "matmul",
    "softmax",
    "concat",
    "backward",
    "gradcheck",
    "numerical_grad",
    "OP_REGISTRY",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# name -> short description; every differentiable primitive registers here so
# the gradient-check suite can assert coverage.
OP_REGISTRY: dict[str, str] = {}


def register_op(name: str, doc: str = "") -> None:
    OP_REGISTRY[name] = doc


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"non-finite value produced by {op}")
        out.grad = None
        out.name = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> "Tape":
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def _is_scalar(x) -> bool:
    if isinstance(x, numbers.Real):
        return True
    return isinstance(x, Tensor) and x.ndim == 0


def _binary_operands(a, b, opname: str) -> tuple[Tensor, Tensor]:
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible")
    return a, b


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar operand: collapse the broadcast gradient back to shape ()
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    """Multiply by a constant (non-differentiable) scalar."""
    a = tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Tensor:
    a = tensor(a)
    y = _sigmoid_np(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name.

    ``op`` is one of ``add``, ``sub``, ``mul``, ``relu``, ``sigmoid`` or
    ``scale`` (``b`` is then the scalar factor).
    """
    if op in _ELEMENTWISE:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _ELEMENTWISE[op](a, b)
    if op == "relu":
        return relu(a)
    if op == "sigmoid":
        return sigmoid(a)
    if op == "scale":
        if not _is_scalar(b):
            raise ValueError("scale needs a scalar factor")
        return scale(a, float(tensor(b).data))
    raise ValueError(f"unknown elementwise op {op!r}")


# -- linear algebra and reductions ------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), bw, "getitem")


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) excludes positions: they get
    weight exactly zero and the remaining positions renormalise. Every slice
    must keep at least one valid position.
    """
    x = tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw, "softmax")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ref} and {t.shape} are incompatible")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


for _name in ("add", "sub", "mul", "scale", "relu", "sigmoid", "matmul", "sum",
              "reshape", "transpose", "getitem", "softmax", "concat"):
    register_op(_name)


# -- reverse sweep -------------------------------------------------------------

class Tape:
    """Topologically ordered record of the graph that produced ``output``.

    ``nodes`` lists every reachable tensor requiring a gradient, inputs
    before consumers. ``gradients`` is filled by :meth:`backward`, keyed by
    position in ``nodes``.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        self.gradients: list[np.ndarray | None] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._index = {id(n): i for i, n in enumerate(self.nodes)}

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, seed: np.ndarray | float = 1.0) -> "Tape":
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if self.nodes:
            grads[-1] = np.broadcast_to(np.asarray(seed, dtype=np.float64), self.output.shape).copy()
        for i in range(len(self.nodes) - 1, -1, -1):
            node, g = self.nodes[i], grads[i]
            if g is None:
                g = grads[i] = np.zeros_like(node.data)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                j = self._index[id(parent)]
                grads[j] = pg if grads[j] is None else grads[j] + pg
        self.gradients = grads
        for node, g in zip(self.nodes, grads):
            node.grad = g if node.grad is None else node.grad + g
        return self

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        i = self._index.get(id(t))
        return None if i is None else self.gradients[i]


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every tensor reachable from scalar ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    return Tape(loss).backward(1.0)


# -- finite-difference verification ---------------------------------------------

def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, indices=None) -> dict:
    """Central differences of scalar ``f()`` with respect to entries of ``x``.

    ``x`` is perturbed in place and restored. Returns {flat_index: slope}.
    """
    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[int(i)] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradcheck(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, indices=None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps ``x`` to a scalar tensor. ``indices`` optionally restricts the
    comparison to a subset of flat coordinates.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    analytic = analytic.reshape(-1)
    numeric = numerical_grad(lambda: f(x), x, h, indices)
    return max((relative_error(analytic[i], n) for i, n in numeric.items()), default=0.0)
