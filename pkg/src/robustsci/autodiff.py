"""Reverse-mode automatic differentiation over numpy arrays.

Every :class:`Node` holds an ndarray value (0-d for scalars) and belongs to a
:class:`Tape`.  Operations append a record to the tape; :func:`backward`
walks the records in reverse creation order, which is a valid topological
order because a node can only be built from nodes that already exist.

The primitive functions in this module (``tanh``, ``exp``, ``matmul`` ...)
accept plain arrays too and then simply return arrays.  The backward rules are
written with those same functions, so passing ``create_graph=True`` to
:func:`backward` records the gradient computation itself and the result can be
differentiated again.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericalError, UsageError

ArrayLike = "np.ndarray | float | Node"


class Tape:
    """Ordered record of every node created while evaluating an expression."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    def leaf(self, value, name: str | None = None) -> "Node":
        node = Node(as_float(value), self, (), None, name=name)
        self.leaves.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)

    def __repr__(self) -> str:
        return f"Tape(records={len(self.nodes)}, leaves={len(self.leaves)})"


class Node:
    __slots__ = ("value", "_grad", "tape", "parents", "vjp", "index", "name")
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: Tape, parents: tuple, vjp, name=None):
        self.value = value
        self._grad = None
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def grad(self):
        """Adjoint from the most recent backward pass (zeros if unreachable)."""
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, value={_brief(self.value)})"

    def __float__(self) -> float:
        return float(self.value)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _brief(value: np.ndarray) -> str:
    if value.size <= 4:
        return np.array2string(value, precision=6)
    return f"[{value.size} values]"


def as_float(x) -> np.ndarray:
    """``x`` as a floating array; float32 input stays float32, anything else becomes float64."""
    arr = np.asarray(x)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float64)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else as_float(x)


def _operand(x):
    """Value for arithmetic; Python scalars stay Python scalars so they do not widen float32."""
    if isinstance(x, Node):
        return x.value
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return float(x)
    return as_float(x)


def is_node(x) -> bool:
    return isinstance(x, Node)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise UsageError("operands belong to different tapes")
    return tape


def _record(value, args: tuple, vjp) -> Node:
    tape = _tape_of(*args)
    return Node(as_float(value), tape, args, vjp)


def sum_to_shape(g, shape: tuple):
    """Sum a broadcast gradient back down to ``shape``."""
    gshape = value_of(g).shape
    if gshape == tuple(shape):
        return g
    lead = len(gshape) - len(shape)
    axes = tuple(range(lead))
    axes += tuple(i + lead for i, s in enumerate(shape) if s == 1 and gshape[i + lead] != 1)
    out = reduce_sum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, tuple(shape))


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    if not (is_node(a) or is_node(b)):
        return _operand(a) + _operand(b)
    sa, sb = np.shape(_operand(a)), np.shape(_operand(b))
    return _record(_operand(a) + _operand(b), (a, b),
                   lambda g, out, a, b: (sum_to_shape(g, sa), sum_to_shape(g, sb)))


def sub(a, b):
    if not (is_node(a) or is_node(b)):
        return _operand(a) - _operand(b)
    sa, sb = np.shape(_operand(a)), np.shape(_operand(b))
    return _record(_operand(a) - _operand(b), (a, b),
                   lambda g, out, a, b: (sum_to_shape(g, sa), sum_to_shape(neg(g), sb)))


def neg(a):
    if not is_node(a):
        return -value_of(a)
    return _record(-a.value, (a,), lambda g, out, a: (neg(g),))


def mul(a, b):
    if not (is_node(a) or is_node(b)):
        return _operand(a) * _operand(b)
    sa, sb = np.shape(_operand(a)), np.shape(_operand(b))
    return _record(_operand(a) * _operand(b), (a, b),
                   lambda g, out, a, b: (sum_to_shape(mul(g, b), sa), sum_to_shape(mul(g, a), sb)))


def div(a, b):
    if not (is_node(a) or is_node(b)):
        return _operand(a) / _operand(b)
    sa, sb = np.shape(_operand(a)), np.shape(_operand(b))

    def vjp(g, out, a, b):
        ga = div(g, b)
        return sum_to_shape(ga, sa), sum_to_shape(neg(mul(ga, out)), sb)

    return _record(_operand(a) / _operand(b), (a, b), vjp)


def power(a, exponent: float):
    """``a ** exponent`` for a constant real exponent."""
    if is_node(exponent):
        raise UsageError("power supports constant exponents only")
    p = float(exponent)
    if not is_node(a):
        return value_of(a) ** p
    if p == 2.0:
        return mul(a, a)
    if p != int(p) and np.any(a.value < 0):
        raise DomainError("non-integer power of a negative value")
    return _record(a.value ** p, (a,), lambda g, out, a: (mul(g, mul(p, power(a, p - 1.0))),))


def square(a):
    return mul(a, a)


# ---------------------------------------------------------------------------
# elementwise functions


def exp(a):
    if not is_node(a):
        return np.exp(value_of(a))
    return _record(np.exp(a.value), (a,), lambda g, out, a: (mul(g, out),))


def expm1(a):
    if not is_node(a):
        return np.expm1(value_of(a))
    return _record(np.expm1(a.value), (a,), lambda g, out, a: (mul(g, add(out, 1.0)),))


def log(a):
    v = value_of(a)
    if np.any(v <= 0):
        bad = np.flatnonzero(np.ravel(v) <= 0)[0]
        raise DomainError(f"log of non-positive value {np.ravel(v)[bad]!r} at flat index {bad}")
    if not is_node(a):
        return np.log(v)
    return _record(np.log(v), (a,), lambda g, out, a: (div(g, a),))


def log1p(a):
    v = value_of(a)
    if np.any(v <= -1):
        raise DomainError("log1p of a value <= -1")
    if not is_node(a):
        return np.log1p(v)
    return _record(np.log1p(v), (a,), lambda g, out, a: (div(g, add(a, 1.0)),))


def sqrt(a):
    v = value_of(a)
    if np.any(v <= 0):
        bad = np.flatnonzero(np.ravel(v) <= 0)[0]
        raise DomainError(f"sqrt of non-positive value {np.ravel(v)[bad]!r} at flat index {bad}")
    if not is_node(a):
        return np.sqrt(v)
    return _record(np.sqrt(v), (a,), lambda g, out, a: (div(mul(g, 0.5), out),))


def sin(a):
    if not is_node(a):
        return np.sin(value_of(a))
    return _record(np.sin(a.value), (a,), lambda g, out, a: (mul(g, cos(a)),))


def cos(a):
    if not is_node(a):
        return np.cos(value_of(a))
    return _record(np.cos(a.value), (a,), lambda g, out, a: (neg(mul(g, sin(a))),))


def tanh(a):
    if not is_node(a):
        return np.tanh(value_of(a))
    return _record(np.tanh(a.value), (a,),
                   lambda g, out, a: (mul(g, sub(1.0, mul(out, out))),))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    if not is_node(a):
        return _sigmoid_np(value_of(a))
    return _record(_sigmoid_np(a.value), (a,),
                   lambda g, out, a: (mul(g, mul(out, sub(1.0, out))),))


def _softplus_np(v: np.ndarray) -> np.ndarray:
    # softplus(z) = z + softplus(-z) keeps exp() bounded for large z
    return np.where(v > 30.0, v + np.log1p(np.exp(-np.abs(v))), np.log1p(np.exp(np.minimum(v, 30.0))))


def softplus(a):
    """ln(1 + e^z), overflow-safe."""
    if not is_node(a):
        return _softplus_np(value_of(a))
    return _record(_softplus_np(a.value), (a,), lambda g, out, a: (mul(g, sigmoid(a)),))


def _log1mexp_np(v: np.ndarray) -> np.ndarray:
    return np.where(v < np.log(2.0), np.log(-np.expm1(-v)), np.log1p(-np.exp(-v)))


def log1mexp(a):
    """ln(1 - e^-a) for a > 0, accurate at both small and large a."""
    v = value_of(a)
    if np.any(v <= 0):
        raise DomainError("log1mexp needs a strictly positive argument")
    if not is_node(a):
        return _log1mexp_np(v)
    return _record(_log1mexp_np(v), (a,), lambda g, out, a: (div(g, expm1(a)),))


def identity(a):
    return a


# ---------------------------------------------------------------------------
# shape and reduction ops


def reduce_sum(a, axis=None, keepdims=False):
    if not is_node(a):
        return np.sum(value_of(a), axis=axis, keepdims=keepdims)
    shape = a.value.shape
    if axis is None:
        axes = tuple(range(len(shape)))
    else:
        axes = tuple(ax % len(shape) for ax in np.atleast_1d(axis))
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def vjp(g, out, a):
        return (broadcast_to(reshape(g, kept), shape),)

    return _record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None):
    v = value_of(a)
    count = v.size if axis is None else np.prod([v.shape[ax] for ax in np.atleast_1d(axis)])
    return div(reduce_sum(a, axis=axis), float(count))


def broadcast_to(a, shape: tuple):
    if not is_node(a):
        return np.broadcast_to(value_of(a), shape).copy()
    src = a.value.shape
    return _record(np.broadcast_to(a.value, shape).copy(), (a,),
                   lambda g, out, a: (sum_to_shape(g, src),))


def reshape(a, shape: tuple):
    if not is_node(a):
        return np.reshape(value_of(a), shape)
    src = a.value.shape
    return _record(np.reshape(a.value, shape), (a,), lambda g, out, a: (reshape(g, src),))


def transpose(a):
    if not is_node(a):
        return np.transpose(value_of(a))
    return _record(np.transpose(a.value), (a,), lambda g, out, a: (transpose(g),))


def getitem(a, index):
    if not is_node(a):
        return value_of(a)[index]
    src = a.value.shape

    def vjp(g, out, a):
        return (scatter(g, index, src),)

    return _record(a.value[index], (a,), vjp)


def scatter(g, index, shape: tuple):
    """Adjoint of ``getitem``: place ``g`` into zeros of ``shape`` at ``index``."""
    if not is_node(g):
        gv = value_of(g)
        out = np.zeros(shape, dtype=gv.dtype)
        np.add.at(out, index, gv)
        return out
    buf = np.zeros(shape, dtype=g.value.dtype)
    np.add.at(buf, index, g.value)
    return _record(buf, (g,), lambda gg, out, g: (getitem(gg, index),))


def concatenate(parts: Sequence, axis: int = 0):
    if not any(is_node(p) for p in parts):
        return np.concatenate([value_of(p) for p in parts], axis=axis)
    sizes = [value_of(p).shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, out, *parts):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * value_of(g).ndim
            sl[axis] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(sl)))
        return tuple(grads)

    return _record(np.concatenate([value_of(p) for p in parts], axis=axis), tuple(parts), vjp)


def stack(parts: Sequence, axis: int = 0):
    expanded = []
    for p in parts:
        shape = list(value_of(p).shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(reshape(p, tuple(shape)))
    return concatenate(expanded, axis=axis)


def matmul(a, b):
    if not (is_node(a) or is_node(b)):
        return value_of(a) @ value_of(b)
    if value_of(a).ndim != 2 or value_of(b).ndim != 2:
        raise UsageError("matmul is defined for 2-d operands only")
    return _record(value_of(a) @ value_of(b), (a, b),
                   lambda g, out, a, b: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def custom_scalar_fn(a, fn: Callable[[np.ndarray], np.ndarray], dfn: Callable[[np.ndarray], np.ndarray]):
    """Wrap an external elementwise function with a known derivative.

    The derivative is treated as a constant in the backward rule, so the result
    supports first-order differentiation only.
    """
    if not is_node(a):
        return as_float(fn(value_of(a)))
    slope = as_float(dfn(a.value))
    return _record(fn(a.value), (a,), lambda g, out, a: (mul(g, slope),))


def primitive(value, parents: tuple, vjp_numpy: Callable):
    """Record an op whose backward rule is written directly in numpy.

    ``vjp_numpy(g, out_value, *parent_values)`` returns one gradient per parent.
    Such ops support first-order differentiation only.
    """
    if not any(is_node(p) for p in parents):
        return as_float(value)

    def vjp(g, out, *args):
        if is_node(g):
            raise UsageError("this operation does not support create_graph")
        return vjp_numpy(g, out, *args)

    return _record(value, tuple(parents), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Node, seed=None, create_graph: bool = False) -> dict:
    """Propagate adjoints from ``root`` to every node on its tape.

    Gradients from any earlier pass are cleared first.  Returns a mapping from
    each leaf of the tape to its gradient.
    """
    if not isinstance(root, Node) or root.tape is None:
        raise UsageError("backward() needs a node recorded on a tape")
    tape = root.tape
    if root.index >= len(tape.nodes) or tape.nodes[root.index] is not root:
        raise UsageError("node is detached from its tape")
    for node in tape.nodes:
        node._grad = None
    if seed is None:
        if root.value.size != 1:
            raise UsageError("backward() on a non-scalar root needs an explicit seed")
        seed = np.ones_like(root.value)
    seed = as_float(seed).astype(root.value.dtype, copy=False)
    if seed.shape != root.value.shape:
        raise UsageError(f"seed shape {seed.shape} != root shape {root.value.shape}")
    nodes = tape.nodes[: root.index + 1]
    root._grad = tape.leaf(seed) if create_graph else seed
    for node in reversed(nodes):
        g = node._grad
        if g is None or node.vjp is None:
            continue
        if create_graph:
            grads = node.vjp(g, node, *node.parents)
        else:
            grads = node.vjp(g, node.value, *(_operand(p) for p in node.parents))
        for parent, pg in zip(node.parents, grads):
            if not isinstance(parent, Node):
                continue
            parent._grad = pg if parent._grad is None else add(parent._grad, pg)
    return {leaf: leaf.grad for leaf in tape.leaves if leaf.index <= root.index}


def grad(fn: Callable, x, create_graph: bool = False):
    """Gradient of scalar ``fn`` at ``x``.

    A plain array gets a fresh tape.  A node is differentiated on its own tape
    with the backward pass recorded, so the returned gradient is itself a node
    that can be differentiated again.
    """
    if isinstance(x, Node):
        out = fn(x)
        if not isinstance(out, Node):
            return np.zeros_like(x.value)
        backward(out, create_graph=True)
        return x._grad if x._grad is not None else np.zeros_like(x.value)
    tape = Tape()
    xn = tape.leaf(x)
    out = fn(xn)
    if not isinstance(out, Node):
        return np.zeros_like(xn.value)
    backward(out, create_graph=create_graph)
    return xn.grad


def laplacian(fn: Callable, points) -> np.ndarray:
    """Laplacian of a pointwise scalar field by nested reverse mode.

    ``fn`` maps an (n, d) array of points to n values, each depending only on
    its own row.
    """
    tape = Tape()
    x = tape.leaf(points)
    g = grad(lambda z: reduce_sum(fn(z)), x)
    if not isinstance(g, Node):
        return np.zeros(x.value.shape[0])
    d = x.value.shape[1]
    total = np.zeros(x.value.shape[0])
    for i in range(d):
        gi = reduce_sum(getitem(g, (slice(None), i)))
        backward(gi)
        total += x.grad[:, i]
    return total


def grad_wrt_input(loss_fn: Callable, x) -> np.ndarray:
    """Input gradient of ``loss_fn`` with model parameters held constant.

    ``loss_fn`` receives the input as a node and must return a scalar.
    """
    g = np.asarray(value_of(grad(loss_fn, x)), dtype=float)
    bad = ~np.isfinite(g)
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericalError(f"non-finite input-gradient component at index {idx}", index=idx)
    return g


def finite_diff_grad(fn: Callable, x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(value_of(fn(xp.reshape(x.shape))))
        fm = float(value_of(fn(xm.reshape(x.shape))))
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_check(fn: Callable, x, h: float = 1e-5) -> float:
    """Max relative deviation between the autodiff and central-difference gradients."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    g_ad = grad_wrt_input(fn, x)
    g_fd = finite_diff_grad(fn, x, h)
    if g_ad.size == 0:
        return 0.0
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-12)))
