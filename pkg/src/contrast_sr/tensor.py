"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the network is a ``Tensor`` wrapping a
C-contiguous float64 numpy array.  Operations record a dynamic graph
(parent links plus one vector-Jacobian closure per parent) whenever any
input requires gradients; ``Tensor.backward`` replays that graph once in
reverse topological order.  Gradient accumulation is additive across
``backward`` calls; callers reset with ``zero_grad`` on their modules.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Reverse sweep from a scalar loss, accumulating into ``.grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _topo_order(self)
        flow = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                acc = flow.get(id(parent))
                flow[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce_max(self, axes, keepdims)

    def abs(self):
        return absolute(self)

    def exp(self):
        return exp(self)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def record(data, parents, vjps):
    """Build a graph node from an already-computed numpy payload.

    ``vjps[i]`` maps the upstream gradient to the gradient of ``parents[i]``.
    Used by every primitive in this package, including the hand-written
    convolution / scan / unfold kernels in the neighbouring modules.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjps = ()
    return out


def _topo_order(root):
    """Iterative DFS postorder: every node appears after its parents.

    Nodes are marked visited at expansion (first pop), not at push; marking
    at push emits wrong orders on diamond-shaped graphs.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def graph_nodes(root):
    """The recorded graph reachable from ``root``, inputs before outputs."""
    return _topo_order(root)


# -- broadcasting ---------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum ``g`` over axes that were broadcast to reach ``g.shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- binary elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return record(a.data + b.data, (a, b),
                  (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    return record(a.data * b.data, (a, b),
                  (lambda g: _unbroadcast(g * b.data, a.shape),
                   lambda g: _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return record(out, (a, b),
                  (lambda g: _unbroadcast(g / b.data, a.shape),
                   lambda g: _unbroadcast(-g * out / b.data, b.shape)))


# -- unary elementwise ------------------------------------------------------------


def neg(a):
    a = _lift(a)
    return record(-a.data, (a,), (lambda g: -g,))


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return record(out, (a,), (lambda g: g * out,))


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.data)
    return record(out, (a,), (lambda g: g * 0.5 / out,))


def absolute(a):
    a = _lift(a)
    # sign() is 0 at exact ties, matching the documented L1 subgradient.
    return record(np.abs(a.data), (a,), (lambda g: g * np.sign(a.data),))


def softplus(a):
    a = _lift(a)
    out = np.logaddexp(0.0, a.data)
    sig = _sigmoid(a.data)
    return record(out, (a,), (lambda g: g * sig,))


def sigmoid(a):
    a = _lift(a)
    out = _sigmoid(a.data)
    return record(out, (a,), (lambda g: g * out * (1.0 - out),))


def silu(a):
    a = _lift(a)
    sig = _sigmoid(a.data)
    return record(a.data * sig, (a,),
                  (lambda g: g * sig * (1.0 + a.data * (1.0 - sig)),))


def gelu(a):
    """Exact erf-form GELU: x * Phi(x)."""
    a = _lift(a)
    cdf = 0.5 * (1.0 + erf(a.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(2.0 * np.pi)
    return record(a.data * cdf, (a,), (lambda g: g * (cdf + a.data * pdf),))


def relu(a):
    a = _lift(a)
    return record(np.maximum(a.data, 0.0), (a,), (lambda g: g * (a.data > 0.0),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {"neg": neg, "exp": exp, "softplus": softplus, "silu": silu, "gelu": gelu,
          "sigmoid": sigmoid, "relu": relu, "abs": absolute, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op, a, b=None):
    """Dispatch an elementwise primitive by name."""
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} is binary")
        return _BINARY[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


# -- matmul -----------------------------------------------------------------------


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} vs {b.shape}") from None
    out = a.data @ b.data

    def grad_a(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def grad_b(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return record(out, (a, b), (grad_a, grad_b))


# -- reductions -------------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim if -ndim <= ax < ndim else _axis_err(ax, ndim) for ax in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes {axes}")
    return axes


def _axis_err(ax, ndim):
    raise ShapeError(f"axis {ax} out of range for rank {ndim}")


def _restore_shape(g, shape, axes, keepdims):
    if keepdims:
        return g
    expanded = list(g.shape)
    for ax in sorted(axes):
        expanded.insert(ax, 1)
    return g.reshape(expanded)


def reduce_sum(a, axes=None, keepdims=False):
    a = _lift(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        return np.broadcast_to(_restore_shape(g, a.shape, axes, keepdims), a.shape).copy()

    return record(np.asarray(out), (a,), (vjp,))


def reduce_mean(a, axes=None, keepdims=False):
    a = _lift(a)
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        return np.broadcast_to(_restore_shape(g, a.shape, axes, keepdims), a.shape) / count

    return record(np.asarray(out), (a,), (vjp,))


def reduce_max(a, axes=None, keepdims=False):
    """Max reduction; ties route the gradient to the first maximal element
    in row-major order."""
    a = _lift(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.data.max(axis=axes, keepdims=keepdims)

    other = tuple(i for i in range(a.ndim) if i not in axes)
    moved = np.transpose(a.data, other + axes)
    lead = moved.shape[:len(other)]
    flat = moved.reshape(int(np.prod(lead)) if lead else 1, -1)
    argmax = flat.argmax(axis=1)  # first maximal index per group

    def vjp(g):
        gflat = _restore_shape(g, a.shape, axes, keepdims)
        gflat = np.transpose(gflat, other + axes).reshape(flat.shape[0], -1)
        scat = np.zeros_like(flat)
        scat[np.arange(flat.shape[0]), argmax] = gflat[:, 0]
        scat = scat.reshape(moved.shape)
        inv = np.argsort(other + axes)
        return np.transpose(scat, inv)

    return record(np.asarray(out), (a,), (vjp,))


# -- shape manipulation -----------------------------------------------------------


def reshape(a, shape):
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return record(out, (a,), (lambda g: g.reshape(a.shape),))


def transpose(a, axes):
    a = _lift(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), (lambda g: g.transpose(inv),))


def getitem(a, key):
    """Basic indexing (ints and slices); gradient scatters into zeros."""
    a = _lift(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return full

    return record(np.ascontiguousarray(out), (a,), (vjp,))


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise ShapeError("stack requires identical shapes")
    out = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.ascontiguousarray(np.take(g, i, axis=axis))

    return record(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def take(a, indices, axis):
    """Gather along one axis with a 1-D integer index array (bias-table lookup)."""
    a = _lift(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ShapeError("take supports 1-D index arrays")
    out = np.take(a.data, indices, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)  # view; add.at writes through
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return full

    return record(out, (a,), (vjp,))


def pad2d_zero(a, pads):
    """Zero-pad the last two axes; pads = (top, bottom, left, right)."""
    a = _lift(a)
    pt, pb, pl, pr = pads
    width = [(0, 0)] * (a.ndim - 2) + [(pt, pb), (pl, pr)]
    out = np.pad(a.data, width)
    sl = (Ellipsis, slice(pt, pt + a.shape[-2]), slice(pl, pl + a.shape[-1]))
    return record(out, (a,), (lambda g: np.ascontiguousarray(g[sl]),))


def _reflect_index(n, lo, hi):
    """Reflected (edge not repeated) index row covering [-lo, n + hi)."""
    pos = np.arange(-lo, n + hi)
    if n == 1:
        return np.zeros_like(pos)
    period = 2 * (n - 1)
    r = np.mod(pos, period)
    return np.where(r < n, r, period - r)


def pad2d_reflect(a, pads):
    """Reflect-pad the last two axes (edge pixel not duplicated)."""
    a = _lift(a)
    pt, pb, pl, pr = pads
    rows = _reflect_index(a.shape[-2], pt, pb)
    cols = _reflect_index(a.shape[-1], pl, pr)
    out = a.data[..., rows[:, None], cols[None, :]]

    def vjp(g):
        full = np.zeros_like(a.data)
        flat = full.reshape(-1, a.shape[-2], a.shape[-1])
        gflat = g.reshape(flat.shape[0], len(rows), len(cols))
        idx = (rows[:, None] * a.shape[-1] + cols[None, :]).reshape(-1)
        tgt = flat.reshape(flat.shape[0], -1)
        np.add.at(tgt, (slice(None), idx), gflat.reshape(flat.shape[0], -1))
        return full

    return record(np.ascontiguousarray(out), (a,), (vjp,))
