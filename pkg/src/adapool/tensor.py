"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects. Shapes are explicit: the
only implicit broadcasts are a trailing-axis vector applied row-wise
(:func:`add_row`) and leading batch dimensions in :func:`matmul`, both of
which are reduced correctly in the backward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A tensor would hold NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (double backward, non-scalar loss)."""


def _check_finite(data: np.ndarray, op: str) -> None:
    # NaN and +/-Inf both poison the sum, so one reduction replaces a full mask.
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.add.reduce(data, axis=None) if data.size else 0.0
    if not np.isfinite(total):
        if not np.isfinite(data).all():
            raise NumericError(f"non-finite value produced by {op or 'construction'}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "",
                 _checked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked:
            _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op
        self._consumed = False

    # -- basic properties -------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {self.data.shape}")
        # Incoming arrays may be shared between parents, so never update in place.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, finite: bool = False) -> Tensor:
    """Wrap an op output. ``finite=True`` marks ops that cannot leave the finite range."""
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op,
                  _checked=finite)


# -- graph traversal --------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` ordered so parents precede children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward() already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # Intermediate buffers are no longer needed; leaves keep their grads.
    for node in order:
        if node._parents:
            node._backward = None
            if node is not loss:
                node.grad = None
    loss._consumed = True


def _grad_to(parent: Tensor, g: np.ndarray) -> None:
    if parent.requires_grad:
        parent._accumulate(g)


# -- elementwise ------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            _grad_to(a, g)
            _grad_to(b, g)
        out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            _grad_to(a, g)
            _grad_to(b, -g)
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = _result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            _grad_to(a, g * b.data)
            _grad_to(b, g * a.data)
        out._backward = _bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _result(a.data * c, (a,), "scale")
    if out.requires_grad:
        out._backward = lambda g: _grad_to(a, g * c)
    return out


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = _result(a.data + c, (a,), "add_scalar")
    if out.requires_grad:
        out._backward = lambda g: _grad_to(a, g)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _result(np.where(mask, a.data, 0.0), (a,), "relu", finite=True)
    if out.requires_grad:
        out._backward = lambda g: _grad_to(a, g * mask)
    return out


def _lead_sum(g: np.ndarray, n_trailing: int) -> np.ndarray:
    return g.reshape(-1, *g.shape[g.ndim - n_trailing:]).sum(axis=0)


def add_row(a: Tensor, v: Tensor) -> Tensor:
    """``a[..., :] + v`` for a vector ``v`` matching the trailing axis."""
    if v.ndim != 1 or a.shape[-1] != v.shape[0]:
        raise ShapeError(f"add_row: cannot add {v.shape} to rows of {a.shape}")
    out = _result(a.data + v.data, (a, v), "add_row")
    if out.requires_grad:
        def _bw(g):
            _grad_to(a, g)
            _grad_to(v, _lead_sum(g, 1))
        out._backward = _bw
    return out


def expand(v: Tensor, lead: Sequence[int]) -> Tensor:
    """Tile ``v`` across new leading axes: result shape ``(*lead, *v.shape)``."""
    lead = tuple(int(n) for n in lead)
    data = np.broadcast_to(v.data, lead + v.shape).copy()
    out = _result(data, (v,), "expand", finite=True)
    if out.requires_grad:
        out._backward = lambda g: _grad_to(v, _lead_sum(g, v.ndim))
    return out


# -- linear algebra ---------------------------------------------------------

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain ``k x n`` matrix shared across the leading axes of
    ``a`` or has exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ in {a.shape} @ {b.shape}")
    if b.ndim == 2:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        data = (a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1])
        out = _result(data, (a, b), "matmul")
        if out.requires_grad:
            def _bw(g):
                g2 = g.reshape(-1, g.shape[-1])
                if a.requires_grad:
                    a._accumulate((g2 @ b.data.T).reshape(a.shape))
                if b.requires_grad:
                    b._accumulate(a2.T @ g2)
            out._backward = _bw
        return out
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ in {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, (a, b), "bmm")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(g @ _swap(b.data))
            if b.requires_grad:
                b._accumulate(_swap(a.data) @ g)
        out._backward = _bw
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _result(a.data.reshape(shape), (a,), "reshape", finite=True)
    if out.requires_grad:
        out._backward = lambda g: _grad_to(a, g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose", finite=True)
    if out.requires_grad:
        out._backward = lambda g: _grad_to(a, g.transpose(inverse))
    return out


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# -- normalisation ----------------------------------------------------------

def softmax_rows(a: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax of ``scale * a`` along the last axis, stabilised by the row max."""
    # Inputs are finite by the Tensor invariant, so no NaN can reach exp().
    s = a.data - a.data.max(axis=-1, keepdims=True)
    if scale != 1.0:
        s *= scale
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    out = _result(s, (a,), "softmax", finite=True)
    if out.requires_grad:
        def _bw(g):
            gs = g * s
            gs -= s * gs.sum(axis=-1, keepdims=True)
            if scale != 1.0:
                gs *= scale
            _grad_to(a, gs)
        out._backward = _bw
    return out


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: affine params must have shape ({n},)")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gamma.data + beta.data, (a, gamma, beta), "layer_norm", finite=True)
    if out.requires_grad:
        def _bw(g):
            if gamma.requires_grad:
                gamma._accumulate(_lead_sum(g * xhat, 1))
            if beta.requires_grad:
                beta._accumulate(_lead_sum(g, 1))
            if a.requires_grad:
                gx = g * gamma.data
                a._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        out._backward = _bw
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout. Identity when ``p == 0`` or not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    out = _result(a.data * mask, (a,), "dropout", finite=True)
    if out.requires_grad:
        out._backward = lambda g: _grad_to(a, g * mask)
    return out


# -- set (row) operations ---------------------------------------------------

def mean_rows(a: Tensor) -> Tensor:
    """Mean over the second-to-last axis: ``(..., N, d) -> (..., d)``."""
    n = a.shape[-2]
    out = _result(a.data.mean(axis=-2), (a,), "mean_rows", finite=True)
    if out.requires_grad:
        def _bw(g):
            _grad_to(a, np.broadcast_to(g[..., None, :] / n, a.shape).copy())
        out._backward = _bw
    return out


def max_rows(a: Tensor) -> Tensor:
    """Column-wise max over the set axis; tied maxima share the gradient 1/m."""
    mx = a.data.max(axis=-2, keepdims=True)
    hit = a.data == mx
    w = hit / hit.sum(axis=-2, keepdims=True)
    out = _result(mx[..., 0, :], (a,), "max_rows", finite=True)
    if out.requires_grad:
        out._backward = lambda g: _grad_to(a, w * g[..., None, :])
    return out


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[b, index[b], :]`` for a batch ``(B, N, d)`` -> ``(B, d)``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 3 or index.shape != (a.shape[0],):
        raise ShapeError(f"take_rows: need (B,N,d) and (B,) index, got {a.shape}, {index.shape}")
    rows = np.arange(a.shape[0])
    out = _result(a.data[rows, index], (a,), "take_rows", finite=True)
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            full[rows, index] = g
            _grad_to(a, full)
        out._backward = _bw
    return out


def add_at_rows(a: Tensor, index: np.ndarray, v: Tensor) -> Tensor:
    """Add vector ``v`` to row ``index[b]`` of each set ``a[b]``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 3 or index.shape != (a.shape[0],) or v.shape != (a.shape[-1],):
        raise ShapeError(f"add_at_rows: shapes {a.shape}, {index.shape}, {v.shape}")
    rows = np.arange(a.shape[0])
    data = a.data.copy()
    data[rows, index] += v.data
    out = _result(data, (a, v), "add_at_rows")
    if out.requires_grad:
        def _bw(g):
            _grad_to(a, g)
            _grad_to(v, g[rows, index].sum(axis=0))
        out._backward = _bw
    return out


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate along the set axis (-2)."""
    parts = list(parts)
    lead = parts[0].shape[:-2]
    width = parts[0].shape[-1]
    for p in parts:
        if p.shape[:-2] != lead or p.shape[-1] != width:
            raise ShapeError("concat_rows: incompatible shapes " + str([q.shape for q in parts]))
    data = np.concatenate([p.data for p in parts], axis=-2)
    out = _result(data, parts, "concat_rows", finite=True)
    if out.requires_grad:
        bounds = np.cumsum([0] + [p.shape[-2] for p in parts])
        def _bw(g):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                _grad_to(p, g[..., lo:hi, :])
        out._backward = _bw
    return out


# -- reductions -------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    out = _result(np.array(a.data.sum()), (a,), "sum")
    if out.requires_grad:
        out._backward = lambda g: _grad_to(a, np.full(a.shape, float(g)))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = _result(np.array(a.data.mean()), (a,), "mean")
    if out.requires_grad:
        out._backward = lambda g: _grad_to(a, np.full(a.shape, float(g) / n))
    return out


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Element-mean squared error against a constant target."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    out = _result(np.array((diff * diff).mean()), (pred,), "mse")
    if out.requires_grad:
        out._backward = lambda g: _grad_to(pred, (2.0 * float(g) / diff.size) * diff)
    return out


# -- optimisation -----------------------------------------------------------

class AdamState:
    """Moments and step counter for a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], state: AdamState, grads: Sequence[np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state disagree in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - step


class Adam:
    """Thin convenience wrapper pairing parameters with an :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.state = AdamState(self.params, lr=lr, **kw)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)
