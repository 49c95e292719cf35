"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

Just enough primitives for the point-cloud networks and their losses:
matmul, elementwise arithmetic, relu/tanh/exp/log/sqrt/softplus, segmented
max pooling, gather/scatter by index lists, reductions, and concatenation.
Shapes are explicit everywhere; the only broadcast allowed is adding a bias
row vector to a matrix.

Graphs are built eagerly; ``backward`` runs a fixed-order reverse
topological traversal, so gradient accumulation is bitwise-deterministic.
Gradients accumulate across calls until ``zero_grad``.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Array node in the computation graph.

    Gradient storage is allocated on first touch, so forward-only graphs
    (rollouts) never pay for it. Leaf tensors share the caller's array.
    """

    __slots__ = ("values", "_grad", "_parents", "_backward")

    def __init__(self, values, parents=(), backward=None):
        values = np.asarray(values)
        # float32 kept when asked for (training); everything else promotes
        if values.dtype != np.float64 and values.dtype != np.float32:
            values = values.astype(np.float64)
        self.values = values
        self._grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self):
        return self.values.shape

    def detach(self) -> "Tensor":
        """Leaf tensor with the same values, cut off from the graph."""
        return Tensor(self.values)

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.values.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.zero_grad()


def backward(loss: Tensor) -> None:
    """Populate gradients of everything ``loss`` depends on."""
    if loss.values.size != 1:
        raise ValueError("backward requires a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # reversed so parents pop in declaration order (fixed traversal)
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = loss.grad + np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ------------------------------------------------------------ arithmetic

def _require(cond: bool, op: str, detail: str) -> None:
    if not cond:
        raise ValueError(f"{op}: {detail}")


def add(a, b) -> Tensor:
    """a + b; same shape, or b a bias row vector added to each row of a."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.values.ndim == 1 and a.values.ndim == 2 \
        and a.shape[1] == b.shape[0]
    _require(bias or a.shape == b.shape, "add",
             f"incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values + b.values, (a, b))

    def back(g):
        a.grad += g
        b.grad += g.sum(axis=0) if bias else g
    out._backward = back
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.shape == b.shape, "sub",
             f"incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values - b.values, (a, b))

    def back(g):
        a.grad += g
        b.grad -= g
    out._backward = back
    return out


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar constant."""
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        out = Tensor(a.values * b, (a,))
        out._backward = lambda g: a.grad.__iadd__(g * b)
        return out
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.shape == b.shape, "mul",
             f"incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values * b.values, (a, b))

    def back(g):
        a.grad += g * b.values
        b.grad += g * a.values
    out._backward = back
    return out


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.shape == b.shape, "div",
             f"incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values / b.values, (a, b))

    def back(g):
        a.grad += g / b.values
        b.grad -= g * a.values / b.values ** 2
    out._backward = back
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require(a.values.ndim == 2 and b.values.ndim == 2, "matmul",
             "operands must be 2-D")
    _require(a.shape[1] == b.shape[0], "matmul",
             f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.values @ b.values, (a, b))

    def back(g):
        a.grad += g @ b.values.T
        b.grad += a.values.T @ g
    out._backward = back
    return out


# ------------------------------------------------------------ elementwise

def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.values, 0.0), (x,))
    out._backward = lambda g: x.grad.__iadd__(g * (x.values > 0))
    return out


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.values)
    out = Tensor(y, (x,))
    out._backward = lambda g: x.grad.__iadd__(g * (1.0 - y ** 2))
    return out


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.values)
    out = Tensor(y, (x,))
    out._backward = lambda g: x.grad.__iadd__(g * y)
    return out


def log(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.log(x.values), (x,))
    out._backward = lambda g: x.grad.__iadd__(g / x.values)
    return out


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    y = np.sqrt(x.values)
    out = Tensor(y, (x,))
    out._backward = lambda g: x.grad.__iadd__(g * 0.5 / y)
    return out


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    # numerically stable: log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    y = np.maximum(x.values, 0.0) + np.log1p(np.exp(-np.abs(x.values)))
    out = Tensor(y, (x,))
    sig = 1.0 / (1.0 + np.exp(-x.values))
    out._backward = lambda g: x.grad.__iadd__(g * sig)
    return out


def clip(x, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes only where lo < x < hi."""
    x = _as_tensor(x)
    out = Tensor(np.clip(x.values, lo, hi), (x,))
    mask = (x.values > lo) & (x.values < hi)
    out._backward = lambda g: x.grad.__iadd__(g * mask)
    return out


# ------------------------------------------------------------ structure

class ContiguousGroups:
    """Row segments [offsets[k], offsets[k+1]) for segmented pooling.

    A faster equivalent of passing consecutive index ranges as lists.
    """

    __slots__ = ("offsets",)

    def __init__(self, offsets):
        self.offsets = np.asarray(offsets, dtype=np.int64)
        if (np.diff(self.offsets) <= 0).any():
            raise ValueError("max_over_set: empty group")

    def __len__(self):
        return len(self.offsets) - 1


def _max_over_segments(x: Tensor, groups: ContiguousGroups) -> Tensor:
    off = groups.offsets
    starts = off[:-1]
    sizes = np.diff(off)
    values = np.maximum.reduceat(x.values, starts, axis=0)
    out = Tensor(values, (x,))

    def back(g_out):
        # argmax resolved lazily; rollout-only forwards never pay for it
        rows = np.where(x.values == np.repeat(values, sizes, axis=0),
                        np.arange(x.shape[0])[:, None], x.shape[0])
        first = np.minimum.reduceat(rows, starts, axis=0)
        cols = np.broadcast_to(np.arange(x.shape[1]), first.shape)
        np.add.at(x.grad, (first, cols), g_out)
    out._backward = back
    return out


def max_over_set(x, groups) -> Tensor:
    """Row-group max pooling: out[k] = max over rows x[groups[k]].

    Gradient flows to the first maximal row of each group per column.
    groups is a list of index arrays, or ContiguousGroups when every
    group is a consecutive row range.
    """
    x = _as_tensor(x)
    _require(x.values.ndim == 2, "max_over_set", "input must be 2-D")
    if isinstance(groups, ContiguousGroups):
        return _max_over_segments(x, groups)
    groups = [np.asarray(g, dtype=np.int64) for g in groups]
    for g in groups:
        _require(g.size > 0, "max_over_set", "empty group")
    values = np.stack([x.values[g].max(axis=0) for g in groups])
    out = Tensor(values, (x,))
    cols = np.arange(x.shape[1])

    def back(g_out):
        argmax = [g[np.argmax(x.values[g], axis=0)] for g in groups]
        for k, rows in enumerate(argmax):
            np.add.at(x.grad, (rows, cols), g_out[k])
    out._backward = back
    return out


def gather(x, indices) -> Tensor:
    """Row selection x[indices]; duplicate indices accumulate gradient."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.values[indices], (x,))

    def back(g):
        np.add.at(x.grad, indices, g)
    out._backward = back
    return out


def scatter_add(x, indices, num_rows: int) -> Tensor:
    """out[indices[i]] += x[i] into a (num_rows, F) zero matrix."""
    x = _as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    _require(x.values.ndim == 2, "scatter_add", "input must be 2-D")
    _require(len(indices) == x.shape[0], "scatter_add",
             f"{len(indices)} indices for {x.shape[0]} rows")
    values = np.zeros((num_rows, x.shape[1]), dtype=np.float64)
    np.add.at(values, indices, x.values)
    out = Tensor(values, (x,))
    out._backward = lambda g: x.grad.__iadd__(g[indices])
    return out


def slice_cols(x, lo: int, hi: int) -> Tensor:
    """Column slice x[:, lo:hi] of a matrix."""
    x = _as_tensor(x)
    _require(x.values.ndim == 2, "slice_cols", "input must be 2-D")
    _require(0 <= lo < hi <= x.shape[1], "slice_cols",
             f"bad range [{lo}, {hi}) for {x.shape[1]} columns")
    out = Tensor(x.values[:, lo:hi], (x,))

    def back(g):
        x.grad[:, lo:hi] += g
    out._backward = back
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    _require(len(tensors) > 0, "concat", "nothing to concatenate")
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis),
                 tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t.grad += g[tuple(sl)]
    out._backward = back
    return out


def reduce_sum(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.values.sum(), (x,))
    out._backward = lambda g: x.grad.__iadd__(g * np.ones_like(x.values))
    return out


def reduce_mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.values.size
    out = Tensor(x.values.mean(), (x,))
    out._backward = lambda g: x.grad.__iadd__(
        g * np.ones_like(x.values) / n)
    return out


def mean_rows(x) -> Tensor:
    """Column means of a matrix: (M, F) -> (F,)."""
    x = _as_tensor(x)
    _require(x.values.ndim == 2, "mean_rows", "input must be 2-D")
    m = x.shape[0]
    out = Tensor(x.values.mean(axis=0), (x,))
    out._backward = lambda g: x.grad.__iadd__(
        np.broadcast_to(g / m, x.values.shape))
    return out


# ------------------------------------------------------------ optimizer

class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1 ** t
        correction2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
