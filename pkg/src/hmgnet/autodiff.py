"""Dense-tensor reverse-mode automatic differentiation.

Covers exactly the operations the network needs: linear maps, concatenation,
elementwise arithmetic, shifted softplus, LeakyReLU, softmax, row gather
(embedding lookup), segment sum, and batch normalization. Every op builds a
node holding its parents and an adjoint closure; ``backward`` walks the graph
in reverse topological order. Summation orders are fixed, so identical
forward passes produce bit-identical gradients.
"""

from __future__ import annotations

import math

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """A numpy array plus an optional gradient buffer and adjoint closure."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over broadcast axes back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every graph ancestor.

    Gradients of the reached subgraph are reset first, so repeated calls
    give identical results.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None and not loss._parents:
        raise ValueError("tensor is not part of a recorded computation")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    for node in topo:
        node.grad = None
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Arithmetic


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    out = Tensor(x.data + y.data, (x, y))
    def back(g):
        _accum(x, _unbroadcast(g, x.data.shape))
        _accum(y, _unbroadcast(g, y.data.shape))
    out._backward = back
    return out


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    out = Tensor(x.data - y.data, (x, y))
    def back(g):
        _accum(x, _unbroadcast(g, x.data.shape))
        _accum(y, _unbroadcast(-g, y.data.shape))
    out._backward = back
    return out


def mul(x, y) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    x, y = as_tensor(x), as_tensor(y)
    out = Tensor(x.data * y.data, (x, y))
    def back(g):
        _accum(x, _unbroadcast(g * y.data, x.data.shape))
        _accum(y, _unbroadcast(g * x.data, y.data.shape))
    out._backward = back
    return out


def scale(x, const: float) -> Tensor:
    x = as_tensor(x)
    c = float(const)
    out = Tensor(x.data * c, (x,))
    out._backward = lambda g: _accum(x, g * c)
    return out


def square(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data * x.data, (x,))
    out._backward = lambda g: _accum(x, 2.0 * x.data * g)
    return out


def absolute(x) -> Tensor:
    """|x|; subgradient 0 at x = 0."""
    x = as_tensor(x)
    out = Tensor(np.abs(x.data), (x,))
    out._backward = lambda g: _accum(x, np.sign(x.data) * g)
    return out


def matmul(x, w) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    out = Tensor(x.data @ w.data, (x, w))
    def back(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
    out._backward = back
    return out


def linear(x, w, b) -> Tensor:
    """x @ w + b for x (n, in), w (in, out), b (out,)."""
    return add(matmul(x, w), b)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)
    out._backward = back
    return out


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), (x,))
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape).copy())
    out._backward = back
    return out


def tmean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Nonlinearities


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def shifted_softplus(x) -> Tensor:
    """ln(0.5 e^x + 0.5): zero at zero; for large x evaluates as
    x + ln(0.5 (1 + e^-x)) via logaddexp, so it never overflows."""
    x = as_tensor(x)
    out = Tensor(np.logaddexp(x.data, 0.0) - math.log(2.0), (x,))
    out._backward = lambda g: _accum(x, _sigmoid(x.data) * g)
    return out


def leaky_relu(x, negative_slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    s = float(negative_slope)
    out = Tensor(np.where(x.data > 0, x.data, s * x.data), (x,))
    out._backward = lambda g: _accum(x, np.where(x.data > 0, 1.0, s) * g)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, (x,))
    def back(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - inner))
    out._backward = back
    return out


# ---------------------------------------------------------------------------
# Structured ops


def rows(table, idx) -> Tensor:
    """Row gather (embedding lookup): out[i] = table[idx[i]]."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(
            f"row index out of range [0, {table.data.shape[0]}) in gather"
        )
    out = Tensor(table.data[idx], (table,))
    def back(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)
    out._backward = back
    return out


def segment_sum(x, segment_ids, num_segments: int) -> Tensor:
    """Sum rows sharing a segment id; empty segments give zero rows.

    Accumulation follows ascending row index, so results are reproducible.
    """
    x = as_tensor(x)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != x.data.shape[0]:
        raise ValueError("segment_ids length must match the number of rows")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id out of range [0, {num_segments})")
    result = np.zeros((num_segments,) + x.data.shape[1:], dtype=x.data.dtype)
    np.add.at(result, ids, x.data)
    out = Tensor(result, (x,))
    out._backward = lambda g: _accum(x, g[ids])
    return out


class BatchNormState:
    """Running first/second moments for one batch-norm site."""

    def __init__(self, width: int):
        self.mean = np.zeros(width, dtype=_DEFAULT_DTYPE)
        self.var = np.ones(width, dtype=_DEFAULT_DTYPE)
        self.initialized = False

    def arrays(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "var": self.var,
                "initialized": np.array([self.initialized], dtype=np.int64)}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        self.mean = arrays["mean"].astype(_DEFAULT_DTYPE).copy()
        self.var = arrays["var"].astype(_DEFAULT_DTYPE).copy()
        self.initialized = bool(arrays["initialized"][0])


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Normalize over the batch (row) axis then apply the affine gamma/beta.

    Training mode uses biased batch statistics and updates the running
    moments by EMA (new = momentum * old + (1 - momentum) * batch). Inference
    mode, and training batches of size 1, use the running moments, making
    the op a deterministic affine map.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.data.shape[0]
    use_batch_stats = training and n > 1
    if not use_batch_stats and not state.initialized:
        raise RuntimeError(
            "batch_norm has no running statistics yet; train on a batch of "
            "size >= 2 before inference"
        )
    if use_batch_stats:
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.mean = momentum * state.mean + (1.0 - momentum) * mean
        state.var = momentum * state.var + (1.0 - momentum) * var
        state.initialized = True
    else:
        mean, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta))

    def back(g):
        _accum(gamma, (g * xhat).sum(axis=0))
        _accum(beta, g.sum(axis=0))
        if use_batch_stats:
            gx = (gamma.data * inv_std / n) * (
                n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0)
            )
        else:
            gx = g * (gamma.data * inv_std)
        _accum(x, gx)

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# Initialization


def random_orthogonal(rows_: int, cols_: int, rng: np.random.Generator) -> np.ndarray:
    """Matrix with orthonormal columns (rows >= cols) or rows (otherwise),
    with a fixed sign convention so draws are reproducible."""
    big, small = max(rows_, cols_), min(rows_, cols_)
    a = rng.standard_normal((big, small))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows_ < cols_:
        q = q.T
    return np.ascontiguousarray(q, dtype=_DEFAULT_DTYPE)


def glorot_orthogonal_init(rows_: int, cols_: int, rng: np.random.Generator) -> np.ndarray:
    """Random orthogonal matrix rescaled to elementwise variance 2/(rows+cols)."""
    w = random_orthogonal(rows_, cols_, rng)
    w *= math.sqrt(2.0 / ((rows_ + cols_) * w.var()))
    return w
