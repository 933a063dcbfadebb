"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity in this package (feature maps, prototypes,
class-weight matrices, logits, losses) is a :class:`Tensor`.  Ops build a
graph of closures; ``Tensor.backward()`` walks it in reverse topological
order and accumulates gradients into every reachable tensor that has
``requires_grad=True``.  All arithmetic is float64: the gradient-check
tests compare these analytic gradients against central finite differences
at tight tolerances, which float32 would not support.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values cut off from the gradient graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a scalar (a loss); the seed gradient is 1.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; constants are wrapped on the fly.
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Parameter(Tensor):
    """A trainable tensor, optionally named for checkpointing."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands with numpy semantics."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 or b.ndim > 2:
        raise ValueError("matmul supports 1-D and 2-D tensors only")
    data = a.data @ b.data

    def backward(g):
        if a.ndim == 1 and b.ndim == 1:  # inner product, g scalar
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)
        elif a.ndim == 2 and b.ndim == 2:
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        elif a.ndim == 2:  # (m,n) @ (n,) -> (m,)
            if a.requires_grad:
                a._accumulate(np.outer(g, b.data))
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        else:  # (n,) @ (n,k) -> (k,)
            if a.requires_grad:
                a._accumulate(b.data @ g)
            if b.requires_grad:
                b._accumulate(np.outer(a.data, g))

    return _make(data, (a, b), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                t._accumulate(g[tuple(index)])

    return _make(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        pieces = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, tuple(tensors), backward)


def index0(a, i: int) -> Tensor:
    """Select entry `i` along the leading axis."""
    a = as_tensor(a)
    data = a.data[i]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[i] = g
            a._accumulate(full)

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(data, (a,), backward)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))

    return _make(data, (a,), backward)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input, OIHW weight.

    Implemented as a sum over kernel offsets of strided slices, which keeps
    both directions exact and vectorized without an im2col buffer.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects x(N,C,H,W) and weight(O,C,kh,kw)")
    n, c_in, h, w = x.data.shape
    c_out, c_w, kh, kw = weight.data.shape
    if c_w != c_in:
        raise ValueError(f"channel mismatch: input {c_in}, weight expects {c_w}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError("kernel larger than padded input")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    # im2col: windows -> (N, C*kh*kw, Ho*Wo), one BLAS matmul per direction
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw),
                                                       axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    col = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        n, c_in * kh * kw, h_out * w_out)
    w_flat = weight.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w_flat, col).reshape(n, c_out, h_out, w_out)
    bias_t = as_tensor(bias) if bias is not None else None
    if bias_t is not None:
        out += bias_t.data.reshape(1, c_out, 1, 1)

    def backward(g):
        g_flat = g.reshape(n, c_out, -1)
        if weight.requires_grad:
            g_w = np.matmul(g_flat, col.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(g_w.reshape(weight.data.shape))
        if x.requires_grad:
            g_col = np.matmul(w_flat.T, g_flat).reshape(
                n, c_in, kh, kw, h_out, w_out)
            g_xp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    g_xp[:, :, di : di + stride * h_out : stride,
                         dj : dj + stride * w_out : stride] += g_col[:, :, di, dj]
            if padding:
                x._accumulate(g_xp[:, :, padding:-padding, padding:-padding])
            else:
                x._accumulate(g_xp)
        if bias_t is not None and bias_t.requires_grad:
            bias_t._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias_t is None else (x, weight, bias_t)
    return _make(out, parents, backward)


def matrix_resample(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Linear resampling of the trailing two axes: out = rows @ x @ cols.T.

    `rows` (H_out, h) and `cols` (W_out, w) are constant interpolation
    matrices (see :func:`fewseg.nn.bilinear_matrix`), so the op is exactly
    linear and its gradient is the transposed resampling.
    """
    x = as_tensor(x)
    data = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.matmul(rows.T, np.matmul(g, cols)))

    return _make(data, (x,), backward)


def cross_entropy_logits(logits, targets) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer targets.

    Class scores live on axis 0 of `logits`; every remaining axis indexes a
    position.  `targets` holds the true class index per position and must
    have exactly the trailing shape of `logits`.  Uses the log-sum-exp
    trick; the gradient is (softmax - onehot) / n_positions.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.data.shape[1:]:
        raise ValueError(
            f"targets shape {targets.shape} does not match positions "
            f"{logits.data.shape[1:]}")
    n_classes = logits.data.shape[0]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError("target class index out of range")

    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    log_probs = shifted - log_z
    onehot = np.zeros_like(logits.data)
    np.put_along_axis(onehot, targets[None, ...], 1.0, axis=0)
    n_positions = max(targets.size, 1)
    loss = -(log_probs * onehot).sum() / n_positions

    def backward(g):
        if logits.requires_grad:
            softmax = np.exp(log_probs)
            logits._accumulate(g * (softmax - onehot) / n_positions)

    return _make(np.asarray(loss), (logits,), backward)
