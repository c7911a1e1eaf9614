"""Minimal dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Every differentiable op records its parents and a
closure mapping the output gradient to one gradient per parent; ``backward``
walks that graph once in reverse topological order.

Broadcasting is limited to a scalar operand. Training runs in float32; the
``precision`` context switches newly created tensors to float64 for gradient
checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

_DEFAULT_DTYPE = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype=np.float64):
    """Temporarily change the dtype used for new tensors."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            keep = isinstance(data, (np.ndarray, np.generic)) and arr.dtype.kind == "f"
            dtype = arr.dtype if keep else _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.data.ndim <= 1


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not _is_scalar(b) and not _is_scalar(a):
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(grad: np.ndarray, t: Tensor) -> np.ndarray:
    if grad.shape == t.shape:
        return grad
    return np.asarray(grad.sum(), dtype=t.dtype).reshape(t.shape)


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    _check_binary("add", a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    _check_binary("sub", a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    _check_binary("mul", a, b)

    def bw(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)

    def bw(g):
        return (g * s,)

    return _make(a.data * s, (a,), bw, "scale")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, a.dtype.type(0))

    def bw(g):
        return (np.where(a.data > 0, g, a.dtype.type(0)),)

    return _make(out, (a,), bw, "relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Box projection; gradient passes strictly inside ``(lo, hi)`` only."""
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        return (g * inside,)

    return _make(np.clip(a.data, lo, hi).astype(a.dtype, copy=False), (a,), bw, "clip")


# ---------------------------------------------------------------- shapes


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def bw(g):
        return (g.T,)

    return _make(np.ascontiguousarray(a.data.T), (a,), bw, "transpose")


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape

    def bw(g):
        return (np.full(shape, g / n, dtype=a.dtype),)

    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bw, "mean")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def solve(a: Tensor, b: Tensor) -> Tensor:
    """Solve ``a @ x = b`` for square ``a``."""
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"solve: incompatible shapes {a.shape} and {b.shape}")
    x = np.linalg.solve(a.data, b.data)

    def bw(g):
        gb = np.linalg.solve(a.data.T, g)
        return -gb @ x.T, gb

    return _make(x, (a, b), bw, "solve")


def sq_distances(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared euclidean distances ``out[m, k] = |a_m - b_k|^2``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sq_distances: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]

    def bw(g):
        weighted = 2.0 * g[:, :, None] * diff
        ga = weighted.sum(axis=1) if a.requires_grad else None
        gb = -weighted.sum(axis=0) if b.requires_grad else None
        return ga, gb

    return _make(np.einsum("mkd,mkd->mk", diff, diff), (a, b), bw, "sq_distances")


# ---------------------------------------------------------------- convolution


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation over ``[N, C, H, W]`` with zero padding."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp or stride < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = _pad(x.data, padding)
    # im2col rows ordered (i, j, channel)
    cols = np.concatenate([xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                           for i in range(kh) for j in range(kw)], axis=1)
    cols = cols.reshape(n, kh * kw * c, ho * wo)
    wmat = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1).reshape(f, -1))
    out = np.matmul(wmat, cols)
    if bias is not None:
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({f},)")
        out += bias.data[:, None]
    out = out.reshape(n, f, ho, wo)

    def bw(g):
        g3 = g.reshape(n, f, ho * wo)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = np.tensordot(g3, cols, axes=([0, 2], [0, 2]))
            gk = np.ascontiguousarray(gk.reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3).reshape(n, kh, kw, c, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping mean pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"avg_pool2d: input {x.shape} smaller than window {size}")
    hs, ws = ho * size, wo * size
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(size):
        for j in range(size):
            out += x.data[:, :, i:hs:size, j:ws:size]
    out *= x.dtype.type(1.0 / (size * size))

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        share = g * x.dtype.type(1.0 / (size * size))
        for i in range(size):
            for j in range(size):
                gx[:, :, i:hs:size, j:ws:size] = share
        return (gx,)

    return _make(out, (x,), bw, "avg_pool2d")


def _box_sum3(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[2], a.shape[3]
    p = _pad(a, 1)
    rows = p[:, :, 0:h] + p[:, :, 1:h + 1] + p[:, :, 2:h + 2]
    return rows[..., 0:w] + rows[..., 1:w + 1] + rows[..., 2:w + 2]


def box_filter3x3(x: Tensor) -> Tensor:
    """Zero-padded 3x3 mean filter applied per channel."""
    if x.ndim != 4:
        raise ShapeError(f"box_filter3x3 expects [N, C, H, W], got {x.shape}")
    ninth = x.dtype.type(1.0 / 9.0)

    def bw(g):
        # symmetric kernel: the adjoint is the same filter
        return (_box_sum3(g) * ninth,)

    return _make(_box_sum3(x.data) * ninth, (x,), bw, "box_filter3x3")


# ---------------------------------------------------------------- losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    b, k = logits.shape
    if b and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"softmax_cross_entropy: labels outside [0, {k})")
    logp = _log_softmax(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Batch mean of ``KL(softmax(p) || softmax(q))``; differentiable in both arguments."""
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise ShapeError(f"kl_divergence: shape mismatch {p_logits.shape} vs {q_logits.shape}")
    b = p_logits.shape[0]
    logp = _log_softmax(p_logits.data)
    logq = _log_softmax(q_logits.data)
    p = np.exp(logp)
    d = logp - logq
    rows = (p * d).sum(axis=1, keepdims=True)

    def bw(g):
        gp = p * (d - rows) * (g / b) if p_logits.requires_grad else None
        gq = (np.exp(logq) - p) * (g / b) if q_logits.requires_grad else None
        return gp, gq

    return _make(np.asarray(rows.mean(), dtype=p_logits.dtype), (p_logits, q_logits), bw, "kl")


# ---------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _propagate(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(_topological(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Repeated calls accumulate; use :func:`zero_grads` between steps.
    """
    if not loss.requires_grad:
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        return
    grads = _propagate(loss)
    for node in _topological(loss):
        if node._parents or id(node) not in grads:
            continue
        g = np.asarray(grads[id(node)], dtype=node.dtype).reshape(node.shape)
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient reached a leaf tensor")
        node.grad = g.copy() if node.grad is None else node.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt`` without touching any ``.grad``."""
    grads = _propagate(loss) if loss.requires_grad else {}
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros(t.shape, dtype=t.dtype) if g is None
                   else np.asarray(g, dtype=t.dtype).reshape(t.shape))
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
