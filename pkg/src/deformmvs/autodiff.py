"""Dense float64 tensors with a minimal reverse-mode differentiation tape.

The fixed primitive set is: add, sub, mul, div, neg, exp, ln, sqrt,
max-with-constant, matmul, conv2d, conv3d, concat, slice, reshape, softmax,
sum/mean along an axis, and the bilinear gather defined in `sampling`.
Everything else (tanh, relu, abs, clip, stack, pooling) is composed from
these. Layout is row-major; broadcasting follows numpy's trailing-dimension
rules. Tensors are immutable after construction and safe to share for
reading; a backward record belongs to a single owner.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_SEQ = 0
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _next_seq() -> int:
    global _SEQ
    _SEQ += 1
    return _SEQ


class Tensor:
    """Immutable n-d float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fns", "_seq", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fns: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()
        self._seq = _next_seq()
        self._spent = False

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 grad_fns: Sequence[Callable[[np.ndarray], np.ndarray]]) -> "Tensor":
        """Wrap an op result, recording only the parents that are tracked."""
        out = object.__new__(Tensor)
        arr = np.ascontiguousarray(data, dtype=np.float64)
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        out._spent = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            kept = [(p, f) for p, f in zip(parents, grad_fns) if p.requires_grad]
            out._parents = tuple(p for p, _ in kept)
            out._grad_fns = tuple(f for _, f in kept)
        else:
            out.requires_grad = False
            out._parents = ()
            out._grad_fns = ()
        out._seq = _next_seq()
        return out

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        data = self.data[key]

        def grad_fn(g, key=key, shape=self.shape):
            full = np.zeros(shape)
            full[key] += g
            return full

        return Tensor._from_op(data, (self,), (grad_fn,))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def grad_fn(g, orig=self.shape):
            return g.reshape(orig)

        return Tensor._from_op(data, (self,), (grad_fn,))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = np.sum(self.data, axis=axis, keepdims=keepdims)

        def grad_fn(g, axis=axis, keepdims=keepdims, shape=self.shape):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return Tensor._from_op(data, (self,), (grad_fn,))

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = np.mean(self.data, axis=axis, keepdims=keepdims)
        n = self.size if axis is None else np.prod([self.shape[a] for a in _norm_axes(axis, self.ndim)])

        def grad_fn(g, axis=axis, keepdims=keepdims, shape=self.shape, n=float(n)):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g / n, shape)

        return Tensor._from_op(data, (self,), (grad_fn,))

    def backward(self) -> "Tape":
        return backward(self)


def as_tensor(x) -> Tensor:
    """Wrap scalars/arrays as untracked tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over dimensions that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise primitives -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return Tensor._from_op(
        a.data + b.data, (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return Tensor._from_op(
        a.data - b.data, (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return Tensor._from_op(
        a.data * b.data, (a, b),
        (lambda g: _unbroadcast(g * b.data, a.shape),
         lambda g: _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b)
    return Tensor._from_op(
        a.data / b.data, (a, b),
        (lambda g: _unbroadcast(g / b.data, a.shape),
         lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), (lambda g: -g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), (lambda g: g * out,))


def ln(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def grad_fn(g):
        # subgradient 0 at exactly 0 keeps one-hot probability volumes finite
        return np.where(out > 0.0, g * 0.5 / np.where(out > 0.0, out, 1.0), 0.0)

    return Tensor._from_op(out, (a,), (grad_fn,))


def maximum(a, c: float) -> Tensor:
    """Elementwise max with a constant; subgradient 0 at the tie point."""
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(
        np.maximum(a.data, c), (a,),
        (lambda g: g * (a.data > c),),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul expects compatible 2-d shapes, got {a.shape} and {b.shape}")
    return Tensor._from_op(
        a.data @ b.data, (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        def grad_fn(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return grad_fn

    return Tensor._from_op(data, ts, tuple(make_fn(i) for i in range(len(ts))))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        return out * (g - np.sum(g * out, axis=axis, keepdims=True))

    return Tensor._from_op(out, (a,), (grad_fn,))


# -- convolution ---------------------------------------------------------------


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x[C,H,W] with kernels k[F,C,kh,kw] -> [F,H',W']."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 3 or k.ndim != 4:
        raise ValueError(f"conv2d expects x[C,H,W], k[F,C,kh,kw]; got {x.shape}, {k.shape}")
    cin, h, w = x.shape
    f, cin_k, kh, kw = k.shape
    if cin_k != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_k}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    ho, rh = divmod(h + 2 * padding - kh, stride)
    wo, rw = divmod(w + 2 * padding - kw, stride)
    if rh or rw:
        raise ValueError(
            f"conv2d output size not integral for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    ho, wo = ho + 1, wo + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # [C, H', W', kh, kw]
    col = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    out = (k.data.reshape(f, -1) @ col).reshape(f, ho, wo)

    def grad_x(g):
        cg = k.data.reshape(f, -1).T @ g.reshape(f, -1)   # [C*kh*kw, H'*W']
        cg = cg.reshape(cin, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cg[:, i, j]
        if padding:
            return gxp[:, padding:-padding, padding:-padding]
        return gxp

    def grad_k(g):
        return (g.reshape(f, -1) @ col.T).reshape(k.shape)

    return Tensor._from_op(out, (x, k), (grad_x, grad_k))


def conv3d(x: Tensor, k: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlate x[C,D,H,W] with kernels k[F,C,kd,kh,kw], stride 1."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 5:
        raise ValueError(f"conv3d expects x[C,D,H,W], k[F,C,kd,kh,kw]; got {x.shape}, {k.shape}")
    cin, d, h, w = x.shape
    f, cin_k, kd, kh, kw = k.shape
    if cin_k != cin:
        raise ValueError(f"conv3d channel mismatch: input {cin}, kernel {cin_k}")
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv3d kernel sides must be odd, got {kd}x{kh}x{kw}")
    do = d + 2 * padding - kd + 1
    ho = h + 2 * padding - kh + 1
    wo = w + 2 * padding - kw + 1
    if do <= 0 or ho <= 0 or wo <= 0:
        raise ValueError(f"conv3d kernel {kd}x{kh}x{kw} larger than padded input {x.shape}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    col = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * kd * kh * kw, do * ho * wo)
    out = (k.data.reshape(f, -1) @ col).reshape(f, do, ho, wo)

    def grad_x(g):
        cg = k.data.reshape(f, -1).T @ g.reshape(f, -1)
        cg = cg.reshape(cin, kd, kh, kw, do, ho, wo)
        gxp = np.zeros_like(xp)
        for a in range(kd):
            for i in range(kh):
                for j in range(kw):
                    gxp[:, a:a + do, i:i + ho, j:j + wo] += cg[:, a, i, j]
        if p:
            return gxp[:, p:-p, p:-p, p:-p]
        return gxp

    def grad_k(g):
        return (g.reshape(f, -1) @ col.T).reshape(k.shape)

    return Tensor._from_op(out, (x, k), (grad_x, grad_k))


# -- composed helpers ------------------------------------------------------------


def minimum(a, c: float) -> Tensor:
    return neg(maximum(neg(a), -float(c)))


def clip(a, lo: float, hi: float) -> Tensor:
    return minimum(maximum(a, lo), hi)


def relu(a) -> Tensor:
    return maximum(a, 0.0)


def tanh(a) -> Tensor:
    # clamp keeps exp finite and the quotient-rule gradient clean at large |x|
    e = exp(mul(clip(a, -20.0, 20.0), 2.0))
    return sub(1.0, div(2.0, add(e, 1.0)))


def absval(a) -> Tensor:
    return add(maximum(a, 0.0), maximum(neg(a), 0.0))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % (ts[0].ndim + 1)
    shape = ts[0].shape[:axis] + (1,) + ts[0].shape[axis:]
    return concat([t.reshape(shape) for t in ts], axis=axis)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling over the trailing two axes (even sizes required)."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even spatial dims, got {h}x{w}")
    key = (Ellipsis,)
    parts = [x[key + (slice(i, None, 2), slice(j, None, 2))] for i in (0, 1) for j in (0, 1)]
    out = parts[0]
    for p in parts[1:]:
        out = add(out, p)
    return mul(out, 0.25)


# -- backward pass ---------------------------------------------------------------


class Tape:
    """Reverse-order record of one backward pass.

    Holds the visited nodes (reverse topological order) and the gradient
    buffer for each, keyed by value identity.
    """

    def __init__(self, nodes: list[Tensor], grads: dict[int, np.ndarray]):
        self._nodes = nodes
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self._grads.get(id(t))

    def __len__(self) -> int:
        return len(self._nodes)


def backward(loss: Tensor) -> Tape:
    """Populate gradients of `loss` w.r.t. every tracked tensor feeding it.

    Leaves with requires_grad get their `.grad` set. Calling backward a
    second time on the same root is an error; rebuild the graph instead.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not tracked; nothing to differentiate")
    if loss._spent:
        raise RuntimeError("backward already ran on this graph root; re-record before "
                           "differentiating again")
    loss._spent = True

    # creation order is a topological order: parents always precede children
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack_.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in nodes:
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, fn in zip(node._parents, node._grad_fns):
            contrib = fn(g)
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = contrib.copy() if contrib.base is not None else contrib
            else:
                grads[id(parent)] = acc + contrib

    for node in nodes:
        if node.requires_grad and not node._parents and id(node) in grads:
            node.grad = grads[id(node)]
    return Tape(nodes, grads)
