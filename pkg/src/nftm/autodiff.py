"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run tape in the micrograd style: every operation returns a new
:class:`Tensor` holding its inputs and a backward closure; :func:`backward`
topologically sorts the recorded graph and accumulates gradients into every
reachable tensor with ``requires_grad``.

Heavy lifting (conv im2col/col2im, padding folds) is delegated to
:mod:`nftm.kernels`, so the hot paths follow the active kernel backend.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

POINTWISE_KINDS = ("sigmoid", "tanh", "relu", "softplus", "exp", "log", "square")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation rollouts)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``grad`` is a same-shape array present iff ``requires_grad``; gradients
    accumulate additively across :func:`backward` calls until reset with
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = ()
        self._bw = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0))

    def sum(self):
        return reduce("sum", self)

    def mean(self):
        return reduce("mean", self)

    def reshape(self, shape):
        return reshape(self, shape)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _from_op(data: np.ndarray, parents, bw) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    t.requires_grad = rg
    t.grad = None  # op outputs adopt their adjoint during backward
    t._parents = tuple(parents) if rg else ()
    t._bw = bw if rg else None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(np.atleast_1d(~np.isfinite(arr)))
        idx = tuple(int(i) for i in bad[0]) if bad.size else ()
        raise FloatingPointError(f"{op} produced a non-finite value at index {idx}")
    return arr


# ---------------------------------------------------------------------------
# elementwise arithmetic (with numpy broadcasting)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _from_op(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _from_op(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _from_op(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _check_finite(out, "div")

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _from_op(out, (a, b), bw)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _from_op(y, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _from_op(y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def bw(g):
        return (g * mask,)

    return _from_op(y, (x,), bw)


def softplus(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    s = _sigmoid_np(x.data)

    def bw(g):
        return (g * s,)

    return _from_op(y, (x,), bw)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    _check_finite(y, "exp")

    def bw(g):
        return (g * y,)

    return _from_op(y, (x,), bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        idx = tuple(int(i) for i in np.argwhere(np.atleast_1d(x.data <= 0.0))[0])
        raise ValueError(f"log requires positive entries; offending index {idx}")
    y = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _from_op(y, (x,), bw)


def square(x: Tensor) -> Tensor:
    y = x.data * x.data

    def bw(g):
        return (2.0 * g * x.data,)

    return _from_op(y, (x,), bw)


_POINTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "square": square,
}


def pointwise(kind: str, x: Tensor) -> Tensor:
    """Elementwise nonlinearity by name; see POINTWISE_KINDS."""
    if kind not in _POINTWISE:
        raise ValueError(f"unknown pointwise kind {kind!r}, expected one of {POINTWISE_KINDS}")
    return _POINTWISE[kind](x)


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x @ W + b for x (B,n), W (n,m), b (m,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError(
            f"affine expects x (B,n), W (n,m), b (m,); got {x.shape}, {W.shape}, {b.shape}"
        )
    if x.data.shape[1] != W.data.shape[0] or W.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"affine shape mismatch: x {x.shape} vs W {W.shape}, b {b.shape}")
    y = x.data @ W.data + b.data

    def bw(g):
        gx = g @ W.data.T if x.requires_grad else None
        gW = x.data.T @ g if W.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return (gx, gW, gb)

    return _from_op(y, (x, W, b), bw)


def conv2d(x: Tensor, kern: Tensor, bias: Tensor, padding: str = "zero") -> Tensor:
    """Same-size cross-correlation.

    x is (C,H,W) or batched (B,C,H,W); kern is (C_out,C_in,k,k) with odd k;
    bias is (C_out,). The boundary rule fills the k//2-wide halo.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kern.data.ndim != 4:
        raise ValueError(f"conv2d expects (B,)C,H,W input and Co,Ci,k,k kernels; got {x.shape}, {kern.shape}")
    B, C, H, W = xd.shape
    Co, Ci, k, k2 = kern.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernels expect {Ci}")
    if bias.data.shape != (Co,):
        raise ValueError(f"conv2d bias must have shape ({Co},), got {bias.shape}")
    p = k // 2
    # conv temporaries cycle through per-shape scratch buffers: the training
    # loop reallocates these multi-MB arrays thousands of times otherwise
    pad_shape = (B, C, H + 2 * p, W + 2 * p)
    cols_shape = (B * H * W, C * k * k)
    xp = kernels.pad2d_into(xd, p, padding, kernels.scratch("conv_pad", pad_shape))
    cols = kernels.im2col(xp, k, out=kernels.scratch("conv_cols", cols_shape))
    Kmat = kern.data.reshape(Co, Ci * k * k)
    y2 = np.matmul(cols, Kmat.T, out=kernels.scratch("conv_y2", (B * H * W, Co)))
    y2 += bias.data
    y = np.ascontiguousarray(y2.reshape(B, H, W, Co).transpose(0, 3, 1, 2))

    def bw(g):
        g4 = g[None] if single else g
        g2 = kernels.scratch("conv_g2", (B * H * W, Co))
        np.copyto(g2.reshape(B, H, W, Co), g4.transpose(0, 2, 3, 1))
        gx = gk = gb = None
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        if kern.requires_grad:
            # recompute cols rather than caching them: trades a gather for memory
            xpb = kernels.pad2d_into(xd, p, padding, kernels.scratch("conv_padb", pad_shape))
            cols_b = kernels.im2col(xpb, k, out=kernels.scratch("conv_colsb", cols_shape))
            gk = (g2.T @ cols_b).reshape(Co, Ci, k, k)
        if x.requires_grad:
            dcols = np.matmul(g2, Kmat, out=kernels.scratch("conv_dcols", cols_shape))
            gxp = kernels.col2im(dcols, B, C, H, W, k, out=kernels.scratch("conv_gxp", pad_shape))
            gx4 = kernels.pad2d_adjoint(gxp, p, padding, in_place=True)
            gx = gx4[0] if single else gx4
        return (gx, gk, gb)

    return _from_op(y[0] if single else y, (x, kern, bias), bw)


# ---------------------------------------------------------------------------
# straight-through and clamped ops
# ---------------------------------------------------------------------------

def ste_binarize(x: Tensor) -> Tensor:
    """Forward floor(x+0.5) clamped to {0,1}; backward passes gradients unchanged."""
    y = np.clip(np.floor(x.data + 0.5), 0.0, 1.0)

    def bw(g):
        return (g,)

    return _from_op(y, (x,), bw)


def clamp_through(x: Tensor, lo: float, hi: float, mode: str = "hard") -> Tensor:
    """Clamp to [lo,hi].

    mode 'hard': backward is the indicator of the interior (saturated entries
    get zero gradient). mode 'straight-through': backward passes the upstream
    gradient unchanged.
    """
    if not lo < hi:
        raise ValueError(f"clamp_through requires lo < hi, got [{lo}, {hi}]")
    if mode not in ("hard", "straight-through"):
        raise ValueError(f"unknown clamp mode {mode!r}")
    y = np.clip(x.data, lo, hi)
    if mode == "straight-through":

        def bw(g):
            return (g,)

    else:
        mask = (x.data >= lo) & (x.data <= hi)

        def bw(g):
            return (g * mask,)

    return _from_op(y, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def asum(x: Tensor, axis=None) -> Tensor:
    y = np.asarray(x.data.sum(axis=axis))
    shape = x.data.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _from_op(y, (x,), bw)


def amean(x: Tensor, axis=None) -> Tensor:
    if x.size == 0:
        raise ValueError("mean of an empty tensor")
    n = x.size if axis is None else x.data.shape[axis]
    return mul(asum(x, axis), _coerce(1.0 / n))


def reduce(kind: str, x: Tensor) -> Tensor:
    """Full reduction to a scalar tensor; kind in {sum, mean}."""
    if x.size == 0:
        raise ValueError(f"reduce({kind}) of an empty tensor")
    if kind == "sum":
        return asum(x)
    if kind == "mean":
        return amean(x)
    raise ValueError(f"unknown reduce kind {kind!r}, expected sum or mean")


def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)
    old = x.data.shape

    def bw(g):
        return (g.reshape(old),)

    return _from_op(y, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [t if isinstance(t, Tensor) else _coerce(t) for t in tensors]
    y = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(grads)

    return _from_op(y, tuple(ts), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    y = np.ascontiguousarray(x.data[sl])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _from_op(y, (x,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into .grad of every reachable requires_grad tensor.

    Repeated calls without zeroing add up; the traversal order is
    deterministic, so two passes over the same graph double every gradient
    bitwise.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.data.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

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
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            # op outputs adopt (or replace) their adjoint; accumulation across
            # backward calls is a leaf-tensor contract
            node.grad = g
        else:
            node.grad += g
        if node._bw is None:
            continue
        parent_grads = node._bw(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                pg = pg.reshape(p.data.shape)
            acc = adjoint.get(id(p))
            # stored adjoints are never mutated in place: closures may hand
            # back views of the upstream gradient, which other nodes alias
            adjoint[id(p)] = pg if acc is None else acc + pg
