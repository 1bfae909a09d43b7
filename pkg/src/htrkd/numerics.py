"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation in the package is built from the primitives in
this module. A ``Tape`` records operations while it is active; outside of a
tape, operations run as plain numpy computations and nothing is retained.

    >>> x = Tensor(np.array([3.0]), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "ContractError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "as_tensor",
    "make_op",
    "add",
    "mul",
    "matmul",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "clamp_min",
    "concat",
    "stack",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv2d",
    "max_pool2d",
    "grad_check",
]

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from its inputs."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-owner: use it as a context manager around the forward
    pass, then call :meth:`backward` on a scalar result.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence["Tensor"], output: "Tensor", backward) -> None:
        output.node_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None) -> None:
        """Replay the tape in reverse, accumulating ``.grad`` on every input
        that requires it."""
        if grad is None:
            if loss.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        loss.grad = np.array(grad, dtype=loss.dtype)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    inp._accumulate(gi)


class SliceGrad:
    """Gradient that is zero outside a basic-index region of its target."""

    __slots__ = ("idx", "g")

    def __init__(self, idx, g: np.ndarray):
        self.idx, self.g = idx, g


class Tensor:
    """n-dimensional float array that can take part in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if isinstance(g, SliceGrad):
            if self.grad is None:
                self.grad = np.zeros(self.data.shape, dtype=self.dtype)
            self.grad[g.idx] += g.g
            return
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.dtype)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is not None:
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x)


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it on the active tape.

    ``backward(g)`` must return one gradient (or None) per input, each shaped
    like that input.
    """
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite values in output")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_op("div", out, (a, b), backward)


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return make_op("pow", xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("log", np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_op("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make_op("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", x.data * mask, (x,), lambda g: (g * mask,))


def glu(x: Tensor, axis: int = 1) -> Tensor:
    """Split ``x`` in half along ``axis`` and return ``a * sigmoid(b)``."""
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu needs an even extent on axis {axis}, got {n}")
    a, b = np.split(x.data, 2, axis=axis)
    gate = expit(b)
    out = a * gate

    def backward(g):
        return (np.concatenate([g * gate, g * a * gate * (1.0 - gate)], axis=axis),)

    return make_op("glu", out, (x,), backward)


def batch_norm_train(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise ``x[B, C, H, W]`` with its own per-channel statistics.

    Returns the output with the batch mean and biased variance (as arrays).
    """
    C = x.shape[1]
    xd = x.data
    mu = xd.mean(axis=(0, 2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.reshape(1, C, 1, 1)
    out = xhat * gd + bias.data.reshape(1, C, 1, 1)
    n = xd.size // C

    def backward(g):
        dxhat = g * gd
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = inv * (dxhat - s1 / n - xhat * (s2 / n))
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_op("batch_norm", out, (x, gain, bias), backward), mu.reshape(C), var.reshape(C)


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data >= lo
    return make_op("clamp_min", np.where(mask, x.data, lo).astype(x.dtype), (x,),
                   lambda g: (g * mask,))


# -- reductions and shape manipulation --------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_op("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        if basic:
            return (SliceGrad(idx, g),)
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_op("getitem", x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_op("stack", np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if need_a else None
            gb = a2.T @ g2 if need_b else None
            return ga, gb

        return make_op("matmul", (a2 @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]), (a, b), backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return make_op("matmul", ad @ bd, (a, b), backward)


# -- normalisers --------------------------------------------------------------

def _check_axis(x: Tensor, axis: int) -> None:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    x = as_tensor(x)
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    mu = mean(x, -1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, -1, keepdims=True)
    return xc * power(var + eps, -0.5) * gain + bias


# -- convolution and pooling ----------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D cross-correlation of ``x[B,C,H,W]`` with ``w[O,C,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x[B,C,H,W] and w[O,C,kh,kw]")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    ph, pw = pad
    kh, kw = w.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {xp.shape[2:]}")
    B, C = x.shape[:2]
    O = w.shape[0]
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # im2col with taps leading: cols[i, j, c, b, y, x] = xp[b, c, y + i, x + j]
    cols = np.empty((kh, kw, C, B, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + Ho, j:j + Wo].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(kh * kw * C, B * Ho * Wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = (wmat @ cols2).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
        inputs = (x, w, b)
    out = np.ascontiguousarray(out)
    xshape = x.shape
    need_x = x.requires_grad

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (gt @ cols2.T).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        grads = [None, np.ascontiguousarray(gw)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        if not need_x:
            return tuple(grads)
        gcols = (wmat.T @ gt).reshape(kh, kw, C, B, Ho, Wo)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + Ho, j:j + Wo] += gcols[i, j].transpose(1, 0, 2, 3)
        grads[0] = np.ascontiguousarray(gxp[:, :, ph:ph + xshape[2], pw:pw + xshape[3]])
        return tuple(grads)

    return make_op("conv2d", out, inputs, backward)


def max_pool2d(x: Tensor, size: tuple[int, int] = (2, 2)) -> Tensor:
    """Non-overlapping max pooling; ragged edges are padded with -inf.

    The gradient goes to the first maximum of each window (row-major).
    """
    ph, pw = size
    B, C, H, W = x.shape
    Hp, Wp = -(-H // ph) * ph, -(-W // pw) * pw
    xd = x.data
    if (Hp, Wp) != (H, W):
        xd = np.pad(xd, ((0, 0), (0, 0), (0, Hp - H), (0, Wp - W)), constant_values=-np.inf)
    taps = [(i, j) for i in range(ph) for j in range(pw)]
    out = xd[:, :, 0::ph, 0::pw].copy()
    for i, j in taps[1:]:
        np.maximum(out, xd[:, :, i::ph, j::pw], out=out)

    def backward(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in taps:
            hit = (xd[:, :, i::ph, j::pw] == out) & ~taken
            gx[:, :, i::ph, j::pw] = g * hit
            taken |= hit
        return (np.ascontiguousarray(gx[:, :, :H, :W]),)

    return make_op("max_pool2d", out, (x,), backward)


# -- verification -----------------------------------------------------------------

def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)``.

    ``x`` may be one tensor or a sequence; ``f`` receives them positionally and
    must return a scalar. ``max_coords`` limits the number of probed
    coordinates per tensor (chosen by ``rng``) for large inputs.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires float64 inputs")
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in xs]
    with Tape() as tape:
        y = f(*leaves)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    tape.backward(y)

    def value(arrays) -> float:
        return float(f(*[Tensor(a) for a in arrays]).data.reshape(-1)[0])

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    base = [lf.data.copy() for lf in leaves]
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat_idx: Iterable[int] = range(leaf.data.size)
        if max_coords is not None and leaf.data.size > max_coords:
            flat_idx = rng.choice(leaf.data.size, size=max_coords, replace=False)
        for i in flat_idx:
            pos = np.unravel_index(int(i), leaf.shape)
            arrays = [a.copy() for a in base]
            arrays[k][pos] += h
            up = value(arrays)
            arrays[k][pos] -= 2 * h
            down = value(arrays)
            fd = (up - down) / (2 * h)
            a = float(analytic[pos])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
