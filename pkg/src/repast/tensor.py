"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array plus a ``requires_grad`` flag. While a
:class:`Tape` is active, every primitive op whose inputs require gradients
records a backward closure; ``backward(loss)`` replays the record in reverse
topological order, visiting each recorded op exactly once, and deposits
gradients on every ``requires_grad`` tensor.

Conventions enforced here:

* every primitive checks its output for NaN/Inf and raises
  :class:`NumericsError` (non-finite values are an error state, not data);
* scalar precision is a process-global switch (float32 by default, float64
  for gradient checking), see :func:`set_default_dtype` / :func:`precision`;
* tensors are immutable values after creation; ops are pure functions;
* reductions run on a single thread when the determinism flag is set (the
  CLI maps ``REPA_THREADS=1`` onto the BLAS pools for the same reason), so
  identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

__all__ = [
    "NumericsError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat_lastdim",
    "conv2d",
    "cos",
    "default_dtype",
    "gelu",
    "is_deterministic",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "neg",
    "precision",
    "relu",
    "reshape",
    "set_default_dtype",
    "set_deterministic",
    "sigmoid",
    "sin",
    "softmax_lastdim",
    "sub",
    "take_along",
    "transpose",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op's contract."""


class NumericsError(ArithmeticError):
    """Raised when a primitive op produces NaN or Inf."""


_DEFAULT_DTYPE = np.dtype(np.float32)
_DETERMINISTIC = False
_TAPE_STACK: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    """Set the process-global scalar precision ("float32" or "float64")."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported scalar dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the global scalar precision."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_deterministic(flag: bool) -> None:
    global _DETERMINISTIC
    _DETERMINISTIC = bool(flag)


def is_deterministic() -> bool:
    return _DETERMINISTIC


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"op '{op}' produced non-finite values")


class Tensor:
    """Immutable dense n-dimensional array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; scalars and arrays are wrapped as constants
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(x, requires_grad=False, dtype=dtype)


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Ops append in execution order, which is automatically topological;
    :meth:`backward` consumes the tape (a second call is rejected). A single
    tape must never be shared across concurrent backward passes.
    """

    def __init__(self):
        self._entries: list[tuple[int, list[int], object]] = []
        self._tensors: list[tuple[Tensor, int]] = []
        self._next_id = 0
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def _node(self, t: Tensor) -> int:
        if t._tape is not self:
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1
            self._tensors.append((t, t.node_id))
        return t.node_id

    def _register(self, out: Tensor, inputs: tuple[Tensor, ...], fn) -> None:
        in_ids = [self._node(t) for t in inputs]
        out_id = self._node(out)
        self._entries.append((out_id, in_ids, fn))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Run reverse accumulation from a scalar loss.

        Returns a map from node id to gradient array and sets ``.grad`` on
        every ``requires_grad`` tensor recorded on this tape.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if loss._tape is not self or loss.node_id is None:
            raise RuntimeError("loss was not recorded on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for out_id, in_ids, fn in reversed(self._entries):
            g = grads.get(out_id)
            if g is None:
                continue
            for tid, gi in zip(in_ids, fn(g)):
                if gi is None:
                    continue
                acc = grads.get(tid)
                grads[tid] = gi if acc is None else acc + gi
        for t, nid in self._tensors:
            if t.requires_grad:
                t.grad = grads.get(nid)
        self._consumed = True
        return grads


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from ``loss`` through the tape it was recorded on."""
    if loss._tape is None:
        raise RuntimeError("loss is not attached to a tape; run the forward pass "
                           "inside a `with Tape():` block")
    return loss._tape.backward(loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], fn) -> Tensor:
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1]._register(out, inputs, fn)
    return out


def _from_array(arr: np.ndarray, op: str) -> Tensor:
    _check_finite(arr, op)
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t.node_id = None
    t._tape = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    out = _from_array(a.data + b.data, "add")
    na, nb = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(g, b.data.shape) if nb else None)

    return _record(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    out = _from_array(a.data - b.data, "sub")
    na, nb = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(-g, b.data.shape) if nb else None)

    return _record(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    out = _from_array(a.data * b.data, "mul")
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (_unbroadcast(g * bd, ad.shape) if na else None,
                _unbroadcast(g * ad, bd.shape) if nb else None)

    return _record(out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _wrap(a)
    out = _from_array(-a.data, "neg")
    return _record(out, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _wrap(a)
    out = _from_array(np.maximum(a.data, 0), "relu")
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _record(out, (a,), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = _from_array(0.5 * x * (1.0 + th), "gelu")

    def grad_fn(g):
        sech2 = 1.0 - th ** 2
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner),)

    return _record(out, (a,), grad_fn)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype, copy=False)
    out = _from_array(y, "sigmoid")

    def grad_fn(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), grad_fn)


def sin(a) -> Tensor:
    a = _wrap(a)
    out = _from_array(np.sin(a.data), "sin")
    cos_x = np.cos(a.data)
    return _record(out, (a,), lambda g: (g * cos_x,))


def cos(a) -> Tensor:
    a = _wrap(a)
    out = _from_array(np.cos(a.data), "cos")
    sin_x = np.sin(a.data)
    return _record(out, (a,), lambda g: (g * -sin_x,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = _from_array(np.reshape(a.data, shape), "reshape")
    orig = a.data.shape

    def grad_fn(g):
        return (np.reshape(g, orig),)

    return _record(out, (a,), grad_fn)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    out = _from_array(np.transpose(a.data, axes), "transpose")
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), grad_fn)


def concat_lastdim(parts) -> Tensor:
    """Concatenate tensors along their last axis."""
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat_lastdim needs at least one input")
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.shape[:-1] != lead:
            raise ShapeError(f"concat_lastdim leading shapes differ: "
                             f"{p.data.shape} vs {parts[0].data.shape}")
    out = _from_array(np.concatenate([p.data for p in parts], axis=-1), "concat")
    sizes = [p.data.shape[-1] for p in parts]
    offsets = np.cumsum([0] + sizes)
    needs = [p.requires_grad for p in parts]

    def grad_fn(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] if needs[i] else None
                     for i in range(len(parts)))

    return _record(out, tuple(parts), grad_fn)


def take_along(a, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with broadcastable integer ``indices``.

    Mirrors ``np.take_along_axis``; indices must select a single entry per
    output position so the backward scatter has no collisions.
    """
    a = _wrap(a)
    idx = np.asarray(indices)
    if idx.ndim != a.data.ndim:
        raise ShapeError(f"indices ndim {idx.ndim} != input ndim {a.data.ndim}")
    out = _from_array(np.take_along_axis(a.data, idx, axis=axis), "take_along")
    in_shape = a.data.shape

    def grad_fn(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        np.put_along_axis(gx, np.broadcast_to(idx, g.shape), g, axis=axis)
        return (gx,)

    return _record(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def mean(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    if axis is None:
        out = _from_array(np.mean(a.data, dtype=a.data.dtype, keepdims=False), "mean")
        n = a.data.size
        shape = a.data.shape

        def grad_fn(g):
            return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=False),)

        return _record(out, (a,), grad_fn)
    ax = axis if axis >= 0 else a.data.ndim + axis
    out = _from_array(np.mean(a.data, axis=ax, dtype=a.data.dtype), "mean")
    n = a.data.shape[ax]
    shape = a.data.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), shape).astype(g.dtype, copy=False),)

    return _record(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..,m,k] x [..,k,n] -> [..,m,n]``."""
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents incompatible: "
                         f"{a.data.shape} x {b.data.shape}") from exc
    out = _from_array(a.data @ b.data, "matmul")
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape) if na else None
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape) if nb else None
        return (ga, gb)

    return _record(out, (a, b), grad_fn)


def softmax_lastdim(a, scale: float = 1.0) -> Tensor:
    """softmax(x / scale) along the last axis, stabilized by max subtraction."""
    if not scale > 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    a = _wrap(a)
    if a.data.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    z = (a.data - np.max(a.data, axis=-1, keepdims=True)) / scale
    e = np.exp(z)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = _from_array(y, "softmax_lastdim")

    def grad_fn(g):
        inner = np.sum(g * y, axis=-1, keepdims=True)
        return ((y * (g - inner)) / scale,)

    return _record(out, (a,), grad_fn)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along the last axis, then affine."""
    if not eps > 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got "
                         f"{gain.data.shape} and {bias.data.shape}")
    mu = np.mean(a.data, axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = xc * inv
    out = _from_array(norm * gain.data + bias.data, "layer_norm")
    na, ng, nb = a.requires_grad, gain.requires_grad, bias.requires_grad
    gd = gain.data

    def grad_fn(g):
        gx = None
        if na:
            dy = g * gd
            m1 = np.mean(dy, axis=-1, keepdims=True)
            m2 = np.mean(dy * norm, axis=-1, keepdims=True)
            gx = inv * (dy - m1 - norm * m2)
        ggain = np.sum(g * norm, axis=tuple(range(g.ndim - 1))) if ng else None
        gbias = np.sum(g, axis=tuple(range(g.ndim - 1))) if nb else None
        return (gx, ggain, gbias)

    return _record(out, (a, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# convolution


def _same_pad(extent: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-extent // stride)  # ceil division
    total = max((out - 1) * stride + k - extent, 0)
    lo = total // 2
    return out, lo, total - lo


def conv2d(x, kernel, stride: int = 1) -> Tensor:
    """2-d convolution, NHWC layout, same padding.

    ``x``: [b, h, w, c_in]; ``kernel``: [kh, kw, c_in, c_out] with odd kh/kw.
    Output spatial extents are ceil(h / stride) x ceil(w / stride).
    """
    x = _wrap(x)
    kernel = _wrap(kernel, like=x)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [b,h,w,c], got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [kh,kw,c_in,c_out], got {kernel.data.shape}")
    kh, kw, cin, cout = kernel.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if not (isinstance(stride, int) and stride >= 1):
        raise ValueError(f"conv2d stride must be a positive int, got {stride!r}")
    b, h, w, cx = x.data.shape
    if cx != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cx}, kernel expects {cin}")

    oh, pt, pb = _same_pad(h, kh, stride)
    ow, pl, pr = _same_pad(w, kw, stride)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [b, oh, ow, cin, kh, kw]
    col = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    col = col.reshape(b * oh * ow, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = _from_array((col @ kmat).reshape(b, oh, ow, cout), "conv2d")
    nx, nk = x.requires_grad, kernel.requires_grad
    kd = kernel.data

    def grad_fn(g):
        gx = gk = None
        g2 = g.reshape(b * oh * ow, cout)
        if nk:
            gk = (col.T @ g2).reshape(kh, kw, cin, cout)
        if nx:
            gxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    # rows ki + i*stride, i < oh, all stay inside the padded map
                    contrib = g @ kd[ki, kj].T  # [b, oh, ow, cin]
                    gxp[:, ki:ki + oh * stride:stride,
                        kj:kj + ow * stride:stride, :] += contrib
            gx = gxp[:, pt:pt + h, pl:pl + w, :]
        return (gx, gk)

    return _record(out, (x, kernel), grad_fn)
