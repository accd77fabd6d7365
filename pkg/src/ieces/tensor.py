"""Small reverse-mode autodiff engine on top of numpy.

Every operator takes and returns :class:`Tensor` objects.  When gradient
recording is enabled each result keeps a reference to its parents and a
closure that maps the upstream gradient to parent gradients; :func:`backward`
walks that record in reverse topological order.

Convolution and pooling work on ``C x H x W`` inputs or on batches shaped
``N x C x H x W``.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()

_state = {
    "grad_enabled": True,
    "dtype": np.dtype(np.float32),
    "check_finite": False,
}

PROB_FLOOR = 1e-12


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported floating mode {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating mode (``float32``/``float64``)."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; results are constants for any later backward."""
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def verify_mode():
    """64-bit arithmetic plus a finiteness check after every forward and backward."""
    old = _state["check_finite"]
    _state["check_finite"] = True
    try:
        with precision(np.float64):
            yield
    finally:
        _state["check_finite"] = old


def _check_finite(arr: np.ndarray, where: str) -> None:
    if _state["check_finite"] and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {where}")


class Tensor:
    """A shaped float array that can take part in gradient computation."""

    __array_ufunc__ = None  # make ndarray op Tensor defer to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state["dtype"])
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, params: Iterable["Tensor"] | None = None) -> None:
        backward(self, params)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    out.op = op
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and shape operators
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    out = a.data + b.data

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), _bw, "add")


def neg(a) -> Tensor:
    a = _lift(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    out = a.data * b.data

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), _bw, "mul")


def sum_(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def _bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(out), (a,), _bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; the gradient scatters back with ``np.add.at``."""
    out = a.data[index]

    def _bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(np.array(out), (a,), _bw, "take")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# convolutional operators
# ---------------------------------------------------------------------------

def _pads(padding) -> tuple[int, int, int, int]:
    """Normalise padding to (top, bottom, left, right)."""
    if isinstance(padding, (int, np.integer)):
        pads = (int(padding),) * 4
    elif len(padding) == 2:
        pads = (int(padding[0]), int(padding[0]), int(padding[1]), int(padding[1]))
    elif len(padding) == 4:
        pads = tuple(int(p) for p in padding)
    else:
        raise ValueError(f"padding must be an int, a pair or a 4-tuple, got {padding!r}")
    if min(pads) < 0:
        raise ValueError(f"padding must be non-negative, got {padding!r}")
    return pads


def _as_batch(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"{op} expects a C x H x W or N x C x H x W input, got shape {x.shape}")


def _window(arr: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """View of the (i, j)-th tap of every sliding window."""
    return arr[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Columns shaped (C*kh*kw) x (N*Ho*Wo); the row-major inner plane keeps copies contiguous."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo), ho, wo


def _correlate(xp: np.ndarray, wmat: np.ndarray, kh: int, kw: int, stride: int):
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = wmat @ cols
    return out.reshape(wmat.shape[0], xp.shape[0], ho, wo), cols, ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation.

    Args:
        x: ``C_in x H x W`` or ``N x C_in x H x W`` input.
        kernel: ``C_out x C_in x kh x kw`` weights.
        bias: optional ``C_out`` vector.
        stride: positive step in both spatial axes.
        padding: zero padding, an int, a ``(ph, pw)`` pair or ``(top, bottom, left, right)``.

    Returns:
        ``C_out x H' x W'`` (or batched) output with
        ``H' = floor((H + pad_h - kh) / stride) + 1``.
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    xb, squeeze = _as_batch(x, "conv2d")
    n, c, h, w = xb.shape
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be C_out x C_in x kh x kw, got shape {kernel.shape}")
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias must have shape ({o},), got {bias.shape}")
    top, bottom, left, right = _pads(padding)
    hp, wp = h + top + bottom, w + left + right
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xp = np.pad(xb.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    wmat = kernel.data.reshape(o, -1)
    out, cols, ho, wo = _correlate(xp, wmat, kh, kw, stride)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def _bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dx = dk = db = None
        if xb.requires_grad:
            if stride == 1:
                # full correlation of the upstream gradient with the flipped, transposed kernel
                flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                dxp = _correlate(gp, flipped, kh, kw, 1)[0].transpose(1, 0, 2, 3)
            else:
                dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
                dxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        _window(dxp, i, j, stride, ho, wo)[...] += dcols[:, i, j].transpose(1, 0, 2, 3)
            dx = dxp[:, :, top:top + h, left:left + w]
        if kernel.requires_grad:
            dk = (gmat @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dk, db

    parents = (xb, kernel) + ((bias,) if bias is not None else ())
    res = _result(out, parents, _bw, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def maxpool2d(x: Tensor, window: int, stride: int | None = None, padding=0) -> Tensor:
    """Max pooling; padded cells never win.  Ties go to the first cell in row-major order."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    stride = window if stride is None else stride
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    xb, squeeze = _as_batch(x, "maxpool2d")
    n, c, h, w = xb.shape
    top, bottom, left, right = _pads(padding)
    hp, wp = h + top + bottom, w + left + right
    if window > hp or window > wp:
        raise ValueError(f"pool window {window} larger than padded input {hp}x{wp}")
    xp = np.pad(xb.data, ((0, 0), (0, 0), (top, bottom), (left, right)), constant_values=-np.inf)
    ho, wo = (hp - window) // stride + 1, (wp - window) // stride + 1
    taps = [divmod(p, window) for p in range(window * window)]
    out = _window(xp, 0, 0, stride, ho, wo).copy()
    for i, j in taps[1:]:
        np.maximum(out, _window(xp, i, j, stride, ho, wo), out=out)

    def _bw(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i, j in taps:
            hit = _window(xp, i, j, stride, ho, wo) == out
            hit &= ~taken
            taken |= hit
            _window(dxp, i, j, stride, ho, wo)[...] += g * hit
        return (dxp[:, :, top:top + h, left:left + w],)

    res = _result(out, (xb,), _bw, "maxpool2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def zero_pad(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Centre ``x`` in a zero canvas of spatial size ``target``; odd surplus goes bottom/right."""
    ht, wt = target
    h, w = x.shape[-2:]
    if ht < h or wt < w:
        raise ValueError(f"zero_pad target {target} smaller than input {h}x{w}")
    top, left = (ht - h) // 2, (wt - w) // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(top, ht - h - top), (left, wt - w - left)]
    out = np.pad(x.data, widths)
    return _result(out, (x,), lambda g: (g[..., top:top + h, left:left + w],), "zero_pad")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 0 unbatched, axis 1 batched)."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ndim = inputs[0].ndim
    if ndim not in (3, 4) or any(t.ndim != ndim for t in inputs):
        raise ValueError("concat_channels inputs must all be C x H x W (or all batched)")
    axis = ndim - 3
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[-2:] != ref[-2:] or t.shape[:axis] != ref[:axis]:
            raise ValueError(f"concat_channels spatial mismatch: {t.shape} vs {ref}")
    out = np.concatenate([t.data for t in inputs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in inputs])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(inputs), _bw, "concat_channels")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for an N-vector, or row-wise for a batch of shape B x N."""
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear dimension mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        dx = g @ weight.data
        dw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        grads = [dx, dw]
        if bias is not None:
            grads.append(g if x.ndim == 1 else g.sum(axis=0))
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result(out, parents, _bw, "linear")


# ---------------------------------------------------------------------------
# probabilistic heads
# ---------------------------------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), _bw, "softmax")


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Mean of ``-ln(p[target])`` with ``p`` floored at 1e-12.

    ``probs`` is a C-vector with an int target, or B x C with B targets.
    """
    c = probs.shape[-1]
    tgt = np.atleast_1d(np.asarray(target))
    if tgt.dtype.kind not in "iu":
        raise ValueError(f"target class must be an integer index, got {target!r}")
    if np.any(tgt < 0) or np.any(tgt >= c):
        raise ValueError(f"target class {target!r} out of range for {c} classes")
    p2 = probs.data.reshape(-1, c)
    if len(tgt) != len(p2):
        raise ValueError(f"{len(p2)} probability rows but {len(tgt)} targets")
    rows = np.arange(len(tgt))
    picked = p2[rows, tgt]
    clamped = np.maximum(picked, PROB_FLOOR)
    out = np.asarray(-np.log(clamped).mean(), dtype=probs.dtype)

    def _bw(g):
        grad = np.zeros_like(p2)
        grad[rows, tgt] = np.where(picked >= PROB_FLOOR, -1.0 / clamped, 0.0) / len(tgt)
        return ((g * grad).reshape(probs.shape),)

    return _result(out, (probs,), _bw, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse-mode accumulation
# ---------------------------------------------------------------------------

def record(loss: Tensor) -> list[Tensor]:
    """The computation record reachable from ``loss`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate into any existing ``.grad``.  Tensors listed in
    ``params`` that the loss does not depend on get an explicit zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(record(loss)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                _check_finite(node.grad, f"backward into {node.name or 'leaf'}")
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-3,
               coords: Sequence[int] | None = None, floor: float = 1e-6) -> float:
    """Worst per-coordinate relative error between backprop and central differences.

    Runs in 64-bit.  ``coords`` restricts the check to a subset of flat
    indices.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with precision(np.float64):
        x = Tensor(base.copy(), requires_grad=True)
        out = fn(x)
        backward(out)
        analytic = np.zeros_like(base) if x.grad is None else x.grad
        idx = range(base.size) if coords is None else coords
        worst = 0.0
        probe = base.copy()
        for i in idx:
            orig = probe.flat[i]
            probe.flat[i] = orig + eps
            with no_grad():
                up = float(fn(Tensor(probe.copy())).data)
            probe.flat[i] = orig - eps
            with no_grad():
                down = float(fn(Tensor(probe.copy())).data)
            probe.flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = float(analytic.flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
