"""Dense-tensor engine with reverse-mode differentiation on a tape.

Design constraints, chosen for auditability over generality:
  * broadcasting only over leading axes (a (d,) bias against an (n, d)
    activation is fine; trailing-axis broadcasts get dedicated ops),
  * one flat tape per training step, replayed in reverse exactly once,
  * float32 by default, float64 under `double_precision()` for
    finite-difference gradient checks.

Custom differentiable operations (the splat renderer, bilinear feature
gathers) register themselves with `record()`.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_ACTIVE_TAPE: "Tape | None" = None


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def double_precision():
    """Run tensor creation in float64; used by gradient-check tests."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    """A dense n-d array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_grad_ref")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._grad_ref = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are folded into constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


class Tape:
    """Ordered record of differentiable operations.

    Execution order is topological by construction: an op is appended only
    after its inputs exist. `backward` replays the list once, in reverse.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self.nodes)


@contextmanager
def no_grad():
    """Suspend recording on the active tape."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        yield
    finally:
        _ACTIVE_TAPE = prev


def record(outputs: Sequence[Tensor], inputs: Sequence[Tensor], backward_fn: Callable):
    """Register a differentiable op on the active tape.

    `backward_fn(*output_grads)` must return one gradient array (or None)
    per input, in order. Outputs are marked requires_grad when any input
    requires grad and a tape is active; otherwise nothing is recorded.
    """
    if _ACTIVE_TAPE is None or not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    _ACTIVE_TAPE.nodes.append((tuple(outputs), tuple(inputs), backward_fn))


def backward(loss: Tensor):
    """Populate grads of every requires_grad tensor reachable from `loss`."""
    if _ACTIVE_TAPE is None:
        raise RuntimeError("backward() requires an active tape")
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for outputs, inputs, backward_fn in reversed(_ACTIVE_TAPE.nodes):
        if all(o.grad is None for o in outputs):
            continue
        grads_out = tuple(
            o.grad if o.grad is not None else np.zeros_like(o.data) for o in outputs
        )
        grads_in = backward_fn(*grads_out)
        if not isinstance(grads_in, tuple):
            grads_in = (grads_in,)
        for inp, g in zip(inputs, grads_in):
            if g is not None and inp.requires_grad:
                inp.accumulate_grad(g)


# ---------------------------------------------------------------------------
# broadcasting helpers (leading axes only)


def _leading_broadcast_ok(sa: tuple, sb: tuple) -> bool:
    """True when the shorter shape equals the other's trailing dims, apart
    from leading 1s. Trailing-axis expansion (e.g. (n,1) vs (n,d)) is out."""
    if len(sa) > len(sb):
        sa, sb = sb, sa
    sa = (1,) * (len(sb) - len(sa)) + sa
    seen_real = False
    for da, db in zip(sa, sb):
        if da == db:
            seen_real = True
        elif da == 1 and not seen_real:
            continue
        else:
            return False
    return True


def _binary_shapes_ok(a: Tensor, b: Tensor):
    if a.size == 1 or b.size == 1:
        return
    if not _leading_broadcast_ok(a.shape, b.shape):
        raise ValueError(
            f"only leading-axis broadcasting is supported: {a.shape} vs {b.shape}"
        )


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape` (leading axes only)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    ones = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if ones:
        g = g.sum(axis=ones, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    out = Tensor(a.data + b.data, dtype=a.dtype)
    record(
        (out,),
        (a, b),
        lambda g: (_reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape)),
    )
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    out = Tensor(a.data - b.data, dtype=a.dtype)
    record(
        (out,),
        (a, b),
        lambda g: (_reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape)),
    )
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    out = Tensor(a.data * b.data, dtype=a.dtype)
    record(
        (out,),
        (a, b),
        lambda g: (
            _reduce_to_shape(g * b.data, a.shape),
            _reduce_to_shape(g * a.data, b.shape),
        ),
    )
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes_ok(a, b)
    out = Tensor(a.data / b.data, dtype=a.dtype)
    record(
        (out,),
        (a, b),
        lambda g: (
            _reduce_to_shape(g / b.data, a.shape),
            _reduce_to_shape(-g * a.data / (b.data * b.data), b.shape),
        ),
    )
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, dtype=a.dtype)
    record((out,), (a,), lambda g: (g * (1.0 - y * y),))
    return out


def sigmoid(a: Tensor) -> Tensor:
    # stable two-branch form
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(a.dtype, copy=False)
    out = Tensor(y, dtype=a.dtype)
    record((out,), (a,), lambda g: (g * y * (1.0 - y),))
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, dtype=a.dtype)
    record((out,), (a,), lambda g: (g * y,))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), dtype=a.dtype)
    record((out,), (a,), lambda g: (g / a.data,))
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), dtype=a.dtype)
    record((out,), (a,), lambda g: (g * mask,))
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    out = Tensor(y, dtype=a.dtype)
    record((out,), (a,), lambda g: (g * inside,))
    return out


def sqrt_safe(a: Tensor, eps: float = 1e-12) -> Tensor:
    """sqrt with zero (not infinite) gradient at 0; forward is exact sqrt."""
    y = np.sqrt(np.maximum(a.data, 0.0))
    out = Tensor(y, dtype=a.dtype)

    def bwd(g):
        denom = np.where(y > eps, y, np.inf)
        return (g * 0.5 / denom,)

    record((out,), (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra / reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, dtype=a.dtype)
    record(
        (out,),
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )
    return out


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by max subtraction."""
    if np.isnan(a.data).any():
        raise ValueError("softmax received NaN input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    y = y.astype(a.dtype, copy=False)
    out = Tensor(y, dtype=a.dtype)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    record((out,), (a,), bwd)
    return out


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=True),)

    record((out,), (a,), bwd)
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, a.shape).astype(a.dtype, copy=True),)

    record((out,), (a,), bwd)
    return out


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max reduction; ties route the gradient to the first maximal element."""
    idx = a.data.argmax(axis=axis)
    y = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    out = Tensor(y, dtype=a.dtype)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    record((out,), (a,), bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.dtype)
    record((out,), (a,), lambda g: (g.reshape(a.shape),))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(ax))
    out = Tensor(a.data.transpose(ax), dtype=a.dtype)
    record((out,), (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis), dtype=tensors[0].dtype)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    record((out,), tuple(tensors), bwd)
    return out


# ---------------------------------------------------------------------------
# gathers and row-wise helpers


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """a[idx] along axis 0; backward scatter-adds (duplicates accumulate)."""
    idx = np.asarray(idx)
    out = Tensor(a.data[idx], dtype=a.dtype)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (ga,)

    record((out,), (a,), bwd)
    return out


def take_flat(a: Tensor, idx: np.ndarray, out_shape: tuple) -> Tensor:
    """Gather from the flattened tensor; the building block for im2col."""
    idx = np.asarray(idx)
    out = Tensor(a.data.reshape(-1)[idx].reshape(out_shape), dtype=a.dtype)

    def bwd(g):
        ga = np.zeros(a.size, dtype=a.dtype)
        np.add.at(ga, idx.reshape(-1), g.reshape(-1))
        return (ga.reshape(a.shape),)

    record((out,), (a,), bwd)
    return out


def scale_rows(a: Tensor, s: np.ndarray) -> Tensor:
    """Multiply row i of `a` by constant scalar s[i] (not differentiable in s)."""
    s = np.asarray(s, dtype=a.dtype)
    sc = s.reshape((-1,) + (1,) * (a.ndim - 1))
    out = Tensor(a.data * sc, dtype=a.dtype)
    record((out,), (a,), lambda g: (g * sc,))
    return out


def normalize_rows(a: Tensor, fallback: np.ndarray | None = None, eps: float = 1e-8) -> Tensor:
    """L2-normalize each row. Rows with near-zero norm take `fallback`
    (zero gradient there), so outputs are always unit length."""
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    bad = norms[..., 0] < eps
    safe = np.where(norms < eps, 1.0, norms)
    y = a.data / safe
    if bad.any():
        if fallback is None:
            raise ValueError("zero-norm row without a fallback")
        y = y.copy()
        y[bad] = np.asarray(fallback, dtype=a.dtype)
    out = Tensor(y.astype(a.dtype, copy=False), dtype=a.dtype)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        ga = (g - y * dot) / safe
        if bad.any():
            ga = ga.copy()
            ga[bad] = 0.0
        return (ga,)

    record((out,), (a,), bwd)
    return out


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the trailing two axes of a (C,H,W) tensor."""
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = Tensor(np.pad(a.data, width), dtype=a.dtype)

    def bwd(g):
        sl = tuple([slice(None)] * (a.ndim - 2) + [slice(pad, -pad), slice(pad, -pad)])
        return (np.ascontiguousarray(g[sl]),)

    record((out,), (a,), bwd)
    return out


# ---------------------------------------------------------------------------
# convolution via cached im2col index maps

_COL_INDEX_CACHE: dict = {}


def _im2col_indices(c: int, h: int, w: int, kh: int, kw: int, stride: int):
    key = (c, h, w, kh, kw, stride)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
    base = (ci * h + ki) * w + kj  # (c,kh,kw)
    oy, ox = np.meshgrid(np.arange(ho) * stride, np.arange(wo) * stride, indexing="ij")
    offset = oy * w + ox  # (ho,wo)
    idx = base.reshape(-1, 1) + offset.reshape(1, -1)  # (c*kh*kw, ho*wo)
    _COL_INDEX_CACHE[key] = (idx, ho, wo)
    return idx, ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution on a single (C,H,W) image, built from tape primitives."""
    cout, cin, kh, kw = weight.shape
    if x.shape[0] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    xp = pad2d(x, pad)
    _, h, w = xp.shape
    idx, ho, wo = _im2col_indices(cin, h, w, kh, kw, stride)
    cols = take_flat(xp, idx, (cin * kh * kw, ho * wo))
    wmat = reshape(weight, (cout, cin * kh * kw))
    y = matmul(wmat, cols)
    if bias is not None:
        y = add(transpose(y), reshape(bias, (cout,)))
        y = transpose(y)
    return reshape(y, (cout, ho, wo))


# ---------------------------------------------------------------------------
# finite differences (shared oracle helper for gradient checks)


def finite_difference(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. every param entry."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g
