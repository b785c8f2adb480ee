"""Minimal define-by-run tensor library with reverse-mode gradients.

Every op accepts either a single sample (``[C, H, W]`` for the image ops,
``[N]`` for :func:`dense`) or a batch with one extra leading axis.  All data
is held as 64-bit floats.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: Tuple[Tensor, ...] = ()
        self.vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # arithmetic sugar used by the losses
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_RELU_LOG: Optional[List[np.ndarray]] = None


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph + backward


class Graph:
    """Topologically ordered view of the ops that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: List[Tensor] = _toposort(output)

    def parameters(self) -> List[Tensor]:
        return [n for n in self.nodes if n.vjp is None and n.requires_grad]


def _toposort(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns a map from every leaf that requires grad to its gradient; the same
    arrays are also stored on ``leaf.grad`` (accumulating into existing grads).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient is zero where the floor is active."""
    x = a.data
    keep = x >= lo
    return _make(np.where(keep, x, lo), (a,), lambda g: (g * keep,), "clamp_min")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), vjp, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# network ops


def _batched(x: Tensor, ndim: int) -> Tuple[Tensor, bool]:
    if x.ndim == ndim:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != ndim + 1:
        raise DimensionError(f"expected {ndim}-d or batched {ndim + 1}-d input, got {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return reshape(x, x.shape[1:]) if squeeze else x


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def to_channels_last(x: Tensor) -> Tensor:
    """``[N,C,H,W] -> [N,H,W,C]`` (or the unbatched equivalent)."""
    return transpose(x, (1, 2, 0) if x.ndim == 3 else (0, 2, 3, 1))


def to_channels_first(x: Tensor) -> Tensor:
    return transpose(x, (2, 0, 1) if x.ndim == 3 else (0, 3, 1, 2))


# The public image ops take [C,H,W] / [N,C,H,W].  The *_hwc kernels below do
# the work on channels-last batches, which keeps every im2col/col2im copy
# contiguous; the network runs on them directly.


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) with zero padding.

    ``out[c,y,x] = bias[c] + sum input[c',y+dy-p,x+dx-p] * kernel[c,c',dy,dx]``
    with ``p = (k-1)/2`` and out-of-range inputs read as zero.
    """
    x, squeeze = _batched(as_tensor(x), 3)
    out = conv2d_hwc(to_channels_last(x), as_tensor(kernel), as_tensor(bias))
    return _unbatch(to_channels_first(out), squeeze)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Rows of zero-padded k x k receptive fields, each laid out (dy, dx, c)."""
    n, h, w, c = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return cols.reshape(n * h * w, k * k * c)


def conv2d_hwc(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """:func:`conv2d` on a channels-last batch ``[N,H,W,C]``."""
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {kernel.shape}")
    if x.ndim != 4:
        raise DimensionError(f"expected [N,H,W,C] input, got {x.shape}")
    if x.shape[3] != c_in:
        raise DimensionError(f"input has {x.shape[3]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match {c_out} output channels")
    n, h, w, _ = x.shape
    cols = _im2col(x.data, kh)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = (cols @ kmat.T + bias.data).reshape(n, h, w, c_out)

    def vjp(g):
        g2 = g.reshape(-1, c_out)
        dk = (g2.T @ cols).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            # input grad = same-padded correlation of g with the flipped, channel-swapped kernel
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c_in, -1)
            dx = (_im2col(g, kh) @ flipped.T).reshape(n, h, w, c_in)
        return dx, dk, db

    return _make(out, (x, kernel, bias), vjp, "conv2d")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pool; ties route gradient to the first element in row-major order."""
    x, squeeze = _batched(as_tensor(x), 3)
    return _unbatch(to_channels_first(maxpool2x2_hwc(to_channels_last(x))), squeeze)


def maxpool2x2_hwc(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    # window slot order (0,0),(0,1),(1,0),(1,1) == row-major scan
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        onehot = np.zeros((n, h // 2, w // 2, c, 4))
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        dx = onehot.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (dx.reshape(n, h, w, c),)

    return _make(out, (x,), vjp, "maxpool2x2")


def upsample2x2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x, squeeze = _batched(as_tensor(x), 3)
    return _unbatch(to_channels_first(upsample2x2_hwc(to_channels_last(x))), squeeze)


def upsample2x2_hwc(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def vjp(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make(out, (x,), vjp, "upsample2x2")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise DimensionError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    if a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise DimensionError(f"spatial mismatch: {a.shape} vs {b.shape}")
    return concat([a, b], axis=a.ndim - 3)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for a vector, or row-wise for a batch ``[B, N]``."""
    x = as_tensor(x)
    m, k = weight.shape
    if x.shape[-1] != k:
        raise DimensionError(f"dense: input has {x.shape[-1]} features, weight expects {k}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def vjp(g):
        if g.ndim == 1:
            dw = np.outer(g, xd)
            db = g
        else:
            dw = g.T @ xd
            db = g.sum(axis=0)
        return g @ wd, dw, db

    return _make(out, (x, weight, bias), vjp, "dense")


def relu(x: Tensor) -> Tensor:
    if _RELU_LOG is not None:
        _RELU_LOG.append(x.data.copy())
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), vjp, "softmax")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: ``[C,H,W] -> [C]`` (batched: ``[N,C,H,W] -> [N,C]``)."""
    return tmean(as_tensor(x), axis=(-2, -1))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps a dict of parameter tensors to a scalar tensor.  Coordinates
    are sampled uniformly over all parameters (all of them when there are
    fewer than ``n_samples``).  A coordinate is skipped when nudging it by
    ``eps`` moves any relu input across zero, since the one-sided
    derivatives differ there.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = list(params)
    base = {k: np.array(params[k], dtype=np.float64) for k in names}
    tensors = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    analytic = backward(f(tensors))
    grads = {k: analytic.get(t, np.zeros_like(t.data)) for k, t in tensors.items()}

    coords: List[Tuple[str, int]] = [(k, i) for k in names for i in range(base[k].size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_samples:
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def evaluate(k: str, i: int, delta: float) -> Tuple[float, List[np.ndarray]]:
        arrs = dict(base)
        arr = base[k].copy()
        arr.flat[i] += delta
        arrs[k] = arr
        with _record_relu_inputs() as seen:
            val = f({n: Tensor(a) for n, a in arrs.items()}).item()
        return val, seen

    worst = 0.0
    for k, i in coords:
        up, relu_up = evaluate(k, i, eps)
        down, relu_down = evaluate(k, i, -eps)
        if _crosses_kink(relu_up, relu_down):
            continue
        numeric = (up - down) / (2 * eps)
        a = grads[k].flat[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst


@contextlib.contextmanager
def _record_relu_inputs():
    global _RELU_LOG
    seen: List[np.ndarray] = []
    prev = _RELU_LOG
    _RELU_LOG = seen
    try:
        yield seen
    finally:
        _RELU_LOG = prev


def _crosses_kink(up: List[np.ndarray], down: List[np.ndarray]) -> bool:
    return any(np.any((a > 0) != (b > 0)) for a, b in zip(up, down))


def merge_grads(maps: Iterable[Mapping[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Sum gradient maps in the given order (deterministic reduction)."""
    total: Dict[str, np.ndarray] = {}
    for m in maps:
        for k, g in m.items():
            total[k] = total[k] + g if k in total else g.copy()
    return total
