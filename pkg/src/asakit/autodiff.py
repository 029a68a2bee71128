"""Minimal float64 n-dimensional tensor library with reverse-mode autodiff.

Every operation computes its forward value on plain numpy arrays. While a
GradGraph is active (entered as a context manager), operations whose inputs
require gradients append a node to an append-only tape; ``GradGraph.backward``
replays the tape once in reverse recording order and returns a gradient for
every leaf that requires one. Without an active graph, ops are plain numpy
with no recording, which is how evaluation-mode code runs.

Graphs are independent: one graph per thread of work, no shared mutable
state, and backward never mutates the tape, so repeated backward calls on the
same recording return identical gradients.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError

_UID = itertools.count()
_ACTIVE = threading.local()


def _graph() -> "GradGraph | None":
    stack = getattr(_ACTIVE, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff.

    ``node_id`` is the index of the op that produced this tensor in the
    active graph's tape, or None for leaves and unrecorded results.
    """

    __slots__ = ("data", "requires_grad", "uid", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.uid = next(_UID)
        self.node_id: int | None = None

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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all dispatch to the module-level ops
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("out_uid", "parent_uids", "backward")

    def __init__(self, out_uid, parent_uids, backward):
        self.out_uid = out_uid
        self.parent_uids = parent_uids
        self.backward = backward


class GradMap:
    """Gradients returned by backward, keyed by the leaf tensors themselves."""

    def __init__(self, by_uid: dict[int, np.ndarray], leaves: dict[int, Tensor]):
        self._by_uid = by_uid
        self._leaves = leaves

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor.uid in self._by_uid:
            return self._by_uid[tensor.uid]
        if tensor.uid in self._leaves:
            return np.zeros_like(tensor.data)
        raise KeyError("tensor is not a requires_grad leaf of this graph")

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.uid in self._leaves

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


class GradGraph:
    """Append-only tape of recorded ops; topological order == recording order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "GradGraph":
        stack = getattr(_ACTIVE, "stack", None)
        if stack is None:
            stack = []
            _ACTIVE.stack = stack
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.stack.pop()

    def _record(self, out: Tensor, parents: Sequence[Tensor], backward) -> None:
        for p in parents:
            if p.requires_grad and p.node_id is None:
                self._leaves.setdefault(p.uid, p)
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(out.uid, tuple(p.uid for p in parents), backward))

    def backward(self, loss: Tensor) -> GradMap:
        """Accumulate gradients of a scalar loss for every requires_grad leaf.

        Visits each tape node exactly once, in reverse recording order, and
        does not mutate the tape: calling backward again gives identical
        results.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or loss.node_id is None:
            raise ShapeError("loss is not connected to this graph")
        grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g_out = grads.get(node.out_uid)
            if g_out is None:
                continue
            parent_grads = node.backward(g_out)
            for uid, pg in zip(node.parent_uids, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(uid)
                grads[uid] = pg if acc is None else acc + pg
        leaf_grads = {uid: grads[uid] for uid in self._leaves if uid in grads}
        return GradMap(leaf_grads, dict(self._leaves))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.uid = next(_UID)
    out.node_id = None
    g = _graph()
    if g is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        g._record(out, parents, backward)
    else:
        out.requires_grad = False
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    if np.any(b.data == 0.0):
        raise NumericError("division by exact zero")
    out = a.data / b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = -a.data

    def backward(g):
        return (-g,)

    return _make(out, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of a non-positive value")
    out = np.log(a.data)
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _make(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def _softplus_data(x: np.ndarray) -> np.ndarray:
    # stable log(1 + e^x) = max(x, 0) + log1p(e^-|x|), cheaper than logaddexp
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = _softplus_data(a.data)
    ad = a.data

    def backward(g):
        return (g * expit(ad),)

    return _make(out, (a,), backward)


def mish(a) -> Tensor:
    """x * tanh(softplus(x)) as one fused node; the gradient follows the
    composition rule t + x * (1 - t^2) * sigmoid(x)."""
    a = _as_tensor(a)
    x = a.data
    t = np.tanh(_softplus_data(x))
    out = x * t

    def backward(g):
        return (g * (t + x * (1.0 - t * t) * expit(x)),)

    return _make(out, (a,), backward)


def power(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p.data) if isinstance(p, Tensor) else float(p)
    out = a.data**p
    ad = a.data

    def backward(g):
        return (g * p * ad ** (p - 1.0),)

    return _make(out, (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; the gradient passes through inside [lo, hi] and is zero
    outside."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(out, (a,), backward)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "mish": mish,
    "softplus": softplus,
    "power": power,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """String-dispatched elementwise op, mostly useful for parametrised tests."""
    if op_kind not in _ELEMENTWISE:
        raise ShapeError(f"unknown elementwise op {op_kind!r}")
    fn = _ELEMENTWISE[op_kind]
    if op_kind in ("add", "sub", "mul", "div", "power"):
        if b is None:
            raise ShapeError(f"{op_kind} is binary")
        return fn(a, b)
    if b is not None:
        raise ShapeError(f"{op_kind} is unary")
    return fn(a)


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return _make(out, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), backward)


def getitem(a, key) -> Tensor:
    a = _as_tensor(a)
    out = a.data[key]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, ts, backward)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.ascontiguousarray(moved[i]) for i in range(len(ts)))

    return _make(out, ts, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if b.ndim == 2 and a.ndim > 2:
        # fuse leading dims into one GEMM instead of a batch of tiny ones
        lead = a.shape[:-1]
        a2 = ad.reshape(-1, a.shape[-1])
        out = (a2 @ bd).reshape(*lead, b.shape[-1])

        def backward_fused(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = (g2 @ bd.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return _make(out, (a, b), backward_fused)

    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max subtraction for stability."""
    a = _as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), backward)


def layer_norm(a, axis: int = -1, eps: float = 1e-8, gamma=None, beta=None) -> Tensor:
    """Normalise to zero mean / unit variance along one axis, optionally with
    a fused affine (gamma, beta broadcastable against the result)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    centred = a.data - mu
    var = np.mean(centred * centred, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centred * inv
    if gamma is None:

        def backward(g):
            gm = g.mean(axis=axis, keepdims=True)
            gy = (g * normed).mean(axis=axis, keepdims=True)
            return (inv * (g - gm - normed * gy),)

        return _make(normed, (a,), backward)

    gamma, beta = _as_tensor(gamma), _as_tensor(beta)
    gd, bd = gamma.data, beta.data
    out = normed * gd + bd

    def backward_affine(g):
        gn = g * gd
        gm = gn.mean(axis=axis, keepdims=True)
        gy = (gn * normed).mean(axis=axis, keepdims=True)
        ga = inv * (gn - gm - normed * gy)
        ggamma = _unbroadcast(g * normed, gd.shape)
        gbeta = _unbroadcast(g, bd.shape)
        return ga, ggamma, gbeta

    return _make(out, (a, gamma, beta), backward_affine)


# ---------------------------------------------------------------------------
# framing, convolution, and their adjoints
# ---------------------------------------------------------------------------

def _frame_data(x: np.ndarray, k: int, hop: int, n_frames: int) -> np.ndarray:
    need = (n_frames - 1) * hop + k
    if x.shape[-1] < need:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, need - x.shape[-1])]
        x = np.pad(x, pad)
    view = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)
    return np.ascontiguousarray(view[..., ::hop, :][..., :n_frames, :])


def _overlap_add_data(frames: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    *lead, n_frames, k = frames.shape
    buf = np.zeros((*lead, n_frames * hop + k))
    for k0 in range(0, k, hop):
        w = min(hop, k - k0)
        dest = buf[..., k0 : k0 + n_frames * hop]
        dest.reshape(*lead, n_frames, hop)[..., :w] += frames[..., k0 : k0 + w]
    out = buf[..., :out_len]
    if out.shape[-1] < out_len:
        out = np.pad(out, [(0, 0)] * len(lead) + [(0, out_len - out.shape[-1])])
    return np.ascontiguousarray(out)


def frame(x, k: int, hop: int, n_frames: int | None = None) -> Tensor:
    """Slice the last axis into overlapping frames of length k at stride hop.

    The tail is zero-padded so exactly n_frames frames exist (default: every
    hop-aligned start position, ceil(N / hop) frames).
    """
    x = _as_tensor(x)
    n = x.shape[-1]
    if n < k:
        raise ShapeError(f"signal length {n} is shorter than the frame length {k}")
    if n_frames is None:
        n_frames = -(-n // hop)
    out = _frame_data(x.data, k, hop, n_frames)
    shape = x.shape

    def backward(g):
        full = _overlap_add_data(g, hop, shape[-1])
        return (full,)

    return _make(out, (x,), backward)


def overlap_add(frames_t, hop: int, out_len: int) -> Tensor:
    """Adjoint of frame: scatter-add frames back onto a 1-d signal."""
    frames_t = _as_tensor(frames_t)
    if frames_t.ndim < 2:
        raise ShapeError("overlap_add expects (..., n_frames, k)")
    n_frames, k = frames_t.shape[-2:]
    out = _overlap_add_data(frames_t.data, hop, out_len)

    def backward(g):
        return (_frame_data(g, k, hop, n_frames),)

    return _make(out, (frames_t,), backward)


def _im2col_data(x, kh, kw, sh, sw, ph, pw, oh, ow):
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    view = view[:, :, ::sh, ::sw][:, :, :oh, :ow]  # (B, C, OH, OW, kh, kw)
    b, c = x.shape[:2]
    cols = view.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols)


def _col2im_data(cols, x_shape, kh, kw, sh, sw, ph, pw, oh, ow):
    b, c, h, w = x_shape
    grad = np.zeros((b, c, h + 2 * ph, w + 2 * pw))
    g = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            grad[:, :, i : i + oh * sh : sh, j : j + ow * sw : sw] += g[:, :, i, j]
    if ph or pw:
        grad = grad[:, :, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(grad)


def im2col(x, kernel: tuple[int, int], stride: tuple[int, int], padding: tuple[int, int]) -> Tensor:
    """(B, C, H, W) -> (B, C*kh*kw, OH*OW) patch matrix for conv-as-matmul."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col expects (B, C, H, W), got {x.shape}")
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    b, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"kernel {kernel} does not fit input {x.shape} with padding {padding}")
    out = _im2col_data(x.data, kh, kw, sh, sw, ph, pw, oh, ow)
    x_shape = x.shape

    def backward(g):
        return (_col2im_data(g, x_shape, kh, kw, sh, sw, ph, pw, oh, ow),)

    t = _make(out, (x,), backward)
    return t, oh, ow


def conv2d(x, weight, bias=None, stride: tuple[int, int] = (1, 1),
           padding: tuple[int, int] = (0, 0)) -> Tensor:
    """2-d convolution (cross-correlation). x: (B, Cin, H, W), weight:
    (Cout, Cin, kh, kw), bias: (Cout,) or None."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    cols, oh, ow = im2col(x, (kh, kw), stride, padding)
    w2 = reshape(weight, (cout, cin * kh * kw))
    out = reshape(matmul(w2, cols), (x.shape[0], cout, oh, ow))
    if bias is not None:
        out = add(out, reshape(_as_tensor(bias), (1, cout, 1, 1)))
    return out


def conv1d(x, weight, bias=None, stride: int = 1, n_frames: int | None = None) -> Tensor:
    """1-d convolution of the last axis. weight: (k, Cout); output
    (..., T, Cout) with T = floor((N - k) / stride) + 1 unless n_frames is
    given explicitly."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    k = weight.shape[0]
    if n_frames is None:
        n_frames = (x.shape[-1] - k) // stride + 1
    frames = frame(x, k, stride, n_frames)
    out = matmul(frames, weight)
    if bias is not None:
        out = add(out, _as_tensor(bias))
    return out


def conv_transpose1d(x, weight, stride: int, out_len: int | None = None) -> Tensor:
    """Transposed 1-d convolution. x: (T, Cin), weight: (Cin, Cout, k);
    output (Cout, L) with L = (T-1)*stride + k, cropped/padded to out_len."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    t_in, cin = x.shape
    if weight.shape[0] != cin:
        raise ShapeError(f"conv_transpose1d channel mismatch: {x.shape} vs {weight.shape}")
    _, cout, k = weight.shape
    if out_len is None:
        out_len = (t_in - 1) * stride + k
    w2 = reshape(weight, (cin, cout * k))
    frames = reshape(matmul(x, w2), (t_in, cout, k))   # (T, Cout, k)
    frames = transpose(frames, (1, 0, 2))              # (Cout, T, k)
    return overlap_add(frames, stride, out_len)


# ---------------------------------------------------------------------------
# recurrent and attention primitives
# ---------------------------------------------------------------------------

def gru_step(state, x, w_ih, w_hh, bias) -> Tensor:
    """One gated-recurrent-unit update.

    state: (B, H), x: (B, I), w_ih: (I, 3H), w_hh: (H, 3H), bias: (3H,),
    gate order (update z, reset r, candidate n):
        z = sigmoid(x W_z + h U_z + b_z)
        r = sigmoid(x W_r + h U_r + b_r)
        n = tanh(x W_n + r * (h U_n) + b_n)
        h' = z * h + (1 - z) * n
    """
    state, x = _as_tensor(state), _as_tensor(x)
    w_ih, w_hh, bias = _as_tensor(w_ih), _as_tensor(w_hh), _as_tensor(bias)
    h = state.shape[-1]
    if w_ih.shape != (x.shape[-1], 3 * h) or w_hh.shape != (h, 3 * h) or bias.shape != (3 * h,):
        raise ShapeError(
            f"gru_step parameter shapes {w_ih.shape}/{w_hh.shape}/{bias.shape} "
            f"inconsistent with input {x.shape} and state {state.shape}")
    gi = add(matmul(x, w_ih), bias)
    gh = matmul(state, w_hh)
    z = sigmoid(add(gi[:, :h], gh[:, :h]))
    r = sigmoid(add(gi[:, h : 2 * h], gh[:, h : 2 * h]))
    n = tanh(add(gi[:, 2 * h :], mul(r, gh[:, 2 * h :])))
    return add(mul(z, state), mul(sub(1.0, z), n))


def attention(q, k, v) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention.

    q: (..., Tq, d), k: (..., Tk, d), v: (..., Tk, dv). Returns the attended
    values and the attention-weight map (rows sum to 1), which callers keep
    for diagnostics.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention feature widths differ: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention key/value lengths differ: k {k.shape} vs v {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))), scale)
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            eps: float = 1e-6, max_coords: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Compare the autodiff gradient of the scalar f() against central finite
    differences and return the worst relative error.

    f must be a pure function of the params (re-evaluated several times).
    When max_coords is given, that many coordinates are sampled per parameter
    instead of sweeping all of them. The per-coordinate error is
    |numeric - analytic| / max(|numeric|, |analytic|, 1), i.e. coordinates
    with near-zero gradients are compared absolutely, where central
    differences are limited by cancellation noise rather than by the
    gradient under test.
    """
    if eps <= 0:
        raise NumericError("eps must be positive")
    with GradGraph() as g:
        loss = f()
        grads = g.backward(loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_coords, replace=False)
        else:
            idxs = range(n)
        analytic = grads[p].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite evaluation while probing coordinate {i}")
            numeric = (fp - fm) / (2.0 * eps)
            scale = max(abs(numeric), abs(analytic[i]), 1.0)
            worst = max(worst, abs(numeric - analytic[i]) / scale)
    return worst
