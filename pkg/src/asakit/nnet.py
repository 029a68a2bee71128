"""Small layer toolkit on top of the autodiff core.

Modules hold named parameters (float64 leaf tensors) and child modules;
``named_parameters`` flattens them into slash-separated paths, which is also
the checkpoint naming scheme. Initialisation is uniform fan-in scaling and is
deterministic given the generator passed at construction time.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def softplus_inverse(y: float) -> float:
    """x such that softplus(x) == y, for seeding positivity reparameterisations."""
    if y <= 0:
        raise ShapeError("softplus_inverse needs a positive value")
    return float(y + np.log(-np.expm1(-y)))


class Module:
    """Base class: tracks parameters and children for flat named access."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, t in self._params.items():
            out[f"{prefix}{name}"] = t
        for name, child in self._children.items():
            out.update(child.named_parameters(prefix=f"{prefix}{name}/"))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ShapeError(f"parameter name mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model {t.shape}")
            t.data = arr.copy()

    def copy_state_from(self, other: "Module") -> None:
        self.load_state(other.state())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        w = np.zeros((d_in, d_out)) if zero_init else uniform_init(rng, (d_in, d_out), d_in)
        self.w = self.add_param("w", w)
        self.b = self.add_param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class Conv2d(Module):
    """(B, Cin, H, W) -> (B, Cout, H', W')."""

    def __init__(self, c_in: int, c_out: int, kernel=(3, 3), stride=(1, 1),
                 padding=(1, 1), rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        super().__init__()
        kh, kw = kernel
        fan_in = c_in * kh * kw
        if zero_init:
            w = np.zeros((c_out, c_in, kh, kw))
        else:
            w = uniform_init(rng, (c_out, c_in, kh, kw), fan_in)
        self.w = self.add_param("w", w)
        self.b = self.add_param("b", np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    """Layer normalisation over one axis with learnable per-feature affine."""

    def __init__(self, n_features: int, axis: int = -1):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(n_features))
        self.beta = self.add_param("beta", np.zeros(n_features))
        self.axis = axis
        self.n_features = n_features

    def __call__(self, x: Tensor) -> Tensor:
        axis = self.axis % x.ndim
        shape = [1] * x.ndim
        shape[axis] = self.n_features
        g = ad.reshape(self.gamma, tuple(shape))
        b = ad.reshape(self.beta, tuple(shape))
        return ad.layer_norm(x, axis=self.axis, gamma=g, beta=b)


class Gru(Module):
    """Unidirectional GRU over a (T, I) sequence; returns (T, H)."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.w_ih = self.add_param("w_ih", uniform_init(rng, (d_in, 3 * d_hidden), d_in))
        self.w_hh = self.add_param("w_hh", uniform_init(rng, (d_hidden, 3 * d_hidden), d_hidden))
        self.bias = self.add_param("bias", np.zeros(3 * d_hidden))
        self.d_hidden = d_hidden

    def __call__(self, x: Tensor) -> Tensor:
        t_len = x.shape[0]
        h = Tensor(np.zeros((1, self.d_hidden)))
        outs = []
        for t in range(t_len):
            h = ad.gru_step(h, x[t : t + 1, :], self.w_ih, self.w_hh, self.bias)
            outs.append(h)
        return ad.reshape(ad.concat(outs, axis=0), (t_len, self.d_hidden))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with head splitting.

    Accepts (T, D) or batched (B, T, D) sequences. Returns the attended
    sequence and the head-averaged attention map (rows sum to 1).
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        if d_model % n_heads:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.n_heads = n_heads
        self.d_head = d_model // n_heads

    def _split(self, x: Tensor, batched: bool) -> Tensor:
        if batched:
            b, t, d = x.shape
            x = ad.reshape(x, (b, t, self.n_heads, self.d_head))
            return ad.transpose(x, (0, 2, 1, 3))
        t, d = x.shape
        x = ad.reshape(x, (t, self.n_heads, self.d_head))
        return ad.transpose(x, (1, 0, 2))

    def _merge(self, x: Tensor, batched: bool) -> Tensor:
        if batched:
            b, h, t, dh = x.shape
            return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))
        h, t, dh = x.shape
        return ad.reshape(ad.transpose(x, (1, 0, 2)), (t, h * dh))

    def __call__(self, query: Tensor, keyval: Tensor | None = None):
        if keyval is None:
            keyval = query
        batched = query.ndim == 3
        q = self._split(self.q(query), batched)
        k = self._split(self.k(keyval), batched)
        v = self._split(self.v(keyval), batched)
        attended, weights = ad.attention(q, k, v)
        out = self.out(self._merge(attended, batched))
        head_axis = 1 if batched else 0
        return out, ad.tmean(weights, axis=head_axis)


class Dropout(Module):
    """Fixed-probability dropout; identity unless a generator is supplied."""

    def __init__(self, p: float = 0.5):
        super().__init__()
        self.p = p

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if rng is None or self.p <= 0.0:
            return x
        mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return ad.mul(x, Tensor(mask))


def avg_pool2d(x: Tensor, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping average pooling on the last two axes (floor mode, the
    remainder is dropped; output extents are kept at least 1)."""
    ph, pw = pool
    b, c, h, w = x.shape
    oh, ow = max(h // ph, 1), max(w // pw, 1)
    ph, pw = min(ph, h), min(pw, w)
    x = x[:, :, : oh * ph, : ow * pw]
    x = ad.reshape(x, (b, c, oh, ph, ow, pw))
    return ad.tmean(x, axis=(3, 5))


_POOL_CACHE: dict[tuple[int, int], np.ndarray] = {}


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging matrix (n_out, n_in) over contiguous chunks, cached."""
    key = (n_in, n_out)
    if key not in _POOL_CACHE:
        mat = np.zeros((n_out, n_in))
        for i in range(n_out):
            lo = (i * n_in) // n_out
            hi = max(((i + 1) * n_in) // n_out, lo + 1)
            mat[i, lo:hi] = 1.0 / (hi - lo)
        _POOL_CACHE[key] = mat
    return _POOL_CACHE[key]


def adaptive_avg_pool1d(x: Tensor, n_out: int) -> Tensor:
    """(T_in, D) -> (n_out, D) by averaging contiguous chunks."""
    return ad.matmul(Tensor(adaptive_pool_matrix(x.shape[0], n_out)), x)
