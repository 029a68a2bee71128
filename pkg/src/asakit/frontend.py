"""Dynamic-window STFT front-end.

The analysis window is a Gaussian whose per-frame centre offset (mu, samples)
and width (sigma, samples) are predicted from the waveform by a small
parameter-shared conv + linear head per microphone channel. With the
prediction heads at zero (their initial state) the transform is exactly the
fixed-Gaussian STFT. The inverse transform always uses the fixed window with
squared-window overlap-add normalisation, which reconstructs interior samples
to machine precision.

Spectrogram layout: real/imaginary parts are interleaved per microphone, so
channel 2m is Re of mic m and channel 2m+1 is Im of mic m, giving (2M, T, F).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .nnet import Conv2d, LayerNorm, Linear, Module, softplus_inverse, uniform_init

OLA_FLOOR = 1e-8


@dataclass(frozen=True)
class DynamicStftConfig:
    sample_rate: int
    win_len: int                     # K, samples
    hop: int                         # L, samples
    predictor_width: int = 64        # D
    embed_channels: int = 64         # C_feat
    mu_init_s: float = 0.0
    sigma_init_s: float | None = None

    def __post_init__(self):
        if self.win_len % 2 or self.win_len <= 0:
            raise ConfigError(f"win_len must be positive and even, got {self.win_len}")
        if not (0 < self.hop <= self.win_len):
            raise ConfigError(f"hop must satisfy 0 < hop <= win_len, got {self.hop}")
        if self.sigma_init_s is None:
            # 6 sigma spans the window
            object.__setattr__(self, "sigma_init_s", self.win_len / (6.0 * self.sample_rate))
        if self.sigma_init_s <= 0:
            raise ConfigError("sigma_init_s must be positive")

    @classmethod
    def from_ms(cls, sample_rate: int, win_ms: float = 40.0, hop_ms: float = 20.0, **kw):
        return cls(sample_rate=sample_rate,
                   win_len=int(round(sample_rate * win_ms / 1000.0)),
                   hop=int(round(sample_rate * hop_ms / 1000.0)), **kw)

    @property
    def n_bins(self) -> int:
        return self.win_len // 2 + 1

    @property
    def sigma_init_samples(self) -> float:
        return self.sigma_init_s * self.sample_rate

    @property
    def mu_init_samples(self) -> float:
        return self.mu_init_s * self.sample_rate

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_len:
            raise ShapeError(f"waveform length {n_samples} shorter than window {self.win_len}")
        return -(-n_samples // self.hop)

    def padded_len(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.win_len


@dataclass
class WindowParams:
    """Per-microphone, per-frame window parameters in samples; sigma is kept
    strictly positive by the softplus parameterisation upstream."""

    mu: Tensor      # (M, T), signed offset from the frame centre
    sigma: Tensor   # (M, T), > 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape


_BASIS_CACHE: dict[tuple[str, int], np.ndarray] = {}


def _dft_bases(k: int) -> tuple[np.ndarray, np.ndarray]:
    key = ("fwd", k)
    if key not in _BASIS_CACHE:
        f = k // 2 + 1
        grid = 2.0 * np.pi * np.outer(np.arange(k), np.arange(f)) / k
        _BASIS_CACHE[key] = (np.cos(grid), -np.sin(grid))
    return _BASIS_CACHE[key]


def _idft_bases(k: int) -> tuple[np.ndarray, np.ndarray]:
    key = ("inv", k)
    if key not in _BASIS_CACHE:
        f = k // 2 + 1
        coef = np.full(f, 2.0)
        coef[0] = 1.0
        coef[-1] = 1.0
        grid = 2.0 * np.pi * np.outer(np.arange(f), np.arange(k)) / k
        _BASIS_CACHE[key] = (coef[:, None] * np.cos(grid) / k,
                             -coef[:, None] * np.sin(grid) / k)
    return _BASIS_CACHE[key]


def gaussian_window(mu, sigma, win_len: int) -> Tensor:
    """w[k] = exp(-((k - (K-1)/2 - mu) / sigma)^2 / 2), differentiable in both
    parameters. mu/sigma may be scalars or (M, T) tensors; the window axis is
    appended."""
    mu = mu if isinstance(mu, Tensor) else Tensor(mu)
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    k = Tensor(np.arange(win_len, dtype=np.float64) - (win_len - 1) / 2.0)
    if mu.ndim:
        mu = ad.reshape(mu, (*mu.shape, 1))
        sigma = ad.reshape(sigma, (*sigma.shape, 1))
    z = ad.div(ad.sub(k, mu), sigma)
    return ad.exp(ad.mul(ad.mul(z, z), -0.5))


def fixed_window(cfg: DynamicStftConfig) -> np.ndarray:
    """The synthesis/ablation window: Gaussian at (mu_init, sigma_init)."""
    k = np.arange(cfg.win_len) - (cfg.win_len - 1) / 2.0
    z = (k - cfg.mu_init_samples) / cfg.sigma_init_samples
    return np.exp(-0.5 * z * z)


def stft_with_window(x: Tensor, window: Tensor, cfg: DynamicStftConfig,
                     n_frames: int | None = None) -> Tensor:
    """STFT of (M, N) with an explicit window: either (K,) shared or (M, T, K)
    per frame. Output (2M, T, F) with Re/Im interleaved per mic."""
    if x.ndim != 2:
        raise ShapeError(f"expected (M, N) waveform, got {x.shape}")
    m, n = x.shape
    t = cfg.n_frames(n) if n_frames is None else n_frames
    frames = ad.frame(x, cfg.win_len, cfg.hop, t)           # (M, T, K)
    window = window if isinstance(window, Tensor) else Tensor(window)
    if window.ndim == 3 and window.shape != (m, t, cfg.win_len):
        raise ShapeError(f"window shape {window.shape} does not match frames {(m, t, cfg.win_len)}")
    tapered = ad.mul(frames, window)
    cos_b, sin_b = _dft_bases(cfg.win_len)
    re = ad.matmul(tapered, Tensor(cos_b))                  # (M, T, F)
    im = ad.matmul(tapered, Tensor(sin_b))
    out = ad.stack([re, im], axis=1)                        # (M, 2, T, F)
    return ad.reshape(out, (2 * m, t, cfg.n_bins))


def dynamic_stft(x: Tensor, wp: WindowParams, cfg: DynamicStftConfig) -> Tensor:
    """STFT with the per-frame learnable Gaussian window; gradients flow to
    the waveform and to mu/sigma."""
    m, n = x.shape
    t = cfg.n_frames(n)
    if wp.shape != (m, t):
        raise ShapeError(f"window params {wp.shape} do not match waveform frames {(m, t)}")
    return stft_with_window(x, gaussian_window(wp.mu, wp.sigma, cfg.win_len), cfg, n_frames=t)


def fixed_stft(x: Tensor, cfg: DynamicStftConfig) -> Tensor:
    """STFT with the time-invariant initial Gaussian window."""
    return stft_with_window(x, Tensor(fixed_window(cfg)), cfg)


def _ola_norm(cfg: DynamicStftConfig, n_frames: int) -> tuple[np.ndarray, np.ndarray]:
    w2 = fixed_window(cfg) ** 2
    tiled = np.broadcast_to(w2, (n_frames, cfg.win_len))
    norm = ad.overlap_add(Tensor(tiled), cfg.hop, cfg.padded_len(n_frames)).data
    dead = norm <= OLA_FLOOR
    return np.where(dead, 1.0, norm), dead


def inverse_stft(spec: Tensor, cfg: DynamicStftConfig, out_len: int) -> Tensor:
    """Synthesise (M, out_len) from a (2M, T, F) spectrogram using the fixed
    window and squared-window overlap-add normalisation (floor 1e-8; regions
    with no window coverage come back as zeros and raise a warning)."""
    if spec.ndim != 3 or spec.shape[0] % 2 or spec.shape[2] != cfg.n_bins:
        raise ShapeError(f"expected (2M, T, {cfg.n_bins}) spectrogram, got {spec.shape}")
    m2, t, f = spec.shape
    m = m2 // 2
    icos, isin = _idft_bases(cfg.win_len)
    spec = ad.reshape(spec, (m, 2, t, f))
    re, im = spec[:, 0], spec[:, 1]
    frames = ad.add(ad.matmul(re, Tensor(icos)), ad.matmul(im, Tensor(isin)))  # (M, T, K)
    frames = ad.mul(frames, Tensor(fixed_window(cfg)))
    full = ad.overlap_add(frames, cfg.hop, cfg.padded_len(t))
    norm, dead = _ola_norm(cfg, t)
    if dead.any():
        warnings.warn("inverse_stft: regions without window coverage were zero-filled")
        full = ad.mul(full, Tensor(np.where(dead, 0.0, 1.0)))
    out = ad.div(full, Tensor(norm))
    return out[:, :out_len]


class WindowPredictor(Module):
    """Predicts (mu, sigma) per microphone and frame.

    A single conv kernel (window-sized, hop-strided) is shared across
    microphones; two zero-initialised linear heads project its features to mu
    and sigma, so the initial prediction is exactly (mu_init, sigma_init).
    ``time_invariant=True`` mean-pools the features over frames before the
    heads, giving one learned window per microphone.
    """

    def __init__(self, cfg: DynamicStftConfig, rng: np.random.Generator,
                 time_invariant: bool = False):
        super().__init__()
        self.cfg = cfg
        self.time_invariant = time_invariant
        self.conv_w = self.add_param(
            "conv_w", uniform_init(rng, (cfg.win_len, cfg.predictor_width), cfg.win_len))
        self.conv_b = self.add_param("conv_b", np.zeros(cfg.predictor_width))
        self.head_mu = Linear(cfg.predictor_width, 1, rng, zero_init=True)
        self.head_sigma = Linear(cfg.predictor_width, 1, rng, zero_init=True)
        self._sigma_bias = softplus_inverse(cfg.sigma_init_samples)

    def __call__(self, x: Tensor) -> WindowParams:
        cfg = self.cfg
        m, n = x.shape
        t = cfg.n_frames(n)
        frames = ad.frame(x, cfg.win_len, cfg.hop, t)
        feats = ad.add(ad.matmul(frames, self.conv_w), self.conv_b)   # (M, T, D)
        if self.time_invariant:
            feats = ad.tmean(feats, axis=1, keepdims=True)            # (M, 1, D)
        mu = ad.add(ad.reshape(self.head_mu(feats), feats.shape[:2]), cfg.mu_init_samples)
        sigma = ad.softplus(ad.add(ad.reshape(self.head_sigma(feats), feats.shape[:2]),
                                   self._sigma_bias))
        if self.time_invariant:
            ones = Tensor(np.ones((1, t)))
            mu, sigma = ad.mul(mu, ones), ad.mul(sigma, ones)
        return WindowParams(mu=mu, sigma=sigma)


class UpConvEmbed(Module):
    """3x3 conv (padding 1) from 2M spectrogram channels to the embedding
    width, followed by layer normalisation over channels; T and F are
    preserved."""

    def __init__(self, n_mics: int, cfg: DynamicStftConfig, rng: np.random.Generator):
        super().__init__()
        self.n_in = 2 * n_mics
        self.conv = Conv2d(self.n_in, cfg.embed_channels, rng=rng)
        self.norm = LayerNorm(cfg.embed_channels, axis=0)

    def __call__(self, spec: Tensor) -> Tensor:
        if spec.shape[0] != self.n_in:
            raise ShapeError(f"expected {self.n_in} spectrogram channels, got {spec.shape[0]}")
        out = self.conv(ad.reshape(spec, (1, *spec.shape)))
        return self.norm(ad.reshape(out, out.shape[1:]))


def window_trace_rows(wp: WindowParams, cfg: DynamicStftConfig) -> list[tuple]:
    """Rows of (mic, frame, t_s, mu_ms, sigma_ms) for the diagnostic dump."""
    mu, sigma = wp.mu.data, wp.sigma.data
    to_ms = 1000.0 / cfg.sample_rate
    rows = []
    for m in range(mu.shape[0]):
        for t in range(mu.shape[1]):
            rows.append((m, t, t * cfg.hop / cfg.sample_rate,
                         mu[m, t] * to_ms, sigma[m, t] * to_ms))
    return rows
