"""The model graph: embedding aggregator, object splitter, per-object
sub-decoders (audio direct/reverb/noise, event detection, direction of
arrival), and the second-stage refinement pass (cross-attention between the
first-pass event and direction streams -> feature-wise modulation of the
aggregated features -> a fresh splitter and decoder bank).

Slot discipline: the splitter emits J+1 object feature maps; the last slot
is the noise object. Foreground decoders share parameters across slots and
are applied slot by slot, so permuting object features permutes every
decoder head identically and all heads inherit one object permutation.

Stage discipline: ``forward_net1`` runs the encoder and first decoder bank;
``forward_net2`` consumes the recorded state and runs only second-stage
modules, so freezing stage 1 during stage-2 training is a parameter-set
property (see ``net1_parameters``/``net2_parameters``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .frontend import (DynamicStftConfig, UpConvEmbed, WindowParams,
                       WindowPredictor, dynamic_stft, fixed_stft, inverse_stft)
from .nnet import (Conv2d, Dropout, Gru, LayerNorm, Linear, Module,
                   MultiHeadAttention, adaptive_avg_pool1d, avg_pool2d,
                   uniform_init)

DYNAMIC_WINDOW_MODES = ("on", "time_invariant", "off")


@dataclass(frozen=True)
class ModelConfig:
    n_mics: int = 4
    n_slots: int = 5                  # foreground objects J (noise slot extra)
    n_classes: int = 13
    embed_channels: int = 64          # C_feat
    n_blocks: int = 6
    sample_rate: int = 16000
    duration_s: float = 4.0
    win_len: int = 640
    hop: int = 320
    t_out: int = 40
    patch_t: int = 4
    patch_f: int = 64
    d_patch_embed: int = 768
    n_patch_blocks: int = 2
    d_branch: int = 320
    conv_ch: int = 64
    d_head: int = 512
    d_attn: int = 64
    d_clue: int = 64
    n_heads: int = 2
    ffn_mult: int = 4
    predictor_width: int = 64
    dropout: float = 0.5
    # ablation flags (structural; see the run harness for the matching rows)
    dynamic_window: str = "on"
    use_noise_decoder: bool = True
    split_direct_reverb: bool = True
    use_coi: bool = True
    tcm_sed_branch: bool = True
    tcm_doa_branch: bool = True
    tcm_cross_object: bool = False

    def __post_init__(self):
        if self.n_slots < 1:
            raise ConfigError("n_slots must be >= 1")
        if self.dynamic_window not in DYNAMIC_WINDOW_MODES:
            raise ConfigError(f"dynamic_window must be one of {DYNAMIC_WINDOW_MODES}")
        if self.n_frames % self.t_out:
            raise ConfigError(
                f"encoder frames {self.n_frames} not divisible by t_out {self.t_out}")
        if self.n_frames % self.patch_t:
            raise ConfigError(
                f"encoder frames {self.n_frames} not divisible by patch_t {self.patch_t}")
        if self.patch_f > self.n_bins:
            raise ConfigError(f"patch_f {self.patch_f} exceeds {self.n_bins} bins")
        if self.use_coi and not (self.tcm_sed_branch or self.tcm_doa_branch):
            raise ConfigError("at least one tcm branch must stay enabled")

    @property
    def stft(self) -> DynamicStftConfig:
        return DynamicStftConfig(
            sample_rate=self.sample_rate, win_len=self.win_len, hop=self.hop,
            predictor_width=self.predictor_width, embed_channels=self.embed_channels)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))

    @property
    def n_frames(self) -> int:
        return -(-self.n_samples // self.hop)

    @property
    def n_bins(self) -> int:
        return self.win_len // 2 + 1

    @property
    def upsample_stride(self) -> int:
        return self.n_frames // self.t_out

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(n_mics=2, n_slots=2, embed_channels=16, n_blocks=2,
                    sample_rate=8000, duration_s=1.0, win_len=320, hop=160,
                    t_out=10, patch_t=2, patch_f=32, d_patch_embed=48,
                    d_branch=32, conv_ch=16, d_head=64, d_attn=16, d_clue=16,
                    predictor_width=16)
        base.update(kw)
        return cls(**base)

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        base = dict(n_mics=2, n_slots=2, n_classes=5, embed_channels=8,
                    n_blocks=1, sample_rate=4000, duration_s=0.5, win_len=160,
                    hop=80, t_out=5, patch_t=5, patch_f=16, d_patch_embed=16,
                    n_patch_blocks=1, d_branch=8, conv_ch=8, d_head=8,
                    d_attn=8, d_clue=8, predictor_width=8)
        base.update(kw)
        return cls(**base)


@dataclass
class AsaEstimate:
    """Per-object decoded outputs sharing one slot permutation."""

    class_posterior: Tensor          # (J, C) rows on the simplex
    activation: Tensor               # (J, T_out) in [0, 1]
    event_map: Tensor                # (J, T_out, C) in [0, 1]
    doa: Tensor                      # (J, T_out, 3) in (-1, 1)
    direct_wav: Tensor               # (J, M, N)
    reverb_wav: Tensor | None        # (J, M, N); None when the split is off
    noise_wav: Tensor | None         # (M, N); None without the noise decoder


@dataclass
class CoiState:
    """Everything stage 2 needs from a stage-1 forward."""

    z: Tensor                            # aggregated features (C, T, F)
    net1: AsaEstimate
    window_params: WindowParams | None
    net2: AsaEstimate | None = None
    attention_maps: dict = field(default_factory=dict)


class FeedForward(Module):
    def __init__(self, d_model: int, mult: int, rng):
        super().__init__()
        self.norm = LayerNorm(d_model)
        self.up = Linear(d_model, mult * d_model, rng)
        self.down = Linear(mult * d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.down(ad.mish(self.up(self.norm(x)))))


class AttentionUnit(Module):
    def __init__(self, d_model: int, n_heads: int, rng):
        super().__init__()
        self.norm = LayerNorm(d_model)
        self.mha = MultiHeadAttention(d_model, n_heads, rng)

    def __call__(self, x: Tensor) -> Tensor:
        out, _ = self.mha(self.norm(x))
        return ad.add(x, out)


class GatedConvBlock(Module):
    """Residual sigmoid-gated convolution: gate from a pointwise conv,
    content from a 3x3 conv."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.norm = LayerNorm(channels, axis=1)
        self.gate = Conv2d(channels, channels, kernel=(1, 1), padding=(0, 0), rng=rng)
        self.main = Conv2d(channels, channels, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        u = self.norm(x)
        return ad.add(x, ad.mul(ad.sigmoid(self.gate(u)), self.main(u)))


class AggregatorBlock(Module):
    """Temporal attention + FFN, spectral attention + FFN, gated conv; all
    residual, shape-preserving on (C, T, F)."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        c = cfg.embed_channels
        self.t_attn = AttentionUnit(c, cfg.n_heads, rng)
        self.t_ffn = FeedForward(c, cfg.ffn_mult, rng)
        self.f_attn = AttentionUnit(c, cfg.n_heads, rng)
        self.f_ffn = FeedForward(c, cfg.ffn_mult, rng)
        self.gcb = GatedConvBlock(c, rng)

    def __call__(self, z: Tensor) -> Tensor:
        x = ad.transpose(z, (2, 1, 0))            # (F, T, C): sequences over T
        x = self.t_ffn(self.t_attn(x))
        y = ad.transpose(x, (1, 0, 2))            # (T, F, C): sequences over F
        y = self.f_ffn(self.f_attn(y))
        z2 = ad.transpose(y, (2, 0, 1))           # back to (C, T, F)
        z3 = self.gcb(ad.reshape(z2, (1, *z2.shape)))
        return ad.reshape(z3, z2.shape)


class FeatureAggregator(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.blocks = [AggregatorBlock(cfg, rng) for _ in range(cfg.n_blocks)]

    def __call__(self, z: Tensor) -> Tensor:
        for block in self.blocks:
            z = block(z)
        return z


class ObjectSplitter(Module):
    """3x3 conv from C to (J+1)*C channels, reshaped to J+1 object slots;
    slot J is the noise object."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.n_slots = cfg.n_slots
        self.channels = cfg.embed_channels
        self.conv = Conv2d(cfg.embed_channels, (cfg.n_slots + 1) * cfg.embed_channels,
                           rng=rng)

    def __call__(self, z: Tensor) -> Tensor:
        out = self.conv(ad.reshape(z, (1, *z.shape)))
        _, _, t, f = out.shape
        return ad.reshape(out, (self.n_slots + 1, self.channels, t, f))


class AudioDecoder(Module):
    """Object feature -> complex spectrogram (2M channels) -> waveform via
    the fixed-window inverse transform."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.conv1 = Conv2d(cfg.embed_channels, cfg.conv_ch, rng=rng)
        self.norm = LayerNorm(cfg.conv_ch, axis=1)
        self.conv2 = Conv2d(cfg.conv_ch, 2 * cfg.n_mics, rng=rng)

    def __call__(self, obj: Tensor, out_len: int) -> Tensor:
        x = ad.reshape(obj, (1, *obj.shape))
        x = ad.mish(self.norm(self.conv1(x)))
        spec = self.conv2(x)
        spec = ad.reshape(spec, spec.shape[1:])
        return inverse_stft(spec, self.cfg.stft, out_len)


class AttentiveStatsPool(Module):
    """Attention-weighted mean/std pooling over time followed by a linear
    classifier head."""

    def __init__(self, d_in: int, d_out: int, rng, d_hidden: int = 64):
        super().__init__()
        self.score1 = Linear(d_in, d_hidden, rng)
        self.score2 = Linear(d_hidden, 1, rng)
        self.out = Linear(2 * d_in, d_out, rng)

    def __call__(self, h: Tensor) -> Tensor:
        scores = self.score2(ad.tanh(self.score1(h)))          # (T, 1)
        alpha = ad.softmax(ad.transpose(scores, (1, 0)), axis=-1)  # (1, T)
        mean = ad.matmul(alpha, h)                              # (1, d)
        sq = ad.matmul(alpha, ad.mul(h, h))
        var = ad.clip(ad.sub(sq, ad.mul(mean, mean)), 1e-12, 1e12)
        stats = ad.concat([mean, ad.sqrt(var)], axis=1)         # (1, 2d)
        return ad.reshape(self.out(stats), (self.out.w.shape[1],))


class ConvStage(Module):
    """Conv2d + channel layer norm + Mish, optionally followed by an average
    pool given as (time, freq) factors."""

    def __init__(self, c_in: int, c_out: int, pool: tuple[int, int] | None, rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, rng=rng)
        self.norm = LayerNorm(c_out, axis=1)
        self.pool = pool

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.mish(self.norm(self.conv(x)))
        if self.pool is not None:
            x = avg_pool2d(x, self.pool)
        return x


class SedDecoder(Module):
    """Three-branch event decoder.

    Patch branch: the object feature is cut into (patch_t x patch_f) patches
    flattened along channels, projected, run through a small transformer
    encoder, pooled to T_out steps and projected to the branch width (a
    trainable stand-in for an external pre-trained patch encoder with the
    same input/output plumbing). Time branch: seven 3x3 conv stages whose
    first pool brings the frame axis to T_out and whose later pools halve
    the frequency axis; its features concatenate with the patch branch and
    feed a time-axis GRU. Frequency branch: two conv stages pooling mostly
    along time, a frequency-axis GRU, and global pooling.

    Heads: sigmoid timestamp (T_out,), sigmoid event map (T_out, C), and a
    softmax class posterior from attentive-stats-pooled logits superposed
    with the frequency-branch logits.
    """

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        c, ch = cfg.embed_channels, cfg.conv_ch
        r = cfg.upsample_stride
        self.patch_in = Linear(c * cfg.patch_t * cfg.patch_f, cfg.d_patch_embed, rng)
        self.patch_attn = [AttentionUnit(cfg.d_patch_embed, cfg.n_heads, rng)
                           for _ in range(cfg.n_patch_blocks)]
        self.patch_ffn = [FeedForward(cfg.d_patch_embed, cfg.ffn_mult, rng)
                          for _ in range(cfg.n_patch_blocks)]
        self.patch_out = Linear(cfg.d_patch_embed, cfg.d_branch, rng)

        pools = [(r, 2)] + [(1, 2)] * 5 + [None]
        chans = [c] + [ch] * 7
        self.t_stages = [ConvStage(chans[i], chans[i + 1], pools[i], rng)
                         for i in range(7)]
        f_rem = cfg.n_bins
        for p in pools[:-1]:
            f_rem = max(f_rem // p[1], 1)
        self.t_merge = Linear(ch * f_rem + cfg.d_branch, cfg.d_branch, rng)
        self.t_gru = Gru(cfg.d_branch, cfg.d_branch, rng)

        self.f_stages = [ConvStage(c, ch, (r, 4), rng),
                         ConvStage(ch, ch, (4, 4), rng)]
        t_f = max(cfg.t_out // 4, 1)
        self.f_gru = Gru(ch * t_f, cfg.d_branch, rng)
        self.f_fc1 = Linear(cfg.d_branch, cfg.d_head, rng)
        self.f_fc2 = Linear(cfg.d_head, cfg.n_classes, rng)

        self.ts_fc1 = Linear(cfg.d_branch, cfg.d_head, rng)
        self.ts_fc2 = Linear(cfg.d_head, 1, rng)
        self.ev_fc1 = Linear(cfg.d_branch, cfg.d_head, rng)
        self.ev_fc2 = Linear(cfg.d_head, cfg.n_classes, rng)
        self.asp = AttentiveStatsPool(cfg.d_branch, cfg.n_classes, rng,
                                      d_hidden=min(64, cfg.d_head))
        self.drop = Dropout(cfg.dropout)

    def _patch_branch(self, obj: Tensor) -> Tensor:
        cfg = self.cfg
        c, t, f = obj.shape
        f_keep = (f // cfg.patch_f) * cfg.patch_f
        x = obj[:, :, :f_keep]
        nt, nf = t // cfg.patch_t, f_keep // cfg.patch_f
        x = ad.reshape(x, (c, nt, cfg.patch_t, nf, cfg.patch_f))
        x = ad.transpose(x, (1, 3, 0, 2, 4))          # (nt, nf, C, pt, pf)
        tokens = ad.reshape(x, (nt * nf, c * cfg.patch_t * cfg.patch_f))
        h = self.patch_in(tokens)
        for attn, ffn in zip(self.patch_attn, self.patch_ffn):
            h = ffn(attn(h))
        h = adaptive_avg_pool1d(h, cfg.t_out)
        return self.patch_out(h)                       # (T_out, d_branch)

    def __call__(self, obj: Tensor, rng=None):
        cfg = self.cfg
        patch = self._patch_branch(obj)

        x = ad.reshape(obj, (1, *obj.shape))
        for stage in self.t_stages:
            x = stage(x)
        _, ch, t_out, f_rem = x.shape
        tx = ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (t_out, ch * f_rem))
        h = self.t_merge(ad.concat([tx, patch], axis=1))
        h = self.t_gru(h)                              # (T_out, d_branch)

        y = ad.reshape(obj, (1, *obj.shape))
        for stage in self.f_stages:
            y = stage(y)
        _, ch2, t_f, f_f = y.shape
        fy = ad.reshape(ad.transpose(y, (0, 3, 1, 2)), (f_f, ch2 * t_f))
        fh = self.f_gru(fy)                            # (F_seq, d_branch)
        f_pooled = ad.tmean(fh, axis=0, keepdims=True)
        f_logits = self.f_fc2(self.drop(self.f_fc1(f_pooled), rng))

        timestamp = ad.sigmoid(ad.reshape(
            self.ts_fc2(self.drop(self.ts_fc1(h), rng)), (cfg.t_out,)))
        event_map = ad.sigmoid(self.ev_fc2(self.drop(self.ev_fc1(h), rng)))
        asp_logits = self.asp(h)
        logits = ad.add(asp_logits, ad.reshape(f_logits, (cfg.n_classes,)))
        posterior = ad.softmax(logits, axis=-1)
        return posterior, timestamp, event_map


class DoaDecoder(Module):
    """Conv stages pooling frequency down, the remaining channel-frequency
    grid folded into the time-axis GRU features, and a tanh head emitting
    one Cartesian vector per output frame."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        r = cfg.upsample_stride
        self.stages = [ConvStage(cfg.embed_channels, cfg.conv_ch, (r, 2), rng),
                       ConvStage(cfg.conv_ch, cfg.conv_ch, (1, 2), rng),
                       ConvStage(cfg.conv_ch, cfg.conv_ch, (1, 2), rng)]
        f_rem = cfg.n_bins
        for _ in range(3):
            f_rem = max(f_rem // 2, 1)
        self.gru = Gru(cfg.conv_ch * f_rem, cfg.d_branch, rng)
        self.head = Linear(cfg.d_branch, 3, rng)

    def __call__(self, obj: Tensor) -> Tensor:
        x = ad.reshape(obj, (1, *obj.shape))
        for stage in self.stages:
            x = stage(x)
        _, ch, t_out, f_rem = x.shape
        x = ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (t_out, ch * f_rem))
        vec = ad.tanh(self.head(self.gru(x)))   # (T_out, 3), coords in (-1, 1)
        # cap the vector norm at 1 so the stream stays within the unit ball
        norm = ad.sqrt(ad.add(ad.tsum(ad.mul(vec, vec), axis=-1, keepdims=True),
                              1e-12))
        return ad.div(vec, ad.clip(norm, 1.0, 1e30))


class DecoderBank(Module):
    """All sub-decoders of one stage, applied slot by slot with shared
    parameters so slot permutations commute with decoding."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.direct = AudioDecoder(cfg, rng)
        self.reverb = AudioDecoder(cfg, rng) if cfg.split_direct_reverb else None
        self.noise = AudioDecoder(cfg, rng) if cfg.use_noise_decoder else None
        self.sed = SedDecoder(cfg, rng)
        self.doa = DoaDecoder(cfg, rng)

    def decode(self, obj_features: Tensor, out_len: int, rng=None) -> AsaEstimate:
        cfg = self.cfg
        if obj_features.shape[0] != cfg.n_slots + 1:
            raise ShapeError(
                f"expected {cfg.n_slots + 1} object slots, got {obj_features.shape[0]}")
        posts, acts, events, doas, directs, reverbs = [], [], [], [], [], []
        for j in range(cfg.n_slots):
            obj = obj_features[j]
            post, act, ev = self.sed(obj, rng)
            posts.append(post)
            acts.append(act)
            events.append(ev)
            doas.append(self.doa(obj))
            directs.append(self.direct(obj, out_len))
            if self.reverb is not None:
                reverbs.append(self.reverb(obj, out_len))
        noise = self.noise(obj_features[cfg.n_slots], out_len) if self.noise else None
        return AsaEstimate(
            class_posterior=ad.stack(posts), activation=ad.stack(acts),
            event_map=ad.stack(events), doa=ad.stack(doas),
            direct_wav=ad.stack(directs),
            reverb_wav=ad.stack(reverbs) if reverbs else None,
            noise_wav=noise)


class Tcm(Module):
    """Temporal coherence matching: bidirectional cross-attention between the
    event stream (event map + activation tokens) and the DoA stream, per
    object with shared weights; branch outputs pass individual linear layers,
    are superposed, summed over objects, and upsampled to the encoder frame
    rate by a transposed convolution."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.sed_proj = Linear(cfg.n_classes + 1, cfg.d_attn, rng)
        self.doa_proj = Linear(3, cfg.d_attn, rng)
        if cfg.tcm_sed_branch:
            self.sed_attn = MultiHeadAttention(cfg.d_attn, cfg.n_heads, rng)
            self.sed_out = Linear(cfg.d_attn, cfg.d_clue, rng)
        if cfg.tcm_doa_branch:
            self.doa_attn = MultiHeadAttention(cfg.d_attn, cfg.n_heads, rng)
            self.doa_out = Linear(cfg.d_attn, cfg.d_clue, rng)
        r = cfg.upsample_stride
        self.up_w = self.add_param(
            "up_w", uniform_init(rng, (cfg.d_clue, cfg.d_clue, r), cfg.d_clue * r))

    def __call__(self, est: AsaEstimate) -> tuple[Tensor, dict]:
        cfg = self.cfg
        sed_tokens, doa_tokens = [], []
        for j in range(cfg.n_slots):
            sed_in = ad.concat(
                [est.event_map[j], ad.reshape(est.activation[j], (cfg.t_out, 1))],
                axis=1)
            sed_tokens.append(self.sed_proj(sed_in))
            doa_tokens.append(self.doa_proj(est.doa[j]))
        maps: dict[tuple[int, str], np.ndarray] = {}
        clue = None
        for j in range(cfg.n_slots):
            if cfg.tcm_cross_object:
                kv_doa = ad.concat(doa_tokens, axis=0)
                kv_sed = ad.concat(sed_tokens, axis=0)
            else:
                kv_doa, kv_sed = doa_tokens[j], sed_tokens[j]
            parts = []
            if cfg.tcm_sed_branch:
                att, w = self.sed_attn(sed_tokens[j], kv_doa)
                maps[(j, "sed_query")] = w.data
                parts.append(self.sed_out(ad.add(sed_tokens[j], att)))
            if cfg.tcm_doa_branch:
                att, w = self.doa_attn(doa_tokens[j], kv_sed)
                maps[(j, "doa_query")] = w.data
                parts.append(self.doa_out(ad.add(doa_tokens[j], att)))
            obj_clue = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
            clue = obj_clue if clue is None else ad.add(clue, obj_clue)
        up = ad.conv_transpose1d(clue, self.up_w, stride=cfg.upsample_stride,
                                 out_len=cfg.n_frames)
        return up, maps   # (d_clue, T)


class FilmFusion(Module):
    """Per-channel, per-frame affine modulation of the aggregated features,
    broadcast over frequency. Heads are zero-initialised, so the initial
    modulation is the identity (gamma = 1, beta = 0)."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.gamma_head = Linear(cfg.d_clue, cfg.embed_channels, rng, zero_init=True)
        self.beta_head = Linear(cfg.d_clue, cfg.embed_channels, rng, zero_init=True)

    def __call__(self, z: Tensor, clue: Tensor) -> Tensor:
        ct = ad.transpose(clue, (1, 0))                       # (T, d_clue)
        gamma = ad.add(ad.transpose(self.gamma_head(ct), (1, 0)), 1.0)
        beta = ad.transpose(self.beta_head(ct), (1, 0))       # (C, T)
        gamma = ad.reshape(gamma, (*gamma.shape, 1))
        beta = ad.reshape(beta, (*beta.shape, 1))
        return ad.add(ad.mul(z, gamma), beta)


class AsaModel(Module):
    """Two-stage model. Stage 1: window predictor -> dynamic STFT -> embed ->
    aggregate -> split -> decode. Stage 2: cross-attend stage-1 event/DoA
    streams into a clue, modulate the aggregated features, split and decode
    again with fresh parameters."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x0DE1, seed)))
        if cfg.dynamic_window != "off":
            self.predictor = WindowPredictor(
                cfg.stft, rng, time_invariant=cfg.dynamic_window == "time_invariant")
        else:
            self.predictor = None
        self.upconv = UpConvEmbed(cfg.n_mics, cfg.stft, rng)
        self.aggregator = FeatureAggregator(cfg, rng)
        self.splitter1 = ObjectSplitter(cfg, rng)
        self.dec1 = DecoderBank(cfg, rng)
        if cfg.use_coi:
            self.tcm = Tcm(cfg, rng)
            self.film = FilmFusion(cfg, rng)
            self.splitter2 = ObjectSplitter(cfg, rng)
            self.dec2 = DecoderBank(cfg, rng)

    def _net2_prefixes(self) -> tuple[str, ...]:
        return ("tcm/", "film/", "splitter2/", "dec2/")

    def net1_parameters(self) -> dict[str, Tensor]:
        pre = self._net2_prefixes()
        return {k: v for k, v in self.named_parameters().items()
                if not k.startswith(pre)}

    def net2_parameters(self) -> dict[str, Tensor]:
        pre = self._net2_prefixes()
        return {k: v for k, v in self.named_parameters().items()
                if k.startswith(pre)}

    def encode(self, x) -> tuple[Tensor, WindowParams | None]:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.shape != (self.cfg.n_mics, self.cfg.n_samples):
            raise ShapeError(
                f"expected waveform {(self.cfg.n_mics, self.cfg.n_samples)}, got {x.shape}")
        if self.predictor is not None:
            wp = self.predictor(x)
            spec = dynamic_stft(x, wp, self.cfg.stft)
        else:
            wp = None
            spec = fixed_stft(x, self.cfg.stft)
        z = self.aggregator(self.upconv(spec))
        return z, wp

    def forward_net1(self, x, rng=None) -> CoiState:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        z, wp = self.encode(x)
        objf = self.splitter1(z)
        est = self.dec1.decode(objf, x.shape[1], rng)
        return CoiState(z=z, net1=est, window_params=wp)

    def forward_net2(self, state: CoiState, rng=None) -> CoiState:
        if not self.cfg.use_coi:
            raise ConfigError("model was built without the refinement stage")
        if state.net1 is None or state.z is None:
            raise ConfigError("stage 2 requires a completed stage-1 forward")
        clue, maps = self.tcm(state.net1)
        z2 = self.film(state.z, clue)
        objf = self.splitter2(z2)
        n_out = self.cfg.n_samples
        state.net2 = self.dec2.decode(objf, n_out, rng)
        state.attention_maps = maps
        return state

    def forward(self, x, rng=None, run_net2: bool | None = None) -> CoiState:
        state = self.forward_net1(x, rng)
        if run_net2 is None:
            run_net2 = self.cfg.use_coi
        if run_net2:
            self.forward_net2(state, rng)
        return state

    def init_net2_from_net1(self) -> None:
        """Initialise the stage-2 splitter and decoders as copies of stage 1.
        With the zero-initialised modulation heads this makes stage 2 the
        identity refinement of stage 1."""
        if not self.cfg.use_coi:
            raise ConfigError("model was built without the refinement stage")
        self.splitter2.copy_state_from(self.splitter1)
        self.dec2.copy_state_from(self.dec1)
        for head in (self.film.gamma_head, self.film.beta_head):
            head.w.data = np.zeros_like(head.w.data)
            head.b.data = np.zeros_like(head.b.data)
