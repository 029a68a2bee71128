"""Deterministic synthetic spatial-scene generator and dataset persistence.

A scene is a multichannel mixture that decomposes sample-exactly into
per-object direct and reverberant parts plus background noise:

    mixture = sum_j (direct_j + reverb_j) + noise

with full ground truth (class, onset/offset, DoA trajectory at 100 ms hops).
Sources are parametric class prototypes (13 distinguishable spectro-temporal
signatures) rendered through a far-field fractional-delay model for the
direct path and an exponentially decaying noise impulse response for the
reverberant tail. Everything is a pure function of (config, seed).

Stems are snapped to float32 precision before the mixture is formed, so the
32-bit WAV files round-trip bit-exactly and the loader can rebuild the
mixture with the identical summation order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve, lfilter

from .errors import ConfigError, DataError

SPEED_OF_SOUND = 343.0
ANNOTATION_HOP_S = 0.1
MANIFEST_VERSION = 1

CLASS_NAMES = [
    "speech_low", "speech_high", "telephone", "knock", "door_slam",
    "music_chords", "siren", "chirp_train", "alarm_beeps", "domestic_noise",
    "water_flow", "bird_tweets", "machine_hum",
]


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions in meters, relative to the array centre."""

    positions: tuple[tuple[float, float, float], ...]
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if len(self.positions) < 2:
            raise ConfigError("geometry needs at least two microphones")
        pts = {tuple(p) for p in self.positions}
        if len(pts) != len(self.positions):
            raise ConfigError("microphone positions must be distinct")

    @property
    def n_mics(self) -> int:
        return len(self.positions)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.positions, dtype=np.float64)

    @classmethod
    def tetrahedron(cls, circumradius: float = 0.042) -> "ArrayGeometry":
        base = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
        pts = base / np.sqrt(3.0) * circumradius
        return cls(positions=tuple(map(tuple, pts)))

    @classmethod
    def pair(cls, spacing: float = 0.06) -> "ArrayGeometry":
        h = spacing / 2.0
        return cls(positions=((-h, 0.0, 0.0), (h, 0.0, 0.0)))


@dataclass(frozen=True)
class SceneConfig:
    duration_s: float = 4.0
    sample_rate: int = 16000
    max_objects: int = 5
    min_objects: int = 1
    snr_range_db: tuple[float, float] = (5.0, 20.0)
    rt60_range_s: tuple[float, float] = (0.2, 0.8)
    max_angular_speed_deg: float = 45.0
    n_classes: int = 13
    drr_range_db: tuple[float, float] = (3.0, 12.0)
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry.tetrahedron)

    def __post_init__(self):
        if self.max_objects < 1 or not (1 <= self.min_objects <= self.max_objects):
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.n_classes < self.max_objects or self.n_classes > len(CLASS_NAMES):
            raise ConfigError(f"n_classes must lie in [{self.max_objects}, {len(CLASS_NAMES)}]")
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ConfigError("duration and sample rate must be positive")
        for name in ("snr_range_db", "rt60_range_s", "drr_range_db"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ConfigError(f"{name} is empty: {(lo, hi)}")
        if self.rt60_range_s[0] <= 0:
            raise ConfigError("rt60 must be positive")
        if abs(self.n_annotation_frames * ANNOTATION_HOP_S - self.duration_s) > 1e-9:
            raise ConfigError("duration must be a whole number of 100 ms annotation hops")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))

    @property
    def n_annotation_frames(self) -> int:
        return int(round(self.duration_s / ANNOTATION_HOP_S))

    @classmethod
    def tiny(cls) -> "SceneConfig":
        return cls(duration_s=1.0, sample_rate=8000, max_objects=2,
                   snr_range_db=(10.0, 20.0), rt60_range_s=(0.15, 0.3),
                   geometry=ArrayGeometry.pair())


@dataclass
class SpatialScene:
    """One mixture plus exhaustive ground truth. Arrays are float64 whose
    values are float32-representable; ``mixture`` is always the float64 sum
    of the stems in fixed order (objects ascending, direct then reverb, noise
    last)."""

    sample_rate: int
    seed: int
    class_ids: np.ndarray        # (J,)
    onsets_s: np.ndarray         # (J,)
    offsets_s: np.ndarray        # (J,)
    trajectories: np.ndarray     # (J, H, 3) unit vectors at 100 ms hops
    direct: np.ndarray           # (J, M, N)
    reverb: np.ndarray           # (J, M, N)
    noise: np.ndarray            # (M, N)
    mixture: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mixture = mix_stems(self.direct, self.reverb, self.noise)

    @property
    def n_objects(self) -> int:
        return len(self.class_ids)

    @property
    def n_mics(self) -> int:
        return self.noise.shape[0]

    @property
    def n_samples(self) -> int:
        return self.noise.shape[1]

    def residual(self) -> np.ndarray:
        """mixture minus the recomputed stem sum; zero by construction."""
        return self.mixture - mix_stems(self.direct, self.reverb, self.noise)

    def activation_frames(self, obj: int) -> np.ndarray:
        """Boolean annotation-grid activity for one object."""
        n = self.trajectories.shape[1]
        edges = np.arange(n) * ANNOTATION_HOP_S
        return (edges < self.offsets_s[obj]) & (edges + ANNOTATION_HOP_S > self.onsets_s[obj])


def mix_stems(direct: np.ndarray, reverb: np.ndarray, noise: np.ndarray) -> np.ndarray:
    out = np.zeros_like(noise)
    for j in range(direct.shape[0]):
        out += direct[j]
        out += reverb[j]
    out += noise
    return out


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# class prototypes
# ---------------------------------------------------------------------------

def _cap(freq: float, sr: int) -> float:
    return min(freq, 0.42 * sr)


def _harmonic_stack(t, f0, n_harm, amps, rng):
    out = np.zeros_like(t)
    for h in range(1, n_harm + 1):
        out += amps(h) * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    return out


def _speech_like(t, sr, rng, f0_base):
    f0 = f0_base * (1 + 0.06 * np.sin(2 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = max(int(_cap(f0_base * 12, sr) / f0_base), 3)
    out = np.zeros_like(t)
    for h in range(1, n_harm + 1):
        formant = 1.0 / (1.0 + (h * f0_base / 700.0) ** 2)
        out += (formant / h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    syllables = 0.5 * (1 + np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi)))
    return out * syllables**2


def _gen_speech_low(t, sr, rng):
    return _speech_like(t, sr, rng, 115.0)


def _gen_speech_high(t, sr, rng):
    return _speech_like(t, sr, rng, 215.0)


def _gen_telephone(t, sr, rng):
    tone = np.sin(2 * np.pi * _cap(440.0, sr) * t) + np.sin(2 * np.pi * _cap(480.0, sr) * t)
    trill = 0.5 * (1 + np.sign(np.sin(2 * np.pi * 20.0 * t)))
    cadence = 0.5 * (1 + np.sign(np.sin(2 * np.pi * 1.0 * t + rng.uniform(0, np.pi))))
    return tone * trill * np.maximum(cadence, 0.15)


def _burst_train(t, sr, rng, n_bursts, f_res, decay_s, jitter=0.3):
    out = np.zeros_like(t)
    dur = t[-1] + 1.0 / sr
    slots = np.linspace(0.05 * dur, 0.85 * dur, n_bursts)
    for s in slots:
        start = s + rng.uniform(-jitter, jitter) * dur / max(n_bursts, 1) * 0.5
        start = min(max(start, 0.0), dur - 2 * decay_s)
        tt = t - start
        env = np.where(tt >= 0, np.exp(-np.maximum(tt, 0) / decay_s), 0.0)
        out += env * np.sin(2 * np.pi * _cap(f_res * rng.uniform(0.9, 1.1), sr) * tt)
    return out


def _gen_knock(t, sr, rng):
    n = max(int((t[-1] + 1.0 / sr) / 0.3), 2)
    return _burst_train(t, sr, rng, n, 160.0, 0.006)


def _gen_door_slam(t, sr, rng):
    thud = _burst_train(t, sr, rng, 1, 80.0, 0.04, jitter=1.0)
    rattle = _burst_train(t, sr, rng, 1, 400.0, 0.01, jitter=0.0)
    return thud + 0.3 * rattle


def _gen_music_chords(t, sr, rng):
    roots = np.array([220.0, 246.9, 261.6, 293.7])
    dur = t[-1] + 1.0 / sr
    n_seg = max(int(dur / 0.5), 1)
    out = np.zeros_like(t)
    for seg in range(n_seg):
        root = roots[rng.integers(len(roots))]
        seg_mask = (t >= seg * 0.5) & (t < (seg + 1) * 0.5)
        for ratio in (1.0, 1.25, 1.5):
            for h in (1, 2):
                f = _cap(root * ratio * h, sr)
                out += seg_mask * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) / (2 * h)
    return out


def _gen_siren(t, sr, rng):
    f = _cap(900.0, sr) + _cap(300.0, sr) * np.sin(2 * np.pi * 0.5 * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f) / sr
    return np.sin(phase)


def _gen_chirp_train(t, sr, rng):
    dur = t[-1] + 1.0 / sr
    out = np.zeros_like(t)
    period, length = 0.3, 0.15
    f_lo, f_hi = _cap(400.0, sr), _cap(3000.0, sr)
    start = rng.uniform(0, 0.1)
    while start + length < dur:
        tt = t - start
        mask = (tt >= 0) & (tt < length)
        sweep = f_lo + (f_hi - f_lo) * np.clip(tt / length, 0, 1) / 2.0
        out += mask * np.sin(2 * np.pi * sweep * tt)
        start += period
    return out


def _gen_alarm_beeps(t, sr, rng):
    f0 = _cap(1000.0, sr)
    tone = sum(np.sin(2 * np.pi * h * f0 * t) / h for h in (1, 3, 5) if h * f0 < 0.48 * sr)
    gate = (np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi)) > 0).astype(float)
    return tone * gate


def _gen_domestic_noise(t, sr, rng):
    white = rng.normal(size=t.shape)
    rumble = lfilter([1.0 - 0.98], [1.0, -0.98], white)
    hum = sum(np.sin(2 * np.pi * 100.0 * h * t + rng.uniform(0, 2 * np.pi)) / h for h in (1, 2, 3))
    am = 1.0 + 0.4 * np.sin(2 * np.pi * 0.7 * t + rng.uniform(0, 2 * np.pi))
    return (rumble * 4.0 + 0.15 * hum) * am


def _gen_water_flow(t, sr, rng):
    white = rng.normal(size=t.shape)
    # crude band emphasis via difference-of-lowpass
    slow = lfilter([1 - 0.9], [1, -0.9], white)
    fast = lfilter([1 - 0.5], [1, -0.5], white)
    band = fast - slow
    am = 1.0 + 0.3 * np.sin(2 * np.pi * 8.0 * t + rng.uniform(0, 2 * np.pi))
    return band * am


def _gen_bird_tweets(t, sr, rng):
    dur = t[-1] + 1.0 / sr
    out = np.zeros_like(t)
    n_tweets = max(int(dur / 0.25), 1)
    for _ in range(n_tweets):
        start = rng.uniform(0, max(dur - 0.12, 1e-3))
        tt = t - start
        mask = (tt >= 0) & (tt < 0.12)
        f = _cap(3200.0 * rng.uniform(0.9, 1.1), sr)
        vib = _cap(300.0, sr) * np.sin(2 * np.pi * 40.0 * tt)
        out += mask * np.sin(2 * np.pi * (f * tt + vib * tt * tt)) * np.sin(np.pi * np.clip(tt / 0.12, 0, 1))
    return out


def _gen_machine_hum(t, sr, rng):
    f0 = 120.0
    n_harm = int(0.45 * sr / f0)
    out = _harmonic_stack(t, f0, n_harm, lambda h: 1.0 / h, rng)
    return out + 0.01 * rng.normal(size=t.shape)


_GENERATORS = [
    _gen_speech_low, _gen_speech_high, _gen_telephone, _gen_knock,
    _gen_door_slam, _gen_music_chords, _gen_siren, _gen_chirp_train,
    _gen_alarm_beeps, _gen_domestic_noise, _gen_water_flow, _gen_bird_tweets,
    _gen_machine_hum,
]


def source_prototype(class_id: int, duration_s: float, sample_rate: int, seed) -> np.ndarray:
    """Mono prototype for one class, peak-normalised to 0.5; bit-identical for
    the same (class_id, seed)."""
    if not 0 <= class_id < len(_GENERATORS):
        raise ConfigError(f"unknown class_id {class_id}")
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(class_id), _seed_int(seed))))
    out = _GENERATORS[class_id](t, sample_rate, rng)
    peak = np.max(np.abs(out))
    if peak <= 0:
        raise ConfigError(f"class {class_id} generated a silent prototype")
    return 0.5 * out / peak


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    raise ConfigError(f"seed must be an integer, got {type(seed).__name__}")


# ---------------------------------------------------------------------------
# spatial rendering
# ---------------------------------------------------------------------------

def generate_trajectory(rng: np.random.Generator, duration_s: float,
                        max_speed_deg: float, hop_s: float = ANNOTATION_HOP_S) -> np.ndarray:
    """Great-circle random walk on the unit sphere, one unit vector per hop."""
    n = int(round(duration_s / hop_s))
    out = np.zeros((n, 3))
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    out[0] = v
    max_step = np.deg2rad(max_speed_deg * hop_s)
    for i in range(1, n):
        if max_step > 0:
            u = rng.normal(size=3)
            u -= np.dot(u, v) * v
            norm = np.linalg.norm(u)
            if norm > 1e-12:
                u /= norm
                theta = rng.uniform(0.0, max_step)
                v = v * np.cos(theta) + u * np.sin(theta)
                v /= np.linalg.norm(v)
        out[i] = v
    return out


_DELAY_TAPS = 16
_DELAY_CENTRE = 7


def _fractional_delay(x: np.ndarray, delay_samples: float) -> np.ndarray:
    """Delay x by a (possibly negative, sub-sample) number of samples using a
    16-tap windowed-sinc interpolator."""
    n0 = int(np.round(delay_samples))
    frac = delay_samples - n0
    k = np.arange(_DELAY_TAPS)
    h = np.sinc(k - _DELAY_CENTRE - frac) * np.hanning(_DELAY_TAPS + 2)[1:-1]
    y = np.convolve(x, h)[_DELAY_CENTRE : _DELAY_CENTRE + len(x)]
    if n0 > 0:
        y = np.concatenate([np.zeros(n0), y[:-n0] if n0 else y])
    elif n0 < 0:
        y = np.concatenate([y[-n0:], np.zeros(-n0)])
    return y


def render_direct(src: np.ndarray, trajectory: np.ndarray, geom: ArrayGeometry,
                  sample_rate: int) -> np.ndarray:
    """Far-field direct path: per-mic fractional delay tau_m = -<d, p_m>/c,
    rendered piecewise per 100 ms trajectory hop with a linear cross-fade."""
    n = len(src)
    mics = geom.as_array()
    m = geom.n_mics
    hops = trajectory.shape[0]
    delays = -(trajectory @ mics.T) / geom.speed_of_sound * sample_rate  # (H, M)
    out = np.zeros((m, n))
    static = np.all(np.ptp(trajectory, axis=0) == 0.0)
    hop_n = n / hops
    centres = (np.arange(hops) + 0.5) * hop_n
    pos = np.arange(n)
    for mic in range(m):
        if static:
            out[mic] = _fractional_delay(src, delays[0, mic])
            continue
        uniq: dict[float, np.ndarray] = {}
        acc = np.zeros(n)
        u = np.clip((pos - centres[0]) / hop_n, 0.0, hops - 1.0)
        lo = np.minimum(u.astype(int), hops - 2)
        w_hi = u - lo
        for h in range(hops):
            weight = np.zeros(n)
            weight[lo == h] += 1.0 - w_hi[lo == h]
            weight[lo + 1 == h] += w_hi[lo + 1 == h]
            if not np.any(weight):
                continue
            d = delays[h, mic]
            if d not in uniq:
                uniq[d] = _fractional_delay(src, d)
            acc += weight * uniq[d]
        out[mic] = acc
    return out


def make_rir(rt60_s: float, n_mics: int, sample_rate: int,
             rng: np.random.Generator) -> np.ndarray:
    """Per-mic late-reverb impulse responses: exponentially decaying white
    noise reaching -60 dB at rt60, with the first 5 ms zeroed (no direct
    path) and unit energy per mic."""
    if rt60_s <= 0:
        raise ConfigError("rt60 must be positive")
    length = int(round(rt60_s * sample_rate))
    t = np.arange(length) / sample_rate
    env = 10.0 ** (-3.0 * t / rt60_s)
    rir = rng.normal(size=(n_mics, length)) * env
    rir[:, : int(round(0.005 * sample_rate))] = 0.0
    norms = np.linalg.norm(rir, axis=1, keepdims=True)
    return rir / np.where(norms > 0, norms, 1.0)


def render_reverb(src: np.ndarray, rt60_s: float, geom: ArrayGeometry,
                  sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Reverberant tail: src convolved with a synthetic RIR, truncated to the
    source length; unit-energy RIRs, caller applies the direct/reverb gain."""
    rir = make_rir(rt60_s, geom.n_mics, sample_rate, rng)
    n = len(src)
    out = np.zeros((geom.n_mics, n))
    for mic in range(geom.n_mics):
        out[mic] = fftconvolve(src, rir[mic])[:n]
    return out


def _spatial_noise(n_mics: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.normal(size=(n_mics, n_samples))
    return lfilter([1.0 - 0.9], [1.0, -0.9], white, axis=1)


def synthesize_scene(cfg: SceneConfig, seed: int) -> SpatialScene:
    """Build one scene: draw object count, classes (without replacement),
    activity intervals, trajectories, rt60, direct/reverb balance and SNR,
    then render all stems. Pure function of (cfg, seed)."""
    seed = _seed_int(seed)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0xA5A, seed)))
    n = cfg.n_samples
    sr = cfg.sample_rate
    m = cfg.geometry.n_mics
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    class_ids = np.sort(rng.choice(cfg.n_classes, size=n_obj, replace=False))

    direct = np.zeros((n_obj, m, n))
    reverb = np.zeros((n_obj, m, n))
    onsets = np.zeros(n_obj)
    offsets = np.zeros(n_obj)
    trajectories = np.zeros((n_obj, cfg.n_annotation_frames, 3))
    rt60 = float(rng.uniform(*cfg.rt60_range_s))

    for j in range(n_obj):
        onset = float(rng.uniform(0.0, 0.3 * cfg.duration_s))
        offset = float(rng.uniform(onset + 0.4 * cfg.duration_s, cfg.duration_s))
        onsets[j], offsets[j] = onset, offset
        start = int(round(onset * sr))
        stop = int(round(offset * sr))
        proto = source_prototype(int(class_ids[j]), (stop - start) / sr, sr,
                                 int(rng.integers(2**31)))
        gain = float(rng.uniform(0.5, 1.0))
        active = np.zeros(n)
        active[start : start + len(proto)] = proto * gain
        fade = min(int(round(0.005 * sr)), max((stop - start) // 4, 1))
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(fade) / fade))
        active[start : start + fade] *= ramp
        active[start + len(proto) - fade : start + len(proto)] *= ramp[::-1]

        trajectories[j] = generate_trajectory(rng, cfg.duration_s, cfg.max_angular_speed_deg)
        d = render_direct(active, trajectories[j], cfg.geometry, sr)
        rev_rng = np.random.default_rng(np.random.SeedSequence(entropy=(0xE14, seed, j)))
        r = render_reverb(active, rt60, cfg.geometry, sr, rev_rng)
        drr = float(rng.uniform(*cfg.drr_range_db))
        r_norm = np.linalg.norm(r)
        if r_norm > 0:
            r *= np.linalg.norm(d) * 10.0 ** (-drr / 20.0) / r_norm
        direct[j] = _f32(d)
        reverb[j] = _f32(r)

    noise = _spatial_noise(m, n, rng)
    fg_energy = float(np.sum((direct + reverb).sum(axis=0) ** 2))
    snr = float(rng.uniform(*cfg.snr_range_db))
    noise_energy = float(np.sum(noise**2))
    target = fg_energy * 10.0 ** (-snr / 10.0)
    noise = _f32(noise * np.sqrt(target / noise_energy))

    return SpatialScene(sample_rate=sr, seed=seed, class_ids=class_ids,
                        onsets_s=onsets, offsets_s=offsets,
                        trajectories=trajectories, direct=direct,
                        reverb=reverb, noise=noise)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_wav(path: Path, data: np.ndarray, sample_rate: int) -> None:
    wavfile.write(path, sample_rate, np.ascontiguousarray(data.T.astype(np.float32)))


def _read_wav(path: Path, sample_rate: int, scene_id: str) -> np.ndarray:
    if not path.exists():
        raise DataError(f"scene {scene_id}: missing audio file {path.name}")
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise DataError(f"scene {scene_id}: unreadable audio file {path.name}: {exc}")
    if rate != sample_rate:
        raise DataError(f"scene {scene_id}: sample rate {rate} != manifest {sample_rate}")
    if data.dtype != np.float32:
        raise DataError(f"scene {scene_id}: expected float32 audio in {path.name}")
    return data.T.astype(np.float64)


def dataset_write(path: str | Path, scenes: list[SpatialScene], force: bool = False) -> Path:
    """Write manifest.json plus per-scene float32 WAV stems under audio/."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if manifest_path.exists() and not force:
        raise DataError(f"dataset already exists at {root}; pass force to overwrite")
    audio_dir = root / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for idx, scene in enumerate(scenes):
        sid = f"scene_{idx:05d}"
        files = {"direct": [], "reverb": [], "noise": f"{sid}_noise.wav"}
        checksums = {}
        for j in range(scene.n_objects):
            for kind in ("direct", "reverb"):
                name = f"{sid}_{kind}{j}.wav"
                files[kind].append(name)
                _write_wav(audio_dir / name, getattr(scene, kind)[j], scene.sample_rate)
                checksums[name] = _sha256(audio_dir / name)
        _write_wav(audio_dir / files["noise"], scene.noise, scene.sample_rate)
        checksums[files["noise"]] = _sha256(audio_dir / files["noise"])
        records.append({
            "scene_id": sid,
            "seed": scene.seed,
            "sample_rate": scene.sample_rate,
            "num_objects": scene.n_objects,
            "objects": [{
                "class_id": int(scene.class_ids[j]),
                "onset_s": float(scene.onsets_s[j]),
                "offset_s": float(scene.offsets_s[j]),
                "trajectory": scene.trajectories[j].tolist(),
            } for j in range(scene.n_objects)],
            "files": files,
            "checksums": checksums,
        })
    manifest = {"format_version": MANIFEST_VERSION, "scenes": records}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


class SceneDataset:
    """Lazy reader over a written dataset; verifies checksums on load."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest.json under {self.root}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest is not valid JSON: {exc}")
        if manifest.get("format_version") != MANIFEST_VERSION:
            raise DataError(
                f"manifest format_version {manifest.get('format_version')} "
                f"!= supported {MANIFEST_VERSION}")
        self.records = manifest["scenes"]

    def __len__(self) -> int:
        return len(self.records)

    def load(self, index: int) -> SpatialScene:
        rec = self.records[index]
        sid = rec["scene_id"]
        audio = self.root / "audio"
        for name, want in rec["checksums"].items():
            fp = audio / name
            if not fp.exists():
                raise DataError(f"scene {sid}: missing audio file {name}")
            if _sha256(fp) != want:
                raise DataError(f"scene {sid}: checksum mismatch for {name}")
        sr = rec["sample_rate"]
        direct = np.stack([_read_wav(audio / f, sr, sid) for f in rec["files"]["direct"]])
        reverb = np.stack([_read_wav(audio / f, sr, sid) for f in rec["files"]["reverb"]])
        noise = _read_wav(audio / rec["files"]["noise"], sr, sid)
        objs = rec["objects"]
        return SpatialScene(
            sample_rate=sr, seed=rec["seed"],
            class_ids=np.asarray([o["class_id"] for o in objs]),
            onsets_s=np.asarray([o["onset_s"] for o in objs]),
            offsets_s=np.asarray([o["offset_s"] for o in objs]),
            trajectories=np.asarray([o["trajectory"] for o in objs]),
            direct=direct, reverb=reverb, noise=noise)


def dataset_read(path: str | Path) -> SceneDataset:
    return SceneDataset(path)
