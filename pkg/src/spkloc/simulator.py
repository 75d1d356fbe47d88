"""Synthetic far-field multichannel scenes with ground truth.

Sources are rendered through time-varying fractional delays (windowed
sinc), optionally convolved with a statistical reverberation tail, and mixed
with independent white sensor noise at a requested SNR.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve, istft, stft

from .frontend import AudioBuffer, StftConfig
from .localizer import ArrayGeometry, wrap_deg
from .metrics import GroundTruth

SINC_TAPS = 32


@dataclass
class SourceConfig:
    """One source.

    ``trajectory`` holds ``(time_s, azimuth_deg)`` control points; azimuth is
    linearly interpolated in between (along the shorter arc) and held
    constant outside. ``activity`` lists ``(start_s, end_s)`` intervals where
    the source emits; ``None`` means always on.
    """

    trajectory: list[tuple[float, float]]
    signal: str = "speech"  # "speech", "am", "white" or "file"
    activity: list[tuple[float, float]] | None = None
    level_db: float = 0.0
    path: str | None = None
    speaker_id: int | None = None


@dataclass
class ReverbConfig:
    t60: float = 0.3
    drr_db: float = 10.0
    predelay_s: float = 0.002


@dataclass
class SceneConfig:
    geometry: ArrayGeometry
    sources: list[SourceConfig]
    duration: float = 2.0
    sample_rate: int = 16000
    snr_db: float = np.inf
    reverb: ReverbConfig | None = None
    seed: int = 0
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass
class RenderedScene:
    audio: AudioBuffer
    truth: GroundTruth
    clean: np.ndarray | None = None
    images: list[np.ndarray] | None = None


def azimuth_track(trajectory, times: np.ndarray) -> np.ndarray:
    """Azimuth (degrees, wrapped) at ``times`` from ``(t, az)`` control points."""
    pts = sorted(trajectory)
    t = np.array([p[0] for p in pts], dtype=float)
    az = np.array([p[1] for p in pts], dtype=float)
    # unwrap so interpolation follows the shorter arc between control points
    az = np.concatenate([[az[0]], az[0] + np.cumsum(wrap_deg(np.diff(az)))])
    return wrap_deg(np.interp(times, t, az))


def activity_mask(activity, times: np.ndarray) -> np.ndarray:
    if activity is None:
        return np.ones(times.shape, dtype=bool)
    mask = np.zeros(times.shape, dtype=bool)
    for start, end in activity:
        mask |= (times >= start) & (times < end)
    return mask


def smooth_gate(mask: np.ndarray, ramp: int) -> np.ndarray:
    """Raised-cosine edges of ``ramp`` samples on a boolean gate."""
    g = mask.astype(float)
    if ramp <= 1 or not g.any():
        return g
    k = np.hanning(2 * ramp + 1)
    return np.clip(np.convolve(g, k / k.sum(), mode="same"), 0.0, 1.0)


def syllable_envelope(n: int, sample_rate: int, rng: np.random.Generator,
                      rate_hz: float = 4.0, pause_prob: float = 0.25):
    """Raised-cosine syllable envelope with random drop-outs.

    Returns ``(envelope, syllable_index, phase)``; syllable ``k`` spans one
    cycle of the ``rate_hz`` modulation and is silenced with ``pause_prob``.
    """
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    cycles = (2 * np.pi * rate_hz * t + phase) / (2 * np.pi)
    env = (0.5 * (1.0 - np.cos(2 * np.pi * cycles))) ** 2
    cycle = np.floor(cycles).astype(int)
    keep = rng.random(cycle.max() + 1) >= pause_prob
    return env * keep[cycle], cycle, phase


def am_noise(n: int, sample_rate: int, rng: np.random.Generator,
             rate_hz: float = 4.0, pause_prob: float = 0.25) -> np.ndarray:
    """White noise amplitude-modulated at ``rate_hz`` with random syllable drop-outs."""
    env, _, _ = syllable_envelope(n, sample_rate, rng, rate_hz, pause_prob)
    return rng.standard_normal(n) * env


def speech_like(n: int, sample_rate: int, rng: np.random.Generator,
                rate_hz: float = 4.0, pause_prob: float = 0.25, n_formants: int = 3,
                formant_range_hz: tuple[float, float] = (200.0, 4000.0),
                bandwidth_hz: float = 100.0, nperseg: int = 512) -> np.ndarray:
    """Syllabic, formant-shaped noise with random syllable drop-outs.

    Each syllable (one cycle of the ``rate_hz`` envelope) shapes white noise
    with ``n_formants`` Gaussian resonances at random centre frequencies. The
    sparse spectra keep concurrent talkers largely disjoint in time-frequency,
    as real speech is, while remaining broadband over a whole utterance.
    """
    env, cycle, phase = syllable_envelope(n, sample_rate, rng, rate_hz, pause_prob)
    n_syl = cycle.max() + 1
    f, tt, z = stft(rng.standard_normal(n), sample_rate, nperseg=nperseg)
    syl = np.clip(np.floor((2 * np.pi * rate_hz * tt + phase) / (2 * np.pi)).astype(int),
                  0, n_syl - 1)
    centres = rng.uniform(*formant_range_hz, size=(n_syl, n_formants))
    profile = np.exp(-0.5 * ((f[:, None, None] - centres[None]) / bandwidth_hz) ** 2).sum(axis=2)
    _, x = istft(z * profile[:, syl], sample_rate, nperseg=nperseg)
    return np.resize(x, n) * env


def windowed_sinc_delay(signal: np.ndarray, delay: np.ndarray, taps: int = SINC_TAPS,
                        block: int = 32768) -> np.ndarray:
    """``y[n] = signal(n - delay[n])`` by ``taps``-point Blackman-windowed sinc interpolation."""
    n = len(signal)
    half = taps // 2
    k = np.arange(-half + 1, half + 1)  # taps relative to floor(position)
    out = np.empty(n)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        pos = np.arange(lo, hi) - delay[lo:hi]
        base = np.floor(pos).astype(int)
        u = (pos - base)[:, None] - k[None, :]
        idx = base[:, None] + k[None, :]
        win = 0.42 + 0.5 * np.cos(np.pi * u / half) + 0.08 * np.cos(2 * np.pi * u / half)
        h = np.sinc(u) * np.where(np.abs(u) < half, win, 0.0)
        valid = (idx >= 0) & (idx < n)
        vals = np.where(valid, signal[np.clip(idx, 0, n - 1)], 0.0)
        out[lo:hi] = np.einsum("nk,nk->n", vals, h)
    return out


def reverb_tail(cfg: ReverbConfig, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Exponentially decaying white tail with energy ``10**(-drr/10)`` (direct path = 1)."""
    length = int(cfg.t60 * sample_rate)
    start = int(cfg.predelay_s * sample_rate)
    n = np.arange(length)
    tail = rng.standard_normal(length) * np.exp(-6.9078 * n / max(length, 1))
    tail *= np.sqrt(10 ** (-cfg.drr_db / 10) / np.sum(tail ** 2))
    return np.concatenate([np.zeros(start), tail])


def source_signal(src: SourceConfig, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    if src.signal == "white":
        s = rng.standard_normal(n)
    elif src.signal == "speech":
        s = speech_like(n, sample_rate, rng)
    elif src.signal == "am":
        s = am_noise(n, sample_rate, rng)
    elif src.signal == "file":
        from .io import load_wav
        x, _ = load_wav(src.path, target_rate=sample_rate)
        s = np.resize(x[0], n)
    else:
        raise ValueError(f"unknown source signal {src.signal!r}")
    s = s / max(np.sqrt(np.mean(s ** 2)), 1e-12)
    return s * 10 ** (src.level_db / 20)


def render(cfg: SceneConfig) -> RenderedScene:
    """Render the scene; deterministic in ``cfg.seed``."""
    fs = cfg.sample_rate
    n = int(round(cfg.duration * fs))
    times = np.arange(n) / fs
    geom = cfg.geometry
    root = np.random.default_rng(cfg.seed)
    src_rngs = root.spawn(len(cfg.sources))
    noise_rng, = root.spawn(1)

    clean = np.zeros((geom.n_mics, n))
    images = []
    for src, rng in zip(cfg.sources, src_rngs):
        sig_rng, rev_rng = rng.spawn(2)
        s = source_signal(src, n, fs, sig_rng)
        s = s * smooth_gate(activity_mask(src.activity, times), int(0.005 * fs))
        az = azimuth_track(src.trajectory, times)
        delays = geom.tdoa(az) * fs  # (n, I)
        img = np.stack([windowed_sinc_delay(s, delays[:, i]) for i in range(geom.n_mics)])
        if cfg.reverb is not None:
            for i in range(geom.n_mics):
                tail = reverb_tail(cfg.reverb, fs, rev_rng)
                img[i] += fftconvolve(img[i], tail)[:n]
        images.append(img)
        clean += img

    mix = clean.copy()
    if np.isfinite(cfg.snr_db):
        p_sig = np.mean(clean ** 2)
        noise = noise_rng.standard_normal(clean.shape)
        mix += noise * np.sqrt(p_sig / 10 ** (cfg.snr_db / 10))

    return RenderedScene(AudioBuffer(mix, fs), scene_truth(cfg, n), clean, images)


def scene_truth(cfg: SceneConfig, n_samples: int) -> GroundTruth:
    """Ground truth at frame centres ``(t*hop + window_length/2) / rate``."""
    st = cfg.stft
    if n_samples < st.window_length:
        return GroundTruth(np.zeros(0), [])
    n_frames = (n_samples - st.window_length) // st.hop + 1
    centres = (np.arange(n_frames) * st.hop + st.window_length / 2) / cfg.sample_rate
    frames = [[] for _ in range(n_frames)]
    for k, src in enumerate(cfg.sources):
        sid = src.speaker_id if src.speaker_id is not None else k + 1
        az = azimuth_track(src.trajectory, centres)
        act = activity_mask(src.activity, centres)
        for t in range(n_frames):
            frames[t].append((sid, float(az[t]), bool(act[t])))
    return GroundTruth(centres, frames)
