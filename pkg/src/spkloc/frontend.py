"""STFT analysis, per-bin speech/noise labelling and spectral subtraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window


@dataclass(frozen=True)
class AudioBuffer:
    """Multichannel time-domain audio, shape ``(channels, samples)``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 2:
            raise ValueError("samples must be a (channels, samples) matrix")
        if x.shape[0] < 2:
            raise ValueError("at least two channels are required")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 256
    hop: int = 128
    window: str = "hamming"

    def __post_init__(self):
        if not 0 < self.hop <= self.window_length:
            raise ValueError("need 0 < hop <= window_length")
        if np.any(self.taper() < 0):
            raise ValueError(f"window {self.window!r} has negative taper values")

    @property
    def n_freqs(self) -> int:
        return self.window_length // 2 + 1

    def taper(self) -> np.ndarray:
        # scipy's default (fftbins=True) is the periodic variant
        return get_window(self.window, self.window_length)

    @classmethod
    def from_durations(cls, sample_rate: int, window_s: float = 0.016,
                       hop_s: float = 0.008, window: str = "hamming") -> "StftConfig":
        return cls(int(round(window_s * sample_rate)), int(round(hop_s * sample_rate)), window)


@dataclass(frozen=True)
class Spectrogram:
    """One-sided STFT coefficients, shape ``(channels, frames, freqs)``."""

    coefficients: np.ndarray
    config: StftConfig

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=complex)
        if c.ndim != 3 or c.shape[2] != self.config.n_freqs:
            raise ValueError("coefficients must be (channels, frames, window_length//2+1)")
        if not np.all(np.isfinite(c)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "coefficients", c)

    @property
    def n_channels(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coefficients.shape[1]

    @property
    def n_freqs(self) -> int:
        return self.coefficients.shape[2]


@dataclass(frozen=True)
class FrameLabels:
    """Boolean ``(frames, freqs)`` matrix, True where the bin holds speech."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=bool))


@dataclass(frozen=True)
class NoiseConfig:
    """Tunables of the noise-floor tracker.

    ``beta`` is the speech decision ratio on power. The floor follows an
    exponential moving average of the (short-term smoothed) power over
    frames labelled noise, and creeps upward at ``rise_db_per_s`` while a
    bin is labelled speech so that a rising noise level is eventually
    re-acquired.
    """

    beta: float = 2.0
    floor_time_constant: float = 1.0
    smoothing_time_constant: float = 0.032
    rise_db_per_s: float = 3.0

    def coefficients(self, hop: int, sample_rate: int) -> tuple[float, float, float]:
        frame_s = hop / sample_rate
        a_floor = float(np.exp(-frame_s / self.floor_time_constant))
        a_smooth = float(np.exp(-frame_s / self.smoothing_time_constant)) \
            if self.smoothing_time_constant > 0 else 0.0
        rise = float(10.0 ** (self.rise_db_per_s * frame_s / 10.0))
        return a_floor, a_smooth, rise


def stft(audio: AudioBuffer, cfg: StftConfig) -> Spectrogram:
    """Frame ``t`` covers samples ``[t*hop, t*hop + window_length)``."""
    x = audio.samples
    if x.shape[1] < cfg.window_length:
        raise ValueError("insufficient samples: audio is shorter than one STFT window")
    n_frames = (x.shape[1] - cfg.window_length) // cfg.hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_length, axis=1)
    frames = frames[:, ::cfg.hop][:, :n_frames]
    coeffs = np.fft.rfft(frames * cfg.taper(), axis=-1)
    return Spectrogram(coeffs, cfg)


def stft_frame(chunk: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """STFT of one ``(channels, window_length)`` chunk, shape ``(channels, freqs)``."""
    return np.fft.rfft(np.asarray(chunk, dtype=float) * cfg.taper(), axis=-1)


class NoiseTracker:
    """Online per-(channel, frequency) noise floor and speech labelling.

    Holds the smoothed power and the floor (both power quantities). ``update``
    consumes one STFT frame and returns the per-bin speech labels together
    with the floor that was in force for that frame.
    """

    def __init__(self, n_channels: int, n_freqs: int, hop: int, sample_rate: int,
                 cfg: NoiseConfig | None = None):
        self.cfg = cfg or NoiseConfig()
        self.a_floor, self.a_smooth, self.rise = self.cfg.coefficients(hop, sample_rate)
        self.smoothed = np.zeros((n_channels, n_freqs))
        self.floor = np.zeros((n_channels, n_freqs))
        self.n_seen = 0

    def smooth(self, frame: np.ndarray) -> np.ndarray:
        power = np.abs(frame) ** 2
        if self.n_seen == 0:
            self.smoothed = power
        else:
            self.smoothed = self.a_smooth * self.smoothed + (1 - self.a_smooth) * power
        return self.smoothed

    def advance(self, labels: np.ndarray) -> None:
        if self.n_seen == 0:
            self.floor = self.smoothed.copy()
        else:
            noisy = ~labels
            ema = self.a_floor * self.floor + (1 - self.a_floor) * self.smoothed
            self.floor = np.where(noisy[None, :], ema, self.floor * self.rise)
        self.n_seen += 1

    def update(self, frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Label one ``(channels, freqs)`` frame; returns ``(labels, floor_power)``."""
        smoothed = self.smooth(frame)
        if self.n_seen == 0:
            labels = np.zeros(frame.shape[1], dtype=bool)
            floor = smoothed.copy()
        else:
            floor = self.floor
            labels = smoothed.mean(axis=0) > self.cfg.beta * floor.mean(axis=0)
        self.advance(labels)
        return labels, floor

    def state_dict(self) -> dict:
        return {"smoothed": self.smoothed.copy(), "floor": self.floor.copy(),
                "n_seen": self.n_seen}

    def load_state_dict(self, state: dict) -> None:
        self.smoothed = np.array(state["smoothed"])
        self.floor = np.array(state["floor"])
        self.n_seen = int(state["n_seen"])


def classify_frames(spec: Spectrogram, sample_rate: int = 16000,
                    cfg: NoiseConfig | None = None) -> FrameLabels:
    """Label each (frame, frequency) as speech or noise.

    A bin is speech when its smoothed channel-mean power exceeds ``beta``
    times the channel-mean noise floor. All-zero input is all noise.
    """
    c = spec.coefficients
    tracker = NoiseTracker(c.shape[0], c.shape[2], spec.config.hop,
                           sample_rate, cfg)
    labels = np.zeros((c.shape[1], c.shape[2]), dtype=bool)
    for t in range(c.shape[1]):
        labels[t], _ = tracker.update(c[:, t])
    return FrameLabels(labels)


def noise_floor(spec: Spectrogram, labels: FrameLabels, sample_rate: int = 16000,
                cfg: NoiseConfig | None = None) -> np.ndarray:
    """Floor power in force at every frame given fixed labels, ``(channels, frames, freqs)``."""
    c = spec.coefficients
    tracker = NoiseTracker(c.shape[0], c.shape[2], spec.config.hop,
                           sample_rate, cfg)
    floors = np.empty(c.shape)
    for t in range(c.shape[1]):
        smoothed = tracker.smooth(c[:, t])
        floors[:, t] = smoothed if tracker.n_seen == 0 else tracker.floor
        tracker.advance(labels.labels[t])
    return floors


def subtract_frame(frame: np.ndarray, labels: np.ndarray, floor_power: np.ndarray) -> np.ndarray:
    """Magnitude subtraction on speech bins of one ``(channels, freqs)`` frame."""
    mag = np.abs(frame)
    reduced = np.maximum(mag - np.sqrt(floor_power), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        gain = np.where(mag > 0, reduced / np.where(mag > 0, mag, 1.0), 0.0)
    return np.where(labels[None, :], frame * gain, frame)


def spectral_subtract(spec: Spectrogram, labels: FrameLabels, sample_rate: int = 16000,
                      cfg: NoiseConfig | None = None) -> Spectrogram:
    """Subtract the running noise-floor magnitude from speech bins, phase kept.

    Noise bins are returned unchanged; callers skip them using ``labels``.
    """
    if labels.labels.shape != spec.coefficients.shape[1:]:
        raise ValueError("labels do not match the spectrogram dimensions")
    floors = noise_floor(spec, labels, sample_rate, cfg)
    out = np.empty_like(spec.coefficients)
    for t in range(spec.n_frames):
        out[:, t] = subtract_frame(spec.coefficients[:, t], labels.labels[t], floors[:, t])
    return Spectrogram(out, spec.config)
