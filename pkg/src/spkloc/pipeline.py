"""Frame-by-frame orchestration: STFT -> labels/subtraction -> DP-RTF -> EG weights -> tracker."""

from __future__ import annotations

import pickle
from dataclasses import dataclass, field

import numpy as np

from .dprtf import CtfConfig, DprtfEstimator, FeatureSet, process_frame
from .frontend import AudioBuffer, NoiseConfig, NoiseTracker, StftConfig, stft_frame, subtract_frame
from .localizer import (ArrayGeometry, CandidateGrid, Localizer, LocalizerConfig,
                        default_azimuths, precompute_means)
from .metrics import DEFAULT_GATE_DEG
from .tracker import TrackRecord, Tracker, TrackerConfig


def tracking_localizer() -> LocalizerConfig:
    """Localizer settings tuned for moving talkers in front of the tracker."""
    return LocalizerConfig(variance=0.05, learning_rate=0.8, entropy_weight=0.1,
                           idle_relaxation=0.065, min_features=5, max_step_ratio=100.0,
                           spatial_smoothing=0.02)


def tracking_tracker() -> TrackerConfig:
    """Tracker settings matched to :func:`tracking_localizer` weights."""
    return TrackerConfig(obs_cov=((0.005, 0.0), (0.0, 0.005)), dynamics_cov=(1e-5, 1e-5, 1e-8),
                         birth_threshold=0.5, activity_threshold=0.1, activity_window=40,
                         merge_distance_deg=10.0, merge_frames=10)


@dataclass(frozen=True)
class PipelineConfig:
    sample_rate: int = 16000
    stft: StftConfig = field(default_factory=StftConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    ctf: CtfConfig = field(default_factory=CtfConfig)
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    grid_step_deg: float = 5.0
    fmin_hz: float = 100.0
    # None limits the band to the spatial-aliasing frequency of the array
    fmax_hz: float | None = None
    gate_deg: float = DEFAULT_GATE_DEG

    @classmethod
    def tuned(cls, **changes) -> "PipelineConfig":
        """Settings tuned on simulated moving talkers (small arrays, light reverb).

        Differs from the defaults by a 4 kHz band, the localizer of
        :func:`tracking_localizer` and the tracker of :func:`tracking_tracker`.
        """
        base = dict(localizer=tracking_localizer(), tracker=tracking_tracker(), fmax_hz=4000.0)
        base.update(changes)
        return cls(**base)

    def band_bins(self, geom: ArrayGeometry) -> np.ndarray:
        """STFT bins used for localization: no DC/Nyquist, inside ``[fmin, fmax]``."""
        n = self.stft.window_length
        fmax = self.fmax_hz if self.fmax_hz is not None else geom.alias_frequency()
        bins = np.arange(1, n // 2)
        f = bins * self.sample_rate / n
        return bins[(f >= self.fmin_hz) & (f <= fmax)]

    def make_grid(self, geom: ArrayGeometry) -> CandidateGrid:
        return precompute_means(geom, default_azimuths(self.grid_step_deg), self.band_bins(geom),
                                self.sample_rate, self.stft.window_length,
                                self.localizer.magnitude)


@dataclass
class FrameOutput:
    frame: int
    time: float
    weights: np.ndarray
    peaks: list[tuple[float, float]]
    features: FeatureSet
    tracks: list[TrackRecord]


@dataclass
class RunResult:
    heatmap: np.ndarray
    azimuths: np.ndarray
    times: np.ndarray
    tracks: list[TrackRecord]
    peaks: list[list[tuple[float, float]]]
    features: list[FeatureSet]

    @property
    def n_frames(self) -> int:
        return self.heatmap.shape[0]

    def track_estimates(self) -> list[list[tuple[int, float]]]:
        """Active tracks per frame as ``(speaker_id, azimuth)``."""
        out: list[list[tuple[int, float]]] = [[] for _ in range(self.n_frames)]
        for r in self.tracks:
            if r.active:
                out[r.frame].append((r.speaker_id, r.azimuth_deg))
        return out

    def peak_estimates(self) -> list[list[float]]:
        return [[az for az, _ in p] for p in self.peaks]


class Pipeline:
    """Online localization and tracking; feed ``hop`` samples per call to :meth:`step`."""

    def __init__(self, geom: ArrayGeometry, cfg: PipelineConfig | None = None,
                 grid: CandidateGrid | None = None):
        self.cfg = cfg or PipelineConfig()
        self.geom = geom
        self.grid = grid if grid is not None else self.cfg.make_grid(geom)
        n_ch = geom.n_mics
        st = self.cfg.stft
        self.buffer = np.zeros((n_ch, 0))
        self.noise = NoiseTracker(n_ch, st.n_freqs, st.hop, self.cfg.sample_rate, self.cfg.noise)
        self.dprtf = DprtfEstimator(n_ch, self.grid.bins, self.cfg.ctf)
        self.localizer = Localizer(self.grid, self.cfg.localizer)
        self.tracker = Tracker(self.grid.azimuths, self.cfg.tracker)
        self.frame = 0

    def step(self, chunk: np.ndarray) -> FrameOutput | None:
        """Consume one hop of samples; returns the frame output once a full window is buffered."""
        st = self.cfg.stft
        chunk = np.asarray(chunk, dtype=float)
        if chunk.shape != (self.geom.n_mics, st.hop):
            raise ValueError(f"expected a ({self.geom.n_mics}, {st.hop}) chunk")
        self.buffer = np.concatenate([self.buffer, chunk], axis=1)[:, -st.window_length:]
        if self.buffer.shape[1] < st.window_length:
            return None
        spectrum = stft_frame(self.buffer, st)
        labels, floor = self.noise.update(spectrum)
        denoised = subtract_frame(spectrum, labels, floor)
        features = process_frame(self.dprtf, denoised, labels)
        weights = self.localizer.step(features).copy()
        tracks = self.tracker.step(weights)
        for r in tracks:
            r.frame = self.frame
        out = FrameOutput(self.frame, self.frame_time(self.frame), weights,
                          self.localizer.peaks(), features, tracks)
        self.frame += 1
        return out

    def frame_time(self, t: int) -> float:
        st = self.cfg.stft
        return (t * st.hop + st.window_length / 2) / self.cfg.sample_rate

    def snapshot(self) -> bytes:
        state = {
            "buffer": self.buffer.copy(),
            "noise": self.noise.state_dict(),
            "dprtf": self.dprtf.state_dict(),
            "weights": self.localizer.weights.copy(),
            "tracker": self.tracker.state_dict(),
            "frame": self.frame,
        }
        return pickle.dumps(state, protocol=pickle.HIGHEST_PROTOCOL)

    def restore(self, blob: bytes) -> None:
        state = pickle.loads(blob)
        self.buffer = np.array(state["buffer"])
        self.noise.load_state_dict(state["noise"])
        self.dprtf.load_state_dict(state["dprtf"])
        self.localizer.weights = np.array(state["weights"])
        self.tracker.load_state_dict(state["tracker"])
        self.frame = int(state["frame"])


def run(audio: AudioBuffer, geom: ArrayGeometry, cfg: PipelineConfig | None = None,
        max_frames: int | None = None, grid: CandidateGrid | None = None) -> RunResult:
    """Process a whole recording frame by frame."""
    pipe = Pipeline(geom, cfg, grid)
    cfg = pipe.cfg
    if audio.sample_rate != cfg.sample_rate:
        raise ValueError(f"audio is at {audio.sample_rate} Hz, pipeline expects {cfg.sample_rate} Hz")
    if audio.n_channels != geom.n_mics:
        raise ValueError("channel count does not match the array geometry")
    hop = cfg.stft.hop
    rows, times, tracks, peaks, feats = [], [], [], [], []
    for k in range(audio.n_samples // hop):
        out = pipe.step(audio.samples[:, k * hop:(k + 1) * hop])
        if out is None:
            continue
        rows.append(out.weights)
        times.append(out.time)
        tracks.extend(out.tracks)
        peaks.append(out.peaks)
        feats.append(out.features)
        if max_frames is not None and len(rows) >= max_frames:
            break
    heat = np.array(rows) if rows else np.zeros((0, pipe.grid.size))
    return RunResult(heat, pipe.grid.azimuths.copy(), np.array(times), tracks, peaks, feats)
