"""Online CGMM weight estimation by exponentiated gradient.

Each retained DP-RTF feature is modelled by a complex Gaussian mixture whose
components sit at the direct-path RTFs of a grid of candidate azimuths. The
mixture weights are the only free parameters and are moved once per frame by
a KL-regularized (multiplicative) gradient step on the per-frame negative
log-likelihood plus an entropy penalty.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .dprtf import FeatureSet

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-12
GRID_MAGIC = b"SPKGRID"
GRID_VERSION = 1


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions in meters, one row per channel; channel 0 is the reference."""

    mic_positions: np.ndarray
    speed_of_sound: float = 343.0

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.mic_positions, dtype=float))
        if pos.shape[1] == 2:
            pos = np.hstack([pos, np.zeros((pos.shape[0], 1))])
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("mic_positions must be (n_mics, 3)")
        if pos.shape[0] < 2:
            raise ValueError("at least two microphones are required")
        if len(np.unique(pos, axis=0)) < 2:
            raise ValueError("need at least two distinct microphone positions")
        if self.speed_of_sound <= 0:
            raise ValueError("speed_of_sound must be positive")
        object.__setattr__(self, "mic_positions", pos)

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    def max_spacing(self) -> float:
        p = self.mic_positions
        return float(np.max(np.linalg.norm(p[:, None] - p[None], axis=-1)))

    def alias_frequency(self) -> float:
        """Highest frequency whose half wavelength still exceeds the largest spacing."""
        return self.speed_of_sound / (2.0 * self.max_spacing())

    def tdoa(self, azimuth_deg) -> np.ndarray:
        """Far-field arrival delay of every channel versus the reference, seconds.

        ``azimuth_deg`` may be an array; the result has shape ``(..., n_mics)``.
        A source at azimuth ``theta`` lies along ``(cos theta, sin theta, 0)``, so
        microphones displaced toward it receive the wavefront early.
        """
        th = np.deg2rad(np.asarray(azimuth_deg, dtype=float))
        u = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], axis=-1)
        rel = self.mic_positions - self.mic_positions[0]
        return -(u @ rel.T) / self.speed_of_sound


def default_azimuths(step_deg: float = 5.0) -> np.ndarray:
    """Grid ``(-180, 180]`` in ``step_deg`` steps, e.g. -175, -170, ..., 180."""
    n = int(round(360.0 / step_deg))
    return -180.0 + step_deg * np.arange(1, n + 1)


def wrap_deg(a):
    """Wrap angles to ``(-180, 180]``."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + 180.0, 360.0) - 180.0
    return np.where(w == -180.0, 180.0, w)


@dataclass
class CandidateGrid:
    """Candidate azimuths and the CGMM means, ``means[d, f, i-1]`` for channel ``i >= 1``.

    ``freqs_hz`` is the frequency of every row of the mean tensor; ``bins``
    the STFT bin index of each row.
    """

    azimuths: np.ndarray
    means: np.ndarray
    freqs_hz: np.ndarray
    bins: np.ndarray

    def __post_init__(self):
        az = np.asarray(self.azimuths, dtype=float)
        if az.ndim != 1 or np.any(np.diff(az) <= 0):
            raise ValueError("azimuths must be strictly increasing")
        if az[0] <= -180.0 or az[-1] > 180.0:
            raise ValueError("azimuths must lie in (-180, 180]")
        self.azimuths = az
        self.means = np.asarray(self.means, dtype=complex)
        self.freqs_hz = np.asarray(self.freqs_hz, dtype=float)
        self.bins = np.asarray(self.bins, dtype=int)
        if self.means.shape[:2] != (len(az), len(self.bins)):
            raise ValueError("means must be (D, n_bins, n_mics - 1)")
        self._row = {int(b): k for k, b in enumerate(self.bins)}

    @property
    def size(self) -> int:
        return len(self.azimuths)

    def rows_for(self, bins: np.ndarray) -> np.ndarray:
        return np.array([self._row[int(b)] for b in bins], dtype=int)

    def feature_means(self, features: FeatureSet) -> np.ndarray:
        """Means matched to each feature, shape ``(n_features, D)``."""
        rows = self.rows_for(features.freqs)
        return self.means[:, rows, features.channels - 1].T

    def save(self, path) -> None:
        """Binary cache: magic, version, sizes, then float64/complex128 arrays."""
        d, f, c = self.means.shape
        with open(path, "wb") as fh:
            fh.write(GRID_MAGIC)
            fh.write(struct.pack("<IIII", GRID_VERSION, d, f, c))
            fh.write(self.azimuths.astype("<f8").tobytes())
            fh.write(self.freqs_hz.astype("<f8").tobytes())
            fh.write(self.bins.astype("<i8").tobytes())
            fh.write(self.means.astype("<c16").tobytes())

    @classmethod
    def load(cls, path) -> "CandidateGrid":
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(GRID_MAGIC):
            raise ValueError(f"{path}: not a candidate grid file")
        off = len(GRID_MAGIC)
        version, d, f, c = struct.unpack_from("<IIII", data, off)
        if version != GRID_VERSION:
            raise ValueError(f"{path}: unsupported grid version {version}")
        off += 16
        need = off + 8 * d + 8 * f + 8 * f + 16 * d * f * c
        if len(data) != need:
            raise ValueError(f"{path}: truncated or oversized grid file")
        az = np.frombuffer(data, "<f8", d, off); off += 8 * d
        fr = np.frombuffer(data, "<f8", f, off); off += 8 * f
        bins = np.frombuffer(data, "<i8", f, off); off += 8 * f
        means = np.frombuffer(data, "<c16", d * f * c, off).reshape(d, f, c)
        return cls(az.copy(), means.copy(), fr.copy(), bins.copy())


@dataclass(frozen=True)
class LocalizerConfig:
    variance: float = 0.5
    learning_rate: float = 0.07
    entropy_weight: float = 0.1
    magnitude: float = 1.0
    peak_threshold: float = 0.04
    min_separation_deg: float = 15.0
    # stabilizers, all off by default: relaxation toward uniform on frames
    # with fewer than ``min_features`` features, a cap on the per-frame
    # multiplicative factor, and circular smoothing between neighbours
    idle_relaxation: float = 0.0
    min_features: int = 1
    max_step_ratio: float = float("inf")
    spatial_smoothing: float = 0.0

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("variance must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.idle_relaxation <= 1.0:
            raise ValueError("idle_relaxation must lie in [0, 1]")
        if self.min_features < 0:
            raise ValueError("min_features must be >= 0")
        if self.max_step_ratio <= 1.0:
            raise ValueError("max_step_ratio must exceed 1")
        if self.spatial_smoothing < 0:
            raise ValueError("spatial_smoothing must be >= 0")


def precompute_means(geom: ArrayGeometry, azimuths, bins, sample_rate: int,
                     window_length: int, magnitude: float = 1.0) -> CandidateGrid:
    """Direct-path RTF templates ``g * exp(-j 2 pi f tau)`` for every candidate."""
    azimuths = np.asarray(azimuths, dtype=float)
    bins = np.asarray(bins, dtype=int)
    freqs = bins * sample_rate / window_length
    tau = geom.tdoa(azimuths)[:, 1:]  # (D, I-1)
    if np.allclose(tau, 0.0):
        warnings.warn("all microphones are colocated along the grid plane; "
                      "every candidate has zero TDOA", RuntimeWarning, stacklevel=2)
    means = magnitude * np.exp(-2j * np.pi * freqs[None, :, None] * tau[:, None, :])
    return CandidateGrid(azimuths, means, freqs, bins)


def log_densities(values: np.ndarray, means: np.ndarray, variance: float) -> np.ndarray:
    """Log circular complex Gaussian densities, broadcasting ``values[:, None]`` against ``means``."""
    d2 = np.abs(values[:, None] - means) ** 2
    return -np.log(np.pi * variance) - d2 / variance


def cgmm_responsibilities(features: FeatureSet, grid: CandidateGrid, weights: np.ndarray,
                          variance: float) -> tuple[np.ndarray, np.ndarray]:
    """Posterior component probabilities of each feature, ``(n_features, D)``.

    Returns ``(resp, flagged)``; features whose weighted densities all
    underflow get a uniform row and are flagged.
    """
    w = np.asarray(weights, dtype=float)
    if len(features) == 0:
        return np.zeros((0, grid.size)), np.zeros(0, dtype=bool)
    logp = log_densities(features.values, grid.feature_means(features), variance)
    with np.errstate(divide="ignore"):
        logp = logp + np.log(w)[None, :]
    top = logp.max(axis=1, keepdims=True)
    flagged = ~np.isfinite(top[:, 0])
    z = np.exp(logp - np.where(np.isfinite(top), top, 0.0))
    resp = z / z.sum(axis=1, keepdims=True)
    # the scaled ratio only fails when the unscaled densities all vanish
    raw = np.exp(logp)
    flagged |= raw.sum(axis=1) == 0.0
    resp[flagged] = 1.0 / grid.size
    return resp, flagged


def floor_weights(w: np.ndarray, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    w = np.maximum(np.asarray(w, dtype=float), floor)
    return w / w.sum()


def likelihood_gradient(densities: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient of the feature-averaged negative log-likelihood w.r.t. the weights."""
    if densities.shape[0] == 0:
        return np.zeros(densities.shape[1])
    mix = densities @ weights
    ok = mix > 0
    if not np.any(ok):
        return np.zeros(densities.shape[1])
    return -(densities[ok] / mix[ok, None]).mean(axis=0)


def feature_densities(features: FeatureSet, grid: CandidateGrid, variance: float) -> np.ndarray:
    """Densities scaled by a per-feature constant so the largest is one.

    The scale cancels in the likelihood ratio, so the gradient is unchanged
    while underflow for features far from every template is avoided.
    """
    if len(features) == 0:
        return np.zeros((0, grid.size))
    logp = log_densities(features.values, grid.feature_means(features), variance)
    return np.exp(logp - logp.max(axis=1, keepdims=True))


def objective_gradient(features: FeatureSet, grid: CandidateGrid, weights: np.ndarray,
                       cfg: LocalizerConfig) -> np.ndarray:
    """Gradient of ``-L + gamma * H`` at ``weights`` (floored to stay positive)."""
    w = floor_weights(weights)
    dens = feature_densities(features, grid, cfg.variance)
    grad = likelihood_gradient(dens, w)
    return grad - cfg.entropy_weight * (np.log(w) + 1.0)


def objective(features: FeatureSet, grid: CandidateGrid, weights: np.ndarray,
              cfg: LocalizerConfig) -> float:
    """``-L + gamma * H`` with ``L`` the feature-averaged log-likelihood."""
    w = np.asarray(weights, dtype=float)
    h = -np.sum(w * np.log(w))
    if len(features) == 0:
        return cfg.entropy_weight * h
    logp = log_densities(features.values, grid.feature_means(features), cfg.variance)
    ll = np.mean(np.log(np.exp(logp) @ w))
    return -ll + cfg.entropy_weight * h


def eg_update(w_prev: np.ndarray, gradient: np.ndarray, eta: float,
              max_ratio: float = float("inf")) -> np.ndarray:
    """Exponentiated-gradient step ``w <- w * exp(-eta g) / Z``.

    ``max_ratio`` optionally caps ``exp(-eta g)`` before normalization.
    """
    g = np.asarray(gradient, dtype=float)
    z = -eta * g
    if np.isfinite(max_ratio):
        z = np.minimum(z, np.log(max_ratio))
    # shifting the exponent by a constant leaves the normalized update unchanged
    r = np.exp(z - z.max())
    w = r * np.asarray(w_prev, dtype=float)
    return w / w.sum()


def smooth_circular(w: np.ndarray, amount: float) -> np.ndarray:
    """Mix each weight with its two circular neighbours; keeps the sum."""
    if amount <= 0:
        return w
    return (w + amount * (np.roll(w, 1) + np.roll(w, -1))) / (1.0 + 2.0 * amount)


def peak_pick(weights: np.ndarray, azimuths: np.ndarray, threshold: float = 0.04,
              min_separation_deg: float = 15.0) -> list[tuple[float, float]]:
    """Circular local maxima above ``threshold``, greedily thinned, strongest first."""
    w = np.asarray(weights, dtype=float)
    left, right = np.roll(w, 1), np.roll(w, -1)
    cand = np.flatnonzero((w >= left) & (w >= right) & (w >= threshold))
    if len(w) == 1:
        cand = np.flatnonzero(w >= threshold)
    order = cand[np.argsort(-w[cand], kind="stable")]
    kept: list[int] = []
    for d in order:
        sep = np.abs(wrap_deg(azimuths[kept] - azimuths[d])) if kept else np.array([])
        if np.all(sep >= min_separation_deg):
            kept.append(int(d))
    return [(float(azimuths[d]), float(w[d])) for d in kept]


class Localizer:
    """Holds the weight vector and applies one EG step per frame."""

    def __init__(self, grid: CandidateGrid, cfg: LocalizerConfig | None = None):
        self.grid = grid
        self.cfg = cfg or LocalizerConfig()
        self.weights = np.full(grid.size, 1.0 / grid.size)

    def step(self, features: FeatureSet) -> np.ndarray:
        cfg = self.cfg
        if len(features) < cfg.min_features and cfg.idle_relaxation > 0:
            self.weights = (1.0 - cfg.idle_relaxation) * self.weights \
                + cfg.idle_relaxation / self.grid.size
            return self.weights
        grad = objective_gradient(features, self.grid, self.weights, cfg)
        w = eg_update(floor_weights(self.weights), grad, cfg.learning_rate, cfg.max_step_ratio)
        self.weights = smooth_circular(w, cfg.spatial_smoothing)
        return self.weights

    def peaks(self) -> list[tuple[float, float]]:
        return peak_pick(self.weights, self.grid.azimuths, self.cfg.peak_threshold,
                         self.cfg.min_separation_deg)
