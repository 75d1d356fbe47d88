"""Recursive relative-CTF estimation and DP-RTF feature extraction.

For every frequency bin the concatenated relative CTF vector of all
channels is tracked by a complex RLS solver fed with one cross-relation
row per microphone pair and frame. The DP-RTF of channel ``i`` versus the
reference is the leading coefficient of its block of the relative CTF.

Channel indices are 0-based in code; channel 0 is the reference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CtfConfig:
    """CTF length ``Q`` and RLS memory.

    ``forgetting`` overrides the memory rule ``(P-1)/(P+1)`` when given.
    """

    ctf_length: int = 8
    memory: int = 25
    forgetting: float | None = None
    reference_channel: int = 0
    init_scale: float = 1e3
    consistency_tol: float = 0.35
    consistency_eps: float = 1e-6

    def __post_init__(self):
        if self.ctf_length < 1:
            raise ValueError("ctf_length must be >= 1")
        if self.forgetting is None and self.memory < 2:
            raise ValueError("memory must be >= 2 frames")
        lam = self.lam
        if not 0.0 < lam <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        if self.reference_channel != 0:
            # the block layout below assumes the reference is the first channel
            raise ValueError("reorder channels so that the reference comes first")

    @property
    def lam(self) -> float:
        if self.forgetting is not None:
            return float(self.forgetting)
        return forgetting_factor(self.memory)


def forgetting_factor(memory: int) -> float:
    """Forgetting factor giving an approximate memory of ``memory`` frames."""
    return (memory - 1) / (memory + 1)


def n_unknowns(n_channels: int, ctf_length: int) -> int:
    return n_channels * ctf_length - 1


def mic_pairs(n_channels: int) -> list[tuple[int, int]]:
    """All ``M = I(I-1)/2`` pairs ``(i, j)``, ``i < j``, in the fixed update order."""
    return list(combinations(range(n_channels), 2))


@dataclass
class CrossRelationRow:
    regressor: np.ndarray
    target: complex
    pair: int = 0


def cross_relation_vector(history: np.ndarray, i: int, j: int) -> np.ndarray:
    """Full cross-relation vector for pair ``(i, j)``.

    ``history`` is ``(channels, Q)`` holding ``x_t, x_{t-1}, ..., x_{t-Q+1}``
    for each channel. The block of channel ``i`` carries ``x^j`` and the
    block of channel ``j`` carries ``-x^i``, everything else zero.
    """
    n_ch, q = history.shape
    if i == j or not (0 <= i < n_ch and 0 <= j < n_ch):
        raise ValueError(f"invalid channel pair ({i}, {j}) for {n_ch} channels")
    if i > j:
        raise ValueError("pairs must be ordered with i < j")
    full = np.zeros(n_ch * q, dtype=complex)
    full[i * q:(i + 1) * q] = history[j]
    full[j * q:(j + 1) * q] = -history[i]
    return full


def build_cross_relation(history: np.ndarray, i: int, j: int, pair: int = 0) -> CrossRelationRow:
    """Row ``x~^T a~ = y`` obtained by pinning the reference's first CTF tap to one."""
    full = cross_relation_vector(np.asarray(history, dtype=complex), i, j)
    return CrossRelationRow(full[1:].copy(), complex(-full[0]), pair)


@dataclass
class RlsState:
    """Estimate and inverse correlation matrix of one frequency bin."""

    estimate: np.ndarray
    inv_corr: np.ndarray
    n_frames: int = 0

    @classmethod
    def initial(cls, n: int, init_scale: float = 1e3) -> "RlsState":
        return cls(np.zeros(n, dtype=complex), init_scale * np.eye(n, dtype=complex), 0)

    def copy(self) -> "RlsState":
        return RlsState(self.estimate.copy(), self.inv_corr.copy(), self.n_frames)


def _rank_one(a: np.ndarray, p: np.ndarray, x: np.ndarray, y: np.ndarray) -> None:
    """In-place RLS update of a batch of bins for rows ``x^T a = y``.

    Shapes: ``a (B, n)``, ``p (B, n, n)``, ``x (B, n)``, ``y (B,)``. With
    ``h = conj(x)`` this is the textbook update for ``y = h^H a``.
    """
    h = np.conj(x)
    ph = np.einsum("bij,bj->bi", p, h)
    denom = 1.0 + np.einsum("bi,bi->b", x, ph).real
    gain = ph / denom[:, None]
    err = y - np.einsum("bi,bi->b", x, a)
    a += gain * err[:, None]
    # P <- P - k h^H P ; with P Hermitian, h^H P = (P h)^H
    p -= gain[:, :, None] * np.conj(ph)[:, None, :]


def _symmetrize(p: np.ndarray, tol: float = 1e-6) -> None:
    asym = np.abs(p - np.conj(np.swapaxes(p, -1, -2))).max(axis=(-1, -2))
    scale = np.abs(p).max(axis=(-1, -2))
    bad = asym > tol * np.maximum(scale, 1e-300)
    if np.any(bad):
        p[bad] = 0.5 * (p[bad] + np.conj(np.swapaxes(p[bad], -1, -2)))


def begin_frame(inv_corr: np.ndarray, lam: float, cap: float | None) -> None:
    """Apply one frame of forgetting to a batch of inverse correlation matrices.

    Forgetting inflates ``P``; bins whose mean diagonal would pass ``cap`` are
    left as they are so that poorly excited directions cannot blow up.
    """
    if lam == 1.0:
        return
    if cap is None:
        inv_corr /= lam
        return
    n = inv_corr.shape[-1]
    level = np.einsum("...ii->...", inv_corr).real / n
    ok = level / lam <= cap
    inv_corr[ok] /= lam


def rls_frame(state: RlsState, rows: list[CrossRelationRow], lam: float,
              cap: float | None = None) -> RlsState:
    """Fold the rows of one frame into ``state`` (all rows weighted equally).

    Rows with non-finite entries are skipped.
    """
    out = state.copy()
    p = out.inv_corr[None]
    a = out.estimate[None]
    begin_frame(p, lam, cap)
    for row in rows:
        if not (np.all(np.isfinite(row.regressor)) and np.isfinite(row.target)):
            continue
        _rank_one(a, p, row.regressor[None], np.array([row.target]))
    _symmetrize(p)
    out.n_frames += 1
    return out


def rls_update(state: RlsState, row: CrossRelationRow, lam: float = 1.0,
               new_frame: bool = True) -> RlsState:
    """Single-row RLS step.

    ``new_frame`` applies the forgetting factor before the row; rows after
    the first within one frame must pass ``new_frame=False``.
    """
    out = state.copy()
    if not (np.all(np.isfinite(row.regressor)) and np.isfinite(row.target)):
        return out
    p = out.inv_corr[None]
    a = out.estimate[None]
    if new_frame:
        begin_frame(p, lam, None)
        out.n_frames += 1
    _rank_one(a, p, row.regressor[None], np.array([row.target]))
    return out


def dprtf_offsets(n_channels: int, ctf_length: int) -> np.ndarray:
    """Positions of the DP-RTFs of channels ``1..I-1`` inside the relative CTF vector."""
    return (ctf_length - 1) + np.arange(n_channels - 1) * ctf_length


def extract_dprtf(estimate: np.ndarray, n_channels: int, ctf_length: int) -> np.ndarray:
    """DP-RTFs of the non-reference channels, shape ``(..., I-1)``."""
    return np.asarray(estimate)[..., dprtf_offsets(n_channels, ctf_length)]


def consistency_test(current: np.ndarray, previous: np.ndarray | None,
                     tol: float = 0.35, eps: float = 1e-6) -> np.ndarray:
    """Boolean mask of estimates that are temporally stable.

    An estimate passes when its change since the previous one, relative to
    the previous magnitude, is at most ``tol``. Without history all pass.
    """
    current = np.asarray(current)
    if previous is None:
        return np.ones(current.shape, dtype=bool)
    previous = np.asarray(previous)
    rel = np.abs(current - previous) / np.maximum(np.abs(previous), eps)
    return np.isfinite(current) & (rel <= tol)


@dataclass
class FeatureSet:
    """DP-RTF features retained at one frame.

    ``freqs`` and ``channels`` (1..I-1, non-reference) index each feature;
    ``values`` are the complex DP-RTFs.
    """

    freqs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    channels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))

    def __len__(self) -> int:
        return len(self.values)

    def by_frequency(self) -> dict[int, dict[int, complex]]:
        out: dict[int, dict[int, complex]] = {}
        for f, i, c in zip(self.freqs, self.channels, self.values):
            out.setdefault(int(f), {})[int(i)] = complex(c)
        return out


class DprtfEstimator:
    """Bank of per-frequency RLS solvers over a fixed set of bins.

    ``bins`` are the STFT bin indices that feed localization. The spectrum
    history keeps the last ``Q`` denoised frames of those bins for every
    frame, speech or not; RLS and consistency state move only on speech.
    """

    def __init__(self, n_channels: int, bins: np.ndarray, cfg: CtfConfig | None = None):
        self.cfg = cfg or CtfConfig()
        self.n_channels = n_channels
        self.bins = np.asarray(bins, dtype=int)
        q = self.cfg.ctf_length
        n = n_unknowns(n_channels, q)
        nb = len(self.bins)
        self.pairs = mic_pairs(n_channels)
        self.estimate = np.zeros((nb, n), dtype=complex)
        self.inv_corr = np.tile(self.cfg.init_scale * np.eye(n, dtype=complex), (nb, 1, 1))
        self.history = np.zeros((nb, n_channels, q), dtype=complex)
        self.previous = np.full((nb, n_channels - 1), np.nan, dtype=complex)
        self.n_updates = np.zeros(nb, dtype=int)

    def state(self, k: int) -> RlsState:
        """RLS state of the ``k``-th managed bin."""
        return RlsState(self.estimate[k].copy(), self.inv_corr[k].copy(), int(self.n_updates[k]))

    def push(self, frame: np.ndarray) -> None:
        """Shift one ``(channels, all_freqs)`` spectrum frame into the history."""
        self.history = np.roll(self.history, 1, axis=2)
        self.history[:, :, 0] = frame[:, self.bins].T

    def update(self, speech: np.ndarray) -> FeatureSet:
        """Run the RLS step on bins whose label in ``speech`` (over all freqs) is set."""
        active = np.flatnonzero(np.asarray(speech)[self.bins])
        if active.size == 0:
            return FeatureSet()
        q = self.cfg.ctf_length
        a = self.estimate[active]
        p = self.inv_corr[active]
        hist = self.history[active]
        begin_frame(p, self.cfg.lam, self.cfg.init_scale)
        for i, j in self.pairs:
            full = np.zeros((active.size, self.n_channels * q), dtype=complex)
            full[:, i * q:(i + 1) * q] = hist[:, j]
            full[:, j * q:(j + 1) * q] = -hist[:, i]
            x, y = full[:, 1:], -full[:, 0]
            finite = np.all(np.isfinite(x), axis=1) & np.isfinite(y)
            if not np.all(finite):
                sub_a, sub_p = a[finite], p[finite]
                _rank_one(sub_a, sub_p, x[finite], y[finite])
                a[finite], p[finite] = sub_a, sub_p
            else:
                _rank_one(a, p, x, y)
        _symmetrize(p)
        ok = np.all(np.isfinite(a), axis=1) & np.all(np.isfinite(p), axis=(1, 2))
        if not np.all(ok):
            logger.warning("RLS diverged at %d bins; resetting them", int((~ok).sum()))
            n = a.shape[1]
            a[~ok] = 0.0
            p[~ok] = self.cfg.init_scale * np.eye(n)
        self.estimate[active] = a
        self.inv_corr[active] = p
        self.n_updates[active] += 1

        current = extract_dprtf(a, self.n_channels, q)
        prev = self.previous[active]
        keep = consistency_test(current, prev, self.cfg.consistency_tol, self.cfg.consistency_eps)
        keep |= np.isnan(prev)
        keep &= ok[:, None]
        self.previous[active] = current
        k_idx, ch = np.nonzero(keep)
        return FeatureSet(self.bins[active[k_idx]], ch + 1, current[k_idx, ch])

    def state_dict(self) -> dict:
        return {"estimate": self.estimate.copy(), "inv_corr": self.inv_corr.copy(),
                "history": self.history.copy(), "previous": self.previous.copy(),
                "n_updates": self.n_updates.copy()}

    def load_state_dict(self, state: dict) -> None:
        for key in ("estimate", "inv_corr", "history", "previous", "n_updates"):
            setattr(self, key, np.array(state[key]))


def process_frame(estimator: DprtfEstimator, frame: np.ndarray, speech: np.ndarray) -> FeatureSet:
    """Feed one denoised frame and its speech labels; returns the retained features."""
    estimator.push(frame)
    return estimator.update(speech)
