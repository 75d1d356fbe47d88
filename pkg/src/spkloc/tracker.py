"""Variational-EM multi-speaker tracker over CGMM weight observations.

Every candidate azimuth ``d`` of the localizer grid is an observation made of
a unit direction vector ``b_d`` and its weight ``w_d``. The weight acts as a
precision in a weighted-data Gaussian observation model; background
(``n = 0``) observations are uniform on the unit circle. Each speaker state is
``[u_x, u_y, v]``: direction on the unit circle and angular velocity in
radians per frame, propagated by a first-order circular-motion model.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

OBS_MATRIX = np.hstack([np.eye(2), np.zeros((2, 1))])
REGULARIZER = 1e-9
MIN_BIRTH_WEIGHT = 1e-9


@dataclass(frozen=True)
class TrackerConfig:
    max_speakers: int = 4
    obs_cov: tuple = ((0.03, 0.0), (0.0, 0.03))
    dynamics_cov: tuple = (1e-4, 1e-4, 1e-5)
    adaptive_dynamics: bool = False
    n_iters: int = 5
    birth_window: int = 25
    birth_threshold: float = 0.15
    birth_min_separation_deg: float = 20.0
    birth_velocity_var: float = 1e-3
    activity_threshold: float = 0.05
    activity_window: int = 12
    sleep_timeout: int = 125
    init_cov: tuple = (0.05, 0.05, 0.01)
    merge_distance_deg: float = 0.0
    merge_frames: int = 25

    def __post_init__(self):
        if self.max_speakers < 1:
            raise ValueError("max_speakers must be >= 1")
        for name in ("obs_cov", "dynamics_cov"):
            m = getattr(self, name)
            mat = np.asarray(m, dtype=float)
            mat = np.diag(mat) if mat.ndim == 1 else mat
            if np.any(np.linalg.eigvalsh(0.5 * (mat + mat.T)) <= 0):
                raise ValueError(f"{name} must be positive-definite")

    @property
    def sigma(self) -> np.ndarray:
        return np.asarray(self.obs_cov, dtype=float)

    @property
    def lam(self) -> np.ndarray:
        m = np.asarray(self.dynamics_cov, dtype=float)
        return np.diag(m) if m.ndim == 1 else m

    @property
    def prior(self) -> float:
        return 1.0 / (self.max_speakers + 1)

    @property
    def background_density(self) -> float:
        # uniform over the unit circle of directions, vol = 2 pi
        return 1.0 / (2.0 * np.pi)


@dataclass
class SpeakerState:
    mean: np.ndarray
    cov: np.ndarray
    speaker_id: int
    status: str = "active"
    lam: np.ndarray | None = None
    activity: deque = field(default_factory=deque)
    sleep_frames: int = 0
    age: int = 0
    close_frames: int = 0

    @property
    def azimuth_deg(self) -> float:
        return float(np.degrees(np.arctan2(self.mean[1], self.mean[0])))

    @property
    def active(self) -> bool:
        return self.status == "active"

    def copy(self) -> "SpeakerState":
        return SpeakerState(self.mean.copy(), self.cov.copy(), self.speaker_id, self.status,
                            None if self.lam is None else self.lam.copy(),
                            deque(self.activity, maxlen=self.activity.maxlen),
                            self.sleep_frames, self.age, self.close_frames)


def transition_matrix(mean: np.ndarray) -> np.ndarray:
    """First-order rotation of the direction by the angular velocity."""
    th = np.arctan2(mean[1], mean[0])
    return np.array([[1.0, 0.0, -np.sin(th)],
                     [0.0, 1.0, np.cos(th)],
                     [0.0, 0.0, 1.0]])


def predict(mean: np.ndarray, cov: np.ndarray, lam: np.ndarray):
    """Predictive Gaussian ``(D mu, D Gamma D^T + Lambda)`` and the matrix ``D``."""
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
        raise FloatingPointError("non-finite speaker state")
    d = transition_matrix(mean)
    return d @ mean, d @ cov @ d.T + lam, d


def observations(azimuths_deg: np.ndarray) -> np.ndarray:
    """Unit direction vectors ``(D, 2)`` of the candidate azimuths."""
    th = np.deg2rad(np.asarray(azimuths_deg, dtype=float))
    return np.stack([np.cos(th), np.sin(th)], axis=1)


def _log_obs_terms(b: np.ndarray, w: np.ndarray, mean: np.ndarray, cov: np.ndarray,
                   sigma: np.ndarray) -> np.ndarray:
    """Per-observation ``log N(b; M mu, Sigma/w) - w/2 tr(Sigma^-1 M Gamma M^T)``."""
    sinv = np.linalg.inv(sigma)
    r = b - mean[:2]
    maha = np.einsum("di,ij,dj->d", r, sinv, r)
    _, logdet = np.linalg.slogdet(sigma)
    tr = np.trace(sinv @ cov[:2, :2])
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    out = -np.log(2 * np.pi) - 0.5 * logdet + logw - 0.5 * w * maha - 0.5 * w * tr
    return np.where(w > 0, out, -np.inf)


def _log_marginal(b: np.ndarray, w: np.ndarray, mean: np.ndarray, cov: np.ndarray,
                  sigma: np.ndarray) -> np.ndarray:
    """Per-observation ``log N(b; M mu, M Gamma M^T + Sigma/w)``; ``-inf`` where ``w = 0``."""
    out = np.full(len(w), -np.inf)
    pos = w > 0
    s = cov[:2, :2][None] + sigma[None] / w[pos, None, None]
    r = b[pos] - mean[:2]
    sinv = np.linalg.inv(s)
    _, logdet = np.linalg.slogdet(s)
    out[pos] = -np.log(2 * np.pi) - 0.5 * logdet - 0.5 * np.einsum("di,dij,dj->d", r, sinv, r)
    return out


def e_z_step(b: np.ndarray, w: np.ndarray, means: list, covs: list,
             cfg: TrackerConfig) -> np.ndarray:
    """Assignment posteriors ``alpha (D, 1 + n_tracks)``; column 0 is background."""
    n_obs = len(w)
    logits = np.empty((n_obs, len(means) + 1))
    logits[:, 0] = np.log(cfg.prior * cfg.background_density)
    for k, (mu, gam) in enumerate(zip(means, covs), start=1):
        logits[:, k] = np.log(cfg.prior) + _log_obs_terms(b, w, mu, gam, cfg.sigma)
    top = logits.max(axis=1, keepdims=True)
    alpha = np.exp(logits - top)
    alpha /= alpha.sum(axis=1, keepdims=True)
    bad = ~np.all(np.isfinite(alpha), axis=1)
    if np.any(bad):
        alpha[bad] = 0.0
        alpha[bad, 0] = 1.0
    return alpha


def e_s_step(b: np.ndarray, w: np.ndarray, alpha_n: np.ndarray, prev_mean: np.ndarray,
             prev_cov: np.ndarray, lam: np.ndarray, sigma: np.ndarray):
    """Gaussian variational posterior of one speaker state; returns ``(mu, Gamma)``."""
    d = transition_matrix(prev_mean)
    pred_cov = lam + d @ prev_cov @ d.T
    pred_info = _inv(pred_cov)
    mts = OBS_MATRIX.T @ np.linalg.inv(sigma)
    aw = alpha_n * w
    info = aw.sum() * (mts @ OBS_MATRIX) + pred_info
    cov = _inv(info)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (mts @ (aw @ b) + pred_info @ (d @ prev_mean))
    return mean, cov


def _inv(m: np.ndarray) -> np.ndarray:
    try:
        out = np.linalg.inv(m)
        if np.all(np.isfinite(out)):
            return out
    except np.linalg.LinAlgError:
        pass
    logger.warning("singular matrix in tracker update; regularizing")
    return np.linalg.inv(m + REGULARIZER * np.eye(len(m)))


def m_step(mean: np.ndarray, cov: np.ndarray, prev_mean: np.ndarray, prev_cov: np.ndarray,
           cfg: TrackerConfig, floor: float = 1e-6) -> np.ndarray:
    """Dynamics covariance update; identity on the configured value unless adaptive."""
    if not cfg.adaptive_dynamics:
        return cfg.lam.copy()
    d = transition_matrix(prev_mean)
    r = mean - d @ prev_mean
    lam = cov + d @ prev_cov @ d.T + np.outer(r, r)
    lam = 0.5 * (lam + lam.T)
    vals, vecs = np.linalg.eigh(lam)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def vem_iterate(b: np.ndarray, w: np.ndarray, prev: list[tuple], cfg: TrackerConfig,
                n_iters: int | None = None):
    """Alternate E-Z and E-S (and M) steps for the live, awake speakers.

    ``prev`` holds ``(mean, cov, lam)`` of each speaker at the previous frame.
    Returns ``(means, covs, lams, alpha)``.
    """
    n_iters = cfg.n_iters if n_iters is None else n_iters
    if not prev:
        return [], [], [], e_z_step(b, w, [], [], cfg)
    lams = [p[2] for p in prev]
    means, covs = [], []
    for mu, gam, lam in prev:
        pm, pc, _ = predict(mu, gam, lam)
        means.append(pm)
        covs.append(pc)
    alpha = None
    for _ in range(n_iters):
        alpha = e_z_step(b, w, means, covs, cfg)
        for k, (mu0, gam0, _) in enumerate(prev):
            means[k], covs[k] = e_s_step(b, w, alpha[:, k + 1], mu0, gam0, lams[k], cfg.sigma)
            lams[k] = m_step(means[k], covs[k], mu0, gam0, cfg) if cfg.adaptive_dynamics \
                else lams[k]
    return means, covs, lams, alpha


def kalman_log_likelihood(b_seq: np.ndarray, w_seq: np.ndarray, cfg: TrackerConfig):
    """Prediction-error decomposition of an observation sequence under the dynamics.

    The first observation initializes the state (diffuse start, velocity 0
    with variance ``birth_velocity_var``) and does not contribute. Returns
    the per-step log-likelihoods and the final filtered ``(mean, cov)``.
    """
    sigma = cfg.sigma
    lam = cfg.lam
    mean = np.array([b_seq[0, 0], b_seq[0, 1], 0.0])
    cov = np.zeros((3, 3))
    cov[:2, :2] = sigma / w_seq[0]
    cov[2, 2] = cfg.birth_velocity_var
    terms = []
    for bk, wk in zip(b_seq[1:], w_seq[1:]):
        mean, cov, _ = predict(mean, cov, lam)
        s = OBS_MATRIX @ cov @ OBS_MATRIX.T + sigma / wk
        r = bk - mean[:2]
        sinv = np.linalg.inv(s)
        _, logdet = np.linalg.slogdet(s)
        terms.append(-np.log(2 * np.pi) - 0.5 * logdet - 0.5 * r @ sinv @ r)
        gain = cov @ OBS_MATRIX.T @ sinv
        mean = mean + gain @ r
        cov = cov - gain @ OBS_MATRIX @ cov
        cov = 0.5 * (cov + cov.T)
    return np.array(terms), mean, cov


def birth_score(b_seq: np.ndarray, w_seq: np.ndarray, cfg: TrackerConfig):
    """Per-frame geometric mean of the sequence's marginal likelihood, and the final state."""
    terms, mean, cov = kalman_log_likelihood(b_seq, w_seq, cfg)
    return float(np.exp(terms.mean())), mean, cov


def weighted_activity(alpha_n: np.ndarray, w: np.ndarray) -> float:
    return float(alpha_n @ w)


@dataclass
class TrackRecord:
    frame: int
    speaker_id: int
    azimuth_deg: float
    velocity: float
    active: bool
    trace: float


class Tracker:
    """Frame-synchronous tracker: VEM update, activity/sleep handling and births."""

    def __init__(self, azimuths_deg: np.ndarray, cfg: TrackerConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        self.azimuths = np.asarray(azimuths_deg, dtype=float)
        self.b = observations(self.azimuths)
        self.tracks: list[SpeakerState] = []
        self.next_id = 1
        self.frame = 0
        self.birth_pool: deque = deque(maxlen=self.cfg.birth_window)
        self.last_alpha: np.ndarray | None = None

    def _new_activity(self) -> deque:
        return deque(maxlen=self.cfg.activity_window)

    def step(self, weights: np.ndarray) -> list[TrackRecord]:
        cfg = self.cfg
        w = np.asarray(weights, dtype=float)
        b = self.b
        awake = [tr for tr in self.tracks if tr.active]
        asleep = [tr for tr in self.tracks if not tr.active]

        bad = []
        try:
            prev = [(tr.mean, tr.cov, tr.lam if tr.lam is not None else cfg.lam) for tr in awake]
            means, covs, lams, alpha = vem_iterate(b, w, prev, cfg)
        except FloatingPointError:
            logger.warning("non-finite speaker state; dropping affected tracks")
            bad = [tr for tr in awake if not np.all(np.isfinite(tr.mean))]
            awake = [tr for tr in awake if tr not in bad]
            prev = [(tr.mean, tr.cov, tr.lam if tr.lam is not None else cfg.lam) for tr in awake]
            means, covs, lams, alpha = vem_iterate(b, w, prev, cfg)
        for k, tr in enumerate(awake):
            tr.mean, tr.cov = _renormalize(means[k]), covs[k]
            tr.lam = lams[k]
            tr.activity.append(weighted_activity(alpha[:, k + 1], w))

        background = alpha[:, 0].copy()
        claimed = np.zeros(len(w), dtype=bool)
        for tr in asleep:
            try:
                pm, pc, _ = predict(tr.mean, tr.cov, tr.lam if tr.lam is not None else cfg.lam)
            except FloatingPointError:
                bad.append(tr)
                continue
            tr.mean, tr.cov = _renormalize(pm), pc
            shadow = self._shadow_assignment(w, pm, pc, background)
            claimed |= shadow > 0.5 * background
            tr.activity.append(weighted_activity(shadow, w))
        self.tracks = [tr for tr in self.tracks if tr not in bad]

        for tr in self.tracks:
            tr.age += 1
            level = float(np.mean(tr.activity)) if tr.activity else 0.0
            if tr.active:
                if len(tr.activity) >= min(cfg.activity_window, tr.age) and \
                        level <= cfg.activity_threshold:
                    tr.status = "sleeping"
                    tr.sleep_frames = 0
                    tr.activity = self._new_activity()
            else:
                tr.sleep_frames += 1
                if level > cfg.activity_threshold and len(tr.activity) >= cfg.activity_window // 2:
                    tr.status = "active"
                    tr.sleep_frames = 0
                    tr.activity = deque(tr.activity, maxlen=cfg.activity_window)
        self.tracks = [tr for tr in self.tracks
                       if tr.active or tr.sleep_frames <= cfg.sleep_timeout]
        self._merge()

        self._birth(w, alpha, claimed)
        self.last_alpha = alpha
        self.frame += 1
        return self.records(self.frame - 1)

    def _merge(self) -> None:
        """Drop the younger of two awake tracks that stayed too close for too long.

        Soft assignments let several tracks share one observation cluster, so
        duplicates coalesce instead of separating again.
        """
        cfg = self.cfg
        if cfg.merge_distance_deg <= 0:
            return
        awake = [tr for tr in self.tracks if tr.active]
        close = set()
        for i, a in enumerate(awake):
            for b in awake[i + 1:]:
                if abs((a.azimuth_deg - b.azimuth_deg + 180.0) % 360.0 - 180.0) \
                        < cfg.merge_distance_deg:
                    close.add(a.speaker_id)
                    close.add(b.speaker_id)
                    young = a if a.speaker_id > b.speaker_id else b
                    young.close_frames += 1
        for tr in awake:
            if tr.speaker_id not in close:
                tr.close_frames = 0
        drop = {tr.speaker_id for tr in awake if tr.close_frames >= cfg.merge_frames}
        if drop:
            logger.info("frame %d: merging duplicate tracks %s", self.frame, sorted(drop))
            self.tracks = [tr for tr in self.tracks if tr.speaker_id not in drop]

    def _shadow_assignment(self, w, mean, cov, background) -> np.ndarray:
        """Share of each background observation a sleeping track would claim.

        Uses the predictive marginal ``N(b; M mu, M Gamma M^T + Sigma/w)``: the
        variational trace penalty would stop a track whose uncertainty grew
        during a pause from ever reclaiming its speaker. The direction block is
        capped at the newborn-track covariance so that a long-sleeping track
        cannot claim observations anywhere on the circle.
        """
        cfg = self.cfg
        cap = float(np.sum(cfg.init_cov[:2]))
        cov = cov * min(1.0, cap / max(float(np.trace(cov[:2, :2])), 1e-300))
        log_n = np.log(cfg.prior) + _log_marginal(self.b, w, mean, cov, cfg.sigma)
        log_0 = np.log(cfg.prior * cfg.background_density)
        top = np.maximum(log_n, log_0)
        pn = np.exp(log_n - top)
        p0 = np.exp(log_0 - top)
        return background * pn / (pn + p0)

    def _birth(self, w: np.ndarray, alpha: np.ndarray, claimed: np.ndarray) -> None:
        cfg = self.cfg
        pool = (alpha[:, 0] >= alpha.max(axis=1)) & ~claimed
        if np.any(pool):
            d = np.flatnonzero(pool)[np.argmax(w[pool])]
            self.birth_pool.append((self.b[d], w[d], self.azimuths[d]))
        else:
            self.birth_pool.append(None)
        if len(self.birth_pool) < cfg.birth_window or any(x is None for x in self.birth_pool):
            return
        if len(self.tracks) >= cfg.max_speakers:
            return
        b_seq = np.array([x[0] for x in self.birth_pool])
        w_seq = np.array([x[1] for x in self.birth_pool])
        if np.any(w_seq < MIN_BIRTH_WEIGHT):
            return
        tau0, mean, _ = birth_score(b_seq, w_seq, cfg)
        if tau0 <= cfg.birth_threshold:
            return
        mean = _renormalize(mean)
        az = np.degrees(np.arctan2(mean[1], mean[0]))
        for tr in self.tracks:
            if abs((tr.azimuth_deg - az + 180.0) % 360.0 - 180.0) < cfg.birth_min_separation_deg:
                return
        az_seq = np.unwrap(np.deg2rad([x[2] for x in self.birth_pool]))
        mean[2] = float(np.mean(np.diff(az_seq)))
        track = SpeakerState(mean, np.diag(np.asarray(cfg.init_cov, dtype=float)),
                             self.next_id, "active", cfg.lam.copy(), self._new_activity())
        logger.info("frame %d: birth of speaker %d at %.1f deg (tau0=%.3g)",
                    self.frame, self.next_id, az, tau0)
        self.next_id += 1
        self.tracks.append(track)
        self.birth_pool.clear()

    def records(self, frame: int) -> list[TrackRecord]:
        return [TrackRecord(frame, tr.speaker_id, tr.azimuth_deg, float(tr.mean[2]),
                            tr.active, float(np.trace(tr.cov))) for tr in self.tracks]

    def state_dict(self) -> dict:
        return {
            "tracks": [{"mean": tr.mean.copy(), "cov": tr.cov.copy(), "speaker_id": tr.speaker_id,
                        "status": tr.status, "lam": None if tr.lam is None else tr.lam.copy(),
                        "activity": list(tr.activity), "sleep_frames": tr.sleep_frames,
                        "age": tr.age, "close_frames": tr.close_frames} for tr in self.tracks],
            "next_id": self.next_id,
            "frame": self.frame,
            "birth_pool": [None if x is None else (x[0].copy(), float(x[1]), float(x[2]))
                           for x in self.birth_pool],
        }

    def load_state_dict(self, state: dict) -> None:
        self.tracks = []
        for t in state["tracks"]:
            self.tracks.append(SpeakerState(
                np.array(t["mean"]), np.array(t["cov"]), int(t["speaker_id"]), t["status"],
                None if t["lam"] is None else np.array(t["lam"]),
                deque(t["activity"], maxlen=self.cfg.activity_window),
                int(t["sleep_frames"]), int(t["age"]), int(t.get("close_frames", 0))))
        self.next_id = int(state["next_id"])
        self.frame = int(state["frame"])
        self.birth_pool = deque(
            [None if x is None else (np.array(x[0]), float(x[1]), float(x[2]))
             for x in state["birth_pool"]], maxlen=self.cfg.birth_window)


def _renormalize(mean: np.ndarray) -> np.ndarray:
    out = np.array(mean, dtype=float)
    norm = np.hypot(out[0], out[1])
    if norm > 0:
        out[:2] /= norm
    return out
