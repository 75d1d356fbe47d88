"""Localization and tracking scores: MAE, miss detections, false alarms, identity switches."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_GATE_DEG = 15.0


def angular_distance(a, b) -> np.ndarray:
    """Absolute circular difference in degrees, in ``[0, 180]``."""
    d = np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), 360.0)
    return np.minimum(d, 360.0 - d)


@dataclass
class GroundTruth:
    """Per-frame list of ``(speaker_id, azimuth_deg, active)`` plus frame times in seconds."""

    times: np.ndarray
    frames: list[list[tuple[int, float, bool]]]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.frames):
            raise ValueError("times and frames differ in length")

    def __len__(self) -> int:
        return len(self.frames)

    def active(self, t: int) -> list[tuple[int, float]]:
        return [(sid, az) for sid, az, act in self.frames[t] if act]

    def resample(self, times: np.ndarray) -> "GroundTruth":
        """Nearest-neighbour resampling onto another frame clock."""
        times = np.asarray(times, dtype=float)
        if len(self.times) == 0:
            return GroundTruth(times, [[] for _ in times])
        idx = np.clip(np.searchsorted(self.times, times), 1, len(self.times) - 1) \
            if len(self.times) > 1 else np.zeros(len(times), dtype=int)
        if len(self.times) > 1:
            left = self.times[idx - 1]
            right = self.times[idx]
            idx = np.where(np.abs(times - left) <= np.abs(right - times), idx - 1, idx)
        return GroundTruth(times, [list(self.frames[i]) for i in idx])


@dataclass
class FrameMatch:
    pairs: list[tuple[int, int, float]]  # (estimate index, truth index, error)
    missed: list[int]
    false_alarms: list[int]


def match_frame(estimates, truth, gate: float = DEFAULT_GATE_DEG) -> FrameMatch:
    """Minimum-total-error assignment of estimates to truth, pairs beyond ``gate`` disallowed."""
    est = np.asarray(estimates, dtype=float).reshape(-1)
    tru = np.asarray(truth, dtype=float).reshape(-1)
    if len(est) == 0 or len(tru) == 0:
        return FrameMatch([], list(range(len(tru))), list(range(len(est))))
    cost = angular_distance(est[:, None], tru[None, :])
    allowed = cost <= gate
    # gate-violating pairs cost more than any feasible full matching
    big = 1e6
    rows, cols = linear_sum_assignment(np.where(allowed, cost, big))
    pairs = [(int(r), int(c), float(cost[r, c])) for r, c in zip(rows, cols) if allowed[r, c]]
    used_e = {p[0] for p in pairs}
    used_t = {p[1] for p in pairs}
    return FrameMatch(pairs,
                      [j for j in range(len(tru)) if j not in used_t],
                      [i for i in range(len(est)) if i not in used_e])


@dataclass
class EvalReport:
    mae_deg: float | None
    md_rate_percent: float | None
    fa_rate_percent: float | None
    id_switches: int | None
    n_truth: int = 0
    n_matched: int = 0
    n_missed: int = 0
    n_false_alarms: int = 0
    details: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("details")
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.summary().items():
            lines.append(f"{k} = {'n/a' if v is None else v}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            vals[k] = v
        def num(key, typ):
            v = vals.get(key, "n/a")
            return None if v in ("n/a", "None") else typ(v)
        return cls(num("mae_deg", float), num("md_rate_percent", float),
                   num("fa_rate_percent", float), num("id_switches", int),
                   num("n_truth", int) or 0, num("n_matched", int) or 0,
                   num("n_missed", int) or 0, num("n_false_alarms", int) or 0)


def evaluate(estimates: list[list[tuple]], truth: GroundTruth,
             gate: float = DEFAULT_GATE_DEG) -> EvalReport:
    """Score frame-aligned estimates against the ground truth.

    ``estimates[t]`` lists the detections of frame ``t`` as ``azimuth`` floats
    or ``(track_id, azimuth)`` tuples; identity switches are only counted
    when identities are provided. Rates are percentages of the number of
    active speaker-frames.
    """
    if len(estimates) != len(truth):
        raise ValueError("estimates and truth must be frame-aligned")
    errors: list[float] = []
    n_truth = n_missed = n_fa = 0
    with_ids = any(isinstance(e, (tuple, list)) for frame in estimates for e in frame)
    last_id: dict[int, int] = {}
    switches = 0
    details = []
    for t, frame in enumerate(estimates):
        ids = [e[0] for e in frame] if with_ids else [None] * len(frame)
        az = [e[1] if with_ids else e for e in frame]
        active = truth.active(t)
        m = match_frame(az, [a for _, a in active], gate)
        n_truth += len(active)
        n_missed += len(m.missed)
        n_fa += len(m.false_alarms)
        for ie, it, err in m.pairs:
            errors.append(err)
            if with_ids:
                sid = active[it][0]
                tid = ids[ie]
                if sid in last_id and last_id[sid] != tid:
                    switches += 1
                last_id[sid] = tid
        details.append({"frame": t, "n_truth": len(active), "n_est": len(az),
                        "matched": len(m.pairs), "missed": len(m.missed),
                        "false_alarms": len(m.false_alarms),
                        "abs_error_sum": float(sum(p[2] for p in m.pairs))})
    mae = float(np.mean(errors)) if errors else None
    if n_truth == 0:
        md = fa = None
    else:
        md = 100.0 * n_missed / n_truth
        fa = 100.0 * n_fa / n_truth
    return EvalReport(mae, md, fa, switches if with_ids else None, n_truth, len(errors),
                      n_missed, n_fa, details)
