"""Acceptance criteria 1-8, each at its stated tolerance and runtime budget.

Run ``pytest tests/test_acceptance.py -v``; a summary with one PASS/FAIL line
per criterion is printed at the end of the session. Running this file as a
script does the same.
"""

import filecmp
import time
from pathlib import Path

import numpy as np
import pytest

from spkloc import cli
from spkloc.dprtf import (CrossRelationRow, CtfConfig, DprtfEstimator, RlsState,
                          extract_dprtf, rls_frame)
from spkloc.frontend import StftConfig, stft
from spkloc.localizer import (LocalizerConfig, eg_update, objective, objective_gradient,
                              precompute_means, default_azimuths, floor_weights)
from spkloc.dprtf import FeatureSet
from spkloc.metrics import GroundTruth, evaluate, match_frame
from spkloc.pipeline import PipelineConfig, run
from spkloc.simulator import ReverbConfig, SceneConfig, SourceConfig, render
from spkloc.tracker import OBS_MATRIX, e_s_step, transition_matrix

from conftest import square_geometry


# ---------------------------------------------------------------------------
# 1. RLS versus batch least squares

def _random_rows(rng, n_frames, n_rows, n):
    frames = []
    for _ in range(n_frames):
        rows = [CrossRelationRow(rng.standard_normal(n) + 1j * rng.standard_normal(n),
                                 complex(rng.standard_normal() + 1j * rng.standard_normal()))
                for _ in range(n_rows)]
        frames.append(rows)
    return frames


def _weighted_ls(frames, lam, n, init_scale):
    """Dense normal equations of the exponentially weighted objective.

    The recursion starts from ``a = 0`` with inverse correlation
    ``init_scale * I``, which is the exact minimizer of the same objective
    plus the prior ``lam**T / init_scale * |a|^2``; the prior is included.
    """
    t_total = len(frames)
    a_mat = (lam ** t_total / init_scale) * np.eye(n, dtype=complex)
    rhs = np.zeros(n, dtype=complex)
    for t, rows in enumerate(frames):
        weight = lam ** (t_total - 1 - t)
        for r in rows:
            a_mat += weight * np.outer(np.conj(r.regressor), r.regressor)
            rhs += weight * np.conj(r.regressor) * r.target
    return np.linalg.solve(a_mat, rhs)


def test_criterion_1_rls_batch_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {1.0: 0.0, 0.9: 0.0}
    for n_ch in (2, 3, 4):
        for q in (1, 2, 4):
            n = n_ch * q - 1
            n_pairs = n_ch * (n_ch - 1) // 2
            frames = _random_rows(rng, 50, n_pairs, n)
            for lam in worst:
                state = RlsState.initial(n, 1e3)
                for rows in frames:
                    state = rls_frame(state, rows, lam)
                ref = _weighted_ls(frames, lam, n, 1e3)
                rel = np.linalg.norm(state.estimate - ref) / np.linalg.norm(ref)
                worst[lam] = max(worst[lam], rel)
    elapsed = time.perf_counter() - start
    assert worst[1.0] <= 1e-8, worst
    assert worst[0.9] <= 1e-6, worst
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# 2. DP-RTF recovery on a noiseless static scene

def test_criterion_2_dprtf_recovery():
    start = time.perf_counter()
    geom = square_geometry(0.07)
    az = 40.0
    scene = SceneConfig(geom, [SourceConfig([(0.0, az)], signal="white")], duration=1.0, seed=3)
    audio = render(scene).audio
    st = StftConfig()
    spec = stft(audio, st).coefficients
    cfg = CtfConfig()
    bins = PipelineConfig().band_bins(geom)
    est = DprtfEstimator(geom.n_mics, bins, cfg)
    speech = np.ones(st.n_freqs, dtype=bool)  # noiseless: every bin carries the source
    for t in range(spec.shape[1]):
        est.push(spec[:, t])
        est.update(speech)
    assert est.n_updates.min() >= cfg.memory
    c = extract_dprtf(est.estimate, geom.n_mics, cfg.ctf_length)  # (bins, I-1)
    freqs = bins * audio.sample_rate / st.window_length
    tau = geom.tdoa(az)[1:]
    expected = np.exp(-2j * np.pi * freqs[:, None] * tau[None, :])
    phase_err = np.abs(np.angle(c * np.conj(expected)))
    elapsed = time.perf_counter() - start
    assert phase_err.max() <= 0.05, phase_err.max()
    assert elapsed < 30.0


# ---------------------------------------------------------------------------
# 3. Exponentiated gradient

def _random_instance(rng):
    geom = square_geometry(0.05)
    d = int(rng.integers(4, 13))
    az = np.sort(rng.choice(default_azimuths(5.0), d, replace=False))
    bins = np.arange(3, 20)
    grid = precompute_means(geom, az, bins, 16000, 256)
    k = int(rng.integers(1, 10))
    feats = FeatureSet(rng.choice(bins, k), rng.integers(1, geom.n_mics, k),
                       np.exp(1j * rng.uniform(-np.pi, np.pi, k)) * rng.uniform(0.5, 1.5, k))
    w = rng.dirichlet(np.ones(d)) * 0.9 + 0.1 / d
    cfg = LocalizerConfig(variance=float(rng.uniform(0.3, 2.0)),
                          entropy_weight=float(rng.uniform(0.0, 0.5)))
    return feats, grid, w, cfg


def test_criterion_3_eg_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    h = 1e-6
    for _ in range(100):
        feats, grid, w, cfg = _random_instance(rng)
        g = objective_gradient(feats, grid, w, cfg)
        fd = np.empty_like(g)
        for d in range(len(w)):
            e = np.zeros_like(w)
            e[d] = h
            fd[d] = (objective(feats, grid, w + e, cfg) - objective(feats, grid, w - e, cfg)) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    assert worst <= 1e-5, worst

    sum_err = shift_err = 0.0
    min_w = 1.0
    for _ in range(10_000):
        d = int(rng.integers(2, 80))
        w = floor_weights(rng.dirichlet(np.full(d, 0.5)))
        g = rng.standard_normal(d) * rng.uniform(0.1, 50.0)
        eta = rng.uniform(0.01, 2.0)
        out = eg_update(w, g, eta)
        shifted = eg_update(w, g + rng.uniform(-100, 100), eta)
        sum_err = max(sum_err, abs(out.sum() - 1.0))
        min_w = min(min_w, out.min())
        shift_err = max(shift_err, np.max(np.abs(out - shifted)))
    elapsed = time.perf_counter() - start
    assert sum_err <= 1e-12
    assert min_w > 0.0
    assert shift_err <= 1e-12, shift_err
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 4. Localization convergence with the default settings

@pytest.mark.parametrize("offset", [0.0, 2.5], ids=["on_grid", "midpoint"])
def test_criterion_4_localization_convergence(offset):
    start = time.perf_counter()
    geom = square_geometry(0.05)
    cfg = PipelineConfig()
    assert (cfg.localizer.learning_rate, cfg.localizer.entropy_weight) == (0.07, 0.1)
    az = 35.0 + offset
    scene = SceneConfig(geom, [SourceConfig([(0.0, az)])], duration=2.0, seed=4)
    result = run(render(scene).audio, geom, cfg)
    assert result.heatmap.shape[1] == 72
    best = result.azimuths[np.argmax(result.heatmap[-1])]
    elapsed = time.perf_counter() - start
    if offset == 0.0:
        assert best == pytest.approx(az)
    else:
        assert abs(best - az) <= 5.0
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 5. Kalman equivalence of the variational state update

def test_criterion_5_kalman_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    sigma = 0.03 * np.eye(2)
    lam = np.diag([1e-4, 1e-4, 1e-5])
    mean = np.array([1.0, 0.0, 0.01])
    cov = np.diag([0.05, 0.05, 0.01])
    k_mean, k_cov = mean.copy(), cov.copy()
    worst = 0.0
    for t in range(100):
        th = 0.01 * t
        b = np.array([[np.cos(th), np.sin(th)]]) + 0.05 * rng.standard_normal((1, 2))
        mean, cov = e_s_step(b, np.ones(1), np.ones(1), mean, cov, lam, sigma)
        # reference Kalman filter, covariance form
        d = transition_matrix(k_mean)
        x = d @ k_mean
        p = d @ k_cov @ d.T + lam
        s = OBS_MATRIX @ p @ OBS_MATRIX.T + sigma
        gain = p @ OBS_MATRIX.T @ np.linalg.inv(s)
        k_mean = x + gain @ (b[0] - OBS_MATRIX @ x)
        k_cov = (np.eye(3) - gain @ OBS_MATRIX) @ p
        worst = max(worst, np.max(np.abs(mean - k_mean)), np.max(np.abs(cov - k_cov)))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-10, worst
    assert elapsed < 1.0


# ---------------------------------------------------------------------------
# 6. End-to-end crossing talkers

def crossing_scene(seed: int) -> SceneConfig:
    s1 = SourceConfig([(0.0, 60.0), (10.0, -60.0)],
                      activity=[(0.0, 1.5), (1.9, 4.5), (4.9, 7.5), (7.9, 10.0)], speaker_id=1)
    s2 = SourceConfig([(0.0, -60.0), (10.0, 60.0)],
                      activity=[(0.0, 3.0), (3.4, 6.0), (6.4, 9.0), (9.4, 10.0)], speaker_id=2)
    return SceneConfig(square_geometry(0.07), [s1, s2], duration=10.0, snr_db=10.0,
                       reverb=ReverbConfig(t60=0.2, drr_db=10.0), seed=seed)


def test_criterion_6_two_speaker_scenario():
    start = time.perf_counter()
    cfg = PipelineConfig.tuned()
    rows = []
    for seed in range(10):
        scene = crossing_scene(seed)
        rendered = render(scene)
        result = run(rendered.audio, scene.geometry, cfg)
        rep = evaluate(result.track_estimates(), rendered.truth)
        rows.append((rep.mae_deg, rep.md_rate_percent, rep.fa_rate_percent, rep.id_switches))
    elapsed = time.perf_counter() - start
    table = np.array(rows, dtype=float)
    mae, md, fa = table[:, :3].mean(axis=0)
    ids = float(np.median(table[:, 3]))
    print(f"\nper-seed (MAE, MD, FA, IDs):\n{np.round(table, 2)}")
    print(f"mean MAE {mae:.2f} deg, MD {md:.1f} %, FA {fa:.1f} %, median IDs {ids}, "
          f"{elapsed:.0f} s")
    assert mae <= 5.0
    assert md <= 35.0
    assert fa <= 20.0
    assert ids <= 2
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# 7. Metric definitions on hand-built fixtures

def test_criterion_7_metrics_self_test():
    start = time.perf_counter()
    # crossed pairing must lose to the optimal one
    m = match_frame([29.0, 1.0], [0.0, 30.0])
    assert sorted((e, t) for e, t, _ in m.pairs) == [(0, 1), (1, 0)]
    assert sum(err for *_, err in m.pairs) == pytest.approx(2.0)
    # gate boundary: exactly 15 deg matches, just beyond does not
    assert len(match_frame([15.0], [0.0]).pairs) == 1
    edge = match_frame([15.0 + 1e-9], [0.0])
    assert edge.pairs == [] and edge.missed == [0] and edge.false_alarms == [0]
    assert len(match_frame([-170.0], [175.0]).pairs) == 1  # wraps around +-180

    # four frames, two speakers; hand-counted outcome below
    truth = GroundTruth(np.arange(4) * 0.008, [
        [(1, 10.0, True), (2, -40.0, True)],
        [(1, 12.0, True), (2, -40.0, False)],
        [(1, 14.0, True), (2, -38.0, True)],
        [(1, 16.0, True), (2, -36.0, True)],
    ])
    est = [
        [(7, 12.0), (8, -44.0)],  # errors 2, 4
        [(7, 13.0), (8, 60.0)],   # error 1, one FA
        [(9, 14.5)],              # error 0.5, speaker 1 switches 7 -> 9, speaker 2 missed
        [(9, 36.0), (8, -36.0)],  # speaker 1: 20 deg off -> MD + FA; speaker 2 exact
    ]
    rep = evaluate(est, truth)
    assert rep.n_truth == 7
    assert rep.n_matched == 5
    assert rep.mae_deg == pytest.approx((2 + 4 + 1 + 0.5 + 0) / 5)
    assert rep.md_rate_percent == pytest.approx(100 * 2 / 7)
    assert rep.fa_rate_percent == pytest.approx(100 * 2 / 7)
    assert rep.id_switches == 1
    perfect = evaluate([[(1, a) for _, a in truth.active(t)] for t in range(4)], truth)
    assert (perfect.mae_deg, perfect.md_rate_percent, perfect.fa_rate_percent,
            perfect.id_switches) == (0.0, 0.0, 0.0, 0)
    assert time.perf_counter() - start < 1.0


# ---------------------------------------------------------------------------
# 8. Determinism of the full command-line run

def test_criterion_8_determinism(tmp_path, monkeypatch):
    start = time.perf_counter()
    scene_file = tmp_path / "scene.cfg"
    geom_file = tmp_path / "geom.txt"
    geom_file.write_text("0.035 0.035 0\n-0.035 0.035 0\n-0.035 -0.035 0\n0.035 -0.035 0\n")
    scene_file.write_text(
        "[scene]\ngeometry = geom.txt\nduration = 4\nsnr_db = 10\nt60 = 0.2\nseed = 8\n"
        "[source.a]\ntrajectory = 0:50, 4:-10\n"
        "[source.b]\ntrajectory = 0:-90, 4:-60\nactivity = 0.5-3.5\n")
    assert cli.main(["simulate", str(scene_file), "-o", str(tmp_path / "sim")]) == 0
    wav = str(tmp_path / "sim" / "audio.wav")
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        assert cli.main(["track", wav, "--geometry", str(geom_file), "-o", "out"]) == 0
    files = sorted(p.name for p in (tmp_path / "a" / "out").iterdir())
    assert {"heatmap.csv", "tracks.csv", "peaks.csv"} <= set(files)
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "out", tmp_path / "b" / "out",
                                               files, shallow=False)
    assert mismatch == [] and errors == []
    assert time.perf_counter() - start < 120.0


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
