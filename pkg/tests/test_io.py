import json
from pathlib import Path

import numpy as np
import pytest
from scipy.io import wavfile

from spkloc import io
from spkloc.localizer import ArrayGeometry
from spkloc.metrics import EvalReport, GroundTruth
from spkloc.pipeline import PipelineConfig, RunResult
from spkloc.tracker import TrackRecord

SAMPLES = Path(__file__).resolve().parents[1] / "samples"


def test_int16_normalization(tmp_path, rng):
    x = rng.integers(-32768, 32767, size=(1000, 2), dtype=np.int16)
    wavfile.write(tmp_path / "a.wav", 16000, x)
    audio = io.read_wav(tmp_path / "a.wav")
    assert audio.sample_rate == 16000
    np.testing.assert_array_equal(audio.samples, x.T / 32768.0)


@pytest.mark.parametrize("dtype,scale", [(np.int32, 2.0 ** 31), (np.float32, 1.0)])
def test_other_formats(tmp_path, rng, dtype, scale):
    x = (rng.uniform(-0.9, 0.9, size=(500, 3)) * scale).astype(dtype)
    wavfile.write(tmp_path / "b.wav", 16000, x)
    np.testing.assert_allclose(io.read_wav(tmp_path / "b.wav").samples, x.T / scale, rtol=1e-7)


def test_resampled_tone(tmp_path):
    t = np.arange(48000 * 2) / 48000
    x = np.sin(2 * np.pi * 1000 * t)
    wavfile.write(tmp_path / "tone.wav", 48000, np.stack([x, x], axis=1).astype(np.float32))
    audio = io.read_wav(tmp_path / "tone.wav")
    assert audio.sample_rate == 16000 and audio.n_samples == 32000
    y = audio.samples[0] * np.hanning(audio.n_samples)
    n_fft = 16 * audio.n_samples
    spec = np.abs(np.fft.rfft(y, n_fft))
    k = int(np.argmax(spec))
    # parabolic refinement of the zero-padded peak
    a, b, c = np.log(spec[k - 1:k + 2])
    f = (k + 0.5 * (a - c) / (a - 2 * b + c)) * 16000 / n_fft
    assert abs(f - 1000.0) < 0.1


def test_truncated_wav(tmp_path, rng):
    wavfile.write(tmp_path / "c.wav", 16000, rng.standard_normal((1000, 2)).astype(np.float32))
    data = (tmp_path / "c.wav").read_bytes()
    (tmp_path / "c.wav").write_bytes(data[:-100])
    with pytest.raises(io.FormatError, match="truncated"):
        io.read_wav(tmp_path / "c.wav")
    (tmp_path / "d.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(io.FormatError):
        io.read_wav(tmp_path / "d.wav")


def test_mono_rejected(tmp_path):
    wavfile.write(tmp_path / "m.wav", 16000, np.zeros(100, dtype=np.int16))
    with pytest.raises(io.FormatError, match="multichannel"):
        io.read_wav(tmp_path / "m.wav")


def test_wav_round_trip(tmp_path, rng):
    x = rng.uniform(-1, 1, (4, 800))
    io.write_wav(tmp_path / "r.wav", x, 16000)
    rate, raw = wavfile.read(tmp_path / "r.wav")
    assert rate == 16000 and raw.shape == (800, 4) and raw.dtype == np.float32
    np.testing.assert_allclose(io.read_wav(tmp_path / "r.wav").samples, x, atol=1e-7)


def test_geometry(tmp_path):
    (tmp_path / "g.txt").write_text("# pair\nspeed_of_sound = 340\n0 0 0\n0.1, 0\n")
    geom = io.read_geometry(tmp_path / "g.txt")
    assert geom.n_mics == 2 and geom.speed_of_sound == 340.0
    np.testing.assert_array_equal(geom.mic_positions[1], [0.1, 0.0, 0.0])
    io.write_geometry(tmp_path / "h.txt", geom)
    back = io.read_geometry(tmp_path / "h.txt")
    np.testing.assert_array_equal(back.mic_positions, geom.mic_positions)
    for bad in ("0 0 0\n0 0 0\n", "0 0 0\n", "0 0 0\n1 a 0\n", "foo = 1\n0 0\n1 0\n",
                "0 0 0 0\n1 0 0\n"):
        (tmp_path / "bad.txt").write_text(bad)
        with pytest.raises(io.FormatError):
            io.read_geometry(tmp_path / "bad.txt")


def test_sample_geometries():
    for name, side in (("square_5cm.txt", 0.05), ("square_7cm.txt", 0.07)):
        geom = io.read_geometry(SAMPLES / name)
        assert geom.n_mics == 4
        assert geom.max_spacing() == pytest.approx(side * np.sqrt(2))


def test_truth_round_trip(tmp_path):
    truth = GroundTruth(np.array([0.008, 0.016]),
                        [[(1, 10.5, True), (2, -170.25, False)], [(1, 11.0, True)]])
    io.write_truth(tmp_path / "t.csv", truth)
    back = io.read_truth(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.times, truth.times)
    assert back.frames == truth.frames
    (tmp_path / "u.csv").write_text("time,speaker_id\n0,1\n")
    with pytest.raises(io.FormatError, match="missing columns"):
        io.read_truth(tmp_path / "u.csv")


def _result(n_frames=3, d=4):
    rng = np.random.default_rng(0)
    heat = rng.dirichlet(np.ones(d), size=n_frames)
    recs = [TrackRecord(t, 1, 10.0 + t / 3, 0.001, t != 1, 0.2) for t in range(n_frames)]
    return RunResult(heat, np.linspace(-90, 180, d), 0.016 + 0.008 * np.arange(n_frames), recs,
                     [[(10.0, 0.5)], [], [(10.0, 0.4), (-90.0, 0.3)]][:n_frames], [])


def test_results_round_trip(tmp_path):
    res = _result()
    paths = io.write_results(tmp_path / "out", res, fingerprint="abc123")
    times, az, heat = io.read_heatmap(paths["heatmap"])
    np.testing.assert_array_equal(heat, res.heatmap)
    np.testing.assert_array_equal(az, res.azimuths)
    np.testing.assert_array_equal(times, res.times)
    assert heat.shape[0] == res.n_frames
    recs, frame_times = io.read_tracks(paths["tracks"])
    assert [(r.frame, r.speaker_id, r.azimuth_deg, r.velocity, r.active) for r in recs] == \
        [(r.frame, r.speaker_id, r.azimuth_deg, r.velocity, r.active) for r in res.tracks]
    np.testing.assert_array_equal(frame_times, res.times)
    peaks, _ = io.read_tracks(paths["peaks"])
    assert [(r.frame, r.azimuth_deg) for r in peaks] == [(0, 10.0), (2, 10.0), (2, -90.0)]
    for p in paths.values():
        assert io.read_fingerprint(p) == "abc123"


def test_empty_track_set(tmp_path):
    io.write_tracks(tmp_path / "e.csv", [], np.zeros(0))
    assert (tmp_path / "e.csv").read_text().strip() == ",".join(io.TRACK_FIELDS)
    recs, times = io.read_tracks(tmp_path / "e.csv")
    assert recs == [] and len(times) == 0


def test_report_outputs(tmp_path):
    rep = EvalReport(4.5, 20.0, 10.0, 2, 10, 8, 2, 1,
                     [{"frame": 0, "n_truth": 1, "n_est": 1, "matched": 1, "missed": 0,
                       "false_alarms": 0, "abs_error_sum": 4.5}])
    io.write_report(tmp_path / "report.txt", rep, "ff00")
    back = EvalReport.from_text((tmp_path / "report.txt").read_text())
    assert back.summary() == rep.summary()
    summary = json.loads((tmp_path / "report.json").read_text())
    assert summary["fingerprint"] == "ff00" and summary["id_switches"] == 2
    assert (tmp_path / "report_frames.csv").read_text().count("\n") == 3


def test_config_round_trip():
    for cfg in (PipelineConfig(), PipelineConfig.tuned()):
        text = io.dump_config(cfg)
        assert io.parse_config(text) == cfg
    assert io.config_fingerprint(PipelineConfig()) != io.config_fingerprint(PipelineConfig.tuned())


def test_config_overrides_and_errors():
    cfg = io.parse_config("[localizer]\nlearning_rate = 0.5\n[tracker]\nobs_cov = 0.01, 0, 0, 0.01\n"
                          "[pipeline]\nfmax_hz = 3000\n")
    assert cfg.localizer.learning_rate == 0.5
    assert cfg.tracker.obs_cov == ((0.01, 0.0), (0.0, 0.01))
    assert cfg.fmax_hz == 3000.0
    for bad in ("[localizer]\nbogus = 1\n", "[nonsense]\nx = 1\n", "[ctf]\nctf_length = abc\n",
                "[localizer]\nvariance = -1\n", "not an ini file"):
        with pytest.raises(io.FormatError):
            io.parse_config(bad)


def test_scene_files():
    scene = io.parse_scene(SAMPLES / "crossing.cfg")
    assert len(scene.sources) == 2 and scene.duration == 10.0 and scene.reverb is not None
    assert scene.sources[0].activity[1] == (1.9, 4.5)
    assert io.parse_scene(SAMPLES / "crossing.cfg", seed=9).seed == 9
    static = io.parse_scene(SAMPLES / "static.cfg")
    assert static.reverb is None and static.sources[0].trajectory == [(0.0, 30.0)]


def test_scene_errors(tmp_path):
    (tmp_path / "s.cfg").write_text("[scene]\nduration = 1\n")
    with pytest.raises(io.FormatError):
        io.parse_scene(tmp_path / "s.cfg")
    with pytest.raises(io.FormatError):
        io.parse_scene(tmp_path / "missing.cfg")


def test_tracks_to_estimates():
    truth = GroundTruth(np.array([0.0, 0.01, 0.02]), [[], [], []])
    recs = [TrackRecord(0, 1, 5.0, 0, True, 0), TrackRecord(1, 2, 6.0, 0, False, 0),
            TrackRecord(2, 1, 7.0, 0, True, 0)]
    est = io.tracks_to_estimates(recs, np.array([0.001, 0.011, 0.019]), truth)
    assert est == [[(1, 5.0)], [], [(1, 7.0)]]
    assert io.tracks_to_estimates(recs, np.array([0.0, 0.01, 0.02]), truth, False)[2] == [7.0]


def test_manifest(tmp_path):
    (tmp_path / "in.wav").write_bytes(b"")
    m = io.RunManifest("track", [str(tmp_path / "in.wav")], str(tmp_path), seed=3)
    m.validate()
    m.write(tmp_path / "manifest.json")
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 3
    with pytest.raises(FileNotFoundError):
        io.RunManifest("track", [str(tmp_path / "nope.wav")], str(tmp_path)).validate()
    with pytest.raises(ValueError):
        io.RunManifest("dance", [], str(tmp_path))


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        io.write_results(blocker / "sub", _result())


def test_geometry_type_is_exported():
    assert isinstance(io.read_geometry(SAMPLES / "square_5cm.txt"), ArrayGeometry)
