"""File formats: WAV input, array geometry, ground truth, configs and results.

Formats
-------
geometry   text, ``#`` comments, optional ``speed_of_sound = <m/s>`` header,
           then one microphone per row: ``x y z`` in meters (``z`` optional).
truth      CSV ``time,speaker_id,azimuth_deg,active``, one row per speaker
           per frame; frames are grouped by identical ``time``.
config     INI-style sections ``[pipeline] [stft] [noise] [ctf] [localizer]
           [tracker]`` holding every parameter; missing keys keep defaults.
scene      INI with ``[scene]`` and one ``[source.<name>]`` section per source.
heatmap    CSV, header ``time`` plus one column per candidate azimuth.
tracks     CSV ``time,frame,speaker_id,azimuth_deg,velocity,active``.
report     ``key = value`` text.

Result files begin with a ``# fingerprint: <hex>`` line identifying the
configuration that produced them. Floats are written with ``repr`` so that
reading a file back reproduces the values exactly.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io as _io
import json
import os
import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .frontend import AudioBuffer, NoiseConfig, StftConfig
from .dprtf import CtfConfig
from .localizer import ArrayGeometry, LocalizerConfig
from .metrics import EvalReport, GroundTruth
from .pipeline import PipelineConfig, RunResult
from .tracker import TrackerConfig, TrackRecord

DEFAULT_RATE = 16000
TRACK_FIELDS = ("time", "frame", "speaker_id", "azimuth_deg", "velocity", "active")
TRUTH_FIELDS = ("time", "speaker_id", "azimuth_deg", "active")


class FormatError(ValueError):
    """Raised for malformed or unsupported input files."""


# ---------------------------------------------------------------------------
# audio

def load_wav(path, target_rate: int | None = DEFAULT_RATE) -> tuple[np.ndarray, int]:
    """Samples ``(channels, n)`` in ``[-1, 1]`` and their rate.

    Integer PCM is divided by its full scale (``2**(bits-1)``; 8-bit is
    offset binary). Resampling uses a polyphase windowed-sinc filter.
    """
    path = Path(path)
    _check_wav_length(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError) as exc:
        raise FormatError(f"{path}: cannot read WAV data ({exc})") from exc
    if data.dtype == np.uint8:
        x = (data.astype(float) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(float) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(float) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(float)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    x = x.reshape(len(x), -1).T
    if target_rate is not None and rate != target_rate:
        x = resample(x, rate, target_rate)
        rate = target_rate
    return np.ascontiguousarray(x), int(rate)


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Rational-ratio resampling along the last axis."""
    ratio = Fraction(int(rate_out), int(rate_in))
    return resample_poly(x, ratio.numerator, ratio.denominator, axis=-1)


def read_wav(path, target_rate: int | None = DEFAULT_RATE) -> AudioBuffer:
    """Multichannel recording as an :class:`AudioBuffer` (at least two channels)."""
    x, rate = load_wav(path, target_rate)
    if x.shape[0] < 2:
        raise FormatError(f"{path}: localization needs a multichannel file, got {x.shape[0]} channel")
    return AudioBuffer(x, rate)


def write_wav(path, audio: AudioBuffer | np.ndarray, sample_rate: int | None = None) -> None:
    """32-bit float WAV."""
    if isinstance(audio, AudioBuffer):
        x, sample_rate = audio.samples, audio.sample_rate
    else:
        x = np.atleast_2d(np.asarray(audio, dtype=float))
    if sample_rate is None:
        raise ValueError("sample_rate is required for raw arrays")
    wavfile.write(path, int(sample_rate), np.ascontiguousarray(x.T.astype(np.float32)))


def _check_wav_length(path: Path) -> None:
    """Reject files whose data chunk is shorter than its header claims."""
    try:
        size = path.stat().st_size
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise FormatError(f"{path}: not a RIFF/WAVE file")
        pos = 12
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                raise FormatError(f"{path}: no data chunk")
            cid, clen = chunk[:4], int.from_bytes(chunk[4:], "little")
            pos += 8
            if cid == b"data":
                if pos + clen > size:
                    raise FormatError(f"{path}: truncated data chunk "
                                      f"({size - pos} of {clen} bytes)")
                return
            pos += clen + (clen & 1)
            fh.seek(pos)


# ---------------------------------------------------------------------------
# geometry

def read_geometry(path) -> ArrayGeometry:
    rows, c = [], 343.0
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
            if key != "speed_of_sound":
                raise FormatError(f"{path}:{n}: unknown header key {key!r}")
            c = float(val)
            continue
        try:
            vals = [float(v) for v in line.replace(",", " ").split()]
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: expected 'x y z', got {raw!r}") from exc
        if len(vals) not in (2, 3):
            raise FormatError(f"{path}:{n}: expected 2 or 3 coordinates, got {len(vals)}")
        rows.append(vals + [0.0] * (3 - len(vals)))
    if len(rows) < 2:
        raise FormatError(f"{path}: at least two microphones are required")
    pos = np.array(rows)
    if len(np.unique(pos, axis=0)) != len(pos):
        raise FormatError(f"{path}: duplicate microphone coordinates")
    return ArrayGeometry(pos, c)


def write_geometry(path, geom: ArrayGeometry) -> None:
    lines = [f"speed_of_sound = {geom.speed_of_sound!r}", "# x y z [m]"]
    lines += [" ".join(repr(float(v)) for v in p) for p in geom.mic_positions]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# ground truth

def write_truth(path, truth: GroundTruth) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRUTH_FIELDS)
        for t, frame in zip(truth.times, truth.frames):
            for sid, az, act in frame:
                w.writerow([repr(float(t)), sid, repr(float(az)), int(bool(act))])


def read_truth(path) -> GroundTruth:
    times: list[float] = []
    frames: list[list[tuple[int, float, bool]]] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        _require_columns(path, reader.fieldnames, TRUTH_FIELDS)
        for row in reader:
            t = float(row["time"])
            if not times or t != times[-1]:
                if times and t < times[-1]:
                    raise FormatError(f"{path}: times must be non-decreasing")
                times.append(t)
                frames.append([])
            frames[-1].append((int(row["speaker_id"]), float(row["azimuth_deg"]),
                               _parse_bool(row["active"])))
    return GroundTruth(np.array(times), frames)


# ---------------------------------------------------------------------------
# configuration

CONFIG_SECTIONS = {"stft": StftConfig, "noise": NoiseConfig, "ctf": CtfConfig,
                   "localizer": LocalizerConfig, "tracker": TrackerConfig}


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list, np.ndarray)):
        return ", ".join(repr(float(x)) for x in np.ravel(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, default, name: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if text.lower() == "none":
            return None
        if isinstance(default, (tuple, list)):
            vals = [float(x) for x in text.replace(",", " ").split()]
            shape = np.shape(default)
            if int(np.prod(shape)) != len(vals):
                raise ValueError(f"expected {int(np.prod(shape))} numbers")
            arr = np.array(vals).reshape(shape)
            return tuple(map(tuple, arr)) if arr.ndim == 2 else tuple(arr)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, str):
            return text
        return float(text)
    except ValueError as exc:
        raise FormatError(f"config key {name!r}: {exc}") from exc


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _scalar_fields(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))}


def dump_config(cfg: PipelineConfig) -> str:
    """Every parameter as sectioned ``key = value`` text."""
    parser = configparser.ConfigParser()
    parser["pipeline"] = {k: _format_value(v) for k, v in _scalar_fields(cfg).items()}
    for section in CONFIG_SECTIONS:
        parser[section] = {k: _format_value(v)
                           for k, v in _scalar_fields(getattr(cfg, section)).items()}
    buf = _io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise FormatError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(CONFIG_SECTIONS) - {"pipeline"}
    if unknown:
        raise FormatError(f"unknown config sections: {sorted(unknown)}")

    def updated(obj, section):
        if not parser.has_section(section):
            return obj
        defaults = _scalar_fields(obj)
        changes = {}
        for key, val in parser.items(section):
            if key not in defaults:
                raise FormatError(f"[{section}] unknown key {key!r}")
            ref = defaults[key]
            if ref is None:
                ref = 0.0
            changes[key] = _parse_value(val, ref, f"{section}.{key}")
        try:
            return dataclasses.replace(obj, **changes)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"[{section}] {exc}") from exc

    subs = {name: updated(getattr(base, name), name) for name in CONFIG_SECTIONS}
    return updated(dataclasses.replace(base, **subs), "pipeline")


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    return parse_config(Path(path).read_text(), base)


def config_fingerprint(cfg: PipelineConfig) -> str:
    """Short SHA-256 digest of the canonical config text."""
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# scenes

def parse_scene(path, seed: int | None = None):
    """Build a :class:`~spkloc.simulator.SceneConfig` from a scene file.

    ``[scene]`` keys: ``geometry`` (path, relative to the scene file),
    ``duration``, ``sample_rate``, ``snr_db`` (``inf`` for none), ``seed``,
    ``t60`` and ``drr_db`` (omit ``t60`` or set it to 0 for no reverb).
    ``[source.<name>]`` keys: ``trajectory`` (``t:az, t:az, ...``),
    ``activity`` (``start-end, ...``, omit for always on), ``signal``,
    ``level_db``, ``path``, ``speaker_id``.
    """
    from .simulator import ReverbConfig, SceneConfig, SourceConfig

    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        if not parser.read(path):
            raise FormatError(f"{path}: cannot read scene file")
    except configparser.Error as exc:
        raise FormatError(f"{path}: malformed scene file ({exc})") from exc
    if not parser.has_section("scene"):
        raise FormatError(f"{path}: missing [scene] section")
    sc = parser["scene"]
    try:
        geom = read_geometry(path.parent / sc["geometry"])
        t60 = float(sc.get("t60", "0"))
        reverb = ReverbConfig(t60=t60, drr_db=float(sc.get("drr_db", "10"))) if t60 > 0 else None
        sources = []
        for name in parser.sections():
            if not name.startswith("source"):
                continue
            s = parser[name]
            traj = [tuple(float(v) for v in item.split(":"))
                    for item in s["trajectory"].split(",") if item.strip()]
            act = None
            if s.get("activity", "").strip():
                act = [tuple(float(v) for v in item.split("-", 1))
                       for item in s["activity"].split(",") if item.strip()]
            sid = s.get("speaker_id")
            src_path = s.get("path")
            sources.append(SourceConfig(
                traj, s.get("signal", "speech"), act, float(s.get("level_db", "0")),
                str(path.parent / src_path) if src_path else None,
                int(sid) if sid else None))
        if not sources:
            raise FormatError(f"{path}: no [source.*] sections")
        return SceneConfig(geom, sources, float(sc.get("duration", "2.0")),
                           int(sc.get("sample_rate", str(DEFAULT_RATE))),
                           float(sc.get("snr_db", "inf")), reverb,
                           int(sc.get("seed", "0")) if seed is None else int(seed))
    except (KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: bad scene entry ({exc})") from exc


# ---------------------------------------------------------------------------
# results

def _header(fingerprint: str | None) -> str:
    return f"# fingerprint: {fingerprint}\n" if fingerprint else ""


def read_fingerprint(path) -> str | None:
    with open(path) as fh:
        first = fh.readline()
    if first.startswith("# fingerprint:"):
        return first.split(":", 1)[1].strip()
    return None


def write_heatmap(path, result: RunResult, fingerprint: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header(fingerprint))
        w = csv.writer(fh)
        w.writerow(["time"] + [repr(float(a)) for a in result.azimuths])
        for t, row in zip(result.times, result.heatmap):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_heatmap(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(times, azimuths, weights)``."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows or rows[0][0] != "time":
        raise FormatError(f"{path}: missing heatmap header")
    az = np.array([float(a) for a in rows[0][1:]])
    body = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(az) + 1)
    return body[:, 0], az, body[:, 1:]


def write_tracks(path, records: list[TrackRecord], times: np.ndarray,
                 fingerprint: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header(fingerprint))
        w = csv.writer(fh)
        w.writerow(TRACK_FIELDS)
        for r in records:
            w.writerow([repr(float(times[r.frame])), r.frame, r.speaker_id,
                        repr(float(r.azimuth_deg)), repr(float(r.velocity)), int(r.active)])


def read_tracks(path) -> tuple[list[TrackRecord], np.ndarray]:
    """Track records plus the time of each frame they reference (``nan`` if unseen)."""
    records, stamp = [], {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        _require_columns(path, reader.fieldnames, TRACK_FIELDS)
        for row in reader:
            frame = int(row["frame"])
            stamp[frame] = float(row["time"])
            records.append(TrackRecord(frame, int(row["speaker_id"]), float(row["azimuth_deg"]),
                                       float(row["velocity"]), _parse_bool(row["active"]), 0.0))
    n = max(stamp) + 1 if stamp else 0
    times = np.full(n, np.nan)
    for k, t in stamp.items():
        times[k] = t
    return records, times


def write_peaks(path, result: RunResult, fingerprint: str | None = None) -> None:
    """Localization-only detections in the tracks layout (``speaker_id`` 0)."""
    recs = [TrackRecord(t, 0, az, 0.0, True, wt)
            for t, frame in enumerate(result.peaks) for az, wt in frame]
    write_tracks(path, recs, result.times, fingerprint)


def write_report(path, report: EvalReport, fingerprint: str | None = None,
                 details: bool = True) -> None:
    """Key-value report at ``path`` plus ``.json`` and per-frame ``_frames.csv`` siblings."""
    path = Path(path)
    path.write_text(_header(fingerprint) + report.to_text())
    if not details:
        return
    summary = report.summary()
    summary["fingerprint"] = fingerprint
    path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(path.with_name(path.stem + "_frames.csv"), "w", newline="") as fh:
        fh.write(_header(fingerprint))
        fields = ("frame", "n_truth", "n_est", "matched", "missed", "false_alarms",
                  "abs_error_sum")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in report.details:
            w.writerow(row)


def write_results(out_dir, result: RunResult | None = None, report: EvalReport | None = None,
                  fingerprint: str | None = None, tracks: bool = True) -> dict[str, Path]:
    """Write whichever outputs are given into ``out_dir``; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    paths: dict[str, Path] = {}
    if result is not None:
        paths["heatmap"] = out / "heatmap.csv"
        write_heatmap(paths["heatmap"], result, fingerprint)
        paths["peaks"] = out / "peaks.csv"
        write_peaks(paths["peaks"], result, fingerprint)
        if tracks:
            paths["tracks"] = out / "tracks.csv"
            write_tracks(paths["tracks"], result.tracks, result.times, fingerprint)
    if report is not None:
        paths["report"] = out / "report.txt"
        write_report(paths["report"], report, fingerprint)
    return paths


def tracks_to_estimates(records: list[TrackRecord], frame_times: np.ndarray,
                        truth: GroundTruth, with_ids: bool = True) -> list[list]:
    """Active records regrouped onto the truth frame clock (nearest frame time)."""
    out: list[list] = [[] for _ in range(len(truth))]
    if len(truth) == 0:
        return out
    for r in records:
        if not r.active:
            continue
        t = frame_times[r.frame]
        k = int(np.argmin(np.abs(truth.times - t)))
        out[k].append((r.speaker_id, r.azimuth_deg) if with_ids else r.azimuth_deg)
    return out


def _require_columns(path, have, need) -> None:
    missing = [c for c in need if c not in (have or [])]
    if missing:
        raise FormatError(f"{path}: missing columns {missing}")


@dataclass
class RunManifest:
    mode: str
    inputs: list[str]
    output_dir: str
    config_path: str | None = None
    seed: int | None = None
    fingerprint: str | None = None
    extra: dict = field(default_factory=dict)

    MODES = ("simulate", "localize", "track", "evaluate")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")

    def validate(self) -> None:
        for p in self.inputs + ([self.config_path] if self.config_path else []):
            if not Path(p).is_file():
                raise FileNotFoundError(f"input not found: {p}")

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
