"""Command-line entry point: ``spkloc {simulate,localize,track,evaluate}``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .metrics import evaluate as score
from .pipeline import PipelineConfig, run

logger = logging.getLogger("spkloc")
PRESETS = {"tuned": PipelineConfig.tuned, "paper": PipelineConfig}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--preset", choices=PRESETS, default="tuned",
                   help="base settings that the config file overrides (default: tuned)")
    p.add_argument("--seed", type=int, default=None, help="random seed (simulate only)")
    p.add_argument("--frames", type=int, default=None, metavar="N",
                   help="process at most N frames")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spkloc", description="Online multi-speaker localization and tracking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scene file to WAV plus ground truth")
    p.add_argument("scene")
    p.add_argument("-o", "--output", required=True)
    _add_common(p)

    for name, text in (("localize", "weights heatmap and per-frame peaks"),
                       ("track", "heatmap, peaks and speaker tracks")):
        p = sub.add_parser(name, help=f"multichannel WAV -> {text}")
        p.add_argument("wav")
        p.add_argument("--geometry", required=True)
        p.add_argument("-o", "--output", required=True)
        _add_common(p)

    p = sub.add_parser("evaluate", help="score a tracks or peaks file against ground truth")
    p.add_argument("--tracks", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("-o", "--output", required=True, help="report file")
    p.add_argument("--gate", type=float, default=None, help="matching gate in degrees")
    _add_common(p)

    p = sub.add_parser("config", help="print the full default (or given) configuration")
    _add_common(p)
    return parser


def _config(args) -> PipelineConfig:
    base = PRESETS[args.preset]()
    return io.load_config(args.config, base) if args.config else base


def cmd_simulate(args) -> None:
    from .simulator import render

    scene = io.parse_scene(args.scene, args.seed)
    if args.frames is not None:
        st = scene.stft
        limit = ((args.frames - 1) * st.hop + st.window_length) / scene.sample_rate
        scene.duration = min(scene.duration, limit)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rendered = render(scene)
    io.write_wav(out / "audio.wav", rendered.audio)
    io.write_truth(out / "truth.csv", rendered.truth)
    io.write_geometry(out / "geometry.txt", scene.geometry)
    io.RunManifest("simulate", [str(args.scene)], str(out), args.config, scene.seed,
                   extra={"duration": scene.duration}).write(out / "manifest.json")
    logger.info("wrote %d frames of ground truth to %s", len(rendered.truth), out)


def cmd_process(args, with_tracks: bool) -> None:
    cfg = _config(args)
    manifest = io.RunManifest("track" if with_tracks else "localize",
                              [args.wav, args.geometry], args.output, args.config, args.seed)
    manifest.validate()
    geom = io.read_geometry(args.geometry)
    audio = io.read_wav(args.wav, target_rate=cfg.sample_rate)
    if audio.n_channels != geom.n_mics:
        raise io.FormatError(f"{args.wav} has {audio.n_channels} channels but the geometry "
                             f"lists {geom.n_mics} microphones")
    fingerprint = io.config_fingerprint(cfg)
    start = time.perf_counter()
    result = run(audio, geom, cfg, max_frames=args.frames)
    logger.info("processed %d frames in %.1f s", result.n_frames, time.perf_counter() - start)
    io.write_results(args.output, result, fingerprint=fingerprint, tracks=with_tracks)
    Path(args.output, "config.ini").write_text(io.dump_config(cfg))
    manifest.fingerprint = fingerprint
    manifest.write(Path(args.output) / "manifest.json")


def cmd_evaluate(args) -> None:
    records, frame_times = io.read_tracks(args.tracks)
    truth = io.read_truth(args.truth)
    with_ids = any(r.speaker_id != 0 for r in records)
    if args.frames is not None:
        truth = truth.resample(truth.times[:args.frames]) if len(truth) else truth
    estimates = io.tracks_to_estimates(records, frame_times, truth, with_ids)
    gate = args.gate if args.gate is not None else _config(args).gate_deg
    report = score(estimates, truth, gate)
    out = Path(args.output)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    io.write_report(out, report, io.read_fingerprint(args.tracks))
    sys.stdout.write(report.to_text())


def cmd_config(args) -> None:
    sys.stdout.write(io.dump_config(_config(args)))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.frames is not None and args.frames < 1:
        parser.error("--frames must be a positive integer")
    try:
        with np.errstate(over="ignore", under="ignore"):
            if args.command == "simulate":
                cmd_simulate(args)
            elif args.command in ("localize", "track"):
                cmd_process(args, args.command == "track")
            elif args.command == "evaluate":
                cmd_evaluate(args)
            else:
                cmd_config(args)
    except (OSError, ValueError) as exc:
        print(f"spkloc: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
