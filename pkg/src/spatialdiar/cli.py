"""Command-line pipeline driver.

Subcommands: simulate, stft, rectify, gss, cluster, score, pipeline. Exit
codes: 0 success, 2 input error, 3 numerical failure. External neural
components plug in through subprocess hooks that read and write the
documented file formats (RTTM, JSONL manifests, tensor files); the default
is passthrough, so the full three-stage control flow runs self-contained.
"""

import argparse
import json
import os
import shlex
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import report as figures
from .beamform import gss_extract
from .clustering import (
    cosine_affinity,
    estimate_num_speakers,
    filter_short_segments,
    spectral_cluster,
)
from .config import PipelineConfig, load_config
from .errors import InputError, NumericalError, SpatialDiarError
from .rectifier import DiarizationMatrix, rectify
from .scoring import (
    Segment,
    check_breakdown_additivity,
    compute_der,
    mask_to_segments,
    parse_rttm,
    write_rttm,
)
from .signal import MultichannelAudio, StftConfig, read_wav, stft, write_wav
from .simulate import scene_spec_from_json, simulate_scene
from .tensorio import read_tensor, write_tensor


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    return path


def _read_rttm_file(path):
    return parse_rttm(_require_file(path).read_text(encoding="utf-8"))


def _segments_to_matrix(segments, frame_rate, total_frames):
    """Frame activity matrix plus the sorted speaker-name order behind it."""
    speakers = sorted({s.speaker for s in segments})
    index = {name: k for k, name in enumerate(speakers)}
    d = np.zeros((total_frames, max(len(speakers), 1)))
    for seg in segments:
        i0 = max(int(np.floor(seg.start_s * frame_rate + 1e-9)), 0)
        i1 = min(int(np.ceil(seg.end_s * frame_rate - 1e-9)), total_frames)
        if i1 > i0:
            d[i0:i1, index[seg.speaker]] = 1.0
    return d, speakers


def _single_session(segments, fallback="session"):
    sessions = {s.session for s in segments}
    if len(sessions) > 1:
        raise InputError(f"expected a single session, found {sorted(sessions)}")
    return sessions.pop() if sessions else fallback


def _load_diarization(path, frame_rate, total_frames):
    """RTTM or tensor file to (DiarizationMatrix, speaker names, session)."""
    path = _require_file(path)
    if path.suffix == ".rttm":
        segments = _read_rttm_file(path)
        session = _single_session(segments)
        d, speakers = _segments_to_matrix(segments, frame_rate, total_frames)
        if not speakers:
            speakers = ["spk0"]
        return DiarizationMatrix(d=d, frame_rate=frame_rate), speakers, session
    data = np.asarray(read_tensor(path), dtype=np.float64)
    if data.ndim != 2:
        raise InputError(f"{path}: diarization tensor must be 2-D")
    if data.shape[0] != total_frames:
        raise InputError(
            f"{path}: {data.shape[0]} frames do not match audio ({total_frames})"
        )
    speakers = [f"spk{k}" for k in range(data.shape[1])]
    return DiarizationMatrix(d=data, frame_rate=frame_rate), speakers, "session"


def _read_manifest(path):
    rows = []
    for lineno, line in enumerate(
        _require_file(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        for key in ("session", "start_s", "end_s", "row"):
            if key not in row:
                raise InputError(f"{path}:{lineno}: missing key {key!r}")
        rows.append(row)
    rows.sort(key=lambda r: r["row"])
    return rows


def _write_manifest(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    spec_doc = json.loads(_require_file(args.spec).read_text(encoding="utf-8"))
    spec = scene_spec_from_json(spec_doc)
    truth = simulate_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_wav(truth.audio, out / "audio.wav")
    (out / "ref.rttm").write_text(write_rttm(truth.rttm), encoding="utf-8")
    write_tensor(out / "activities.tensor", truth.activities.d)
    write_tensor(out / "dominance.tensor", truth.dominance_masks.astype(np.float32))
    write_tensor(out / "embeddings.tensor", truth.embeddings)
    _write_manifest(truth.manifest, out / "segments.jsonl")
    meta = {
        "session": truth.session,
        "sample_rate": spec.sample_rate,
        "duration_s": spec.duration_s,
        "num_channels": spec.num_channels,
        "frame_rate": truth.activities.frame_rate,
        "stft": {
            "fft_size": spec.stft.fft_size,
            "hop": spec.stft.hop,
            "window": spec.stft.window,
        },
    }
    (out / "meta.json").write_text(_json_dumps(meta), encoding="utf-8")
    print(f"wrote scene {truth.session!r} to {out}")
    return 0


# -------------------------------------------------------------------- stft

def cmd_stft(args) -> int:
    audio = read_wav(_require_file(args.audio))
    config = StftConfig(fft_size=args.fft_size, hop=args.hop, window=args.window)
    tensor = stft(audio, config)
    write_tensor(args.out, tensor.data.astype(np.complex64))
    meta = {
        "fft_size": config.fft_size,
        "hop": config.hop,
        "window": config.window,
        "sample_rate": audio.sample_rate,
        "num_samples": audio.num_samples,
    }
    Path(str(args.out) + ".json").write_text(_json_dumps(meta), encoding="utf-8")
    return 0


# ----------------------------------------------------------------- rectify

def _run_rectify(audio_path, diar_path, config: PipelineConfig, rounds: int):
    audio = read_wav(_require_file(audio_path))
    tensor = stft(audio, config.stft)
    frame_rate = config.stft.frame_rate(audio.sample_rate)
    diar, speakers, session = _load_diarization(
        diar_path, frame_rate, tensor.num_frames
    )
    vad = fused = None
    current = diar
    for _ in range(rounds):
        vad, fused = rectify(tensor, current, config.rectifier)
        current = DiarizationMatrix(d=vad.m.astype(np.float64), frame_rate=frame_rate)
    segments = mask_to_segments(
        vad, frame_rate, session=session, speaker_names=speakers
    )
    return diar, vad, fused, segments, frame_rate, session, speakers


def cmd_rectify(args) -> int:
    config = load_config(args.config, _rectify_overrides(args))
    diar, vad, fused, segments, frame_rate, _, _ = _run_rectify(
        args.audio, args.diar, config, args.rounds
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rectified.rttm").write_text(write_rttm(segments), encoding="utf-8")
    write_tensor(out / "fused_posterior.tensor", fused.gamma.astype(np.float32))
    if args.figures:
        figures.save_activity_figure(
            {"input": diar.d, "rectified": vad.m},
            frame_rate,
            out / "activity.png",
        )
        beta = fused.gamma[:, :, :-1].mean(axis=1)
        figures.save_beta_figure(
            beta, frame_rate, config.rectifier.threshold, out / "beta.png"
        )
    print(f"wrote {out / 'rectified.rttm'}")
    return 0


def _rectify_overrides(args):
    return {
        "rectifier.block_length": args.block_length,
        "rectifier.threshold": args.threshold,
        "rectifier.hangover": args.hangover,
        "rectifier.em.iterations": args.em_iterations,
        "stft.fft_size": args.fft_size,
        "stft.hop": args.hop,
    }


# --------------------------------------------------------------------- gss

def cmd_gss(args) -> int:
    config = load_config(args.config, {"beamform.context_s": args.context})
    audio = read_wav(_require_file(args.audio))
    segments = _read_rttm_file(args.rttm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _run_gss(audio, segments, config, out)
    (out / "gss_manifest.json").write_text(_json_dumps(manifest), encoding="utf-8")
    print(f"extracted {len(manifest)} segments to {out}")
    return 0


def _run_gss(audio: MultichannelAudio, segments, config: PipelineConfig, out: Path):
    from .cacgmm import EmOptions

    manifest = []
    if not segments:
        return manifest
    session = _single_session(segments)
    tensor = stft(audio, config.stft)
    frame_rate = config.stft.frame_rate(audio.sample_rate)
    d, speakers = _segments_to_matrix(segments, frame_rate, tensor.num_frames)
    activities = d.astype(np.int8)
    em = EmOptions(iterations=config.beamform.iterations, prior_mode="frozen")
    for seg in sorted(segments, key=lambda s: (s.start_s, s.speaker)):
        i0 = max(int(np.floor(seg.start_s * frame_rate + 1e-9)), 0)
        i1 = min(int(np.ceil(seg.end_s * frame_rate - 1e-9)), tensor.num_frames)
        if i1 <= i0:
            continue
        target = speakers.index(seg.speaker)
        enhanced = gss_extract(
            tensor, activities, (i0, i1), target,
            context_s=config.beamform.context_s, em=em,
        )
        start_ms = int(round(seg.start_s * 1000))
        end_ms = int(round(seg.end_s * 1000))
        name = f"{session}-{seg.speaker}-{start_ms}-{end_ms}.wav"
        write_wav(enhanced, out / name)
        manifest.append(
            {
                "file": name,
                "session": session,
                "speaker": seg.speaker,
                "start_s": seg.start_s,
                "end_s": seg.end_s,
            }
        )
    return manifest


# ----------------------------------------------------------------- cluster

def _cluster_manifest(vectors, rows, config: PipelineConfig, num_speakers=None):
    """Word-count filter, affinity, eigengap, spectral clustering."""
    if len(rows) != len(vectors):
        raise InputError(
            f"manifest has {len(rows)} rows, embeddings {len(vectors)}"
        )
    if rows and all("word_count" in row for row in rows):
        keep = [
            i for i, row in enumerate(rows)
            if row["word_count"] >= config.clustering.min_words
        ]
    else:
        keep = [
            i for i, row in enumerate(rows)
            if row["end_s"] - row["start_s"] >= config.clustering.min_duration_s
        ]
    rows = [rows[i] for i in keep]
    vectors = vectors[keep]
    if not rows:
        return [], []
    if len(rows) == 1:
        assignment_labels = [0]
    else:
        affinity = cosine_affinity(vectors)
        k = num_speakers or estimate_num_speakers(
            affinity, max_k=config.clustering.max_k
        )
        assignment = spectral_cluster(affinity, min(k, len(rows)))
        assignment_labels = assignment.labels.tolist()
    segments = [
        Segment(
            session=row["session"],
            speaker=f"spk{label}",
            start_s=float(row["start_s"]),
            duration_s=float(row["end_s"] - row["start_s"]),
        )
        for row, label in zip(rows, assignment_labels)
    ]
    segments.sort(key=lambda s: (s.start_s, s.speaker))
    return segments, assignment_labels


def cmd_cluster(args) -> int:
    config = load_config(
        args.config,
        {
            "clustering.max_k": args.max_k,
            "clustering.min_words": args.min_words,
            "clustering.min_duration_s": args.min_duration,
        },
    )
    vectors = np.asarray(read_tensor(_require_file(args.embeddings)), dtype=np.float64)
    rows = _read_manifest(args.manifest)
    segments, _ = _cluster_manifest(vectors, rows, config, args.num_speakers)
    Path(args.out).write_text(write_rttm(segments), encoding="utf-8")
    print(f"wrote {args.out} ({len(segments)} segments)")
    return 0


# ------------------------------------------------------------------- score

def _report_text(reports: dict) -> str:
    header = f"{'':<12}{'FA':>8}{'MISS':>8}{'SpkErr':>8}{'DER':>8}{'scored_s':>10}"
    lines = [header]
    for label, rep in reports.items():
        lines.append(
            f"{label:<12}{rep.fa:>8.2f}{rep.miss:>8.2f}{rep.spkerr:>8.2f}"
            f"{rep.der:>8.2f}{rep.scored_time:>10.2f}"
        )
    return "\n".join(lines) + "\n"


def cmd_score(args) -> int:
    if args.check_arithmetic:
        failures = 0
        for label, residual, ok in check_breakdown_additivity():
            print(f"{label:<14} residual={residual:.4f} {'ok' if ok else 'FAIL'}")
            failures += 0 if ok else 1
        return 0 if failures == 0 else 1
    ref = _read_rttm_file(args.ref)
    hyp = _read_rttm_file(args.hyp)
    rep = compute_der(ref, hyp, collar_s=args.collar, frame_s=args.frame)
    print(_json_dumps(rep.to_dict()), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        reports = {"overall": rep}
        sessions = sorted({s.session for s in ref})
        if len(sessions) > 1:
            for session in sessions:
                reports[session] = compute_der(
                    [s for s in ref if s.session == session],
                    [s for s in hyp if s.session == session],
                    collar_s=args.collar,
                    frame_s=args.frame,
                )
        (out / "report.json").write_text(
            _json_dumps({k: v.to_dict() for k, v in reports.items()}),
            encoding="utf-8",
        )
        (out / "report.txt").write_text(_report_text(reports), encoding="utf-8")
        if args.figures:
            figures.save_der_figure(reports, out / "der_components.png")
    return 0


# ---------------------------------------------------------------- pipeline

def _run_hook(command, stage, arguments) -> None:
    argv = shlex.split(command) + [str(a) for a in arguments]
    result = subprocess.run(argv, capture_output=True, text=True)
    if result.returncode != 0:
        raise SpatialDiarError(
            f"{stage} hook {command!r} exited {result.returncode}: "
            f"{result.stderr.strip()[:500]}"
        )


def _pipeline_session(scene_dir: Path, out: Path, config: PipelineConfig, args):
    audio_path = _require_file(scene_dir / "audio.wav")
    out.mkdir(parents=True, exist_ok=True)

    # Stage 1: clustering initialization (or an externally supplied RTTM).
    emb_path = scene_dir / "embeddings.tensor"
    manifest_path = scene_dir / "segments.jsonl"
    init_path = scene_dir / "init.rttm"
    if emb_path.is_file() and manifest_path.is_file():
        vectors = np.asarray(read_tensor(emb_path), dtype=np.float64)
        rows = _read_manifest(manifest_path)
        stage1, _ = _cluster_manifest(vectors, rows, config)
    elif init_path.is_file():
        stage1 = _read_rttm_file(init_path)
    else:
        raise InputError(
            f"{scene_dir}: need embeddings.tensor + segments.jsonl or init.rttm"
        )
    (out / "stage1.rttm").write_text(write_rttm(stage1), encoding="utf-8")

    stage1_nsd = out / "stage1_nsd.rttm"
    if args.nsd_hook:
        _run_hook(args.nsd_hook, "stage1 nsd", [audio_path, out / "stage1.rttm", stage1_nsd])
    else:
        stage1_nsd.write_text(write_rttm(stage1), encoding="utf-8")

    # Stage 2: rectification of the first-pass activities.
    diar, vad, fused, segments, frame_rate, session, speakers = _run_rectify(
        audio_path, stage1_nsd, config, config.rounds
    )
    (out / "stage2.rttm").write_text(write_rttm(segments), encoding="utf-8")
    write_tensor(out / "fused_posterior.tensor", fused.gamma.astype(np.float32))

    stage2_nsd = out / "stage2_nsd.rttm"
    if args.nsd_hook:
        _run_hook(args.nsd_hook, "stage2 nsd", [audio_path, out / "stage2.rttm", stage2_nsd])
    else:
        stage2_nsd.write_text(write_rttm(segments), encoding="utf-8")
    stage2_segments = _read_rttm_file(stage2_nsd)

    # Stage 3: guided extraction, short-segment filter, re-clustering.
    audio = read_wav(audio_path)
    gss_dir = out / "gss"
    gss_dir.mkdir(exist_ok=True)
    gss_manifest = _run_gss(audio, stage2_segments, config, gss_dir)
    (out / "gss_manifest.json").write_text(_json_dumps(gss_manifest), encoding="utf-8")

    if args.embed_hook:
        seg_manifest = out / "stage3_segments_in.jsonl"
        _write_manifest(
            [
                {
                    "session": row["session"],
                    "start_s": row["start_s"],
                    "end_s": row["end_s"],
                    "row": i,
                    "file": row["file"],
                }
                for i, row in enumerate(gss_manifest)
            ],
            seg_manifest,
        )
        emb_out = out / "stage3_embeddings.tensor"
        rows_out = out / "stage3_segments.jsonl"
        _run_hook(
            args.embed_hook, "stage3 embedding",
            [audio_path, seg_manifest, emb_out, rows_out],
        )
        vectors = np.asarray(read_tensor(emb_out), dtype=np.float64)
        rows = _read_manifest(rows_out)
        stage3, _ = _cluster_manifest(vectors, rows, config)
    else:
        filtered = filter_short_segments(
            stage2_segments,
            min_words=config.clustering.min_words,
            min_duration_s=config.clustering.min_duration_s,
        )
        stage3 = filtered
    (out / "stage3.rttm").write_text(write_rttm(stage3), encoding="utf-8")

    final_path = out / "final.rttm"
    if args.nsd_hook:
        _run_hook(args.nsd_hook, "stage3 nsd", [audio_path, out / "stage3.rttm", final_path])
    else:
        final_path.write_text(write_rttm(stage3), encoding="utf-8")

    # Report against the reference when one ships with the scene.
    ref_path = scene_dir / "ref.rttm"
    if ref_path.is_file():
        ref = _read_rttm_file(ref_path)
        reports = {}
        for label, path in (
            ("stage1", out / "stage1.rttm"),
            ("stage2", out / "stage2.rttm"),
            ("final", final_path),
        ):
            hyp = _read_rttm_file(path)
            try:
                reports[label] = compute_der(
                    ref, hyp,
                    collar_s=config.scoring.collar_s,
                    frame_s=config.scoring.frame_s,
                )
            except InputError:
                continue
        (out / "report.json").write_text(
            _json_dumps({k: v.to_dict() for k, v in reports.items()}),
            encoding="utf-8",
        )
        (out / "report.txt").write_text(_report_text(reports), encoding="utf-8")
        if args.figures and reports:
            figures.save_der_figure(reports, out / "der_components.png")
    if args.figures:
        figures.save_activity_figure(
            {"stage1": diar.d, "stage2": vad.m}, frame_rate, out / "activity.png"
        )
    return session


def _worker_count(args) -> int:
    if args.workers:
        return args.workers
    env = os.environ.get("SPATIAL_DIAR_THREADS")
    if env:
        try:
            return max(int(env), 1)
        except ValueError as exc:
            raise InputError(f"SPATIAL_DIAR_THREADS={env!r} is not an integer") from exc
    return 1


def cmd_pipeline(args) -> int:
    config = load_config(args.config)
    scene_dirs = [Path(p) for p in args.scenes]
    for scene in scene_dirs:
        if not scene.is_dir():
            raise InputError(f"no such scene directory: {scene}")
    out_root = Path(args.out)
    multi = len(scene_dirs) > 1

    def run(scene: Path):
        target = out_root / scene.name if multi else out_root
        return _pipeline_session(scene, target, config, args)

    workers = _worker_count(args)
    if workers > 1 and multi:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sessions = list(pool.map(run, scene_dirs))
    else:
        sessions = [run(scene) for scene in scene_dirs]
    print(f"processed sessions: {', '.join(sessions)}")
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatialdiar",
        description="Spatial diarization pipeline: simulate, rectify, "
        "separate, cluster and score multichannel meetings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic scene with ground truth")
    p.add_argument("--spec", required=True, help="scene spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stft", help="compute a complex spectrogram tensor")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fft-size", type=int, default=1024)
    p.add_argument("--hop", type=int, default=256)
    p.add_argument("--window", default="sqrt_hann")
    p.set_defaults(func=cmd_stft)

    p = sub.add_parser("rectify", help="rectify a diarization with spatial masks")
    p.add_argument("--audio", required=True)
    p.add_argument("--diar", required=True, help="initial diarization (.rttm or tensor)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--block-length", type=int, dest="block_length")
    p.add_argument("--threshold", type=float)
    p.add_argument("--hangover", type=int)
    p.add_argument("--em-iterations", type=int, dest="em_iterations")
    p.add_argument("--fft-size", type=int, dest="fft_size")
    p.add_argument("--hop", type=int, dest="hop")
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_rectify)

    p = sub.add_parser("gss", help="extract per-segment enhanced audio")
    p.add_argument("--audio", required=True)
    p.add_argument("--rttm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--context", type=float, help="context seconds on each side")
    p.set_defaults(func=cmd_gss)

    p = sub.add_parser("cluster", help="spectral-cluster segment embeddings")
    p.add_argument("--embeddings", required=True, help="embedding tensor file")
    p.add_argument("--manifest", required=True, help="JSONL span manifest")
    p.add_argument("--out", required=True, help="output RTTM")
    p.add_argument("--config")
    p.add_argument("--max-k", type=int, dest="max_k")
    p.add_argument("--min-words", type=int, dest="min_words")
    p.add_argument("--min-duration", type=float, dest="min_duration")
    p.add_argument("--num-speakers", type=int, dest="num_speakers")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("score", help="compute DER between two RTTM files")
    p.add_argument("--ref")
    p.add_argument("--hyp")
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--frame", type=float, default=0.01)
    p.add_argument("--out", help="directory for report.json/report.txt/figures")
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument(
        "--check-arithmetic",
        action="store_true",
        help="verify FA+MISS+SpkErr=DER on the reference breakdowns and exit",
    )
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pipeline", help="run the three-stage pipeline on scene dirs")
    p.add_argument("scenes", nargs="+", help="scene directories")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--nsd-hook", dest="nsd_hook",
                   help="command invoked as: CMD audio.wav in.rttm out.rttm")
    p.add_argument("--embed-hook", dest="embed_hook",
                   help="command invoked as: CMD audio.wav segments.jsonl "
                        "out.tensor out.jsonl")
    p.add_argument("--workers", type=int)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "score" and not args.check_arithmetic:
        if not args.ref or not args.hyp:
            parser.error("score requires --ref and --hyp (or --check-arithmetic)")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SpatialDiarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
