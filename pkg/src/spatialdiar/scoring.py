"""RTTM I/O and diarization error rate scoring.

Scoring is frame-based (10 ms by default). Overlapped speech is scored by
per-frame speaker multiplicities: with nr reference and nh hypothesis
speakers active in a frame, the frame contributes max(0, nh - nr) false
alarm, max(0, nr - nh) miss, and min(nr, nh) - ncorrect speaker error, all
normalized by the total reference speaker time. The hypothesis-to-reference
speaker mapping maximizes total correct speaker time (Hungarian assignment),
computed per session.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError


@dataclass(frozen=True)
class Segment:
    """One speaker-attributed span of speech."""

    session: str
    speaker: str
    start_s: float
    duration_s: float

    def __post_init__(self):
        object.__setattr__(self, "start_s", float(self.start_s))
        object.__setattr__(self, "duration_s", float(self.duration_s))
        if self.duration_s <= 0:
            raise InputError(f"segment duration must be > 0, got {self.duration_s}")
        if self.start_s < 0:
            raise InputError(f"segment start must be >= 0, got {self.start_s}")

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s


@dataclass
class DerReport:
    """DER and its components, in percent of total reference speaker time."""

    fa: float
    miss: float
    spkerr: float
    der: float
    scored_time: float
    mapping: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fa": self.fa,
            "miss": self.miss,
            "spkerr": self.spkerr,
            "der": self.der,
            "scored_time": self.scored_time,
            "mapping": self.mapping,
        }


def parse_rttm(text: str):
    """Parse SPEAKER lines of an RTTM document; other lines are ignored."""
    segments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or not line.startswith("SPEAKER"):
            continue
        fields = line.split()
        if len(fields) not in (9, 10):
            raise InputError(
                f"RTTM line {lineno}: expected 9 or 10 fields, got {len(fields)}"
            )
        try:
            start = float(fields[3])
            duration = float(fields[4])
        except ValueError as exc:
            raise InputError(f"RTTM line {lineno}: non-numeric time field") from exc
        segments.append(
            Segment(
                session=fields[1],
                speaker=fields[7],
                start_s=start,
                duration_s=duration,
            )
        )
    return segments


def write_rttm(segments) -> str:
    """Serialize segments as RTTM SPEAKER lines (round-trip stable)."""
    lines = [
        f"SPEAKER {s.session} 1 {s.start_s!r} {s.duration_s!r} "
        f"<NA> <NA> {s.speaker} <NA> <NA>"
        for s in segments
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def _frame_matrix(segments, speakers, num_frames, frame_s):
    """Boolean (frames x speakers) activity from segments on a fixed grid."""
    index = {name: i for i, name in enumerate(speakers)}
    mat = np.zeros((num_frames, len(speakers)), dtype=bool)
    for seg in segments:
        i0 = int(np.floor(seg.start_s / frame_s + 1e-9))
        i1 = int(np.ceil(seg.end_s / frame_s - 1e-9))
        i0 = max(i0, 0)
        i1 = min(i1, num_frames)
        if i1 > i0:
            mat[i0:i1, index[seg.speaker]] = True
    return mat


def _session_counts(ref_segs, hyp_segs, collar_s, frame_s):
    ref_speakers = sorted({s.speaker for s in ref_segs})
    hyp_speakers = sorted({s.speaker for s in hyp_segs})
    max_end = max(
        [s.end_s for s in ref_segs] + [s.end_s for s in hyp_segs], default=0.0
    )
    num_frames = int(np.ceil(max_end / frame_s - 1e-9))
    ref = _frame_matrix(ref_segs, ref_speakers, num_frames, frame_s)
    hyp = _frame_matrix(hyp_segs, hyp_speakers, num_frames, frame_s)

    scored = np.ones(num_frames, dtype=bool)
    if collar_s > 0:
        centers = (np.arange(num_frames) + 0.5) * frame_s
        for seg in ref_segs:
            for boundary in (seg.start_s, seg.end_s):
                scored &= ~(np.abs(centers - boundary) < collar_s)
    ref = ref[scored]
    hyp = hyp[scored]

    overlap = ref.T.astype(np.int64) @ hyp.astype(np.int64)
    if overlap.size:
        rows, cols = linear_sum_assignment(-overlap)
    else:
        rows, cols = np.array([], dtype=int), np.array([], dtype=int)
    mapping = {
        hyp_speakers[h]: ref_speakers[r]
        for r, h in zip(rows, cols)
        if overlap[r, h] > 0
    }

    nr = ref.sum(axis=1)
    nh = hyp.sum(axis=1)
    ncorrect = np.zeros(len(nr), dtype=np.int64)
    for r, h in zip(rows, cols):
        ncorrect += ref[:, r] & hyp[:, h]
    counts = {
        "miss": int(np.maximum(nr - nh, 0).sum()),
        "fa": int(np.maximum(nh - nr, 0).sum()),
        "spkerr": int((np.minimum(nr, nh) - ncorrect).sum()),
        "ref": int(nr.sum()),
    }
    return counts, mapping


def compute_der(ref, hyp, collar_s: float = 0.0, frame_s: float = 0.01) -> DerReport:
    """Score a hypothesis against a reference segment list.

    Both inputs may span multiple sessions; the speaker mapping is optimal
    per session. Raises on an empty reference or on hypothesis sessions
    absent from the reference.
    """
    if not ref:
        raise InputError("empty reference: error rates are undefined")
    ref_sessions = {s.session for s in ref}
    hyp_sessions = {s.session for s in hyp}
    unknown = hyp_sessions - ref_sessions
    if unknown:
        raise InputError(f"hypothesis sessions missing from reference: {sorted(unknown)}")

    totals = {"miss": 0, "fa": 0, "spkerr": 0, "ref": 0}
    mapping = {}
    for session in sorted(ref_sessions):
        counts, session_map = _session_counts(
            [s for s in ref if s.session == session],
            [s for s in hyp if s.session == session],
            collar_s,
            frame_s,
        )
        for key in totals:
            totals[key] += counts[key]
        mapping[session] = session_map

    if totals["ref"] == 0:
        raise InputError("no scored reference speech (collar removed everything?)")
    scale = 100.0 / totals["ref"]
    fa = totals["fa"] * scale
    miss = totals["miss"] * scale
    spkerr = totals["spkerr"] * scale
    return DerReport(
        fa=fa,
        miss=miss,
        spkerr=spkerr,
        der=fa + miss + spkerr,
        scored_time=totals["ref"] * frame_s,
        mapping=mapping,
    )


# Reference stage-wise error breakdowns (FA, MISS, SpkErr, DER in %) from
# published multi-channel meeting-diarization evaluations. DER must equal the
# component sum up to the two-decimal rounding of the published numbers.
REFERENCE_BREAKDOWNS = (
    ("train-stage1", 3.28, 21.06, 2.99, 27.34),
    ("train-stage2", 4.76, 13.23, 1.89, 19.88),
    ("train-stage3", 3.08, 11.69, 2.63, 17.40),
    ("dev-stage1", 5.90, 15.17, 2.36, 23.43),
    ("dev-stage2", 7.51, 11.67, 1.89, 21.07),
    ("dev-stage3", 3.71, 13.87, 1.50, 19.09),
    ("eval-stage1", 3.77, 15.55, 2.64, 21.96),
    ("eval-stage2", 2.88, 12.76, 0.88, 16.52),
    ("eval-stage3", 1.82, 15.34, 1.52, 18.68),
)


def check_breakdown_additivity(rows=REFERENCE_BREAKDOWNS, tol: float = 0.02):
    """Verify FA + MISS + SpkErr = DER for each breakdown row.

    Returns a list of (label, residual, ok) triples.
    """
    results = []
    for label, fa, miss, spkerr, der in rows:
        residual = abs(fa + miss + spkerr - der)
        results.append((label, residual, residual <= tol))
    return results


def mask_to_segments(mask, frame_rate: float, min_gap_s: float = 0.1,
                     min_dur_s: float = 0.2, session: str = "session",
                     speaker_names=None):
    """Turn a binary (frames x speakers) activity matrix into segments.

    Gaps shorter than ``min_gap_s`` are bridged, then runs shorter than
    ``min_dur_s`` are dropped.
    """
    mat = np.asarray(getattr(mask, "m", mask))
    if mat.ndim != 2:
        raise InputError(f"activity matrix must be 2-D, got shape {mat.shape}")
    num_frames, num_speakers = mat.shape
    if speaker_names is None:
        speaker_names = [f"spk{k}" for k in range(num_speakers)]
    segments = []
    for k in range(num_speakers):
        column = np.concatenate([[0], mat[:, k].astype(np.int8), [0]])
        edges = np.flatnonzero(np.diff(column))
        runs = list(zip(edges[::2], edges[1::2]))
        merged = []
        for start, end in runs:
            if merged and (start - merged[-1][1]) / frame_rate < min_gap_s:
                merged[-1] = (merged[-1][0], end)
            else:
                merged.append((start, end))
        for start, end in merged:
            duration = (end - start) / frame_rate
            if duration < min_dur_s:
                continue
            segments.append(
                Segment(
                    session=session,
                    speaker=speaker_names[k],
                    start_s=start / frame_rate,
                    duration_s=duration,
                )
            )
    segments.sort(key=lambda s: (s.start_s, s.speaker))
    return segments
