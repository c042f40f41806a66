"""Synthetic anechoic multichannel scenes with full ground truth.

Sources are point emitters rendered to each microphone with an exact
frequency-domain fractional delay and 1/r attenuation, mixed with diffuse
white noise at a configurable SNR. Everything derives from a single seed, so
identical specs give bit-identical scenes. The truth bundle carries the
per-source images, frame activities, time-frequency dominance masks,
synthetic speaker embeddings and the reference segment list used by the
acceptance and oracle tests.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .rectifier import DiarizationMatrix
from .scoring import Segment
from .signal import MultichannelAudio, StftConfig, stft

SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class SourceSpec:
    position: tuple
    activity: tuple
    signal: str = "speech_shaped"
    tone_hz: float = 440.0


@dataclass(frozen=True)
class SceneSpec:
    num_channels: int = 4
    mic_positions: tuple = ()
    sources: tuple = ()
    noise_snr_db: float = 20.0
    rt: str = "anechoic"
    seed: int = 0
    duration_s: float = 10.0
    sample_rate: int = 16000
    embedding_dim: int = 64
    session: str = "scene"
    stft: StftConfig = StftConfig()


@dataclass
class SceneTruth:
    audio: MultichannelAudio
    activities: DiarizationMatrix
    dominance_masks: np.ndarray
    embeddings: np.ndarray
    manifest: list
    rttm: list
    source_images: np.ndarray
    noise_image: np.ndarray
    session: str


def circular_array(num_channels: int, radius: float = 0.05,
                   center=(0.0, 0.0, 1.0)):
    """Microphone positions on a horizontal circle (7-channel-device style)."""
    angles = 2.0 * np.pi * np.arange(num_channels) / num_channels
    cx, cy, cz = center
    return tuple(
        (cx + radius * np.cos(a), cy + radius * np.sin(a), cz) for a in angles
    )


def _pink_spectrum_noise(rng, length, sample_rate):
    """White noise shaped by 1/sqrt(f): a crude long-term speech spectrum."""
    white = rng.standard_normal(length)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(length, d=1.0 / sample_rate)
    shaping = np.ones_like(freqs)
    nonzero = freqs > 0
    shaping[nonzero] = 1.0 / np.sqrt(freqs[nonzero] / freqs[nonzero].min())
    return np.fft.irfft(spectrum * shaping, n=length)


def _dry_signal(src: SourceSpec, spec: SceneSpec, rng) -> np.ndarray:
    length = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(length) / spec.sample_rate
    if src.signal == "tone":
        dry = np.sin(2.0 * np.pi * src.tone_hz * t + rng.uniform(0, 2 * np.pi))
    elif src.signal == "noise_burst":
        dry = rng.standard_normal(length)
    elif src.signal == "speech_shaped":
        carrier = _pink_spectrum_noise(rng, length, spec.sample_rate)
        modulation = 0.55 + 0.45 * np.sin(
            2.0 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi)
        )
        dry = carrier * modulation
    else:
        raise InputError(f"unknown source signal kind {src.signal!r}")

    gate = np.zeros(length)
    fade = max(int(0.01 * spec.sample_rate), 1)
    for start_s, end_s in src.activity:
        if start_s < 0 or end_s > spec.duration_s or end_s <= start_s:
            raise InputError(
                f"activity ({start_s}, {end_s}) outside scene of {spec.duration_s}s"
            )
        i0 = int(round(start_s * spec.sample_rate))
        i1 = int(round(end_s * spec.sample_rate))
        gate[i0:i1] = 1.0
        ramp_len = min(fade, (i1 - i0) // 2)
        if ramp_len > 1:
            ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_len) / ramp_len)
            gate[i0 : i0 + ramp_len] = np.minimum(gate[i0 : i0 + ramp_len], ramp)
            gate[i1 - ramp_len : i1] = np.minimum(
                gate[i1 - ramp_len : i1], ramp[::-1]
            )
    dry *= gate
    rms = np.sqrt(np.mean(dry[gate > 0.5] ** 2)) if (gate > 0.5).any() else 0.0
    if rms > 0:
        dry *= 0.1 / rms
    return dry


def _fractional_delay(signal: np.ndarray, delay_samples: float) -> np.ndarray:
    """Exact non-circular fractional delay via frequency-domain phase shift."""
    length = len(signal)
    pad = int(np.ceil(abs(delay_samples))) + 16
    spectrum = np.fft.rfft(signal, n=length + pad)
    k = np.arange(len(spectrum))
    phase = np.exp(-2j * np.pi * k * delay_samples / (length + pad))
    return np.fft.irfft(spectrum * phase, n=length + pad)[:length]


def simulate_scene(spec: SceneSpec) -> SceneTruth:
    """Render a scene and all of its ground truth. Deterministic per seed."""
    if not 2 <= spec.num_channels <= 8:
        raise InputError("num_channels must be in 2..8")
    mic_positions = spec.mic_positions or circular_array(spec.num_channels)
    if len(mic_positions) != spec.num_channels:
        raise InputError(
            f"{len(mic_positions)} mic positions for {spec.num_channels} channels"
        )
    if spec.rt != "anechoic":
        raise InputError(f"unsupported acoustics {spec.rt!r}")
    rng = np.random.default_rng(spec.seed)
    length = int(round(spec.duration_s * spec.sample_rate))
    mics = np.asarray(mic_positions, dtype=np.float64)
    num_sources = len(spec.sources)

    source_images = np.zeros((num_sources, spec.num_channels, length))
    for si, src in enumerate(spec.sources):
        dry = _dry_signal(src, spec, rng)
        pos = np.asarray(src.position, dtype=np.float64)
        dists = np.linalg.norm(mics - pos, axis=1)
        if np.any(dists < 1e-3):
            raise InputError(f"source {si} coincides with a microphone")
        for ci in range(spec.num_channels):
            delay = dists[ci] / SPEED_OF_SOUND * spec.sample_rate
            source_images[si, ci] = _fractional_delay(dry, delay) / dists[ci]

    mixture = source_images.sum(axis=0)
    mix_rms = np.sqrt(np.mean(mixture**2)) if num_sources else 0.0
    if mix_rms <= 0:
        mix_rms = 0.1
    noise_rms = mix_rms / (10.0 ** (spec.noise_snr_db / 20.0))
    noise = rng.standard_normal((spec.num_channels, length)) * noise_rms
    audio = MultichannelAudio(samples=mixture + noise, sample_rate=spec.sample_rate)

    hop = spec.stft.hop
    num_frames = length // hop + 1
    frame_times = np.arange(num_frames) * hop / spec.sample_rate
    activities = np.zeros((num_frames, num_sources))
    rttm = []
    for si, src in enumerate(spec.sources):
        for start_s, end_s in src.activity:
            activities[:, si] += (frame_times >= start_s) & (frame_times < end_s)
            rttm.append(
                Segment(
                    session=spec.session,
                    speaker=f"spk{si}",
                    start_s=float(start_s),
                    duration_s=float(end_s - start_s),
                )
            )
    activities = np.minimum(activities, 1.0)
    rttm.sort(key=lambda s: (s.start_s, s.speaker))

    num_bins = spec.stft.num_bins
    energies = np.zeros((max(num_sources, 1), num_frames, num_bins))
    for si in range(num_sources):
        image = MultichannelAudio(
            samples=source_images[si, :1], sample_rate=spec.sample_rate
        )
        energies[si] = np.abs(stft(image, spec.stft).data[0]) ** 2
    dominant = energies.argmax(axis=0)
    floor = energies.max() * 1e-12 if num_sources else 0.0
    dominance = np.zeros((num_sources, num_frames, num_bins), dtype=np.int8)
    for si in range(num_sources):
        # a source can only dominate in frames where it is active
        dominance[si] = (
            (dominant == si)
            & (energies[si] > floor)
            & (activities[:, si] > 0.5)[:, None]
        )

    labels = [int(seg.speaker[3:]) for seg in rttm]
    embeddings = synthetic_embeddings(
        max(num_sources, 1), labels, spec.embedding_dim, seed=spec.seed
    )
    manifest = [
        {
            "session": seg.session,
            "start_s": seg.start_s,
            "end_s": seg.end_s,
            "row": row,
            "word_count": max(0, int(round(seg.duration_s * 3.0))),
        }
        for row, seg in enumerate(rttm)
    ]

    return SceneTruth(
        audio=audio,
        activities=DiarizationMatrix(
            d=activities, frame_rate=spec.sample_rate / hop
        ),
        dominance_masks=dominance,
        embeddings=embeddings,
        manifest=manifest,
        rttm=rttm,
        source_images=source_images,
        noise_image=noise,
        session=spec.session,
    )


def synthetic_embeddings(num_classes: int, labels, dim: int = 64,
                         spread: float = 0.2, seed: int = 0) -> np.ndarray:
    """Unit embeddings around orthonormal class centroids.

    ``spread`` is the sine of the cap angle: 0.2 keeps intra-class cosines
    above ~0.9 while inter-class cosines stay near 0.
    """
    if dim < num_classes:
        raise InputError("embedding dim must be >= number of classes")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
    centroids = basis.T
    out = np.empty((len(labels), dim))
    for i, label in enumerate(labels):
        center = centroids[label]
        noise = rng.standard_normal(dim)
        noise -= center * (noise @ center)
        norm = np.linalg.norm(noise)
        if norm > 0:
            noise /= norm
        out[i] = np.sqrt(1.0 - spread**2) * center + spread * noise
    return out


def corrupt_diarization(d: DiarizationMatrix, confusion_rate: float = 0.0,
                        miss_rate: float = 0.0, fa_rate: float = 0.0,
                        seed: int = 0) -> DiarizationMatrix:
    """Inject per-frame speaker confusions, deletions and insertions.

    Each active (frame, speaker) entry is independently deleted with
    probability ``miss_rate`` or reassigned to a random other speaker with
    probability ``confusion_rate``; each inactive entry is independently
    activated with probability ``fa_rate``. A single-speaker matrix cannot be
    confused, only missed.
    """
    for name, rate in (("confusion", confusion_rate), ("miss", miss_rate),
                       ("fa", fa_rate)):
        if not 0.0 <= rate < 1.0:
            raise InputError(f"{name}_rate must be in [0, 1), got {rate}")
    if confusion_rate + miss_rate > 1.0:
        raise InputError("confusion_rate + miss_rate must not exceed 1")
    rng = np.random.default_rng(seed)
    active = d.d > 0.5
    num_frames, num_speakers = active.shape
    out = active.copy()

    draw = rng.random(active.shape)
    out[active & (draw < miss_rate)] = False
    if num_speakers > 1:
        confused = active & (draw >= miss_rate) & (draw < miss_rate + confusion_rate)
        where = np.argwhere(confused)
        if len(where):
            offsets = rng.integers(1, num_speakers, size=len(where))
            targets = (where[:, 1] + offsets) % num_speakers
            out[where[:, 0], where[:, 1]] = False
            out[where[:, 0], targets] = True
    fa_draw = rng.random(active.shape)
    out |= (~active) & (fa_draw < fa_rate)
    return DiarizationMatrix(d=out.astype(np.float64), frame_rate=d.frame_rate)


def random_meeting_spec(num_speakers: int = 3, num_channels: int = 4,
                        duration_s: float = 20.0, seed: int = 0,
                        overlap_prob: float = 0.2,
                        noise_snr_db: float = 20.0,
                        signal: str = "speech_shaped",
                        stft_config: StftConfig = StftConfig(),
                        session: str = "scene") -> SceneSpec:
    """Turn-taking meeting layout: utterances of 2-5 s with occasional overlap."""
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0, 2 * np.pi, num_speakers)
    radii = rng.uniform(1.2, 2.5, num_speakers)
    positions = [
        (r * np.cos(a), r * np.sin(a), rng.uniform(1.0, 1.6))
        for a, r in zip(angles, radii)
    ]
    activity = [[] for _ in range(num_speakers)]
    cursor = 0.1
    speaker = int(rng.integers(num_speakers))
    while cursor < duration_s - 1.0:
        length = float(rng.uniform(2.0, 5.0))
        end = min(cursor + length, duration_s - 0.05)
        if end - cursor >= 0.5:
            activity[speaker].append((round(cursor, 3), round(end, 3)))
        next_speaker = int(rng.integers(num_speakers))
        if next_speaker == speaker:
            next_speaker = (speaker + 1) % num_speakers
        if rng.random() < overlap_prob:
            cursor = max(cursor, end - rng.uniform(0.3, 1.0))
        else:
            cursor = end + rng.uniform(0.1, 0.6)
        speaker = next_speaker
    sources = tuple(
        SourceSpec(
            position=positions[k],
            activity=tuple(activity[k]) or ((0.1, 0.6),),
            signal=signal,
            tone_hz=300.0 + 170.0 * k,
        )
        for k in range(num_speakers)
    )
    return SceneSpec(
        num_channels=num_channels,
        sources=sources,
        noise_snr_db=noise_snr_db,
        seed=seed,
        duration_s=duration_s,
        stft=stft_config,
        session=session,
    )


def scene_spec_from_json(data) -> SceneSpec:
    """Build a SceneSpec from a parsed JSON document (the CLI input format)."""
    if isinstance(data, str):
        data = json.loads(data)
    known = {
        "num_channels", "mic_positions", "sources", "noise_snr_db", "rt",
        "seed", "duration_s", "sample_rate", "embedding_dim", "session",
        "stft",
    }
    unknown = set(data) - known
    if unknown:
        raise InputError(f"unknown scene spec keys: {sorted(unknown)}")
    sources = tuple(
        SourceSpec(
            position=tuple(src["position"]),
            activity=tuple(tuple(span) for span in src["activity"]),
            signal=src.get("signal", "speech_shaped"),
            tone_hz=float(src.get("tone_hz", 440.0)),
        )
        for src in data.get("sources", ())
    )
    stft_config = StftConfig(**data["stft"]) if "stft" in data else StftConfig()
    return SceneSpec(
        num_channels=int(data.get("num_channels", 4)),
        mic_positions=tuple(tuple(p) for p in data.get("mic_positions", ())),
        sources=sources,
        noise_snr_db=float(data.get("noise_snr_db", 20.0)),
        rt=data.get("rt", "anechoic"),
        seed=int(data.get("seed", 0)),
        duration_s=float(data.get("duration_s", 10.0)),
        sample_rate=int(data.get("sample_rate", 16000)),
        embedding_dim=int(data.get("embedding_dim", 64)),
        session=data.get("session", "scene"),
        stft=stft_config,
    )
