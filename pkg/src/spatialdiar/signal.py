"""Multichannel audio I/O and STFT analysis/synthesis.

Conventions used throughout the toolkit:

* audio is channel-major: ``samples[channel, time]``
* spectrograms are ``data[channel, frame, bin]`` with ``bins = fft_size//2 + 1``
* the signal is reflect-padded by ``fft_size//2`` on both ends, so frame ``l``
  is centered at sample ``l * hop`` and frame/second conversion is exact
* frame count ``L = num_samples // hop + 1``
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile

from .errors import InputError

_SUPPORTED_PCM = {np.dtype(np.int16), np.dtype(np.float32)}


@dataclass
class MultichannelAudio:
    """Raw multichannel recording, ``samples`` shaped (channels, time)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters. Defaults: 64 ms frames, 16 ms hop."""

    fft_size: int = 1024
    hop: int = 256
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.fft_size <= 0 or self.hop <= 0:
            raise InputError("fft_size and hop must be positive")
        if self.fft_size % self.hop != 0:
            raise InputError(
                f"hop {self.hop} must divide fft_size {self.fft_size} evenly"
            )
        win = window_values(self.window, self.fft_size)
        if not _is_cola(win * win, self.hop):
            raise InputError(
                f"window {self.window!r} with hop {self.hop} violates the "
                "constant-overlap-add condition"
            )

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def frame_rate(self, sample_rate) -> float:
        return sample_rate / self.hop


@dataclass
class StftTensor:
    """Complex spectrogram (channels x frames x bins) plus its provenance."""

    data: np.ndarray
    config: StftConfig
    sample_rate: int
    num_samples: int | None = None

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def num_bins(self) -> int:
        return self.data.shape[2]


def window_values(name: str, size: int) -> np.ndarray:
    """Periodic analysis windows by identifier."""
    n = np.arange(size)
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)
    if name == "sqrt_hann":
        return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / size))
    if name == "rect":
        return np.ones(size)
    raise InputError(f"unknown window {name!r}")


def _is_cola(product_window, hop, tol=1e-8) -> bool:
    """Check that the analysis*synthesis window sums to a constant at ``hop``."""
    size = len(product_window)
    profile = np.zeros(hop)
    for start in range(0, size, hop):
        profile += product_window[start : start + hop]
    return float(profile.max() - profile.min()) <= tol * float(profile.mean())


def read_wav(path) -> MultichannelAudio:
    """Read a PCM16 or float32 RIFF/WAVE file into channel-major float samples.

    Integer samples are scaled by 1/32768 so full scale maps to [-1, 1).
    """
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise InputError(f"{path}: malformed or unsupported WAV file: {exc}") from exc
    if data.size == 0:
        raise InputError(f"{path}: zero-length payload")
    if data.dtype not in _SUPPORTED_PCM:
        raise InputError(
            f"{path}: unsupported encoding {data.dtype}, expected int16 or float32"
        )
    if data.ndim == 1:
        data = data[:, np.newaxis]
    num_channels = data.shape[1]
    if not 1 <= num_channels <= 16:
        raise InputError(f"{path}: {num_channels} channels outside supported 1-16")
    samples = data.T.astype(np.float64)
    if data.dtype == np.int16:
        samples /= 32768.0
    return MultichannelAudio(samples=samples, sample_rate=int(rate))


def write_wav(audio: MultichannelAudio, path) -> None:
    """Write audio as 32-bit float RIFF/WAVE; ``read_wav`` inverts it exactly."""
    if not np.all(np.isfinite(audio.samples)):
        raise InputError("refusing to write non-finite samples")
    data = audio.samples.T.astype(np.float32)
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(path, int(audio.sample_rate), data)


def stft(audio: MultichannelAudio, config: StftConfig = StftConfig()) -> StftTensor:
    """Per-channel windowed DFT with reflect padding of fft_size/2 at each end."""
    samples = audio.samples
    half = config.fft_size // 2
    if samples.shape[1] < 2:
        raise InputError("signal too short for reflect padding")
    padded = np.pad(samples, ((0, 0), (half, half)), mode="reflect")
    frames = sliding_window_view(padded, config.fft_size, axis=1)[:, :: config.hop]
    win = window_values(config.window, config.fft_size)
    spectra = np.fft.rfft(frames * win, axis=-1)
    return StftTensor(
        data=spectra,
        config=config,
        sample_rate=audio.sample_rate,
        num_samples=samples.shape[1],
    )


def istft(tensor: StftTensor) -> MultichannelAudio:
    """Overlap-add synthesis with per-sample window-power normalization."""
    config = tensor.config
    data = tensor.data
    if data.ndim != 3 or data.shape[2] != config.num_bins:
        raise InputError(
            f"tensor shape {data.shape} inconsistent with fft_size {config.fft_size}"
        )
    num_channels, num_frames, _ = data.shape
    win = window_values(config.window, config.fft_size)
    frames = np.fft.irfft(data, n=config.fft_size, axis=-1) * win

    out_len = (num_frames - 1) * config.hop + config.fft_size
    out = np.zeros((num_channels, out_len))
    norm = np.zeros(out_len)
    win_sq = win * win
    for l in range(num_frames):
        start = l * config.hop
        out[:, start : start + config.fft_size] += frames[:, l]
        norm[start : start + config.fft_size] += win_sq
    active = norm > 1e-10 * norm.max()
    out[:, active] /= norm[active]
    out[:, ~active] = 0.0

    half = config.fft_size // 2
    if tensor.num_samples is not None:
        num_samples = tensor.num_samples
    else:
        num_samples = out_len - config.fft_size
    out = out[:, half : half + num_samples]
    return MultichannelAudio(samples=out, sample_rate=tensor.sample_rate)
