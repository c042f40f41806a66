"""Diarization rectification on multichannel spectrograms.

The input diarization is cut into 50%-overlapping blocks; each block runs a
guided mixture-model fit initialized from the speaker activities, the block
posteriors are fused by overlap-add averaging, and the frequency-averaged
speaker posteriors are thresholded (with a hangover) into binary activities.
"""

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cacgmm import (
    EmOptions,
    NormalizedObservations,
    PosteriorTensor,
    init_posterior_from_diarization,
    normalize_observations,
    run_em,
)
from .errors import InputError
from .signal import StftTensor


@dataclass
class DiarizationMatrix:
    """Soft frame-level speaker activities d(l, k) in [0, 1]."""

    d: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if self.d.ndim != 2:
            raise InputError(f"diarization matrix needs shape (L, K), got {self.d.shape}")
        if self.d.size and (self.d.min() < 0.0 or self.d.max() > 1.0):
            raise InputError("diarization entries must lie in [0, 1]")
        if self.frame_rate <= 0:
            raise InputError("frame_rate must be positive")

    @property
    def num_speakers(self) -> int:
        return self.d.shape[1]


@dataclass
class BlockPlan:
    block_length: int
    hop: int
    spans: list

    @property
    def num_blocks(self) -> int:
        return len(self.spans)


@dataclass
class SpeakerActivityMatrix:
    """Binary frame-level speaker activities."""

    m: np.ndarray

    def __post_init__(self):
        self.m = np.asarray(self.m)
        if not np.isin(self.m, (0, 1)).all():
            raise InputError("activity matrix entries must be 0 or 1")
        self.m = self.m.astype(np.int8)


@dataclass(frozen=True)
class RectifierOptions:
    """Block length is in STFT frames; 3750 frames = 60 s at a 16 ms hop."""

    block_length: int = 3750
    threshold: float = 0.2
    hangover: int = 6
    symmetric_hangover: bool = False
    pre_threshold: bool = False
    guided_fraction: float = 1.0 / 3.0
    em: EmOptions = EmOptions()


def plan_blocks(total_frames: int, block_length: int) -> BlockPlan:
    """50%-overlapping block segmentation covering [0, total_frames).

    Blocks start at multiples of the hop W = block_length/2; every block has
    length ``block_length`` except the trailing ones clipped at the end. The
    number of blocks is ceil(total_frames / W).
    """
    if block_length < 2 or block_length % 2 != 0:
        raise InputError("block_length must be even and >= 2")
    if total_frames < 1:
        raise InputError("total_frames must be >= 1")
    hop = block_length // 2
    num_blocks = math.ceil(total_frames / hop)
    spans = [
        (s * hop, min(s * hop + block_length, total_frames))
        for s in range(num_blocks)
    ]
    return BlockPlan(block_length=block_length, hop=hop, spans=spans)


def align_diarization(d: DiarizationMatrix, num_frames: int,
                      frame_rate: float) -> np.ndarray:
    """Resample activities to the STFT frame grid by nearest frame.

    Exact (a plain copy) when the rates match and lengths agree.
    """
    if d.d.shape[0] == num_frames and abs(d.frame_rate - frame_rate) < 1e-9:
        return d.d.copy()
    times = np.arange(num_frames) / frame_rate
    src = np.clip(np.rint(times * d.frame_rate).astype(int), 0, d.d.shape[0] - 1)
    return d.d[src]


def overlap_add_posteriors(block_posteriors, plan: BlockPlan) -> PosteriorTensor:
    """Fuse per-block posteriors: average wherever two blocks overlap, copy
    elsewhere. The average of normalized rows stays normalized."""
    arrays = [
        b.gamma if isinstance(b, PosteriorTensor) else np.asarray(b)
        for b in block_posteriors
    ]
    if len(arrays) != plan.num_blocks:
        raise InputError(
            f"{len(arrays)} blocks supplied for a plan of {plan.num_blocks}"
        )
    classes = {a.shape[-1] for a in arrays}
    if len(classes) != 1:
        raise InputError(f"inconsistent class counts across blocks: {classes}")
    total = plan.spans[-1][1]
    rest = arrays[0].shape[1:]
    acc = np.zeros((total,) + rest)
    count = np.zeros(total)
    for (start, end), block in zip(plan.spans, arrays):
        if block.shape[0] != end - start:
            raise InputError(
                f"block of {block.shape[0]} frames does not fit span ({start}, {end})"
            )
        acc[start:end] += block
        count[start:end] += 1.0
    acc /= count.reshape((-1,) + (1,) * len(rest))
    return PosteriorTensor(gamma=acc)


def mask_to_vad(fused: PosteriorTensor, threshold: float = 0.2,
                hangover: int = 6, symmetric: bool = False) -> SpeakerActivityMatrix:
    """Threshold frequency-averaged speaker posteriors into binary activity.

    beta(l, k) is the frequency mean of the fused posterior for speaker
    classes (the trailing noise class is dropped). A supra-threshold beta at
    frame l activates frames l-hangover..l; with ``symmetric`` the window
    extends to both sides.
    """
    gamma = fused.gamma
    beta = gamma[:, :, :-1].mean(axis=1)
    above = beta > threshold
    if hangover == 0:
        return SpeakerActivityMatrix(m=above.astype(np.int8))
    pad_before = hangover if symmetric else 0
    padded = np.pad(above, ((pad_before, hangover), (0, 0)))
    width = 2 * hangover + 1 if symmetric else hangover + 1
    windows = sliding_window_view(padded, width, axis=0)
    return SpeakerActivityMatrix(m=windows.max(axis=-1).astype(np.int8))


def _noise_only_posterior(num_frames, num_bins, num_classes):
    gamma = np.zeros((num_frames, num_bins, num_classes))
    gamma[:, :, -1] = 1.0
    return gamma


def _fit_block(z_block: NormalizedObservations, d_block: np.ndarray,
               opts: RectifierOptions):
    num_bins = z_block.z.shape[1]
    if d_block.shape[1] > 1 and d_block.sum() > 0:
        spread = np.ptp(d_block, axis=1).max()
        if spread < 1e-8:
            warnings.warn(
                "diarization block is uniform across speakers; class "
                "identities may come out permuted",
                stacklevel=3,
            )
    gamma = init_posterior_from_diarization(d_block, num_bins)
    iterations = opts.em.iterations
    guided = int(round(iterations * opts.guided_fraction))
    guided = min(max(guided, 0), iterations)
    params = None
    if guided > 0:
        gamma, params, _ = run_em(
            z_block, gamma, replace(opts.em, iterations=guided, prior_mode="frozen")
        )
    if iterations - guided > 0:
        gamma, params, _ = run_em(
            z_block,
            gamma,
            replace(opts.em, iterations=iterations - guided, prior_mode="updated"),
            params_init=params,
        )
    return gamma.gamma


def rectify(y: StftTensor, d: DiarizationMatrix,
            opts: RectifierOptions = RectifierOptions()):
    """Block-wise guided mask estimation followed by fusion and VAD.

    Returns (binary speaker activities, fused soft posterior); both are on
    the STFT frame grid of ``y`` with d's speaker order preserved (class k is
    speaker k in every block, so no permutation solving is needed).
    """
    num_frames = y.num_frames
    stft_rate = y.config.frame_rate(y.sample_rate)
    activities = align_diarization(d, num_frames, stft_rate)
    num_speakers = activities.shape[1]
    z = normalize_observations(y)
    plan = plan_blocks(num_frames, opts.block_length)

    block_posteriors = []
    for start, end in plan.spans:
        d_block = activities[start:end]
        if d_block.sum() <= 0.0:
            gamma = _noise_only_posterior(end - start, y.num_bins, num_speakers + 1)
        else:
            z_block = NormalizedObservations(
                z=z.z[start:end],
                active=z.active[start:end],
                num_channels=z.num_channels,
            )
            gamma = _fit_block(z_block, d_block, opts)
        if opts.pre_threshold:
            gamma = (gamma > 0.5).astype(np.float64)
        block_posteriors.append(gamma)

    fused = overlap_add_posteriors(block_posteriors, plan)
    vad = mask_to_vad(
        fused,
        threshold=opts.threshold,
        hangover=opts.hangover,
        symmetric=opts.symmetric_hangover,
    )
    return vad, fused


def iterate_rectification(y: StftTensor, d: DiarizationMatrix,
                          opts: RectifierOptions = RectifierOptions(),
                          rounds: int = 1) -> SpeakerActivityMatrix:
    """Repeat rectification, feeding each round's activities into the next."""
    if rounds < 1:
        raise InputError("rounds must be >= 1")
    stft_rate = y.config.frame_rate(y.sample_rate)
    current = d
    vad = None
    for _ in range(rounds):
        vad, _ = rectify(y, current, opts)
        current = DiarizationMatrix(
            d=vad.m.astype(np.float64), frame_rate=stft_rate
        )
    return vad
