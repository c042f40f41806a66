"""Mask-driven spatial filtering: covariance estimation, MVDR, guided extraction.

The beamformer is the Souden formulation w = (Phi_n^-1 Phi_t / tr(Phi_n^-1
Phi_t)) e_ref built from masked spatial covariance matrices; guided segment
extraction estimates the masks with the mixture model initialized from known
speaker activities.
"""

from dataclasses import dataclass

import numpy as np

from .cacgmm import (
    EmOptions,
    init_posterior_from_diarization,
    normalize_observations,
    run_em,
)
from .errors import InputError, NumericalError
from .signal import MultichannelAudio, StftTensor, istft


@dataclass
class SpatialCovarianceSet:
    """Per-bin Hermitian PSD covariance matrices (bins x channels x channels)."""

    phi: np.ndarray
    frame_count: int


@dataclass
class BeamformerWeights:
    w: np.ndarray
    ref_channel: int


def estimate_scm(y: StftTensor, mask) -> SpatialCovarianceSet:
    """Mask-weighted spatial covariance per frequency bin.

    Bins whose mask weight is zero fall back to the identity. Matrices are
    Hermitian-symmetrized and diagonally loaded by 1e-6 * trace/N.
    """
    mask = np.asarray(mask, dtype=np.float64)
    num_channels, num_frames, num_bins = y.data.shape
    if mask.shape != (num_frames, num_bins):
        raise InputError(
            f"mask shape {mask.shape} does not match frames x bins "
            f"({num_frames}, {num_bins})"
        )
    if mask.min() < 0.0 or mask.max() > 1.0:
        raise InputError("mask entries must lie in [0, 1]")
    yf = y.data.transpose(2, 1, 0)
    weighted = yf * mask.T[:, :, None]
    phi = np.matmul(weighted.transpose(0, 2, 1), yf.conj())
    denom = mask.sum(axis=0)
    good = denom > 0.0
    phi[good] /= denom[good, None, None]
    phi[~good] = np.eye(num_channels)
    phi = 0.5 * (phi + np.swapaxes(phi, -1, -2).conj())
    trace = np.einsum("...ii->...", phi).real
    phi += (1e-6 * trace / num_channels)[:, None, None] * np.eye(num_channels)
    return SpatialCovarianceSet(phi=phi, frame_count=num_frames)


def mvdr_weights(phi_target: SpatialCovarianceSet,
                 phi_noise: SpatialCovarianceSet,
                 ref_channel: int = 0) -> BeamformerWeights:
    """Distortionless weights toward the reference channel."""
    phi_t = phi_target.phi
    phi_n = phi_noise.phi
    if phi_t.shape != phi_n.shape:
        raise InputError("target/noise covariance shapes differ")
    num_channels = phi_t.shape[-1]
    if not 0 <= ref_channel < num_channels:
        raise InputError(f"reference channel {ref_channel} out of range")
    try:
        ratio = np.linalg.solve(phi_n, phi_t)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("noise covariance is singular") from exc
    lam = np.einsum("...ii->...", ratio)
    if np.abs(lam).max() < 1e-12:
        raise NumericalError(
            "tr(Phi_n^-1 Phi_t) is numerically zero everywhere; "
            "the target mask selected no energy"
        )
    lam = np.where(np.abs(lam) < 1e-12, 1e-12, lam)
    w = ratio[:, :, ref_channel] / lam[:, None]
    if not np.all(np.isfinite(w)):
        raise NumericalError("non-finite beamformer weights")
    return BeamformerWeights(w=w, ref_channel=ref_channel)


def apply_beamformer(y: StftTensor, weights: BeamformerWeights) -> StftTensor:
    """out(l, f) = w(f)^H y(l, f), returned as a single-channel tensor."""
    if weights.w.shape != (y.num_bins, y.num_channels):
        raise InputError(
            f"weights {weights.w.shape} do not match tensor "
            f"({y.num_bins}, {y.num_channels})"
        )
    out = np.einsum("fn,nlf->lf", weights.w.conj(), y.data)
    return StftTensor(
        data=out[None],
        config=y.config,
        sample_rate=y.sample_rate,
        num_samples=y.num_samples,
    )


def pick_reference_channel(y: StftTensor) -> int:
    """Channel with the highest average energy."""
    return int(np.argmax(np.mean(np.abs(y.data) ** 2, axis=(1, 2))))


def _slice_tensor(y: StftTensor, start: int, end: int) -> StftTensor:
    return StftTensor(
        data=y.data[:, start:end],
        config=y.config,
        sample_rate=y.sample_rate,
        num_samples=None,
    )


def gss_beamformer(y: StftTensor, activities, segment, target: int,
                   context_s: float = 15.0,
                   em: EmOptions = EmOptions(iterations=10)):
    """Guided mask estimation and MVDR weights for one segment.

    Returns (weights, (window_start, window_end) in frames, posterior). The
    mixture model runs on segment +- context with priors frozen at the
    activity-derived initialization, keeping class k tied to speaker k; the
    noise mask for the beamformer is one minus the target posterior, so
    competing speakers count as interference.
    """
    act = np.asarray(getattr(activities, "m", activities), dtype=np.float64)
    num_frames = y.num_frames
    if act.shape[0] != num_frames:
        raise InputError(
            f"activities have {act.shape[0]} frames, tensor has {num_frames}"
        )
    start, end = segment
    start = max(int(start), 0)
    end = min(int(end), num_frames)
    if end <= start:
        raise InputError(f"empty segment {segment}")
    if not 0 <= target < act.shape[1]:
        raise InputError(f"target speaker {target} out of range")
    if act[start:end, target].sum() == 0:
        raise InputError(f"target speaker {target} never active in segment")

    frame_rate = y.config.frame_rate(y.sample_rate)
    context = int(round(context_s * frame_rate))
    w0 = max(start - context, 0)
    w1 = min(end + context, num_frames)

    y_win = _slice_tensor(y, w0, w1)
    z = normalize_observations(y_win)
    gamma_init = init_posterior_from_diarization(act[w0:w1], y.num_bins)
    em = EmOptions(
        iterations=em.iterations,
        load_eps=em.load_eps,
        prior_mode="frozen",
        inverse_eps=em.inverse_eps,
    )
    gamma, _, _ = run_em(z, gamma_init, em)

    target_mask = gamma.gamma[:, :, target]
    noise_mask = 1.0 - target_mask
    ref = pick_reference_channel(y_win)
    weights = mvdr_weights(
        estimate_scm(y_win, target_mask),
        estimate_scm(y_win, noise_mask),
        ref_channel=ref,
    )
    return weights, (w0, w1), gamma


def gss_extract(y: StftTensor, activities, segment, target: int,
                context_s: float = 15.0,
                em: EmOptions = EmOptions(iterations=10)) -> MultichannelAudio:
    """Extract one speaker's segment as enhanced single-channel audio."""
    weights, (w0, w1), _ = gss_beamformer(
        y, activities, segment, target, context_s=context_s, em=em
    )
    start, end = max(int(segment[0]), 0), min(int(segment[1]), y.num_frames)
    enhanced = apply_beamformer(_slice_tensor(y, w0, w1), weights)
    seg_tensor = StftTensor(
        data=enhanced.data[:, start - w0 : end - w0],
        config=y.config,
        sample_rate=y.sample_rate,
        num_samples=None,
    )
    return istft(seg_tensor)
