"""Complex angular central Gaussian mixture model over unit-norm direction vectors.

Observations are per time-frequency bin direction vectors z(l, f) with unit
norm; each of the K+1 classes (K speakers plus one noise class) carries a
Hermitian shape matrix B(f, k) that is shared over time within the analysed
block. Responsibilities double as time-frequency masks.

Shape conventions: z is (frames L, bins F, channels N), posteriors gamma are
(L, F, K+1), shape matrices are (F, K+1, N, N), priors are (F, K+1) or
time-varying (L, F, K+1).
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .signal import StftTensor


@dataclass
class NormalizedObservations:
    """Unit-norm direction vectors with a validity mask for zero-energy bins."""

    z: np.ndarray
    active: np.ndarray
    num_channels: int


@dataclass
class CacgmmParams:
    shape_matrices: np.ndarray
    priors: np.ndarray
    num_speakers: int

    @property
    def num_classes(self) -> int:
        return self.num_speakers + 1


@dataclass
class PosteriorTensor:
    """Class responsibilities gamma(l, f, k); rows sum to one on active bins."""

    gamma: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.gamma.shape[2]


@dataclass(frozen=True)
class EmOptions:
    iterations: int = 20
    load_eps: float = 1e-4
    prior_mode: str = "updated"
    inverse_eps: float = 1e-10

    def __post_init__(self):
        if self.iterations < 1:
            raise InputError("iterations must be >= 1")
        if not 0.0 < self.load_eps <= 1e-2:
            raise InputError("load_eps must be in (0, 1e-2]")
        if not 0.0 < self.inverse_eps <= 1e-2:
            raise InputError("inverse_eps must be in (0, 1e-2]")
        if self.prior_mode not in ("updated", "frozen"):
            raise InputError(f"unknown prior_mode {self.prior_mode!r}")


def normalize_observations(y: StftTensor) -> NormalizedObservations:
    """Scale each multichannel snapshot to unit norm; flag zero-energy bins."""
    if y.num_channels < 2:
        raise InputError("need at least 2 channels for spatial modelling")
    z = np.ascontiguousarray(y.data.transpose(1, 2, 0))
    norms = np.linalg.norm(z, axis=-1)
    active = norms > 0.0
    safe = np.where(active, norms, 1.0)
    z = z / safe[:, :, None]
    z[~active] = 0.0
    return NormalizedObservations(z=z, active=active, num_channels=y.num_channels)


def init_posterior_from_diarization(d, num_bins: int) -> PosteriorTensor:
    """Turn frame-level speaker activities into initial posteriors.

    A noise row that is active at every frame is appended before row
    normalization, then the result is broadcast over frequency, so e.g. a
    single active speaker yields (0.5, ..., 0.5) over {speaker, noise}.
    """
    d = np.asarray(getattr(d, "d", d), dtype=np.float64)
    if d.ndim != 2:
        raise InputError(f"diarization matrix must be 2-D, got shape {d.shape}")
    if d.min() < 0.0 or d.max() > 1.0:
        raise InputError("diarization entries must lie in [0, 1]")
    num_frames = d.shape[0]
    with_noise = np.concatenate([d, np.ones((num_frames, 1))], axis=1)
    rows = with_noise / with_noise.sum(axis=1, keepdims=True)
    gamma = np.broadcast_to(
        rows[:, None, :], (num_frames, num_bins, rows.shape[1])
    ).copy()
    return PosteriorTensor(gamma=gamma)


def _cholesky_factors(shape_matrices):
    """Cholesky factor, inverse and log-determinant per (f, k)."""
    try:
        chol = np.linalg.cholesky(shape_matrices)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "shape matrix not positive definite; load_eps too small "
            f"(min eigenvalue {np.linalg.eigvalsh(shape_matrices).min():.3e})"
        ) from exc
    diag = np.einsum("...ii->...i", chol).real
    log_det = 2.0 * np.sum(np.log(diag), axis=-1)
    if not np.all(np.isfinite(log_det)):
        raise NumericalError("non-finite log-determinant in shape matrices")
    chol_inv = np.linalg.inv(chol)
    inverse = np.swapaxes(chol_inv, -1, -2).conj() @ chol_inv
    return log_det, inverse


def _quadratic_form(z, inverse):
    """q(l, f, k) = z^H B^{-1} z via the Hermitian (Cholesky) inverse."""
    num_frames, num_bins, _ = z.shape
    num_classes = inverse.shape[1]
    zf = z.transpose(1, 0, 2)
    q = np.empty((num_frames, num_bins, num_classes))
    for k in range(num_classes):
        t = np.matmul(zf, inverse[:, k].transpose(0, 2, 1))
        q[:, :, k] = np.einsum("flm,flm->fl", zf.conj(), t).real.T
    return q


def _log_priors(priors):
    with np.errstate(divide="ignore"):
        return np.where(priors > 0.0, np.log(np.maximum(priors, 1e-300)), -np.inf)


def _posterior_and_likelihood(z: NormalizedObservations, params: CacgmmParams,
                              inverse_eps: float, return_q: bool = False):
    log_det, inverse = _cholesky_factors(params.shape_matrices)
    q = _quadratic_form(z.z, inverse)
    n = z.num_channels
    logits = _log_priors(params.priors) - log_det - n * np.log(q + inverse_eps)
    logits = np.where(z.active[:, :, None], logits, 0.0)
    peak = logits.max(axis=2, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    norm = peak[:, :, 0] + np.log(np.exp(logits - peak).sum(axis=2))
    gamma = np.exp(logits - norm[:, :, None])
    gamma[~z.active] = 1.0 / params.num_classes
    log_likelihood_value = float(norm[z.active].mean()) if z.active.any() else 0.0
    if return_q:
        return PosteriorTensor(gamma=gamma), log_likelihood_value, q
    return PosteriorTensor(gamma=gamma), log_likelihood_value


def e_step(z: NormalizedObservations, params: CacgmmParams,
           opts: EmOptions = EmOptions()) -> PosteriorTensor:
    """Responsibilities in the log domain; inactive bins get uniform rows."""
    posterior, _ = _posterior_and_likelihood(z, params, opts.inverse_eps)
    return posterior


def m_step(z: NormalizedObservations, posterior: PosteriorTensor,
           opts: EmOptions = EmOptions(),
           prev: CacgmmParams | None = None,
           _q_prev: np.ndarray | None = None) -> CacgmmParams:
    """Re-estimate shape matrices (and priors, in ``updated`` mode).

    The quadratic-form denominator uses the previous iteration's matrices;
    the first call uses the identity. Each matrix is Hermitian-symmetrized,
    diagonally loaded by load_eps * trace/N and trace-normalized to N.
    ``_q_prev`` lets the EM driver reuse the E-step's quadratic form.
    """
    gamma = posterior.gamma
    num_frames, num_bins, num_classes = gamma.shape
    n = z.num_channels
    gamma_eff = np.where(z.active[:, :, None], gamma, 0.0)

    if _q_prev is not None:
        q = _q_prev
    elif prev is None:
        q = np.ones((num_frames, num_bins, num_classes))
    else:
        _, inverse = _cholesky_factors(prev.shape_matrices)
        q = _quadratic_form(z.z, inverse)

    weights = gamma_eff / (q + opts.inverse_eps)
    denom = gamma_eff.sum(axis=0)

    zf = z.z.transpose(1, 0, 2)
    shape_matrices = np.empty(
        (num_bins, num_classes, n, n), dtype=np.complex128
    )
    wf = weights.transpose(1, 0, 2)
    for k in range(num_classes):
        weighted = zf * wf[:, :, k, None]
        shape_matrices[:, k] = np.matmul(
            weighted.transpose(0, 2, 1), zf.conj()
        )
    scale = np.where(denom > 0.0, n / np.maximum(denom, 1e-300), 0.0)
    shape_matrices *= scale[:, :, None, None]

    empty = denom <= 0.0
    if empty.any():
        shape_matrices[empty] = np.eye(n)

    shape_matrices = 0.5 * (
        shape_matrices + np.swapaxes(shape_matrices, -1, -2).conj()
    )
    trace = np.einsum("...ii->...", shape_matrices).real
    eye = np.eye(n)
    shape_matrices += (opts.load_eps * trace / n)[:, :, None, None] * eye
    trace = np.einsum("...ii->...", shape_matrices).real
    shape_matrices *= (n / trace)[:, :, None, None]

    if opts.prior_mode == "updated":
        frames_active = z.active.sum(axis=0)
        safe = np.maximum(frames_active, 1)[:, None]
        priors = denom / safe
        priors[frames_active == 0] = 1.0 / num_classes
    elif prev is not None:
        priors = prev.priors
    else:
        priors = gamma.copy()

    return CacgmmParams(
        shape_matrices=shape_matrices,
        priors=priors,
        num_speakers=num_classes - 1,
    )


def run_em(z: NormalizedObservations, gamma_init: PosteriorTensor,
           opts: EmOptions = EmOptions(),
           params_init: CacgmmParams | None = None):
    """Alternate M- and E-steps starting from an initial posterior.

    Starts with the M-step so initialization by posterior is honoured.
    Returns (final posterior, final params, per-iteration mean log-likelihood).
    """
    if gamma_init.gamma.shape[:2] != z.z.shape[:2]:
        raise InputError(
            f"posterior shape {gamma_init.gamma.shape} does not match "
            f"observations {z.z.shape}"
        )
    gamma = gamma_init
    params = params_init
    q_cache = None
    trace = np.empty(opts.iterations)
    for iteration in range(opts.iterations):
        params = m_step(z, gamma, opts, prev=params, _q_prev=q_cache)
        gamma, ll, q_cache = _posterior_and_likelihood(
            z, params, opts.inverse_eps, return_q=True
        )
        trace[iteration] = ll
    return gamma, params, trace


def log_likelihood(z: NormalizedObservations, params: CacgmmParams,
                   inverse_eps: float = 1e-10) -> float:
    """Mean log mixture density over active bins.

    Constants of the angular density that do not depend on the parameters
    (the (N-1)!/(2 pi^N) factor) are dropped.
    """
    _, value = _posterior_and_likelihood(z, params, inverse_eps)
    return value
