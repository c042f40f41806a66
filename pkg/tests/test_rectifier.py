import math

import numpy as np
import pytest

from spatialdiar import (
    DiarizationMatrix,
    EmOptions,
    InputError,
    PosteriorTensor,
    RectifierOptions,
    SceneSpec,
    SourceSpec,
    StftConfig,
    align_diarization,
    compute_der,
    corrupt_diarization,
    init_posterior_from_diarization,
    iterate_rectification,
    mask_to_segments,
    mask_to_vad,
    normalize_observations,
    overlap_add_posteriors,
    plan_blocks,
    random_meeting_spec,
    rectify,
    run_em,
    simulate_scene,
    stft,
)

CFG = StftConfig(fft_size=512, hop=256)


# -------------------------------------------------------------- plan_blocks

def test_plan_blocks_example():
    plan = plan_blocks(10, 4)
    assert plan.hop == 2
    assert plan.spans == [(0, 4), (2, 6), (4, 8), (6, 10), (8, 10)]
    assert plan.num_blocks == math.ceil(10 / 2)


def test_plan_blocks_boundary():
    assert plan_blocks(4, 4).spans == [(0, 4), (2, 4)]


def test_plan_blocks_degenerate_long_block():
    assert plan_blocks(3, 100).spans == [(0, 3)]


def test_plan_blocks_enumeration_oracle():
    plan = plan_blocks(1000, 256)
    # independent tiling check: walk the offsets and recompute every span
    hop = 128
    expected = []
    start = 0
    while start < 1000:
        expected.append((start, min(start + 256, 1000)))
        start += hop
    assert plan.spans == expected
    coverage = np.zeros(1000, dtype=int)
    for lo, hi in plan.spans:
        coverage[lo:hi] += 1
    assert coverage.min() >= 1
    assert np.all(coverage[:hop] == 1)
    assert np.all(coverage[hop : plan.spans[-1][0]] == 2)


@pytest.mark.parametrize("seed", range(8))
def test_plan_blocks_tiling_property(seed):
    rng = np.random.default_rng(seed)
    total = int(rng.integers(1, 300))
    block = 2 * int(rng.integers(1, 40))
    plan = plan_blocks(total, block)
    hop = block // 2
    assert plan.num_blocks == math.ceil(total / hop)
    coverage = np.zeros(total, dtype=int)
    for s, (lo, hi) in enumerate(plan.spans):
        assert lo == s * hop
        assert hi == min(lo + block, total)
        assert hi > lo
        coverage[lo:hi] += 1
    assert coverage.min() >= 1
    assert coverage.max() <= 2
    assert plan.spans[-1][1] == total


def test_plan_blocks_validation():
    with pytest.raises(InputError):
        plan_blocks(10, 5)
    with pytest.raises(InputError):
        plan_blocks(0, 4)


# ---------------------------------------------------- overlap_add_posteriors

def test_overlap_add_single_block_identity():
    plan = plan_blocks(6, 100)
    rng = np.random.default_rng(0)
    block = rng.random((6, 3, 2))
    fused = overlap_add_posteriors([block], plan)
    assert np.array_equal(fused.gamma, block)


def test_overlap_add_constant_blocks_average_exactly():
    plan = plan_blocks(6, 8)
    assert plan.spans == [(0, 6), (4, 6)]
    a = np.full((6, 2, 3), 0.3)
    b = np.full((2, 2, 3), 0.7)
    fused = overlap_add_posteriors([a, b], plan).gamma
    assert np.all(fused[:4] == 0.3)
    assert np.all(fused[4:] == (0.3 + 0.7) / 2)


def test_overlap_add_matches_two_term_recomputation():
    rng = np.random.default_rng(1)
    total, block = 37, 10
    plan = plan_blocks(total, block)
    blocks = [rng.random((hi - lo, 4, 3)) for lo, hi in plan.spans]
    fused = overlap_add_posteriors(blocks, plan).gamma
    # direct per-frame recomputation from the covering blocks
    for frame in range(total):
        covering = [
            blk[frame - lo]
            for (lo, hi), blk in zip(plan.spans, blocks)
            if lo <= frame < hi
        ]
        expected = sum(covering) / len(covering)
        assert np.allclose(fused[frame], expected, atol=1e-12)


def test_overlap_add_preserves_normalization():
    rng = np.random.default_rng(2)
    plan = plan_blocks(50, 16)
    blocks = []
    for lo, hi in plan.spans:
        g = rng.random((hi - lo, 5, 4))
        g /= g.sum(axis=2, keepdims=True)
        blocks.append(g)
    fused = overlap_add_posteriors(blocks, plan).gamma
    assert np.allclose(fused.sum(axis=2), 1.0, atol=1e-6)


def test_overlap_add_class_mismatch():
    plan = plan_blocks(6, 8)
    with pytest.raises(InputError):
        overlap_add_posteriors(
            [np.zeros((6, 2, 3)), np.zeros((2, 2, 4))], plan
        )


# -------------------------------------------------------------- mask_to_vad

def _fused(beta_speaker):
    """Posterior whose frequency mean for the speaker equals beta."""
    frames = len(beta_speaker)
    gamma = np.zeros((frames, 4, 2))
    gamma[:, :, 0] = np.asarray(beta_speaker)[:, None]
    gamma[:, :, 1] = 1.0 - gamma[:, :, 0]
    return PosteriorTensor(gamma=gamma)


def test_mask_to_vad_above_threshold_everywhere():
    vad = mask_to_vad(_fused(np.full(30, 0.5)))
    assert np.all(vad.m == 1)


def test_mask_to_vad_below_threshold():
    vad = mask_to_vad(_fused(np.full(30, 0.1)))
    assert np.all(vad.m == 0)


def test_mask_to_vad_spike_hangover_window():
    beta = np.zeros(40)
    beta[20] = 0.9
    vad = mask_to_vad(_fused(beta), threshold=0.2, hangover=6)
    active = np.flatnonzero(vad.m[:, 0])
    assert active.tolist() == list(range(14, 21))
    assert len(active) == 7


def test_mask_to_vad_spike_at_start_clipped():
    beta = np.zeros(10)
    beta[2] = 0.9
    vad = mask_to_vad(_fused(beta))
    assert np.flatnonzero(vad.m[:, 0]).tolist() == [0, 1, 2]


def test_mask_to_vad_symmetric_window():
    beta = np.zeros(40)
    beta[20] = 0.9
    vad = mask_to_vad(_fused(beta), hangover=6, symmetric=True)
    assert np.flatnonzero(vad.m[:, 0]).tolist() == list(range(14, 27))


def test_mask_to_vad_monotone_in_threshold():
    rng = np.random.default_rng(3)
    fused = _fused(rng.random(200))
    low = mask_to_vad(fused, threshold=0.2)
    high = mask_to_vad(fused, threshold=0.5)
    assert np.all(high.m <= low.m)


# ------------------------------------------------------------------ rectify

def test_align_diarization_exact_when_rates_match():
    d = DiarizationMatrix(d=np.eye(4), frame_rate=62.5)
    out = align_diarization(d, 4, 62.5)
    assert np.array_equal(out, np.eye(4))


def test_align_diarization_nearest_frame():
    d = DiarizationMatrix(d=np.array([[1.0], [0.0]]), frame_rate=1.0)
    out = align_diarization(d, 4, 2.0)
    assert out[:, 0].tolist() == [1.0, 1.0, 0.0, 0.0]


@pytest.fixture(scope="module")
def small_scene():
    spec = random_meeting_spec(num_speakers=2, num_channels=3, duration_s=8.0,
                               seed=17, overlap_prob=0.2, stft_config=CFG)
    truth = simulate_scene(spec)
    return spec, truth, stft(truth.audio, CFG)


def test_rectify_single_block_matches_manual_fit(small_scene):
    spec, truth, tensor = small_scene
    opts = RectifierOptions(block_length=2 * tensor.num_frames,
                            em=EmOptions(iterations=6))
    vad, fused = rectify(tensor, truth.activities, opts)
    # manual single-block replication: frozen for 2 iterations, then updated
    obs = normalize_observations(tensor)
    gamma = init_posterior_from_diarization(truth.activities.d, tensor.num_bins)
    g1, p1, _ = run_em(obs, gamma, EmOptions(iterations=2, prior_mode="frozen"))
    g2, _, _ = run_em(obs, g1, EmOptions(iterations=4, prior_mode="updated"),
                      params_init=p1)
    assert np.array_equal(fused.gamma, g2.gamma)
    manual_vad = mask_to_vad(g2, opts.threshold, opts.hangover)
    assert np.array_equal(vad.m, manual_vad.m)


def test_rectify_all_silent_diarization_noise_only(small_scene):
    _, truth, tensor = small_scene
    silent = DiarizationMatrix(
        d=np.zeros_like(truth.activities.d), frame_rate=truth.activities.frame_rate
    )
    vad, fused = rectify(tensor, silent, RectifierOptions(em=EmOptions(iterations=2)))
    assert np.all(vad.m == 0)
    assert np.allclose(fused.gamma[:, :, -1], 1.0)


def test_rectify_corrects_speaker_confusion(small_scene):
    spec, truth, tensor = small_scene
    frame_rate = truth.activities.frame_rate
    corrupted = corrupt_diarization(truth.activities, confusion_rate=0.2, seed=99)
    in_segs = mask_to_segments(corrupted.d.astype(np.int8), frame_rate,
                               min_gap_s=0, min_dur_s=0, session=spec.session)
    der_in = compute_der(truth.rttm, in_segs).der
    opts = RectifierOptions(block_length=1000, em=EmOptions(iterations=8))
    vad, _ = rectify(tensor, corrupted, opts)
    out_segs = mask_to_segments(vad, frame_rate, min_gap_s=0, min_dur_s=0,
                                session=spec.session)
    der_out = compute_der(truth.rttm, out_segs).der
    assert der_out <= der_in * 0.7


def test_rectify_identity_sanity_on_oracle_input():
    spec = SceneSpec(
        num_channels=4, seed=21, duration_s=24.0, stft=CFG, noise_snr_db=20.0,
        session="long",
        sources=(
            SourceSpec(position=(1.8, 0.3, 1.2), activity=((0.5, 7.5), (16.0, 23.0))),
            SourceSpec(position=(-1.2, 1.5, 1.4), activity=((7.0, 13.0),)),
            SourceSpec(position=(0.4, -2.0, 1.1), activity=((12.5, 17.0),)),
        ),
    )
    truth = simulate_scene(spec)
    tensor = stft(truth.audio, CFG)
    frame_rate = truth.activities.frame_rate
    opts = RectifierOptions(block_length=4000, em=EmOptions(iterations=8))
    vad, _ = rectify(tensor, truth.activities, opts)
    oracle_segs = mask_to_segments((truth.activities.d > 0.5).astype(np.int8),
                                   frame_rate, 0, 0, session="long")
    rect_segs = mask_to_segments(vad, frame_rate, 0, 0, session="long")
    der_oracle = compute_der(truth.rttm, oracle_segs).der
    der_rect = compute_der(truth.rttm, rect_segs).der
    assert der_rect <= der_oracle + 2.0


def test_rectify_single_speaker_vad_agreement():
    spec = SceneSpec(
        num_channels=3, seed=5, duration_s=12.0, stft=CFG, noise_snr_db=15.0,
        sources=(
            SourceSpec(position=(1.5, 0.8, 1.2),
                       activity=((0.5, 3.0), (4.5, 7.0), (8.0, 11.0))),
        ),
    )
    truth = simulate_scene(spec)
    tensor = stft(truth.audio, CFG)
    vad, _ = rectify(tensor, truth.activities,
                     RectifierOptions(block_length=4000, em=EmOptions(iterations=8)))
    disagreement = np.mean(vad.m[:, 0] != (truth.activities.d[:, 0] > 0.5))
    assert disagreement <= 0.05


# ---------------------------------------------------- iterate_rectification

def test_iterate_rounds_one_equals_rectify(small_scene):
    _, truth, tensor = small_scene
    opts = RectifierOptions(block_length=1000, em=EmOptions(iterations=3))
    direct, _ = rectify(tensor, truth.activities, opts)
    iterated = iterate_rectification(tensor, truth.activities, opts, rounds=1)
    assert np.array_equal(direct.m, iterated.m)


def test_iterate_two_rounds_stable(small_scene):
    spec, truth, tensor = small_scene
    frame_rate = truth.activities.frame_rate
    corrupted = corrupt_diarization(truth.activities, confusion_rate=0.2, seed=7)
    opts = RectifierOptions(block_length=1000, em=EmOptions(iterations=6))
    round1, _ = rectify(tensor, corrupted, opts)
    round2 = iterate_rectification(tensor, corrupted, opts, rounds=2)
    der1 = compute_der(
        truth.rttm,
        mask_to_segments(round1, frame_rate, 0, 0, session=spec.session),
    ).der
    der2 = compute_der(
        truth.rttm,
        mask_to_segments(round2, frame_rate, 0, 0, session=spec.session),
    ).der
    assert der2 <= der1 + 1.0


def test_iterate_all_zero_diarization(small_scene):
    _, truth, tensor = small_scene
    zeros = DiarizationMatrix(
        d=np.zeros_like(truth.activities.d),
        frame_rate=truth.activities.frame_rate,
    )
    opts = RectifierOptions(em=EmOptions(iterations=2))
    vad = iterate_rectification(tensor, zeros, opts, rounds=2)
    assert np.all(vad.m == 0)


def test_iterate_requires_positive_rounds(small_scene):
    _, truth, tensor = small_scene
    with pytest.raises(InputError):
        iterate_rectification(tensor, truth.activities, rounds=0)
