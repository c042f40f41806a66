"""Spatial diarization toolkit.

Multichannel mask-model rectification of diarization output, MVDR/GSS
beamforming, spectral clustering of speaker segments, and DER scoring, glued
together by file formats (WAV, RTTM, JSONL manifests, binary tensors) so
external neural components can plug in as subprocess hooks.
"""

from .beamform import (
    BeamformerWeights,
    SpatialCovarianceSet,
    apply_beamformer,
    estimate_scm,
    gss_beamformer,
    gss_extract,
    mvdr_weights,
    pick_reference_channel,
)
from .cacgmm import (
    CacgmmParams,
    EmOptions,
    NormalizedObservations,
    PosteriorTensor,
    e_step,
    init_posterior_from_diarization,
    log_likelihood,
    m_step,
    normalize_observations,
    run_em,
)
from .clustering import (
    ClusterAssignment,
    EmbeddingSet,
    cosine_affinity,
    estimate_num_speakers,
    filter_short_segments,
    segments_to_diarization,
    spectral_cluster,
)
from .config import PipelineConfig, config_from_dict, load_config
from .errors import InputError, NumericalError, SpatialDiarError
from .rectifier import (
    BlockPlan,
    DiarizationMatrix,
    RectifierOptions,
    SpeakerActivityMatrix,
    align_diarization,
    iterate_rectification,
    mask_to_vad,
    overlap_add_posteriors,
    plan_blocks,
    rectify,
)
from .scoring import (
    DerReport,
    Segment,
    compute_der,
    mask_to_segments,
    parse_rttm,
    write_rttm,
)
from .signal import (
    MultichannelAudio,
    StftConfig,
    StftTensor,
    istft,
    read_wav,
    stft,
    write_wav,
)
from .simulate import (
    SceneSpec,
    SceneTruth,
    SourceSpec,
    corrupt_diarization,
    random_meeting_spec,
    scene_spec_from_json,
    simulate_scene,
    synthetic_embeddings,
)
from .tensorio import read_tensor, write_tensor

__version__ = "0.1.0"
