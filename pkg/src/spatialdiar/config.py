"""Pipeline configuration: one JSON document, strictly validated."""

import json
from dataclasses import dataclass

from .cacgmm import EmOptions
from .errors import InputError
from .rectifier import RectifierOptions
from .signal import StftConfig


@dataclass(frozen=True)
class BeamformConfig:
    context_s: float = 15.0
    ref_policy: str = "max_energy"
    iterations: int = 10

    def __post_init__(self):
        if self.context_s < 0:
            raise InputError("context_s must be >= 0")
        if self.ref_policy != "max_energy":
            raise InputError(f"unknown ref_policy {self.ref_policy!r}")
        if self.iterations < 1:
            raise InputError("beamform iterations must be >= 1")


@dataclass(frozen=True)
class ClusteringConfig:
    max_k: int = 8
    min_words: int = 2
    min_duration_s: float = 0.4

    def __post_init__(self):
        if self.max_k < 1:
            raise InputError("max_k must be >= 1")
        if self.min_words < 0:
            raise InputError("min_words must be >= 0")
        if self.min_duration_s < 0:
            raise InputError("min_duration_s must be >= 0")


@dataclass(frozen=True)
class ScoringConfig:
    collar_s: float = 0.0
    frame_s: float = 0.01

    def __post_init__(self):
        if self.collar_s < 0:
            raise InputError("collar_s must be >= 0")
        if self.frame_s <= 0:
            raise InputError("frame_s must be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    stft: StftConfig = StftConfig()
    rectifier: RectifierOptions = RectifierOptions()
    rounds: int = 1
    beamform: BeamformConfig = BeamformConfig()
    clustering: ClusteringConfig = ClusteringConfig()
    scoring: ScoringConfig = ScoringConfig()

    def __post_init__(self):
        if self.rounds < 1:
            raise InputError("rounds must be >= 1")


def _section(data: dict, name: str, allowed) -> dict:
    sub = data.get(name, {})
    if not isinstance(sub, dict):
        raise InputError(f"config section {name!r} must be an object")
    unknown = set(sub) - set(allowed)
    if unknown:
        raise InputError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return sub


def config_from_dict(data: dict) -> PipelineConfig:
    """Validate and build a PipelineConfig; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise InputError("config must be a JSON object")
    top = {"stft", "rectifier", "beamform", "clustering", "scoring"}
    unknown = set(data) - top
    if unknown:
        raise InputError(f"unknown top-level config keys: {sorted(unknown)}")

    stft_kw = _section(data, "stft", ("fft_size", "hop", "window"))
    rect_kw = dict(
        _section(
            data,
            "rectifier",
            (
                "block_length", "threshold", "hangover", "rounds",
                "pre_threshold", "symmetric_hangover", "guided_fraction", "em",
            ),
        )
    )
    rounds = int(rect_kw.pop("rounds", 1))
    em_kw = rect_kw.pop("em", {})
    unknown = set(em_kw) - {"iterations", "load_eps", "prior_mode", "inverse_eps"}
    if unknown:
        raise InputError(f"unknown keys in config section 'rectifier.em': {sorted(unknown)}")
    beam_kw = _section(data, "beamform", ("context_s", "ref_policy", "iterations"))
    clus_kw = _section(data, "clustering", ("max_k", "min_words", "min_duration_s"))
    scor_kw = _section(data, "scoring", ("collar_s", "frame_s"))

    try:
        return PipelineConfig(
            stft=StftConfig(**stft_kw),
            rectifier=RectifierOptions(em=EmOptions(**em_kw), **rect_kw),
            rounds=rounds,
            beamform=BeamformConfig(**beam_kw),
            clustering=ClusteringConfig(**clus_kw),
            scoring=ScoringConfig(**scor_kw),
        )
    except TypeError as exc:
        raise InputError(f"invalid config: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a config file (or use defaults) and apply flag overrides.

    ``overrides`` maps dotted paths like "rectifier.threshold" to values.
    """
    data: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: invalid JSON: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return config_from_dict(data)
