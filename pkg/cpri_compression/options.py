from __future__ import annotations

import json
from hashlib import sha3_224 as hash
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, List, Optional, TypeVar, Union, cast

import toml
from typing_extensions import Literal, TypedDict

from cpri_compression.exceptions import ImproperlyConfigured

logger = getLogger("cpri-compression")

Scenario = Literal["downlink", "uplink"]
SchemeName = Literal["scalar", "vector", "latent-uniform", "latent-vq", "neural", "refinement", "variable-rate"]


class FrameOptions(TypedDict):
    scenario: Scenario
    n_fft: int
    n_sym: int
    n_cp: int
    mod_order: int


class ChannelOptions(TypedDict):
    enabled: bool
    n_taps: int
    snr_db: float


class ResamplerOptions(TypedDict):
    k: int
    m: int
    taps: int
    kaiser_beta: float
    bypass: bool


class ScalingOptions(TypedDict):
    n_s: int
    q_s: int


class ModelOptions(TypedDict):
    hidden: int
    layers: int
    latent_channels: int
    vq_block: int
    vq_beta: float
    prior_filters: List[int]
    prior_init_scale: float


class TrainingOptions(TypedDict):
    epochs: int
    batch_size: int
    learning_rate: float
    plateau_patience: int
    plateau_factor: float
    vq_warmup_steps: int
    vq_reseed_interval: int
    lloyd_max_iter: int
    lloyd_tol: float
    vq_training_blocks: int
    checkpoint_every: int


class DatasetOptions(TypedDict):
    train_frames: int
    val_frames: int
    test_frames: int
    workers: int


class MismatchOptions(TypedDict, total=False):
    name: str
    snr_db: float
    n_taps: int
    mod_order: int


class SweepOptions(TypedDict):
    schemes: List[SchemeName]
    q_grid: List[int]
    lambda_grid: List[float]
    refinement_lambdas: List[float]
    variable_rate_scales: List[float]
    variable_rate_base_lambda: float
    vq_block: int
    mismatch: List[MismatchOptions]
    layer_drop_probabilities: List[float]


class MetadataOptions(TypedDict):
    bandwidth_mhz: float
    subcarrier_spacing_khz: float
    sample_rate_mhz: float


class PossibleRunOptions(TypedDict, total=False):
    seed: int
    output_dir: str
    deterministic: bool
    frame: FrameOptions
    channel: ChannelOptions
    resampler: ResamplerOptions
    scaling: ScalingOptions
    model: ModelOptions
    training: TrainingOptions
    dataset: DatasetOptions
    sweep: SweepOptions
    metadata: MetadataOptions


class RunOptions(TypedDict):
    seed: int
    output_dir: str
    deterministic: bool
    frame: FrameOptions
    channel: ChannelOptions
    resampler: ResamplerOptions
    scaling: ScalingOptions
    model: ModelOptions
    training: TrainingOptions
    dataset: DatasetOptions
    sweep: SweepOptions
    metadata: MetadataOptions


def get_default_run_options(scenario: Scenario = "downlink") -> RunOptions:
    uplink = scenario == "uplink"
    return {
        "seed": 2024,
        "output_dir": "runs",
        "deterministic": False,
        "frame": {
            "scenario": scenario,
            "n_fft": 512,
            "n_sym": 280,
            "n_cp": 64 if uplink else 36,
            "mod_order": 64,
        },
        "channel": {"enabled": uplink, "n_taps": 7, "snr_db": 5.0},
        "resampler": {"k": 5, "m": 8, "taps": 641, "kaiser_beta": 8.0, "bypass": False},
        "scaling": {"n_s": 360 if uplink else 320, "q_s": 8},
        "model": {
            "hidden": 32,
            "layers": 2,
            "latent_channels": 2,
            "vq_block": 2,
            "vq_beta": 1.0,
            "prior_filters": [4, 4, 4],
            "prior_init_scale": 10.0,
        },
        "training": {
            "epochs": 200,
            "batch_size": 32,
            "learning_rate": 1e-4,
            "plateau_patience": 20,
            "plateau_factor": 0.8,
            "vq_warmup_steps": 500,
            "vq_reseed_interval": 200,
            "lloyd_max_iter": 100,
            "lloyd_tol": 1e-9,
            "vq_training_blocks": 200_000,
            "checkpoint_every": 1,
        },
        "dataset": {"train_frames": 20_000, "val_frames": 2_000, "test_frames": 2_000, "workers": 1},
        "sweep": {
            "schemes": ["scalar", "vector", "latent-uniform", "latent-vq", "neural"],
            "q_grid": [4, 5, 6, 7],
            "lambda_grid": [1e2, 5e2, 1e3, 5e3],
            "refinement_lambdas": [1e2, 1e3, 1e4],
            "variable_rate_scales": [0.1, 0.25, 0.5, 0.9, 1.0],
            "variable_rate_base_lambda": 5e3,
            "vq_block": 2,
            "mismatch": (
                [
                    {"name": "snr-5", "snr_db": -5.0},
                    {"name": "snr15", "snr_db": 15.0},
                    {"name": "taps1", "n_taps": 1},
                    {"name": "taps3", "n_taps": 3},
                    {"name": "qam4", "mod_order": 4},
                    {"name": "qam16", "mod_order": 16},
                ]
                if uplink
                else [{"name": "qam4", "mod_order": 4}, {"name": "qam16", "mod_order": 16}]
            ),
            "layer_drop_probabilities": [0.0, 0.1, 0.3],
        },
        "metadata": {"bandwidth_mhz": 20.0, "subcarrier_spacing_khz": 60.0, "sample_rate_mhz": 30.72},
    }


_MISMATCH_KEYS = ("name", "snr_db", "n_taps", "mod_order")


def validate_options(options: Dict[str, Any], reference: Optional[Dict[str, Any]] = None, path=None) -> None:
    """Rejects keys that have no default counterpart, at any nesting level"""
    reference = cast(Dict[str, Any], reference if reference is not None else get_default_run_options())
    path = path or []
    unrecognized_options = [".".join(path + [k]) for k in options.keys() if k not in reference]
    if unrecognized_options:
        raise ImproperlyConfigured(f"Unrecognized options: {unrecognized_options}")
    for key, value in options.items():
        if isinstance(value, dict) and isinstance(reference[key], dict):
            validate_options(value, reference[key], path + [key])
    for entry in options.get("sweep", {}).get("mismatch", []) if not path else []:
        unrecognized_options = [f"sweep.mismatch.{k}" for k in entry if k not in _MISMATCH_KEYS]
        if unrecognized_options:
            raise ImproperlyConfigured(f"Unrecognized options: {unrecognized_options}")


T = TypeVar("T")


def _merge(source: Dict, into: T, path=None) -> T:
    """merges source into a copy of into, logging every overridden leaf"""
    target = cast(dict, into)
    merged = target.copy()
    if path is None:
        path = []
    for key in source:
        if key in target:
            printable_path = ".".join(path + [str(key)])
            if isinstance(target[key], dict) and isinstance(source[key], dict):
                merged[key] = _merge(source=source[key], into=target[key], path=path + [str(key)])
            elif target[key] != source[key]:
                logger.debug(f"Overriding setting {printable_path} '{target[key]}' with value '{source[key]}'")
                merged[key] = source[key]
        else:
            merged[key] = source[key]
    return cast(T, merged)


def resolve_options(user_options: Union[PossibleRunOptions, Dict[str, Any]]) -> RunOptions:
    validate_options(cast(Dict[str, Any], user_options))
    scenario = cast(Dict[str, Any], user_options).get("frame", {}).get("scenario", "downlink")
    if scenario not in ("downlink", "uplink"):
        raise ImproperlyConfigured(f"frame.scenario must be 'downlink' or 'uplink', not '{scenario}'")
    return _merge(source=cast(Dict, user_options), into=get_default_run_options(scenario))


def load_run_options(path: Optional[Union[str, Path]]) -> RunOptions:
    if path is None:
        return get_default_run_options()
    try:
        user_options = toml.load(str(path))
    except (OSError, toml.TomlDecodeError) as e:
        raise ImproperlyConfigured(f"Could not read configuration {path}: {e}") from e
    logger.debug(f"Loaded configuration from {path}")
    return resolve_options(user_options)


def options_digest(options: Union[RunOptions, Dict[str, Any]]) -> str:
    canonical = json.dumps(options, sort_keys=True, separators=(",", ":"), default=str)
    return hash(canonical.encode("utf-8")).hexdigest()
