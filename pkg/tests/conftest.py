import logging

import numpy as np
import pytest

from cpri_compression.datasets import generate_frames
from cpri_compression.options import RunOptions, resolve_options
from cpri_compression.pipeline import SignalContext


def small_settings(scenario: str = "downlink") -> dict:
    """64-point frames, 40 decimated samples in two scaling blocks, and a very small network"""
    return {
        "frame": {"scenario": scenario, "n_fft": 64, "n_sym": 32, "n_cp": 8, "mod_order": 16},
        "scaling": {"n_s": 20, "q_s": 8},
        "model": {"hidden": 4, "layers": 1, "prior_filters": [3, 3]},
        "training": {"epochs": 2, "batch_size": 8, "vq_warmup_steps": 2, "vq_reseed_interval": 3},
        "dataset": {"train_frames": 24, "val_frames": 8, "test_frames": 8},
        "sweep": {"q_grid": [2, 3], "lambda_grid": [10.0, 100.0], "refinement_lambdas": [10.0, 100.0]},
    }


def small_options(scenario: str = "downlink", **sections) -> RunOptions:
    options = small_settings(scenario)
    for section, values in sections.items():
        if isinstance(values, dict):
            options.setdefault(section, {}).update(values)
        else:
            options[section] = values
    return resolve_options(options)


@pytest.fixture()
def options() -> RunOptions:
    return small_options()


@pytest.fixture()
def uplink_options() -> RunOptions:
    return small_options("uplink")


@pytest.fixture()
def ctx(options) -> SignalContext:
    return SignalContext.from_options(options)


@pytest.fixture()
def frames(ctx) -> np.ndarray:
    return generate_frames(ctx.frame, 24, seed=7)


@pytest.fixture(autouse=True)
def debug_logging() -> None:
    logging.getLogger("cpri-compression").setLevel(logging.DEBUG)
