"""Shared fixtures: one small synthetic corpus reused across test modules."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import settings

from stormcast.config import ExperimentConfig
from stormcast.model import TrainConfig
from stormcast.pipeline import PreparedData, oversample_positives, split_events
from stormcast.synth import SynthConfig, synth_event

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


SMALL_SYNTH = replace(
    SynthConfig(), grid_y=36, grid_x=36, frames=10, events=3
)

# Shrunken model for gradient checks: same depth, kernels and FC widths,
# thin conv channels and a small LSTM.
SHRUNKEN_TRAIN = replace(
    TrainConfig(), conv_channels=(8, 8, 8, 8), lstm_hidden=8, epochs=1,
)


def small_experiment_config(data_dir: str, out_dir: str) -> ExperimentConfig:
    """A complete config small enough for end-to-end CLI tests."""
    return replace(
        ExperimentConfig(),
        synth=SMALL_SYNTH,
        train=replace(TrainConfig(), epochs=1, conv_channels=(8, 8, 8, 8),
                      lstm_hidden=8, fc_hidden=16, feature_dim=10),
        train_events=2,
        test_events=1,
        data_dir=data_dir,
        out_dir=out_dir,
    )


@pytest.fixture(scope="session")
def small_events():
    return [
        synth_event(SMALL_SYNTH, seed=100 + i, event_id=f"event_{i:03d}")
        for i in range(SMALL_SYNTH.events)
    ]


@pytest.fixture(scope="session")
def small_prepared(small_events) -> PreparedData:
    return split_events(small_events, n_train=2, n_test=1, seed=7)


@pytest.fixture(scope="session")
def small_oversampled(small_prepared):
    return oversample_positives(
        small_prepared.train, small_prepared.events_by_id, k=1
    )


@pytest.fixture(scope="session")
def small_normalizer(small_prepared):
    return small_prepared.normalizer


@pytest.fixture()
def rng():
    return np.random.default_rng(20260819)


@pytest.fixture(scope="session")
def flat_normalizer():
    """Identity-friendly bounds: every variable spans [-1, 1] already."""
    from stormcast.pipeline import Normalizer, VARIABLES

    return Normalizer(bounds={v: (-1.0, 1.0) for v in VARIABLES})
