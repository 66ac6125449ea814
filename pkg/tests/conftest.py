# tests/conftest.py
from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import pytest
import torch

# Add project root to sys.path for absolute imports
ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from hdafl.losses import LossWeights  # noqa: E402
from pipeline.settings import ModelSettings, TrainConfig  # noqa: E402
from pipeline.trainer import train  # noqa: E402
from zsldata.dataset import save_dataset  # noqa: E402
from zsldata.episodes import EpisodeSpec  # noqa: E402
from zsldata.synthetic import SynthSpec, generate_synthetic  # noqa: E402

TINY = SynthSpec(
    n_seen=4, n_unseen=2, K=4, C=8, H=2, W=2,
    images_per_class=6, noise_scale=0.1, seed=0, name="tiny",
)


@pytest.fixture(scope="session")
def tiny_dataset():
    """6 classes (4 seen / 2 unseen), 5 train + 1 test image per seen class."""
    return generate_synthetic(TINY)


@pytest.fixture
def tiny_dir(tmp_path, tiny_dataset):
    return save_dataset(tiny_dataset, tmp_path / "tiny")


def small_config(**changes) -> TrainConfig:
    base = TrainConfig(
        epochs=2,
        seed=0,
        dtype="float64",
        episode=EpisodeSpec(ways=2, shots=2, seed=0),
        loss=LossWeights(),
        model=ModelSettings(heads=2, hidden_dim=16),
    )
    return replace(base, **changes)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture(scope="session")
def trained(tmp_path_factory, tiny_dataset):
    """One short training run shared by the evaluation tests."""
    out = tmp_path_factory.mktemp("trained")
    return train(tiny_dataset, small_config(epochs=3), out_dir=out, run_name="tiny")


@pytest.fixture
def gen():
    g = torch.Generator()
    g.manual_seed(0)
    return g
