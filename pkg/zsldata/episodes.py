# zsldata/episodes.py
"""
Minibatch samplers over the seen-class training images.

Episodes draw M distinct seen classes and N images per class, without
replacement inside an episode and with replacement across episodes.
Random batches are the non-episodic baseline: a shuffled pass over the
training images in fixed-size chunks.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List

import numpy as np

from hdafl.errors import ConfigError, SamplingError
from zsldata.dataset import Dataset


@dataclass(frozen=True)
class EpisodeSpec:
    ways: int = 16
    shots: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.ways < 1:
            raise ConfigError(f"ways must be a positive integer, got {self.ways}")
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")

    @property
    def batch_size(self) -> int:
        return self.ways * self.shots


@dataclass(frozen=True, eq=False)
class Batch:
    indices: np.ndarray          # image indices into the dataset
    feature_maps: np.ndarray     # B x H x W x C
    labels: np.ndarray           # B
    attribute_rows: np.ndarray   # B x K, class_semantics[labels]

    def __len__(self) -> int:
        return int(self.indices.size)


def make_batch(dataset: Dataset, indices) -> Batch:
    idx = np.asarray(indices, dtype=np.int64)
    labels = dataset.labels[idx]
    return Batch(
        indices=idx,
        feature_maps=dataset.feature_maps[idx],
        labels=labels,
        attribute_rows=dataset.class_semantics[labels],
    )


def episodes_per_epoch(dataset: Dataset, spec: EpisodeSpec) -> int:
    return max(1, math.ceil(dataset.train_indices.size / spec.batch_size))


class EpisodeSampler:
    """Seeded sequential episode generator. One instance per training run."""

    def __init__(self, dataset: Dataset, spec: EpisodeSpec) -> None:
        if spec.ways > len(dataset.seen_classes):
            raise ConfigError(
                f"ways={spec.ways} exceeds the {len(dataset.seen_classes)} seen classes"
            )
        self.dataset = dataset
        self.spec = spec
        self._classes = np.asarray(dataset.seen_classes, dtype=np.int64)
        self._by_class = {int(c): dataset.train_indices_of(int(c)) for c in self._classes}
        self._rng = np.random.default_rng(spec.seed)

    def sample_indices(self) -> np.ndarray:
        classes = self._rng.choice(self._classes, size=self.spec.ways, replace=False)
        picks: List[np.ndarray] = []
        for c in classes:
            pool = self._by_class[int(c)]
            if pool.size < self.spec.shots:
                raise SamplingError(
                    f"class {int(c)} has {pool.size} training images, episode needs shots={self.spec.shots}"
                )
            picks.append(self._rng.choice(pool, size=self.spec.shots, replace=False))
        return np.concatenate(picks)

    def sample(self) -> Batch:
        return make_batch(self.dataset, self.sample_indices())

    def epoch_indices(self) -> List[np.ndarray]:
        return [self.sample_indices() for _ in range(episodes_per_epoch(self.dataset, self.spec))]

    def epoch(self) -> List[Batch]:
        return [make_batch(self.dataset, idx) for idx in self.epoch_indices()]

    # Resume support
    def get_state(self) -> Dict[str, Any]:
        return self._rng.bit_generator.state

    def set_state(self, state: Dict[str, Any]) -> None:
        self._rng.bit_generator.state = state


def episode_batches(dataset: Dataset, spec: EpisodeSpec) -> List[Batch]:
    """One epoch of episodes from a fresh sampler seeded by spec.seed."""
    return EpisodeSampler(dataset, spec).epoch()


class RandomBatchSampler:
    """Non-episodic baseline: shuffled fixed-size batches of seen training images."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0) -> None:
        if batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)

    def batches_per_epoch(self) -> int:
        return max(1, math.ceil(self.dataset.train_indices.size / self.batch_size))

    def epoch_indices(self) -> List[np.ndarray]:
        order = self._rng.permutation(self.dataset.train_indices)
        if order.size == 0:
            logging.warning("Random sampling over an empty training split")
        return [order[i:i + self.batch_size] for i in range(0, order.size, self.batch_size)]

    def epoch(self) -> List[Batch]:
        return [make_batch(self.dataset, idx) for idx in self.epoch_indices()]

    def get_state(self) -> Dict[str, Any]:
        return self._rng.bit_generator.state

    def set_state(self, state: Dict[str, Any]) -> None:
        self._rng.bit_generator.state = state


def random_batches(dataset: Dataset, batch_size: int, seed: int = 0) -> List[Batch]:
    return RandomBatchSampler(dataset, batch_size, seed).epoch()
