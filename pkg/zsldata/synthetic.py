# zsldata/synthetic.py
"""
Desk-scale synthetic zero-shot dataset.

Every class gets a random binary attribute signature (density 0.4). Each
attribute owns a fixed unit "signal direction" in channel space; an image of
class y receives, for every attribute present in a_y, that direction scaled by
SIGNAL_STRENGTH at one random spatial cell, on top of Gaussian noise. The class
semantic vector is the signature itself, so a_y doubles as ground truth.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from hdafl.errors import ConfigError
from zsldata.dataset import Dataset

# ----------------------------
# Defaults
# ----------------------------
ATTRIBUTE_DENSITY = 0.4
SIGNAL_STRENGTH = 4.0
TEST_FRACTION = 0.2      # share of each seen class held out for GZSL testing
_MAX_REDRAWS = 1000


@dataclass(frozen=True)
class SynthSpec:
    n_seen: int
    n_unseen: int
    K: int
    C: int
    H: int
    W: int
    images_per_class: int
    noise_scale: float
    seed: int = 0
    test_fraction: float = TEST_FRACTION
    name: str = "synthetic"

    def __post_init__(self) -> None:
        counts = {
            "n_seen": self.n_seen, "n_unseen": self.n_unseen, "K": self.K, "C": self.C,
            "H": self.H, "W": self.W, "images_per_class": self.images_per_class,
        }
        for key, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{key} must be positive, got {value}")
        if self.K > self.C:
            raise ConfigError(f"K={self.K} attributes need at least as many channels, got C={self.C}")
        if self.noise_scale < 0:
            raise ConfigError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")


def _signatures(rng: np.random.Generator, n_classes: int, k: int) -> np.ndarray:
    """Distinct, non-empty binary rows. Falls back to allowing duplicates when 2^K is too small."""
    sig = rng.random((n_classes, k)) < ATTRIBUTE_DENSITY
    unique_possible = n_classes <= 2 ** k - 1
    for _ in range(_MAX_REDRAWS):
        empty = ~sig.any(axis=1)
        _, first = np.unique(sig, axis=0, return_index=True)
        dup = np.ones(n_classes, dtype=bool)
        dup[first] = False
        redo = empty | (dup if unique_possible else np.zeros_like(dup))
        if not redo.any():
            break
        sig[redo] = rng.random((int(redo.sum()), k)) < ATTRIBUTE_DENSITY
    else:
        logging.warning("Could not draw %d distinct attribute signatures over K=%d", n_classes, k)
    return sig


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Deterministic for a fixed spec (seed included)."""
    rng = np.random.default_rng(spec.seed)
    n_classes = spec.n_seen + spec.n_unseen
    n = n_classes * spec.images_per_class
    cells = spec.H * spec.W

    sig = _signatures(rng, n_classes, spec.K)
    q, _ = np.linalg.qr(rng.standard_normal((spec.C, spec.K)))
    directions = q.T  # K x C, orthonormal rows

    labels = np.repeat(np.arange(n_classes), spec.images_per_class)
    maps = spec.noise_scale * rng.standard_normal((n, cells, spec.C))
    where = rng.integers(0, cells, size=(n, spec.K))

    img_idx, attr_idx = np.nonzero(sig[labels])
    np.add.at(maps, (img_idx, where[img_idx, attr_idx]), SIGNAL_STRENGTH * directions[attr_idx])
    maps = maps.reshape(n, spec.H, spec.W, spec.C)

    seen = list(range(spec.n_seen))
    unseen = list(range(spec.n_seen, n_classes))
    n_test = int(round(spec.test_fraction * spec.images_per_class))
    n_test = min(n_test, spec.images_per_class - 1)
    train, test = [], []
    for c in seen:
        members = rng.permutation(np.flatnonzero(labels == c))
        test.extend(members[:n_test].tolist())
        train.extend(members[n_test:].tolist())
    for c in unseen:
        test.extend(np.flatnonzero(labels == c).tolist())

    ds = Dataset(
        feature_maps=maps.astype(np.float32),
        labels=labels,
        class_semantics=sig.astype(np.float64),
        attribute_semantics=np.eye(spec.K),
        seen_classes=seen,
        unseen_classes=unseen,
        train_indices=np.sort(np.asarray(train, dtype=np.int64)),
        test_indices=np.sort(np.asarray(test, dtype=np.int64)),
        name=spec.name,
    )
    logging.info(
        "Generated synthetic dataset: %d images, %d classes (%d seen / %d unseen), K=%d, C=%d",
        n, n_classes, spec.n_seen, spec.n_unseen, spec.K, spec.C,
    )
    return ds
