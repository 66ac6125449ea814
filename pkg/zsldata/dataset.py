# zsldata/dataset.py
"""
Zero-shot dataset container plus the on-disk directory layout.

Layout of a dataset directory:

    features.bin             raw little-endian float32, row-major N x H x W x C
    features.json            {"shape": [N, H, W, C]}
    labels.csv               image_index,class_id
    class_semantics.csv      class_id,a0..a{K-1}
    attribute_semantics.csv  attr_id,d0..d{D-1}
    splits.json              {"seen": [...], "unseen": [...], "train": [...], "test": [...]}

Class ids are the contiguous range 0..M-1 and index rows of class_semantics.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from hdafl.errors import LoadError, ShapeError, ValidationError

# ----------------------------
# Constants
# ----------------------------
FEATURES_BIN = "features.bin"
FEATURES_JSON = "features.json"
LABELS_CSV = "labels.csv"
CLASS_SEMANTICS_CSV = "class_semantics.csv"
ATTRIBUTE_SEMANTICS_CSV = "attribute_semantics.csv"
SPLITS_JSON = "splits.json"

# What each file holds, used in load errors
_FILE_ROLES = {
    FEATURES_BIN: "feature maps",
    FEATURES_JSON: "feature map shape sidecar",
    LABELS_CSV: "image labels",
    CLASS_SEMANTICS_CSV: "class semantics",
    ATTRIBUTE_SEMANTICS_CSV: "attributes matrix",
    SPLITS_JSON: "seen/unseen and train/test splits",
}


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    feature_maps: np.ndarray          # N x H x W x C
    labels: np.ndarray                # N
    class_semantics: np.ndarray       # M x K, row y is a_y
    attribute_semantics: np.ndarray   # K x D_attr
    seen_classes: Tuple[int, ...]
    unseen_classes: Tuple[int, ...]
    train_indices: np.ndarray
    test_indices: np.ndarray
    name: str = "dataset"
    _normalized: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "feature_maps", _frozen(self.feature_maps, np.float32))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "class_semantics", _frozen(self.class_semantics, np.float64))
        object.__setattr__(self, "attribute_semantics", _frozen(self.attribute_semantics, np.float64))
        object.__setattr__(self, "train_indices", _frozen(self.train_indices, np.int64))
        object.__setattr__(self, "test_indices", _frozen(self.test_indices, np.int64))
        object.__setattr__(self, "seen_classes", tuple(sorted(int(c) for c in self.seen_classes)))
        object.__setattr__(self, "unseen_classes", tuple(sorted(int(c) for c in self.unseen_classes)))
        validate_dataset(self)

    # ----------------------------
    # Shapes
    # ----------------------------
    @property
    def n_images(self) -> int:
        return int(self.feature_maps.shape[0])

    @property
    def map_shape(self) -> Tuple[int, int, int]:
        _, h, w, c = self.feature_maps.shape
        return int(h), int(w), int(c)

    @property
    def n_classes(self) -> int:
        return int(self.class_semantics.shape[0])

    @property
    def n_attributes(self) -> int:
        return int(self.class_semantics.shape[1])

    @property
    def seen_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_classes, dtype=bool)
        mask[list(self.seen_classes)] = True
        return mask

    def normalized_class_semantics(self) -> np.ndarray:
        """Global min-max of a_y to [0, 1]; binary signatures come back unchanged."""
        if self._normalized is None:
            lo = float(self.class_semantics.min())
            hi = float(self.class_semantics.max())
            if hi - lo <= 0.0:
                norm = np.zeros_like(self.class_semantics)
            else:
                norm = (self.class_semantics - lo) / (hi - lo)
            object.__setattr__(self, "_normalized", _frozen(norm, np.float64))
        return self._normalized

    def train_indices_of(self, class_id: int) -> np.ndarray:
        return self.train_indices[self.labels[self.train_indices] == class_id]


# ----------------------------
# Validation
# ----------------------------
def validate_dataset(ds: Dataset) -> None:
    """Raise ValidationError naming the first violated invariant."""
    if ds.feature_maps.ndim != 4:
        raise ShapeError(f"all feature maps share identical (H, W, C): got array of rank {ds.feature_maps.ndim}")
    n = ds.feature_maps.shape[0]
    if ds.labels.shape != (n,):
        raise ShapeError(f"one label per image: {ds.labels.shape[0]} labels for {n} images")
    if ds.class_semantics.ndim != 2 or ds.attribute_semantics.ndim != 2:
        raise ShapeError("class_semantics and attribute_semantics must be matrices")
    if ds.attribute_semantics.shape[0] != ds.class_semantics.shape[1]:
        raise ShapeError(
            "attribute_semantics has one row per attribute: "
            f"{ds.attribute_semantics.shape[0]} rows for K={ds.class_semantics.shape[1]}"
        )

    seen, unseen = set(ds.seen_classes), set(ds.unseen_classes)
    overlap = seen & unseen
    if overlap:
        raise ValidationError(f"seen_classes ∩ unseen_classes = ∅ violated by {sorted(overlap)}")

    all_classes = seen | unseen
    if all_classes != set(range(ds.class_semantics.shape[0])):
        raise ValidationError(
            "class_semantics has one row per class in seen ∪ unseen: "
            f"{ds.class_semantics.shape[0]} rows for classes {sorted(all_classes)}"
        )
    if not np.all(np.isfinite(ds.class_semantics)):
        raise ValidationError("class_semantics entries are finite reals")
    if not np.all(np.isfinite(ds.attribute_semantics)):
        raise ValidationError("attribute_semantics entries are finite reals")

    if n and (ds.labels.min() < 0 or ds.labels.max() >= ds.class_semantics.shape[0]):
        raise ValidationError("every label is a known class id")

    for name, idx in (("train", ds.train_indices), ("test", ds.test_indices)):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ValidationError(f"{name} indices lie in 0..N-1")
    if np.intersect1d(ds.train_indices, ds.test_indices).size:
        raise ValidationError("train and test splits are disjoint")

    bad = [int(y) for y in np.unique(ds.labels[ds.train_indices]) if int(y) not in seen]
    if bad:
        raise ValidationError(f"every training image's label ∈ seen_classes violated by classes {bad}")


# ----------------------------
# Load / save
# ----------------------------
def _require(root: Path, name: str) -> Path:
    p = root / name
    if not p.exists():
        raise LoadError(f"missing file {name} ({_FILE_ROLES[name]}) in {root}")
    return p


def load_dataset(root_path) -> Dataset:
    """Load and validate a dataset directory."""
    root = Path(root_path)
    if not root.is_dir():
        raise LoadError(f"dataset directory not found: {root}")

    paths = {name: _require(root, name) for name in _FILE_ROLES}

    with paths[FEATURES_JSON].open("r", encoding="utf-8") as f:
        shape = json.load(f).get("shape")
    if not isinstance(shape, list) or len(shape) != 4:
        raise ValidationError(f"{FEATURES_JSON} must hold shape [N, H, W, C], got {shape!r}")
    raw = np.fromfile(paths[FEATURES_BIN], dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise ShapeError(f"{FEATURES_BIN} holds {raw.size} floats but {FEATURES_JSON} declares shape {shape}")
    feature_maps = raw.reshape(shape)

    labels_df = pd.read_csv(paths[LABELS_CSV])
    if list(labels_df.columns[:2]) != ["image_index", "class_id"]:
        raise ValidationError(f"{LABELS_CSV} header must be image_index,class_id")
    labels_df = labels_df.sort_values("image_index")
    if not np.array_equal(labels_df["image_index"].to_numpy(), np.arange(shape[0])):
        raise ShapeError(f"{LABELS_CSV} must label every image 0..{shape[0] - 1} exactly once")

    cls_df = pd.read_csv(paths[CLASS_SEMANTICS_CSV]).sort_values("class_id")
    attr_df = pd.read_csv(paths[ATTRIBUTE_SEMANTICS_CSV]).sort_values("attr_id")
    if not np.array_equal(cls_df["class_id"].to_numpy(), np.arange(len(cls_df))):
        raise ValidationError(f"{CLASS_SEMANTICS_CSV} class ids must be 0..M-1")
    if not np.array_equal(attr_df["attr_id"].to_numpy(), np.arange(len(attr_df))):
        raise ValidationError(f"{ATTRIBUTE_SEMANTICS_CSV} attribute ids must be 0..K-1")

    with paths[SPLITS_JSON].open("r", encoding="utf-8") as f:
        splits = json.load(f)
    missing = [k for k in ("seen", "unseen", "train", "test") if k not in splits]
    if missing:
        raise ValidationError(f"{SPLITS_JSON} lacks keys {missing}")

    ds = Dataset(
        feature_maps=feature_maps,
        labels=labels_df["class_id"].to_numpy(),
        class_semantics=cls_df.drop(columns="class_id").to_numpy(dtype=np.float64),
        attribute_semantics=attr_df.drop(columns="attr_id").to_numpy(dtype=np.float64),
        seen_classes=splits["seen"],
        unseen_classes=splits["unseen"],
        train_indices=np.asarray(splits["train"], dtype=np.int64),
        test_indices=np.asarray(splits["test"], dtype=np.int64),
        name=str(splits.get("name", root.name)),
    )
    logging.info("Loaded dataset %s: %s", root, describe(ds))
    return ds


def save_dataset(ds: Dataset, root_path) -> Path:
    """Write the directory layout. Output bytes depend only on the dataset."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)

    ds.feature_maps.astype("<f4").tofile(root / FEATURES_BIN)
    with (root / FEATURES_JSON).open("w", encoding="utf-8") as f:
        json.dump({"shape": list(ds.feature_maps.shape)}, f)

    pd.DataFrame({"image_index": np.arange(ds.n_images), "class_id": ds.labels}).to_csv(
        root / LABELS_CSV, index=False
    )

    cls_df = pd.DataFrame(ds.class_semantics, columns=[f"a{j}" for j in range(ds.n_attributes)])
    cls_df.insert(0, "class_id", np.arange(ds.n_classes))
    cls_df.to_csv(root / CLASS_SEMANTICS_CSV, index=False)

    d_attr = ds.attribute_semantics.shape[1]
    attr_df = pd.DataFrame(ds.attribute_semantics, columns=[f"d{j}" for j in range(d_attr)])
    attr_df.insert(0, "attr_id", np.arange(ds.n_attributes))
    attr_df.to_csv(root / ATTRIBUTE_SEMANTICS_CSV, index=False)

    splits = {
        "name": ds.name,
        "seen": list(ds.seen_classes),
        "unseen": list(ds.unseen_classes),
        "train": ds.train_indices.tolist(),
        "test": ds.test_indices.tolist(),
    }
    with (root / SPLITS_JSON).open("w", encoding="utf-8") as f:
        json.dump(splits, f)
    return root


def describe(ds: Dataset) -> Dict[str, object]:
    """Statistics row: attributes, seen/unseen, train/test."""
    h, w, c = ds.map_shape
    return {
        "dataset": ds.name,
        "attributes": ds.n_attributes,
        "seen/unseen": f"{len(ds.seen_classes)}/{len(ds.unseen_classes)}",
        "train/test": f"{ds.train_indices.size}/{ds.test_indices.size}",
        "feature map": f"{h}x{w}x{c}",
    }
