# zsldata/convert.py
"""
Convert the common "proposed split" benchmark files into a dataset directory.

Expected inputs (nothing is downloaded and no backbone is run here):

    res101.mat        'labels' (N x 1, 1-based class ids) in image order
    att_splits.mat    'att' or 'original_att' (K x M), 'trainval_loc',
                      'test_seen_loc', 'test_unseen_loc' (1-based image indices)
    feature_maps.npy  N x H x W x C float array of precomputed backbone maps,
                      same image order as res101.mat
    attributes.npy    optional K x D attribute description vectors
                      (identity rows when absent)
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.io as sio

from hdafl.errors import LoadError, ShapeError
from zsldata.dataset import Dataset, save_dataset


def _loadmat(path: Path) -> dict:
    if not path.exists():
        raise LoadError(f"missing file {path.name} in {path.parent}")
    return sio.loadmat(str(path))


def convert_xlsa17(
    res101_mat,
    att_splits_mat,
    feature_maps_npy,
    out_dir,
    attributes_npy=None,
    name: Optional[str] = None,
    use_original_att: bool = True,
) -> Dataset:
    res = _loadmat(Path(res101_mat))
    splits = _loadmat(Path(att_splits_mat))

    fm_path = Path(feature_maps_npy)
    if not fm_path.exists():
        raise LoadError(f"missing file {fm_path.name} (feature maps) in {fm_path.parent}")
    feature_maps = np.load(fm_path, mmap_mode="r")

    labels = res["labels"].astype(np.int64).ravel() - 1
    if feature_maps.shape[0] != labels.size:
        raise ShapeError(f"{fm_path.name} has {feature_maps.shape[0]} maps for {labels.size} labels")

    att_key = "original_att" if use_original_att and "original_att" in splits else "att"
    class_semantics = np.asarray(splits[att_key], dtype=np.float64).T  # M x K

    trainval = splits["trainval_loc"].astype(np.int64).ravel() - 1
    test_seen = splits["test_seen_loc"].astype(np.int64).ravel() - 1
    test_unseen = splits["test_unseen_loc"].astype(np.int64).ravel() - 1

    if attributes_npy is not None:
        attribute_semantics = np.load(attributes_npy)
    else:
        attribute_semantics = np.eye(class_semantics.shape[1])

    ds = Dataset(
        feature_maps=np.asarray(feature_maps, dtype=np.float32),
        labels=labels,
        class_semantics=class_semantics,
        attribute_semantics=attribute_semantics,
        seen_classes=np.unique(labels[trainval]).tolist(),
        unseen_classes=np.unique(labels[test_unseen]).tolist(),
        train_indices=np.sort(trainval),
        test_indices=np.sort(np.concatenate([test_seen, test_unseen])),
        name=name or Path(att_splits_mat).parent.name,
    )
    save_dataset(ds, out_dir)
    logging.info("Converted %s into %s", Path(att_splits_mat).parent, out_dir)
    return ds
