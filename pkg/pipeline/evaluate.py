# pipeline/evaluate.py
"""
CZSL / GZSL inference with calibrated stacking, per-class top-1 accuracy and
the seen/unseen harmonic mean. Also exports attribute-feature pool entries for
an external 2-D projection.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from hdafl.checkpoint import Checkpoint, load_checkpoint
from hdafl.errors import ValidationError
from hdafl.losses import COS_EPS, PRESENCE_THRESHOLD, build_attribute_pool
from hdafl.model import HDAFLHead
from pipeline.settings import EvalConfig
from zsldata.dataset import Dataset

EVAL_MODES = ("czsl", "gzsl", "both")
DEFAULT_ALPHA = 25.0
SCORE_BATCH = 256

ModelSource = Union[HDAFLHead, Checkpoint, str, Path]


@dataclass
class EvalReport:
    mode: str
    gamma: Optional[float] = None
    alpha: float = DEFAULT_ALPHA
    acc_czsl: Optional[float] = None
    u: Optional[float] = None
    s: Optional[float] = None
    h: Optional[float] = None
    per_class_acc: Dict[int, float] = field(default_factory=dict)
    confusion: Dict[str, int] = field(default_factory=dict)
    unseen_predictions: int = 0
    n_test: int = 0

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["per_class_acc"] = {str(k): v for k, v in self.per_class_acc.items()}
        return d


# ----------------------------
# Prediction
# ----------------------------
def class_scores(h_x: torch.Tensor, cp: torch.Tensor, alpha: float) -> torch.Tensor:
    """alpha * cos(h_x, cp) for every (image, class) pair; h_x may be C or B x C."""
    h = F.normalize(h_x, dim=-1, eps=COS_EPS)
    p = F.normalize(cp, dim=-1, eps=COS_EPS)
    return alpha * (h @ p.transpose(-1, -2))


def _first_argmax(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal column, i.e. the smallest class id
    return np.argmax(scores, axis=-1)


def czsl_predict(h_x: torch.Tensor, cp_unseen: torch.Tensor, alpha: float, unseen_ids: Optional[Sequence[int]] = None):
    """Argmax over unseen classes only. Rows of cp_unseen must follow ascending class id."""
    ids = np.arange(cp_unseen.shape[0]) if unseen_ids is None else np.asarray(unseen_ids, dtype=np.int64)
    scores = class_scores(h_x, cp_unseen, alpha).detach().cpu().numpy()
    pred = ids[_first_argmax(scores)]
    return int(pred) if np.ndim(pred) == 0 else pred


def calibrate(scores: np.ndarray, gamma: float, seen_mask: np.ndarray) -> np.ndarray:
    """Calibrated stacking: subtract gamma from every seen-class score."""
    if gamma < 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    return scores - gamma * np.asarray(seen_mask, dtype=scores.dtype)


def gzsl_predict(h_x: torch.Tensor, cp_all: torch.Tensor, alpha: float, gamma: float, seen_mask):
    scores = class_scores(h_x, cp_all, alpha).detach().cpu().numpy()
    pred = _first_argmax(calibrate(scores, gamma, seen_mask))
    return int(pred) if np.ndim(pred) == 0 else pred


# ----------------------------
# Metrics
# ----------------------------
def per_class_accuracies(predictions, labels, class_set: Iterable[int]) -> Dict[int, float]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    out: Dict[int, float] = {}
    for c in sorted(int(c) for c in class_set):
        idx = labels == c
        if not idx.any():
            logging.warning("Class %d has no test samples; excluded from per-class accuracy", c)
            continue
        out[c] = float((predictions[idx] == c).mean() * 100.0)
    return out


def per_class_accuracy(predictions, labels, class_set: Iterable[int]) -> float:
    """Mean over classes of within-class top-1 accuracy, in percent."""
    accs = per_class_accuracies(predictions, labels, class_set)
    return float(np.mean(list(accs.values()))) if accs else 0.0


def harmonic_mean(s: float, u: float) -> float:
    return 2.0 * s * u / (s + u) if (s + u) > 0 else 0.0


# ----------------------------
# Evaluation over the test split
# ----------------------------
def resolve_model(source: ModelSource) -> HDAFLHead:
    if isinstance(source, HDAFLHead):
        return source
    if isinstance(source, Checkpoint):
        return source.model
    return load_checkpoint(source).model


def _alpha_for(source: ModelSource, alpha: Optional[float]) -> float:
    if alpha is not None:
        return float(alpha)
    if isinstance(source, Checkpoint):
        return float(source.train_config.get("loss", {}).get("alpha", DEFAULT_ALPHA))
    return DEFAULT_ALPHA


@dataclass
class TestScores:
    """Unpenalised scores over the whole test split; reused across gamma values."""
    indices: np.ndarray
    labels: np.ndarray
    scores: np.ndarray     # n_test x M, alpha * cosine
    seen_mask: np.ndarray  # M


@torch.no_grad()
def score_test_split(model: HDAFLHead, dataset: Dataset, alpha: float, batch_size: int = SCORE_BATCH) -> TestScores:
    model.eval()
    dtype = next(model.parameters()).dtype
    cp_all = model.class_prototypes(torch.as_tensor(dataset.class_semantics, dtype=dtype))
    idx = dataset.test_indices
    chunks: List[np.ndarray] = []
    for start in range(0, idx.size, batch_size):
        f = torch.as_tensor(dataset.feature_maps[idx[start:start + batch_size]], dtype=dtype)
        chunks.append(class_scores(model(f).h_x, cp_all, alpha).cpu().numpy())
    scores = np.concatenate(chunks) if chunks else np.zeros((0, dataset.n_classes))
    return TestScores(indices=idx, labels=dataset.labels[idx], scores=scores, seen_mask=dataset.seen_mask)


def _require_unseen(dataset: Dataset, ts: TestScores) -> np.ndarray:
    unseen = np.isin(ts.labels, dataset.unseen_classes)
    if not unseen.any():
        raise ValidationError("test split holds no unseen-class samples; zero-shot evaluation needs at least one")
    return unseen


def _czsl(dataset: Dataset, ts: TestScores, report: EvalReport) -> None:
    unseen = _require_unseen(dataset, ts)
    ids = np.sort(np.asarray(dataset.unseen_classes, dtype=np.int64))
    pred = ids[_first_argmax(ts.scores[unseen][:, ids])]
    per_class = per_class_accuracies(pred, ts.labels[unseen], ids)
    report.acc_czsl = float(np.mean(list(per_class.values())))
    report.per_class_acc.update(per_class)


def _gzsl(dataset: Dataset, ts: TestScores, gamma: float, report: EvalReport) -> None:
    unseen = _require_unseen(dataset, ts)
    pred = _first_argmax(calibrate(ts.scores, gamma, ts.seen_mask))
    pred_seen = ts.seen_mask[pred]
    true_seen = ~unseen

    if not true_seen.any():
        logging.warning("No seen-class test samples; S is reported as 0")
    seen_acc = per_class_accuracies(pred[true_seen], ts.labels[true_seen], dataset.seen_classes)
    unseen_acc = per_class_accuracies(pred[unseen], ts.labels[unseen], dataset.unseen_classes)
    report.s = float(np.mean(list(seen_acc.values()))) if seen_acc else 0.0
    report.u = float(np.mean(list(unseen_acc.values()))) if unseen_acc else 0.0
    report.h = harmonic_mean(report.s, report.u)
    report.gamma = float(gamma)
    report.unseen_predictions = int((~pred_seen).sum())
    report.confusion = {
        "seen_as_seen": int((true_seen & pred_seen).sum()),
        "seen_as_unseen": int((true_seen & ~pred_seen).sum()),
        "unseen_as_seen": int((unseen & pred_seen).sum()),
        "unseen_as_unseen": int((unseen & ~pred_seen).sum()),
    }
    if report.mode == "gzsl":
        report.per_class_acc.update({**seen_acc, **unseen_acc})


def report_from_scores(
    dataset: Dataset, ts: TestScores, mode: str, gamma: float, alpha: float
) -> EvalReport:
    if mode not in EVAL_MODES:
        raise ValidationError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    report = EvalReport(mode=mode, alpha=alpha, n_test=int(ts.indices.size))
    if mode in ("czsl", "both"):
        _czsl(dataset, ts, report)
    if mode in ("gzsl", "both"):
        _gzsl(dataset, ts, gamma, report)
    return report


def evaluate(
    source: ModelSource,
    dataset: Dataset,
    mode: str = "gzsl",
    gamma: Optional[float] = None,
    alpha: Optional[float] = None,
) -> EvalReport:
    """Forward the test split and compute the requested metrics.

    gamma defaults to 1.0 for AWA2-named datasets and 0.7 otherwise; alpha to
    the value stored in the checkpoint's training config.
    """
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    a = _alpha_for(source, alpha)
    g = EvalConfig(gamma=gamma).gamma_for(dataset.name)
    ts = score_test_split(resolve_model(source), dataset, a)
    report = report_from_scores(dataset, ts, mode, g, a)
    logging.info("Evaluated %s on %s (%s, gamma=%s)", mode, dataset.name, ts.indices.size, report.gamma)
    return report


def gamma_sweep(
    source: ModelSource,
    dataset: Dataset,
    gammas: Sequence[float],
    alpha: Optional[float] = None,
) -> List[EvalReport]:
    """One GZSL report per gamma from a single forward pass over the test split."""
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    a = _alpha_for(source, alpha)
    ts = score_test_split(resolve_model(source), dataset, a)
    return [report_from_scores(dataset, ts, "gzsl", float(g), a) for g in gammas]


def parse_gamma_range(text: str) -> List[float]:
    """'start:stop:step' inclusive of stop (within rounding), e.g. 0:1:0.1 -> 11 values."""
    try:
        start, stop, step = (float(p) for p in text.split(":"))
    except ValueError as e:
        raise ValidationError(f"gamma sweep must look like start:stop:step, got {text!r}") from e
    if step <= 0 or stop < start:
        raise ValidationError(f"gamma sweep needs step > 0 and stop >= start, got {text!r}")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 10) for i in range(n)]


# ----------------------------
# Embedding export
# ----------------------------
@torch.no_grad()
def export_embeddings(
    source: ModelSource,
    dataset: Dataset,
    enhanced: bool = True,
    presence_threshold: float = PRESENCE_THRESHOLD,
    batch_size: int = SCORE_BATCH,
) -> pd.DataFrame:
    """Pool entries over the test split: image, label, attribute, then C feature columns."""
    model = resolve_model(source)
    model.eval()
    idx = dataset.test_indices
    if idx.size == 0:
        raise ValidationError("test split is empty; nothing to export")
    dtype = next(model.parameters()).dtype
    targets = torch.as_tensor(dataset.normalized_class_semantics(), dtype=dtype)
    frames: List[pd.DataFrame] = []
    for start in range(0, idx.size, batch_size):
        chunk = idx[start:start + batch_size]
        out = model(torch.as_tensor(dataset.feature_maps[chunk], dtype=dtype))
        labels = dataset.labels[chunk]
        pool = build_attribute_pool(
            out.attribute_rows(enhanced),
            targets[torch.as_tensor(labels, dtype=torch.long)],
            presence_threshold,
            image_ids=torch.as_tensor(chunk, dtype=torch.long),
        )
        feats = pool.features.cpu().numpy()
        frame = pd.DataFrame(feats, columns=[f"f{j}" for j in range(feats.shape[1])])
        image_ids = pool.image_ids.cpu().numpy()
        frame.insert(0, "attribute", pool.attribute_ids.cpu().numpy())
        frame.insert(0, "label", dataset.labels[image_ids])
        frame.insert(0, "image", image_ids)
        frames.append(frame)
    df = pd.concat(frames, ignore_index=True)
    logging.info("Exported %d %s pool entries", len(df), "EAF" if enhanced else "AF")
    return df
