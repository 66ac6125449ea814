# tests/test_eval.py
from __future__ import annotations

import logging

import numpy as np
import pytest
import torch

from hdafl.errors import ValidationError
from hdafl.model import HDAFLHead, HeadConfig
from pipeline.evaluate import (
    calibrate,
    czsl_predict,
    evaluate,
    export_embeddings,
    gamma_sweep,
    gzsl_predict,
    harmonic_mean,
    parse_gamma_range,
    per_class_accuracies,
    per_class_accuracy,
)
from zsldata.dataset import Dataset

D = torch.float64


def _unit(*rows):
    return torch.tensor(rows, dtype=D)


# ----------------------------
# Prediction rules
# ----------------------------
class TestPredict:
    def test_czsl_picks_closest_unseen(self):
        cp = _unit([1.0, 0.0], [0.0, 1.0])
        assert czsl_predict(_unit([0.2, 0.9])[0], cp, 25.0, unseen_ids=[3, 5]) == 5

    def test_czsl_tie_goes_to_smallest_id(self):
        cp = _unit([1.0, 0.0], [1.0, 0.0])
        assert czsl_predict(_unit([1.0, 0.0])[0], cp, 25.0, unseen_ids=[2, 4]) == 2

    def test_gzsl_calibration_flips_to_unseen(self):
        cp = _unit([1.0, 0.0], [0.8, 0.6])     # class 0 seen, class 1 unseen
        h = _unit([1.0, 0.0])[0]
        seen = np.array([True, False])
        assert gzsl_predict(h, cp, 1.0, 0.0, seen) == 0
        assert gzsl_predict(h, cp, 1.0, 0.7, seen) == 1

    def test_gamma_zero_is_plain_argmax(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            scores = rng.normal(size=(3, 6))
            mask = rng.random(6) < 0.5
            np.testing.assert_array_equal(
                np.argmax(calibrate(scores, 0.0, mask), axis=1), np.argmax(scores, axis=1)
            )

    def test_huge_gamma_always_unseen(self):
        rng = np.random.default_rng(1)
        scores = rng.uniform(-25, 25, size=(50, 6))
        mask = np.array([True, True, True, True, False, False])
        assert not mask[np.argmax(calibrate(scores, 1e6, mask), axis=1)].any()

    def test_unseen_predictions_monotone_in_gamma(self):
        rng = np.random.default_rng(2)
        scores = rng.uniform(-25, 25, size=(200, 6))
        mask = np.array([True, True, True, False, False, False])
        counts = [int((~mask[np.argmax(calibrate(scores, g, mask), axis=1)]).sum()) for g in np.linspace(0, 50, 21)]
        assert counts == sorted(counts)

    def test_rescaling_prototypes_changes_nothing(self, gen):
        h = torch.randn(5, 4, generator=gen, dtype=D)
        cp = torch.randn(3, 4, generator=gen, dtype=D)
        scale = torch.tensor([[2.0], [0.5], [7.0]], dtype=D)
        np.testing.assert_array_equal(czsl_predict(h, cp, 25.0), czsl_predict(h, cp * scale, 25.0))

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValidationError):
            calibrate(np.zeros((1, 2)), -0.1, np.array([True, False]))


# ----------------------------
# Metrics
# ----------------------------
class TestMetrics:
    def test_per_class_accuracy_averages_classes(self):
        labels = [0, 0, 0, 0, 1]
        preds = [0, 0, 0, 0, 0]
        assert per_class_accuracy(preds, labels, [0, 1]) == pytest.approx(50.0)

    def test_empty_class_is_excluded_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            accs = per_class_accuracies([0, 1], [0, 1], [0, 1, 2])
        assert set(accs) == {0, 1}
        assert "Class 2 has no test samples" in caplog.text

    @pytest.mark.parametrize("s,u,h,tol", [(48.3, 41.9, 44.9, 0.05), (70.1, 78.9, 74.3, 0.15)])
    def test_harmonic_mean_of_reported_rows(self, s, u, h, tol):
        assert harmonic_mean(s, u) == pytest.approx(h, abs=tol)

    def test_harmonic_mean_bounds(self):
        rng = np.random.default_rng(3)
        for s, u in rng.uniform(0, 100, size=(100, 2)):
            h = harmonic_mean(s, u)
            assert min(s, u) - 1e-9 <= h <= max(s, u) + 1e-9
        assert harmonic_mean(0.0, 80.0) == 0.0
        assert harmonic_mean(0.0, 0.0) == 0.0


# ----------------------------
# Whole-split evaluation
# ----------------------------
def _perfect_prototype_case():
    """Each class c is a constant map e_c with signature e_c, and both encoders are identities."""
    eye = np.eye(4)
    labels = np.repeat(np.arange(4), 3)
    maps = np.broadcast_to(eye[labels][:, None, None, :], (12, 2, 2, 4)).copy()
    train = np.flatnonzero(labels < 2)[::2]
    test = np.setdiff1d(np.arange(12), train)
    ds = Dataset(
        feature_maps=maps, labels=labels, class_semantics=eye, attribute_semantics=eye,
        seen_classes=(0, 1), unseen_classes=(2, 3), train_indices=train, test_indices=test, name="perfect",
    )
    head = HDAFLHead.build(
        HeadConfig(n_attributes=4, channels=4, class_dim=4, attr_dim=4, hidden_dim=4, heads=2), seed=0, dtype=D
    )
    with torch.no_grad():
        for layer in head.class_encoder.layers[::2]:
            layer.weight.copy_(torch.eye(4, dtype=D))
            layer.bias.zero_()
    return ds, head


class TestEvaluate:
    def test_perfect_prototypes_score_100(self):
        ds, head = _perfect_prototype_case()
        report = evaluate(head, ds, mode="both", gamma=0.0)
        assert report.acc_czsl == 100.0
        assert report.s == 100.0 and report.u == 100.0 and report.h == 100.0
        assert report.confusion["seen_as_unseen"] == 0

    def test_trained_run_reports(self, trained, tiny_dataset):
        report = evaluate(trained.checkpoint_path, tiny_dataset, mode="both")
        assert report.gamma == 0.7
        assert report.alpha == 25.0
        assert report.n_test == 16
        for value in (report.acc_czsl, report.s, report.u, report.h):
            assert 0.0 <= value <= 100.0
        assert report.h == pytest.approx(harmonic_mean(report.s, report.u), abs=1e-9)
        assert sum(report.confusion.values()) == 16
        assert report.unseen_predictions == report.confusion["seen_as_unseen"] + report.confusion["unseen_as_unseen"]

    def test_czsl_report_only(self, trained, tiny_dataset):
        report = evaluate(trained.model, tiny_dataset, mode="czsl")
        assert report.acc_czsl is not None and report.h is None
        assert set(report.per_class_acc) == set(tiny_dataset.unseen_classes)
        assert set(report.to_dict()["per_class_acc"]) == {str(c) for c in tiny_dataset.unseen_classes}

    def test_unknown_mode(self, trained, tiny_dataset):
        with pytest.raises(ValidationError):
            evaluate(trained.model, tiny_dataset, mode="top5")

    def test_no_unseen_test_samples(self, trained, tiny_dataset):
        keep = np.isin(tiny_dataset.labels[tiny_dataset.test_indices], tiny_dataset.seen_classes)
        ds = Dataset(
            feature_maps=tiny_dataset.feature_maps, labels=tiny_dataset.labels,
            class_semantics=tiny_dataset.class_semantics, attribute_semantics=tiny_dataset.attribute_semantics,
            seen_classes=tiny_dataset.seen_classes, unseen_classes=tiny_dataset.unseen_classes,
            train_indices=tiny_dataset.train_indices, test_indices=tiny_dataset.test_indices[keep], name="tiny",
        )
        with pytest.raises(ValidationError, match="unseen"):
            evaluate(trained.model, ds, mode="gzsl")

    def test_gamma_sweep_is_monotone_in_unseen_predictions(self, trained, tiny_dataset):
        gammas = parse_gamma_range("0:2:0.1")
        reports = gamma_sweep(trained.model, tiny_dataset, gammas)
        assert [r.gamma for r in reports] == gammas
        counts = [r.unseen_predictions for r in reports]
        assert counts == sorted(counts)
        single = evaluate(trained.model, tiny_dataset, mode="gzsl", gamma=0.5)
        assert reports[5].h == single.h


class TestGammaRange:
    def test_inclusive_range(self):
        values = parse_gamma_range("0:1:0.1")
        assert len(values) == 11
        assert values[0] == 0.0 and values[-1] == 1.0

    @pytest.mark.parametrize("text", ["0:1", "a:b:c", "1:0:0.1", "0:1:0"])
    def test_bad_ranges(self, text):
        with pytest.raises(ValidationError):
            parse_gamma_range(text)


# ----------------------------
# Embedding export
# ----------------------------
class TestExportEmbeddings:
    def test_one_row_per_present_attribute(self, trained, tiny_dataset):
        df = export_embeddings(trained.model, tiny_dataset)
        test_labels = tiny_dataset.labels[tiny_dataset.test_indices]
        expected = int((tiny_dataset.class_semantics[test_labels] > 0.5).sum())
        assert len(df) == expected
        assert list(df.columns[:3]) == ["image", "label", "attribute"]
        assert df.shape[1] == 3 + tiny_dataset.map_shape[2]
        assert set(df["image"]) <= set(tiny_dataset.test_indices)

    def test_raw_and_enhanced_differ(self, trained, tiny_dataset):
        raw = export_embeddings(trained.model, tiny_dataset, enhanced=False)
        enhanced = export_embeddings(trained.model, tiny_dataset, enhanced=True)
        assert raw[["image", "attribute"]].equals(enhanced[["image", "attribute"]])
        assert not np.allclose(raw.filter(like="f").to_numpy(), enhanced.filter(like="f").to_numpy())

    def test_empty_test_split(self, trained, tiny_dataset):
        ds = Dataset(
            feature_maps=tiny_dataset.feature_maps, labels=tiny_dataset.labels,
            class_semantics=tiny_dataset.class_semantics, attribute_semantics=tiny_dataset.attribute_semantics,
            seen_classes=tiny_dataset.seen_classes, unseen_classes=tiny_dataset.unseen_classes,
            train_indices=tiny_dataset.train_indices, test_indices=np.array([], dtype=np.int64), name="tiny",
        )
        with pytest.raises(ValidationError, match="empty"):
            export_embeddings(trained.model, ds)
