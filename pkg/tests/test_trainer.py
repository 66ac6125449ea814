# tests/test_trainer.py
from __future__ import annotations

import json

import pandas as pd
import pytest
import torch

import pipeline.trainer as trainer
from hdafl.checkpoint import FORMAT, load_checkpoint, save_checkpoint
from hdafl.errors import ConfigError, LoadError, NumericError, ValidationError
from hdafl.model import HDAFLHead, HeadConfig
from pipeline.backup_utils import LAST_GOOD_NAME
from pipeline.report_utils import LOSS_TRACE_CSV, TRACE_COLUMNS
from pipeline.settings import ModelSettings
from pipeline.trainer import FINAL_CHECKPOINT, make_optimizer, sgd_step, train
from tests.conftest import small_config


class _Scalar(torch.nn.Module):
    def __init__(self, value: float = 0.0) -> None:
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))


def _step_with_grad(model, optimizer, grad: float) -> None:
    model.w.grad = torch.tensor([grad], dtype=torch.float64)
    sgd_step(model, optimizer)


# ----------------------------
# SGD update rule
# ----------------------------
class TestSgdStep:
    def test_plain_step(self):
        m = _Scalar(0.5)
        opt = make_optimizer(m, small_config(learning_rate=0.1, momentum=0.0, weight_decay=0.0))
        _step_with_grad(m, opt, 2.0)
        assert float(m.w) == pytest.approx(0.3, abs=1e-15)

    def test_zero_gradient_leaves_parameters(self):
        m = _Scalar(1.25)
        opt = make_optimizer(m, small_config(learning_rate=0.1, momentum=0.9, weight_decay=0.0))
        for _ in range(3):
            _step_with_grad(m, opt, 0.0)
        assert float(m.w) == 1.25

    def test_momentum_accumulates(self):
        m = _Scalar(0.0)
        opt = make_optimizer(m, small_config(learning_rate=1.0, momentum=0.9, weight_decay=0.0))
        _step_with_grad(m, opt, 1.0)
        assert float(m.w) == pytest.approx(-1.0)
        _step_with_grad(m, opt, 1.0)
        assert float(m.w) == pytest.approx(-1.0 - 1.9)

    def test_weight_decay_shrinks(self):
        m = _Scalar(2.0)
        opt = make_optimizer(m, small_config(learning_rate=0.1, momentum=0.0, weight_decay=0.01))
        _step_with_grad(m, opt, 0.0)
        assert float(m.w) == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-12)

    def test_non_finite_gradient_names_tensor(self):
        m = _Scalar(0.0)
        opt = make_optimizer(m, small_config())
        with pytest.raises(NumericError, match="w"):
            _step_with_grad(m, opt, float("inf"))
        assert float(m.w) == 0.0


def test_zero_epochs_rejected():
    with pytest.raises(ConfigError, match="epochs"):
        small_config(epochs=0)


# ----------------------------
# Training loop
# ----------------------------
class TestTrain:
    def test_trace_and_checkpoints(self, tmp_path, tiny_dataset):
        result = train(tiny_dataset, small_config(epochs=2), out_dir=tmp_path)
        assert list(result.trace.columns) == TRACE_COLUMNS
        assert len(result.trace) == 10          # 5 episodes per epoch
        assert result.trace["episode"].tolist() == list(range(1, 11))
        for name in ("epoch_001.ckpt", "epoch_002.ckpt", LAST_GOOD_NAME, FINAL_CHECKPOINT, LOSS_TRACE_CSV):
            assert (tmp_path / name).exists(), name
        on_disk = pd.read_csv(tmp_path / LOSS_TRACE_CSV)
        assert len(on_disk) == 10
        assert result.checkpoint_path == tmp_path / FINAL_CHECKPOINT
        assert not result.model.training

    def test_losses_are_finite(self, tmp_path, tiny_dataset):
        trace = train(tiny_dataset, small_config(epochs=1), out_dir=tmp_path).trace
        assert trace[TRACE_COLUMNS[1:]].notna().all().all()
        assert (trace["total"] > 0).all()

    def test_same_seed_is_deterministic(self, tmp_path, tiny_dataset):
        a = train(tiny_dataset, small_config(), out_dir=tmp_path / "a")
        b = train(tiny_dataset, small_config(), out_dir=tmp_path / "b")
        pd.testing.assert_frame_equal(a.trace, b.trace)
        for (name, p), (_, q) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
            assert torch.equal(p, q), name

    def test_resume_matches_uninterrupted_run(self, tmp_path, tiny_dataset):
        full = train(tiny_dataset, small_config(epochs=3), out_dir=tmp_path / "full")
        train(tiny_dataset, small_config(epochs=1), out_dir=tmp_path / "part")
        resumed = train(
            tiny_dataset, small_config(epochs=3),
            out_dir=tmp_path / "part", resume_from=tmp_path / "part" / "epoch_001.ckpt",
        )
        pd.testing.assert_frame_equal(full.trace, resumed.trace)
        for (name, p), (_, q) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
            assert torch.equal(p, q), name
        assert load_checkpoint(tmp_path / "part" / FINAL_CHECKPOINT).epoch == 3

    def test_resume_with_other_head_rejected(self, tmp_path, tiny_dataset):
        train(tiny_dataset, small_config(epochs=1), out_dir=tmp_path)
        other = small_config(model=ModelSettings(heads=4, hidden_dim=16))
        with pytest.raises(ConfigError):
            train(tiny_dataset, other, out_dir=tmp_path, resume_from=tmp_path / "epoch_001.ckpt")

    def test_nan_loss_aborts_and_keeps_last_good(self, tmp_path, tiny_dataset, monkeypatch):
        real_total = trainer.total_loss
        calls = {"n": 0}

        def poisoned(components, weights):
            calls["n"] += 1
            loss = real_total(components, weights)
            return loss * float("nan") if calls["n"] == 7 else loss

        monkeypatch.setattr(trainer, "total_loss", poisoned)
        with pytest.raises(NumericError, match=LAST_GOOD_NAME):
            train(tiny_dataset, small_config(epochs=3), out_dir=tmp_path)
        good = load_checkpoint(tmp_path / LAST_GOOD_NAME)
        assert good.epoch == 1 and good.episode == 5
        assert not (tmp_path / FINAL_CHECKPOINT).exists()

    def test_max_episodes_cap(self, tmp_path, tiny_dataset):
        result = train(tiny_dataset, small_config(epochs=5, max_episodes=7), out_dir=tmp_path)
        assert len(result.trace) == 7
        ckpt = load_checkpoint(result.checkpoint_path)
        # 5 episodes per epoch: epoch 1 finished, 2 episodes into epoch 2
        assert ckpt.episode == 7 and ckpt.epoch == 1 and ckpt.epoch_offset == 2
        partial = load_checkpoint(tmp_path / "epoch_002.ckpt")
        assert (partial.epoch, partial.epoch_offset) == (1, 2)

    def test_resume_after_cap_finishes_the_partial_epoch(self, tmp_path, tiny_dataset):
        full = train(tiny_dataset, small_config(epochs=3), out_dir=tmp_path / "full")
        train(tiny_dataset, small_config(epochs=3, max_episodes=7), out_dir=tmp_path / "part")
        resumed = train(
            tiny_dataset, small_config(epochs=3),
            out_dir=tmp_path / "part", resume_from=tmp_path / "part" / FINAL_CHECKPOINT,
        )
        assert len(resumed.trace) == 15
        pd.testing.assert_frame_equal(full.trace, resumed.trace)
        for (name, p), (_, q) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
            assert torch.equal(p, q), name
        ckpt = load_checkpoint(tmp_path / "part" / FINAL_CHECKPOINT)
        assert (ckpt.epoch, ckpt.epoch_offset, ckpt.episode) == (3, 0, 15)

    def test_random_sampling(self, tmp_path, tiny_dataset):
        result = train(tiny_dataset, small_config(sampling="random", batch_size=8), out_dir=tmp_path)
        assert len(result.trace) == 6           # 3 batches of the 20 training images per epoch

    def test_classification_over_seen_prototypes_only(self, tmp_path, tiny_dataset):
        result = train(tiny_dataset, small_config(epochs=1, cls_over_all_classes=False), out_dir=tmp_path)
        assert (result.trace["L_cls"] > 0).all()

    def test_backup_copy(self, tmp_path, tiny_dataset):
        backup = tmp_path / "backup"
        train(tiny_dataset, small_config(epochs=1, backup_location=str(backup)), out_dir=tmp_path / "run", run_name="r")
        assert (backup / "r" / "epoch_001.ckpt").exists()
        assert (backup / "r" / FINAL_CHECKPOINT).exists()


# ----------------------------
# Checkpoint container
# ----------------------------
def _assert_same_outputs(a, b, dataset, dtype):
    f = torch.as_tensor(dataset.feature_maps[:4], dtype=dtype)
    cls = torch.as_tensor(dataset.class_semantics, dtype=dtype)
    attrs = torch.as_tensor(dataset.attribute_semantics, dtype=dtype)
    with torch.no_grad():
        out_a, out_b = a(f), b(f)
        for field in ("att", "af", "eaf", "a_hat", "h_x"):
            assert torch.equal(getattr(out_a, field), getattr(out_b, field)), field
        assert torch.equal(a.class_prototypes(cls), b.class_prototypes(cls))
        assert torch.equal(a.attribute_prototypes(attrs), b.attribute_prototypes(attrs))


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, tmp_path, trained, tiny_dataset):
        path = save_checkpoint(tmp_path / "c.ckpt", trained.model, epoch=3, episode=15, train_config={"seed": 0})
        back = load_checkpoint(path)
        assert back.model.config == trained.model.config
        assert back.train_config == {"seed": 0}
        _assert_same_outputs(trained.model, back.model, tiny_dataset, torch.float64)

    @pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
    def test_fresh_head_round_trip_keeps_dtype(self, tmp_path, tiny_dataset, dtype):
        k, c = tiny_dataset.attribute_semantics.shape[0], tiny_dataset.map_shape[2]
        config = HeadConfig(
            n_attributes=k, channels=c, class_dim=tiny_dataset.class_semantics.shape[1],
            attr_dim=tiny_dataset.attribute_semantics.shape[1], hidden_dim=16, heads=2,
        )
        head = HDAFLHead.build(config, seed=5, dtype=dtype)
        back = load_checkpoint(save_checkpoint(tmp_path / "fresh.ckpt", head)).model
        assert all(p.dtype == dtype for p in back.parameters())
        _assert_same_outputs(head, back, tiny_dataset, dtype)

    def test_lost_weights_are_detected(self, tmp_path, trained, tiny_dataset):
        other = HDAFLHead.build(trained.model.config, seed=123, dtype=torch.float64)
        f = torch.as_tensor(tiny_dataset.feature_maps[:4], dtype=torch.float64)
        with torch.no_grad():
            assert not torch.equal(trained.model(f).eaf, other(f).eaf)

    def test_manifest_lists_tensors(self, trained):
        ckpt = load_checkpoint(trained.checkpoint_path)
        names = {e["name"] for e in ckpt.manifest["tensors"]}
        assert names == set(trained.model.state_dict())
        assert ckpt.manifest["format"] == FORMAT
        assert len(ckpt.manifest["config_hash"]) == 32

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError, match="not found"):
            load_checkpoint(tmp_path / "missing.ckpt")

    def test_foreign_format(self, tmp_path):
        path = tmp_path / "foreign.ckpt"
        torch.save({"manifest": json.dumps({"format": "other/1"}), "tensors": {}, "optimizer": None}, path)
        with pytest.raises(ValidationError, match="other/1"):
            load_checkpoint(path)

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "garbage.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(LoadError):
            load_checkpoint(path)
