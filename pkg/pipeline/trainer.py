# pipeline/trainer.py
"""
Episode-based optimisation of the head with SGD + momentum + weight decay.

The optimizer is torch.optim.SGD with dampening 0 and no Nesterov term, i.e.
    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from hdafl.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from hdafl.errors import ConfigError, NumericError
from hdafl.losses import (
    LossComponents,
    attribute_alignment_loss,
    attribute_contrastive_loss,
    build_attribute_pool,
    class_contrastive_loss,
    classification_loss,
    mse_attribute_loss,
    total_loss,
)
from hdafl.model import ForwardOut, HDAFLHead, HeadConfig
from pipeline.backup_utils import refresh_last_good, save_backup_checkpoint
from pipeline.report_utils import LOSS_TRACE_CSV, read_loss_trace, write_loss_trace
from pipeline.settings import TrainConfig
from zsldata.dataset import Dataset
from zsldata.episodes import Batch, EpisodeSampler, RandomBatchSampler, make_batch

FINAL_CHECKPOINT = "final.ckpt"


@dataclass
class TrainResult:
    model: HDAFLHead
    checkpoint_path: Path
    trace: pd.DataFrame


class SemanticTensors:
    """Per-run tensors derived from the dataset once."""

    def __init__(self, dataset: Dataset, dtype: torch.dtype, cls_over_all_classes: bool) -> None:
        self.class_semantics = torch.as_tensor(dataset.class_semantics, dtype=dtype)
        self.attribute_semantics = torch.as_tensor(dataset.attribute_semantics, dtype=dtype)
        self.targets = torch.as_tensor(dataset.normalized_class_semantics(), dtype=dtype)
        self.cls_over_all_classes = cls_over_all_classes
        seen = torch.as_tensor(dataset.seen_classes, dtype=torch.long)
        self.seen_ids = seen
        # class id -> row among seen prototypes
        self.seen_row = torch.full((dataset.n_classes,), -1, dtype=torch.long)
        self.seen_row[seen] = torch.arange(seen.numel())


def head_config_for(dataset: Dataset, config: TrainConfig) -> HeadConfig:
    _, _, c = dataset.map_shape
    m = config.model
    return HeadConfig(
        n_attributes=dataset.n_attributes,
        channels=c,
        class_dim=dataset.class_semantics.shape[1],
        attr_dim=dataset.attribute_semantics.shape[1],
        hidden_dim=m.hidden_dim,
        heads=m.heads,
        ff_mult=m.ff_mult,
        attention_softmax_axis=m.attention_softmax_axis,
        use_enhanced_features=m.use_enhanced_features,
    )


# ----------------------------
# Optimisation step
# ----------------------------
def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        dampening=0.0,
        nesterov=False,
    )


def check_finite_grads(model: torch.nn.Module) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NumericError(f"non-finite gradient in {name}")


def sgd_step(model: torch.nn.Module, optimizer: torch.optim.Optimizer) -> None:
    """Abort on a non-finite gradient (naming the tensor), otherwise apply one SGD update."""
    check_finite_grads(model)
    optimizer.step()


# ----------------------------
# Losses for one batch
# ----------------------------
def compute_losses(
    model: HDAFLHead,
    batch: Batch,
    semantics: SemanticTensors,
    config: TrainConfig,
) -> Tuple[LossComponents, ForwardOut]:
    dtype = semantics.class_semantics.dtype
    f = torch.as_tensor(batch.feature_maps, dtype=dtype)
    labels = torch.as_tensor(batch.labels, dtype=torch.long)
    out = model(f)

    cp_all = model.class_prototypes(semantics.class_semantics)
    if semantics.cls_over_all_classes:
        cp, cls_labels = cp_all, labels
    else:
        cp, cls_labels = cp_all[semantics.seen_ids], semantics.seen_row[labels]

    targets = semantics.targets[labels]
    w = config.loss
    pool = build_attribute_pool(
        out.attribute_rows(model.config.use_enhanced_features),
        targets,
        config.presence_threshold,
        image_ids=torch.as_tensor(batch.indices, dtype=torch.long),
    )
    ap = model.attribute_prototypes(semantics.attribute_semantics)

    components = LossComponents(
        cls=classification_loss(out.h_x, cp, cls_labels, w.alpha),
        mse=mse_attribute_loss(out.a_hat, targets),
        aal=attribute_alignment_loss(pool, ap, config.aal_variant, config.aal_margin),
        acl=attribute_contrastive_loss(pool, w.mu, w.epsilon, w.tau_attr),
        ccl=class_contrastive_loss(out.h_x, labels, w.tau_class),
    )
    return components, out


def _make_sampler(dataset: Dataset, config: TrainConfig):
    if config.sampling == "episode":
        return EpisodeSampler(dataset, config.episode)
    return RandomBatchSampler(dataset, config.batch_size, seed=config.seed)


# ----------------------------
# Training loop
# ----------------------------
def train(
    dataset: Dataset,
    config: TrainConfig,
    out_dir=None,
    resume_from=None,
    run_name: str = "run",
) -> TrainResult:
    """Train the head; writes one checkpoint per epoch, final.ckpt and loss_trace.csv into out_dir."""
    ckpt_dir = Path(out_dir or config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    trace_path = ckpt_dir / LOSS_TRACE_CSV
    dtype = config.torch_dtype

    sampler = _make_sampler(dataset, config)
    resumed: Optional[Checkpoint] = None
    if resume_from is not None:
        resumed = load_checkpoint(resume_from)
        model = resumed.model.to(dtype)
        if model.config != head_config_for(dataset, config):
            raise ConfigError(f"checkpoint {resume_from} was trained with a different head configuration")
    else:
        model = HDAFLHead.build(head_config_for(dataset, config), seed=config.seed, dtype=dtype)
    model.train()

    optimizer = make_optimizer(model, config)
    start_epoch, episode, skip = 0, 0, 0
    rows: List[Dict[str, float]] = []
    if resumed is not None:
        if resumed.optimizer_state is not None:
            optimizer.load_state_dict(resumed.optimizer_state)
        if resumed.sampler_state is not None:
            sampler.set_state(resumed.sampler_state)
        start_epoch, episode, skip = resumed.epoch, resumed.episode, resumed.epoch_offset
        rows = read_loss_trace(trace_path, up_to_episode=episode)
        logging.info("Resuming %s from %s at epoch %d, episode %d", run_name, resume_from, start_epoch, episode)

    semantics = SemanticTensors(dataset, dtype, config.cls_over_all_classes)
    train_dict = config.to_dict()
    last_good: Optional[Path] = Path(resume_from) if resume_from is not None else None
    capped = False
    completed_epoch, epoch_offset, final_state = start_epoch, skip, sampler.get_state()

    for epoch in range(start_epoch, config.epochs):
        if config.max_episodes is not None and episode >= config.max_episodes:
            break
        epoch_totals: List[float] = []
        epoch_state = sampler.get_state()
        epoch_batches = sampler.epoch_indices()[skip:]
        done_in_epoch, skip = skip, 0
        for indices in epoch_batches:
            if config.max_episodes is not None and episode >= config.max_episodes:
                capped = True
                break
            batch = make_batch(dataset, indices)
            optimizer.zero_grad(set_to_none=True)
            try:
                components, _ = compute_losses(model, batch, semantics, config)
                loss = total_loss(components, config.loss)
                if not bool(torch.isfinite(loss)):
                    raise NumericError(f"non-finite total loss {float(loss)}")
                loss.backward()
                sgd_step(model, optimizer)
            except NumericError as e:
                logging.error("Training aborted at episode %d: %s; last good checkpoint: %s", episode + 1, e, last_good)
                raise NumericError(f"{e} at episode {episode + 1}; last good checkpoint: {last_good}") from e

            episode += 1
            values = components.as_floats()
            row = {"episode": episode, **{f"L_{k}": v for k, v in values.items()}, "total": float(loss.detach())}
            rows.append(row)
            epoch_totals.append(row["total"])
            done_in_epoch += 1
            logging.debug("episode %d %s", episode, row)

        # A capped epoch is saved as unfinished: the sampler state from its start plus the episodes done
        if capped:
            saved_epoch, offset, state = epoch, done_in_epoch, epoch_state
        else:
            saved_epoch, offset, state = epoch + 1, 0, sampler.get_state()
        completed_epoch, epoch_offset, final_state = saved_epoch, offset, state
        ckpt_path = save_checkpoint(
            ckpt_dir / f"epoch_{epoch + 1:03d}.ckpt",
            model,
            optimizer,
            epoch=saved_epoch,
            episode=episode,
            epoch_offset=offset,
            sampler_state=state,
            train_config=train_dict,
        )
        last_good = refresh_last_good(ckpt_path)
        save_backup_checkpoint(ckpt_path, run_name, config.backup_location)
        write_loss_trace(rows, trace_path)
        if epoch_totals:
            logging.info(
                "[%s] epoch %d/%d: %d episodes, mean total loss %.4f",
                run_name, epoch + 1, config.epochs, len(epoch_totals), float(np.mean(epoch_totals)),
            )
        if capped:
            logging.info("[%s] stopped after max_episodes=%d", run_name, config.max_episodes)
            break

    final = save_checkpoint(
        ckpt_dir / FINAL_CHECKPOINT,
        model,
        optimizer,
        epoch=completed_epoch,
        episode=episode,
        epoch_offset=epoch_offset,
        sampler_state=final_state,
        train_config=train_dict,
    )
    save_backup_checkpoint(final, run_name, config.backup_location)
    write_loss_trace(rows, trace_path)
    model.eval()
    return TrainResult(model=model, checkpoint_path=final, trace=pd.DataFrame(rows))
