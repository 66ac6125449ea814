# pipeline/experiments.py
"""
Train-and-evaluate studies: loss-component ablation and one-hyperparameter sweeps.
Each trial trains into <out>/<label>/ and is evaluated in "both" mode.
"""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from hdafl.errors import ConfigError
from hdafl.losses import COMPONENTS, ablation_weights
from pipeline.evaluate import evaluate
from pipeline.settings import TrainConfig
from pipeline.trainer import train
from zsldata.dataset import Dataset

ABLATION_STAGES: Dict[str, tuple] = {
    "baseline": ("cls", "mse"),
    "+aal": ("cls", "mse", "aal"),
    "+acl": ("cls", "mse", "aal", "acl"),
    "+ccl": COMPONENTS,
}

# hyperparameter -> section of TrainConfig it lives in
SWEEPABLE = {
    "alpha": "loss",
    "mu": "loss",
    "epsilon": "loss",
    "tau_attr": "loss",
    "tau_class": "loss",
    "ways": "episode",
}


def run_trial(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: Path,
    label_key: str,
    label: Any,
    gamma: Optional[float] = None,
) -> Dict[str, Any]:
    run_name = f"{label_key}={label}"
    result = train(dataset, config, out_dir=out_dir, run_name=run_name)
    report = evaluate(result.model, dataset, mode="both", gamma=gamma, alpha=config.loss.alpha)
    logging.info("[%s] ACC %.1f  H %.1f", run_name, report.acc_czsl or 0.0, report.h or 0.0)
    return {label_key: label, **report.to_dict()}


def run_ablation(
    dataset: Dataset,
    config: TrainConfig,
    out_dir,
    stages: Optional[Sequence[str]] = None,
    gamma: Optional[float] = None,
) -> List[Dict[str, Any]]:
    stages = list(stages or ABLATION_STAGES)
    unknown = [s for s in stages if s not in ABLATION_STAGES]
    if unknown:
        raise ConfigError(f"unknown ablation stages {unknown}; choose from {list(ABLATION_STAGES)}")
    rows = []
    for stage in stages:
        cfg = replace(config, loss=ablation_weights(config.loss, ABLATION_STAGES[stage]))
        rows.append(run_trial(dataset, cfg, Path(out_dir) / stage.lstrip("+"), "stage", stage, gamma))
    return rows


def with_param(config: TrainConfig, param: str, value: Any) -> TrainConfig:
    section = SWEEPABLE.get(param)
    if section is None:
        raise ConfigError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    if section == "episode":
        return replace(config, episode=replace(config.episode, **{param: int(value)}))
    return replace(config, loss=replace(config.loss, **{param: float(value)}))


def run_sweep(
    dataset: Dataset,
    config: TrainConfig,
    param: str,
    values: Sequence[Any],
    out_dir,
    gamma: Optional[float] = None,
) -> List[Dict[str, Any]]:
    rows = []
    for value in values:
        cfg = with_param(config, param, value)
        rows.append(run_trial(dataset, cfg, Path(out_dir) / f"{param}_{value}", param, value, gamma))
    return rows
