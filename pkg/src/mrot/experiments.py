"""Task setups and the component ablation grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mrot.config import TrainConfig
from mrot.data import Dataset, evaluate, generate_covariate_shift, generate_semantic_shift, split_labeled_target
from mrot.model import predict, train

ABLATION_ROWS = ("ERM", "OT", "OT+VR", "TL", "MROT")


def ablation_config(base: TrainConfig, row: str) -> TrainConfig:
    """Switch components on or off; the base supplies every nonzero weight.

    ERM drops all three terms; OT keeps the transport loss without the
    variance penalty; OT+VR adds it; TL keeps only the triplet loss.
    """
    if row == "ERM":
        return base.replace(alpha=0.0, beta=0.0, lambda2=0.0)
    if row == "OT":
        return base.replace(beta=0.0, lambda2=0.0)
    if row == "OT+VR":
        return base.replace(beta=0.0)
    if row == "TL":
        return base.replace(alpha=0.0, lambda2=0.0)
    if row == "MROT":
        return base
    raise ValueError(f"unknown ablation row {row!r}; expected one of {ABLATION_ROWS}")


@dataclass
class LabelScaler:
    """Affine label standardization fitted on the training labels."""

    mean: float
    std: float

    @classmethod
    def fit(cls, labels):
        y = np.asarray(labels, dtype=float)
        std = float(y.std())
        return cls(float(y.mean()), std if std > 0 else 1.0)

    def transform(self, y):
        return (np.asarray(y, dtype=float) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def dataset(self, ds: Dataset):
        return Dataset(ds.features, None if ds.labels is None else self.transform(ds.labels), ds.domain_tag)


@dataclass
class Task:
    name: str
    source: Dataset
    train_target: Dataset
    eval_target: Dataset


def semantic_task(n=1000, d_in=5, noise_sd=0.1, seed=0) -> Task:
    """Unsupervised: adapt on all target inputs, score on their labels."""
    source, target, _ = generate_semantic_shift(n, d_in, noise_sd, seed)
    return Task("semantic", source, Dataset(target.features, None, target.domain_tag), target)


def covariate_task(n=1000, d_in=5, shift=1.5, labeled_fraction=0.25, seed=0) -> Task:
    """Semi-supervised: a labeled slice of the shifted target trains, the rest scores."""
    source, target = generate_covariate_shift(n, d_in, shift, seed)
    labeled, held_out = split_labeled_target(target, labeled_fraction, seed)
    return Task("covariate", source, labeled, held_out)


def run_task(task: Task, config: TrainConfig):
    """Train on a task with standardized labels and score the held-out target.

    Returns
    -------
    report : MetricsReport
    result : TrainResult
    scaler : LabelScaler
    """
    scaler = LabelScaler.fit(task.source.labels)
    result = train(scaler.dataset(task.source), scaler.dataset(task.train_target), config)
    preds = scaler.inverse(predict(result.params, task.eval_target.features))
    return evaluate(preds, task.eval_target.labels), result, scaler


def run_ablation(task_factory, base: TrainConfig, seeds, rows=ABLATION_ROWS):
    """Metrics for every (row, seed) cell.

    ``task_factory(seed)`` builds the dataset for one repetition; the same
    seed also seeds training.

    Returns
    -------
    dict mapping row name to a list of MetricsReport, one per seed.
    """
    out = {row: [] for row in rows}
    for seed in seeds:
        task = task_factory(seed)
        for row in rows:
            cfg = ablation_config(base.replace(seed=seed), row)
            report, _, _ = run_task(task, cfg)
            out[row].append(report)
    return out


def summarize(results):
    """Mean and sample standard deviation of each metric per row."""
    table = {}
    for row, reports in results.items():
        stats = {}
        for key in ("mae", "rmse", "pearson", "spearman"):
            vals = np.array([getattr(r, key) for r in reports])
            stats[key] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
        table[row] = stats
    return table
