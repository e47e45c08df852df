"""Multinomial logistic-regression baseline over modality combinations."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import MultiOmicsDataset, SplitMasks, standardize, stratified_split
from .metrics import classification_report
from .training import check_finite, cross_entropy, softmax

METRICS = ("accuracy", "auc", "macro_f1")


@dataclass
class LogisticConfig:
    epochs: int = 300
    learning_rate: float = 0.1
    momentum: float = 0.9
    l2: float = 1e-2
    repeats: int = 10
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)


def fit_logistic(x: np.ndarray, labels, train_mask, num_classes: int, config: LogisticConfig | None = None) -> np.ndarray:
    """Softmax regression with an L2 penalty (bias excluded); returns (D + 1) x C weights."""
    config = config or LogisticConfig()
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    w = ad.parameter(np.zeros((xb.shape[1], num_classes)))
    penalty_mask = np.ones_like(w.value)
    penalty_mask[-1] = 0.0
    opt = ad.MomentumSGD([w], config.learning_rate, config.momentum)
    xb_node = ad.constant(xb)
    for epoch in range(config.epochs):
        opt.zero_grad()
        ce = cross_entropy(ad.matmul(xb_node, w), labels, train_mask)
        reg = ad.scale(ad.sum_all(ad.square(ad.mul(w, ad.constant(penalty_mask)))), config.l2 / 2)
        loss = ad.add(ce, reg)
        check_finite(loss.item(), epoch, config.learning_rate)
        ad.backward(loss)
        opt.step()
    return w.value.copy()


def predict_proba(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    return softmax(np.hstack([x, np.ones((x.shape[0], 1))]) @ weights)


def modality_combinations(names: Sequence[str]) -> list[tuple[str, ...]]:
    """All non-empty subsets, singles first, in dataset order."""
    return [c for r in range(1, len(names) + 1) for c in combinations(names, r)]


def evaluate_combination(dataset: MultiOmicsDataset, combo: Sequence[str], masks: SplitMasks, config: LogisticConfig) -> dict[str, float]:
    x = np.hstack([standardize(dataset.modality(name).values, masks.train) for name in combo])
    w = fit_logistic(x, dataset.labels, masks.train, dataset.num_classes, config)
    probs = predict_proba(w, x)
    return classification_report(dataset.labels[masks.test], probs[masks.test], dataset.num_classes)


def logistic_baseline(dataset: MultiOmicsDataset, config: LogisticConfig | None = None, seed: int = 0, combos=None) -> list[dict]:
    """Test-set accuracy / AUC / macro F1 per modality combination, mean and std over repeated splits."""
    config = config or LogisticConfig()
    combos = combos or modality_combinations(dataset.names)
    splits = [stratified_split(dataset.labels, config.fractions, ad.derive_seed(seed, "baseline-split", r)) for r in range(config.repeats)]
    rows = []
    for combo in combos:
        runs = [evaluate_combination(dataset, combo, masks, config) for masks in splits]
        row = {"modalities": "+".join(combo)}
        for key in METRICS:
            vals = np.array([r[key] for r in runs])
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        rows.append(row)
    return rows


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f} ± {std:.4f}"


def format_table(rows: list[dict]) -> list[dict[str, str]]:
    """Rows in the 'Accuracy | AUC | Macro F1' mean ± std layout."""
    return [
        {
            "Modalities": r["modalities"],
            "Accuracy": format_mean_std(r["accuracy_mean"], r["accuracy_std"]),
            "AUC": format_mean_std(r["auc_mean"], r["auc_std"]),
            "Macro F1": format_mean_std(r["macro_f1_mean"], r["macro_f1_std"]),
        }
        for r in rows
    ]
