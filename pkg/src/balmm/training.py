"""Shared full-batch training loop and the cross-entropy loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .metrics import macro_f1


class DivergenceError(FloatingPointError):
    pass


@dataclass
class OptimConfig:
    epochs: int = 300
    learning_rate: float = 0.05
    momentum: float = 0.9

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


def one_hot_rows(labels, mask, num_classes: int, weight: float | None = None) -> np.ndarray:
    """One-hot targets on masked rows, zero elsewhere, scaled by ``weight``
    (default 1 / number of masked rows)."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n_mask = int(mask.sum())
    if n_mask == 0:
        raise ValueError("loss mask selects no samples")
    t = np.zeros((labels.size, num_classes))
    idx = np.flatnonzero(mask)
    t[idx, labels[idx]] = 1.0 / n_mask if weight is None else weight
    return t


def cross_entropy(logits: ad.Node, labels, mask) -> ad.Node:
    """Mean negative log-likelihood of ``labels`` over masked rows."""
    target = one_hot_rows(labels, mask, logits.shape[1])
    return ad.scale(ad.sum_all(ad.mul(ad.constant(target), ad.row_log_softmax(logits))), -1.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def nll(probabilities: np.ndarray, labels, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels)
    p = probabilities[mask, labels[mask]]
    return float(-np.mean(np.log(np.maximum(p, 1e-12))))


def check_finite(value: float, epoch: int, lr: float, detail: str = "") -> None:
    if not np.isfinite(value):
        extra = f" ({detail})" if detail else ""
        raise DivergenceError(f"loss became non-finite at epoch {epoch} with learning rate {lr}{extra}")


@dataclass
class FitResult:
    best_epoch: int
    best_val_macro_f1: float
    history: list[dict] = field(default_factory=list)


def fit(
    params: list[ad.Node],
    forward: Callable[[], tuple[ad.Node, dict[str, ad.Node], ad.Node]],
    labels,
    train_mask,
    val_mask,
    num_classes: int,
    config: OptimConfig,
    state_of: Callable[[], dict],
    restore: Callable[[dict], None],
) -> FitResult:
    """Full-batch momentum GD with best-validation-macro-F1 model selection.

    ``forward`` returns (total loss, named loss parts, logits over all N
    samples).  Metrics for epoch e are taken from the parameters before the
    e-th update; the parameters of the best epoch are restored at the end.
    """
    config.validate()
    opt = ad.MomentumSGD(params, config.learning_rate, config.momentum)
    labels = np.asarray(labels)
    best = (-1.0, -1)
    best_state = state_of()
    history = []
    for epoch in range(config.epochs):
        opt.zero_grad()
        total, parts, logits = forward()
        loss = total.item()
        detail = ", ".join(f"{k}={v.item():.6g}" for k, v in parts.items())
        check_finite(loss, epoch, config.learning_rate, detail)
        probs = softmax(logits.value)
        pred = probs.argmax(axis=1)
        val_f1 = macro_f1(labels[val_mask], pred[val_mask], num_classes)
        row = {"epoch": epoch, "loss": loss}
        row.update({k: v.item() for k, v in parts.items()})
        row["train_nll"] = nll(probs, labels, train_mask)
        row["val_nll"] = nll(probs, labels, val_mask)
        row["val_macro_f1"] = val_f1
        history.append(row)
        if val_f1 > best[0]:
            best = (val_f1, epoch)
            best_state = state_of()
        ad.backward(total)
        opt.step()
    restore(best_state)
    return FitResult(best[1], best[0], history)
