"""Classification metrics, learning-state categorization and discrete MI."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

STRONG = "strong"
WEAK = "weak"
LOW_INFORMATION = "low_information"


class UndefinedRatioError(ZeroDivisionError):
    pass


def _labels(a) -> np.ndarray:
    return np.asarray(a).astype(np.int64).ravel()


def confusion_matrix(truth, pred, num_classes: int) -> np.ndarray:
    """C x C counts, rows = truth, columns = prediction."""
    truth, pred = _labels(truth), _labels(pred)
    if truth.size == 0:
        raise ValueError("cannot score an empty label set")
    if truth.shape != pred.shape:
        raise ValueError(f"truth and pred lengths differ ({truth.size} vs {pred.size})")
    if truth.min() < 0 or pred.min() < 0 or truth.max() >= num_classes or pred.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def per_class_f1(truth, pred, num_classes: int) -> np.ndarray:
    cm = confusion_matrix(truth, pred, num_classes)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # = 2tp + fp + fn
    # classes that never occur in truth or prediction score 0
    return np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)


def macro_f1(truth, pred, num_classes: int) -> float:
    return float(per_class_f1(truth, pred, num_classes).mean())


def accuracy(truth, pred) -> float:
    truth, pred = _labels(truth), _labels(pred)
    if truth.size == 0:
        raise ValueError("cannot score an empty label set")
    return float(np.mean(truth == pred))


def macro_ovr_auc(truth, scores) -> float:
    """Unweighted mean of one-vs-rest ROC AUC; tied scores count 1/2."""
    truth = _labels(truth)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != truth.size:
        raise ValueError(f"scores must be N x C with N={truth.size}, got {scores.shape}")
    if not np.allclose(scores.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("score rows must sum to 1")
    aucs = []
    for c in range(scores.shape[1]):
        pos = truth == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            warnings.warn(f"class {c} has no {'positive' if n_pos == 0 else 'negative'} samples; skipped in AUC")
            continue
        ranks = rankdata(scores[:, c])
        aucs.append((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    if not aucs:
        raise ValueError("AUC undefined: no class has both positives and negatives")
    return float(np.mean(aucs))


def classification_report(truth, probabilities, num_classes: int) -> dict[str, float]:
    probabilities = np.asarray(probabilities)
    pred = probabilities.argmax(axis=1)
    return {
        "accuracy": accuracy(truth, pred),
        "auc": macro_ovr_auc(truth, probabilities),
        "macro_f1": macro_f1(truth, pred, num_classes),
    }


@dataclass
class LearningState:
    modality: str
    macro_f1: float
    category: str


def categorize(f_scores: Sequence[float], gamma: float, num_classes: int, names: Sequence[str] | None = None) -> list[LearningState]:
    """Strong = best macro F1 (lowest index on ties); low-information when F <= gamma / C."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    f = [float(v) for v in f_scores]
    names = list(names) if names is not None else [str(i) for i in range(len(f))]
    strong = int(np.argmax(f))  # argmax returns the first maximum
    threshold = gamma / num_classes
    states = []
    for i, (name, score) in enumerate(zip(names, f)):
        if i == strong:
            cat = STRONG
        elif score <= threshold:
            cat = LOW_INFORMATION
        else:
            cat = WEAK
        states.append(LearningState(name, score, cat))
    return states


def ogr_ratio(val_losses: Sequence[float], train_losses: Sequence[float], e: int, n: int) -> float:
    """Overfitting-to-generalization ratio between epochs e and e + n."""
    val, tr = np.asarray(val_losses, float), np.asarray(train_losses, float)
    if val.shape != tr.shape:
        raise ValueError("train and validation traces must have equal length")
    if n < 1 or e < 0 or e + n >= val.size:
        raise IndexError(f"window e={e}, n={n} outside a trace of length {val.size}")
    gap_start = val[e] - tr[e]
    gap_end = val[e + n] - tr[e + n]
    denom = val[e] - val[e + n]
    if abs(denom) < 1e-12:
        raise UndefinedRatioError(f"validation loss plateaued between epochs {e} and {e + n}")
    return float(abs((gap_end - gap_start) / denom))


def entropy(a) -> float:
    _, counts = np.unique(_labels(a), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(a, b) -> float:
    """Plug-in MI (nats) from the joint contingency table of two label vectors."""
    a, b = _labels(a), _labels(b)
    if a.size != b.size or a.size < 2:
        raise ValueError("need two label vectors of equal length >= 2")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1)
    joint /= a.size
    outer = joint.sum(axis=1, keepdims=True) @ joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(max(0.0, (joint[nz] * np.log(joint[nz] / outer[nz])).sum()))


def argmax_quantizer(scores: np.ndarray) -> np.ndarray:
    return np.asarray(scores).argmax(axis=1)


def modality_mi(
    modality_scores,
    strong_predictions,
    quantizer: Callable[[np.ndarray], np.ndarray] = argmax_quantizer,
) -> float:
    """MI between a modality reduced to labels and the strong modality's predictions.

    ``modality_scores`` is usually the modality's own unimodal classifier
    output (N x C logits or probabilities); the default quantizer takes its
    argmax.  A 1-D integer array is used as-is.
    """
    scores = np.asarray(modality_scores)
    labels = scores if scores.ndim == 1 else quantizer(scores)
    if np.unique(labels).size < 2:
        warnings.warn("quantized modality is constant; mutual information is 0")
        return 0.0
    return mutual_information(labels, strong_predictions)
