"""Cross-modal self-distillation: a strong-modality teacher guides weaker students."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import SplitMasks
from .gcn import GcnModel
from .metrics import LOW_INFORMATION, STRONG
from .training import FitResult, OptimConfig, cross_entropy, fit, softmax

PROB_FLOOR = 1e-12


class DistillationRefused(ValueError):
    pass


@dataclass
class DistillConfig:
    alpha1: float = 1.0
    alpha2: float = 0.5
    alpha3: float = 0.5
    epochs: int = 300
    learning_rate: float = 0.05
    momentum: float = 0.9
    temperature: float = 1.0
    mi_threshold: float = 0.2
    # rows entering the KL / representation terms: "train" or "all" samples
    scope: str = "all"

    def validate(self) -> None:
        if min(self.alpha1, self.alpha2, self.alpha3) < 0 or self.alpha1 + self.alpha2 + self.alpha3 <= 0:
            raise ValueError("alphas must be nonnegative with a positive sum")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.scope not in ("train", "all"):
            raise ValueError(f"scope must be 'train' or 'all', got {self.scope!r}")
        self.optim().validate()

    def optim(self) -> OptimConfig:
        return OptimConfig(self.epochs, self.learning_rate, self.momentum)


@dataclass
class TeacherSnapshot:
    representations: np.ndarray
    probabilities: np.ndarray
    source: str

    def __post_init__(self):
        if not np.allclose(self.probabilities.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("teacher probability rows must sum to 1")

    @property
    def predictions(self) -> np.ndarray:
        return self.probabilities.argmax(axis=1)


def snapshot_of(model: GcnModel, x: np.ndarray, head: str = "main") -> TeacherSnapshot:
    rep = model.encode(x)
    logits = model.head_logits(rep, head).value
    return TeacherSnapshot(rep.value.copy(), softmax(logits), model.node_source)


def kl_teacher_student(teacher_probs: np.ndarray, student_logits: ad.Node, mask, temperature: float = 1.0) -> ad.Node:
    """Mean over masked rows of KL(p_teacher || p_student); student log-probs floored at log(1e-12)."""
    mask = np.asarray(mask, dtype=bool)
    n_mask = int(mask.sum())
    if n_mask == 0:
        raise ValueError("loss mask selects no samples")
    p_t = np.asarray(teacher_probs, dtype=np.float64)
    if temperature != 1.0:
        p_t = softmax(np.log(np.maximum(p_t, PROB_FLOOR)) / temperature)
        student_logits = ad.scale(student_logits, 1.0 / temperature)
    log_s = ad.clamp_min(ad.row_log_softmax(student_logits), float(np.log(PROB_FLOOR)))
    weights = np.where(mask[:, None], p_t, 0.0) / n_mask
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(weights > 0, weights * np.log(p_t), 0.0).sum()
    # sum w*log p_t - sum w*log p_s
    return ad.add_scalar(ad.scale(ad.sum_all(ad.mul(ad.constant(weights), log_s)), -1.0), float(ent))


def representation_loss(teacher_repr: np.ndarray, student_repr: ad.Node, mask) -> ad.Node:
    """Mean over masked rows of ||h_teacher - h_student||^2 / d."""
    mask = np.asarray(mask, dtype=bool)
    n_mask = int(mask.sum())
    if n_mask == 0:
        raise ValueError("loss mask selects no samples")
    if teacher_repr.shape != student_repr.shape:
        raise ValueError(f"teacher representation {teacher_repr.shape} vs student {student_repr.shape}")
    d = teacher_repr.shape[1]
    diff = ad.mul(ad.sub(student_repr, ad.constant(teacher_repr)), ad.constant(mask[:, None].astype(float)))
    return ad.scale(ad.sum_all(ad.square(diff)), 1.0 / (n_mask * d))


def distill_losses(student_logits, student_repr, snapshot: TeacherSnapshot, labels, mask, temperature: float = 1.0, distill_mask=None):
    """(L_CE, L_KL, L_RE) as graph nodes.

    ``mask`` restricts the label term; ``distill_mask`` (default ``mask``)
    restricts the two teacher-matching terms.
    """
    logits = student_logits if isinstance(student_logits, ad.Node) else ad.constant(student_logits)
    rep = student_repr if isinstance(student_repr, ad.Node) else ad.constant(student_repr)
    dmask = mask if distill_mask is None else distill_mask
    ce = cross_entropy(logits, labels, mask)
    kl = kl_teacher_student(snapshot.probabilities, logits, dmask, temperature)
    re = representation_loss(snapshot.representations, rep, dmask)
    return ce, kl, re


def combined_loss(parts: tuple[ad.Node, ad.Node, ad.Node], config: DistillConfig) -> tuple[ad.Node, dict[str, ad.Node]]:
    ce, kl, re = parts
    named = {"L_CE": ce, "L_KL": kl, "L_RE": re}
    total = None
    # zero-weighted terms are left out so (1, 0, 0) is exactly plain CE training
    for weight, term in zip((config.alpha1, config.alpha2, config.alpha3), parts):
        if weight == 0:
            continue
        scaled = term if weight == 1.0 else ad.scale(term, weight)
        total = scaled if total is None else ad.add(total, scaled)
    return total, named


def train_encoder(
    model: GcnModel,
    x: np.ndarray,
    labels,
    masks: SplitMasks,
    num_classes: int,
    config: DistillConfig,
    snapshot: TeacherSnapshot | None = None,
) -> FitResult:
    """Train encoder + 'main' head; with a snapshot the distillation terms are added."""
    config.validate()
    labels = np.asarray(labels)
    if snapshot is None:
        config = DistillConfig(1.0, 0.0, 0.0, config.epochs, config.learning_rate, config.momentum, config.temperature, config.mi_threshold, config.scope)
    elif snapshot.representations.shape[1] != model.representation_dim:
        raise ValueError(f"teacher representation dim {snapshot.representations.shape[1]} != student {model.representation_dim}")
    dmask = masks.train if config.scope == "train" else np.ones(labels.size, dtype=bool)

    def forward():
        rep = model.encode(x)
        logits = model.head_logits(rep)
        if snapshot is None:
            ce = cross_entropy(logits, labels, masks.train)
            return ce, {"L_CE": ce}, logits
        total, parts = combined_loss(distill_losses(logits, rep, snapshot, labels, masks.train, config.temperature, dmask), config)
        return total, parts, logits

    return fit(model.parameters(), forward, labels, masks.train, masks.val, num_classes, config.optim(), model.state, model.load_state)


def pretrain_teacher(model: GcnModel, x: np.ndarray, labels, masks: SplitMasks, num_classes: int, config: DistillConfig | None = None) -> tuple[TeacherSnapshot, FitResult]:
    """Cross-entropy training of the strong-modality r-GCN; snapshot at the best validation epoch."""
    config = config or DistillConfig()
    result = train_encoder(model, x, labels, masks, num_classes, config)
    snap = snapshot_of(model, x)
    if not np.all(np.isfinite(snap.representations)):
        raise FloatingPointError("teacher representations are not finite")
    return snap, result


def pretrain_student(
    model: GcnModel,
    x: np.ndarray,
    snapshot: TeacherSnapshot,
    labels,
    masks: SplitMasks,
    num_classes: int,
    config: DistillConfig | None = None,
    category: str = "weak",
    mi: float | None = None,
) -> FitResult:
    """Distil the teacher into ``model``.

    Low-information modalities are admitted only when their mutual
    information with the strong modality exceeds ``config.mi_threshold``.
    """
    config = config or DistillConfig()
    if category == STRONG:
        raise DistillationRefused("the strong modality is the teacher, not a student")
    if category == LOW_INFORMATION and (mi is None or mi <= config.mi_threshold):
        raise DistillationRefused(
            f"low-information modality {model.node_source or ''!s} has mutual information {mi} <= gate {config.mi_threshold}; skip distillation"
        )
    return train_encoder(model, x, labels, masks, num_classes, config, snapshot)
