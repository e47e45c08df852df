"""Multitask-like joint training with macro-F1-driven loss reweighting.

Each modality keeps its own encoder and unimodal head; the concatenated
representations feed a multimodal head.  The total loss is

    L = L_fused + sum_m k_m * L_m

where k_m is refreshed from validation macro F1 every ``reweight_interval``
epochs: modalities above the low-information threshold get
``1 - tanh(alpha * r_m)``, the rest ``tanh(beta * r_m)``, with r_m the ratio
of a modality's F1 to the mean F1 of the others.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import SplitMasks
from .gcn import GcnModel
from .metrics import classification_report, macro_f1
from .training import DivergenceError, OptimConfig, cross_entropy, softmax

log = logging.getLogger(__name__)

FUSED_HEAD = "fused"


class SingularRatioError(ZeroDivisionError):
    pass


@dataclass
class BalanceConfig:
    alpha: float = 0.25
    beta: float = 0.1
    gamma: float = 1.5
    reweight_interval: int = 5
    fusion: str = "concatenation"
    epochs: int = 150
    learning_rate: float = 0.02
    momentum: float = 0.9
    # False -> naive joint training, every head weighted 1
    balance: bool = True

    def validate(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.reweight_interval < 1:
            raise ValueError("reweight_interval must be >= 1")
        if self.fusion != "concatenation":
            raise ValueError(f"unsupported fusion {self.fusion!r}; only 'concatenation'")
        self.optim().validate()

    def optim(self) -> OptimConfig:
        return OptimConfig(self.epochs, self.learning_rate, self.momentum)


@dataclass
class CoefficientState:
    epoch: int
    f_scores: list[float]
    r: list[float]
    k: list[float]
    multimodal_weight: float = 1.0


def compute_r(f_scores: Sequence[float]) -> np.ndarray:
    """r_m = F_m / mean_{j != m} F_j."""
    f = np.asarray(f_scores, dtype=np.float64)
    m = f.size
    if m < 2:
        raise ValueError("compute_r needs at least two modalities")
    if np.any(f < 0):
        raise ValueError("macro F1 scores must be nonnegative")
    others = (f.sum() - f) / (m - 1)
    if np.any(others <= 0):
        bad = int(np.flatnonzero(others <= 0)[0])
        raise SingularRatioError(f"modality {bad}: every other modality has macro F1 = 0")
    return f / others


def compute_k(r: Sequence[float], f_scores: Sequence[float], config: BalanceConfig, num_classes: int) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    f = np.asarray(f_scores, dtype=np.float64)
    above = f > config.gamma / num_classes
    return np.where(above, 1.0 - np.tanh(config.alpha * r), np.tanh(config.beta * r))


def coefficients(f_scores: Sequence[float], config: BalanceConfig, num_classes: int, epoch: int = 0) -> CoefficientState:
    f = [float(v) for v in f_scores]
    if not config.balance:
        return CoefficientState(epoch, f, [1.0] * len(f), [1.0] * len(f))
    try:
        r = compute_r(f)
        k = compute_k(r, f, config, num_classes)
    except SingularRatioError:
        # modalities whose peers all score 0 fall back to k = 0.5
        arr = np.asarray(f)
        others = (arr.sum() - arr) / (arr.size - 1)
        r = np.divide(arr, others, out=np.full(arr.size, np.nan), where=others > 0)
        k = np.where(others > 0, compute_k(np.nan_to_num(r), arr, config, num_classes), 0.5)
        log.warning("singular F1 ratio at epoch %d; k=0.5 for modalities %s", epoch, np.flatnonzero(others <= 0).tolist())
    return CoefficientState(epoch, f, [float(v) for v in r], [float(v) for v in k])


class MultimodalModel:
    """Per-modality encoders (with unimodal 'main' heads) plus a head on their concatenation."""

    def __init__(self, encoders: Sequence[GcnModel], names: Sequence[str], num_classes: int, seed: int = 0, fusion_head: np.ndarray | None = None):
        self.encoders = list(encoders)
        self.names = list(names)
        if len(self.encoders) != len(self.names) or not self.encoders:
            raise ValueError("need one name per encoder and at least one encoder")
        n = {e.n for e in self.encoders}
        if len(n) != 1:
            raise ValueError(f"encoders disagree on the number of samples: {sorted(n)}")
        if len(self.encoders) == 1:
            # concatenating a single representation is the identity: share the head
            self.fusion_head = self.encoders[0].heads["main"]
        else:
            width = sum(e.representation_dim for e in self.encoders) + 1
            if fusion_head is None:
                fusion_head = ad.glorot_uniform(width, num_classes, ad.make_rng(ad.derive_seed(seed, "fusion-head")))
            if fusion_head.shape != (width, num_classes):
                raise ValueError(f"fusion head shape {fusion_head.shape}, expected {(width, num_classes)}")
            self.fusion_head = ad.parameter(fusion_head)
        self.num_classes = num_classes
        self.seed = seed

    @property
    def m(self) -> int:
        return len(self.encoders)

    def parameters(self) -> list[ad.Node]:
        seen, out = set(), []
        for p in [q for e in self.encoders for q in e.parameters()] + [self.fusion_head]:
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def forward(self, xs: Sequence[np.ndarray]) -> tuple[list[ad.Node], ad.Node]:
        reps = [e.encode(x) for e, x in zip(self.encoders, xs)]
        uni = [e.head_logits(r) for e, r in zip(self.encoders, reps)]
        if self.m == 1:
            return uni, uni[0]
        fused = ad.matmul(ad.append_ones(ad.hconcat(reps)), self.fusion_head)
        return uni, fused

    def predict_proba(self, xs: Sequence[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray]:
        uni, fused = self.forward(xs)
        return [softmax(u.value) for u in uni], softmax(fused.value)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"{name}/{k}": v for name, e in zip(self.names, self.encoders) for k, v in e.state().items()}
        out[FUSED_HEAD] = self.fusion_head.value.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, e in zip(self.names, self.encoders):
            e.load_state({k.split("/", 1)[1]: v for k, v in state.items() if k.startswith(name + "/")})
        self.fusion_head.value[...] = state[FUSED_HEAD]


@dataclass
class StepResult:
    total: float
    losses: dict[str, float]
    unimodal_logits: list[np.ndarray]
    fused_logits: np.ndarray


def joint_step(model: MultimodalModel, xs: Sequence[np.ndarray], labels, train_mask, coeffs: CoefficientState, optimizer, epoch: int = 0) -> StepResult:
    """One full-batch update on L_fused + sum_m k_m L_m; k is held constant."""
    optimizer.zero_grad()
    uni, fused = model.forward(xs)
    fused_loss = cross_entropy(fused, labels, train_mask)
    losses = {FUSED_HEAD: fused_loss}
    total = fused_loss if coeffs.multimodal_weight == 1.0 else ad.scale(fused_loss, coeffs.multimodal_weight)
    if model.m > 1:
        for name, logits, k in zip(model.names, uni, coeffs.k):
            term = cross_entropy(logits, labels, train_mask)
            losses[name] = term
            if k == 0:
                continue
            total = ad.add(total, term if k == 1.0 else ad.scale(term, k))
    value = total.item()
    if not np.isfinite(value):
        breakdown = ", ".join(f"{k}={v.item():.6g}" for k, v in losses.items())
        raise DivergenceError(f"total loss non-finite at epoch {epoch} with learning rate {optimizer.lr}: {breakdown}")
    ad.backward(total)
    optimizer.step()
    return StepResult(value, {k: v.item() for k, v in losses.items()}, [u.value for u in uni], fused.value)


@dataclass
class TrainReport:
    names: list[str]
    history: list[dict] = field(default_factory=list)
    coefficients: list[CoefficientState] = field(default_factory=list)
    best_epoch: int = -1
    best_val_macro_f1: float = -1.0
    test_metrics: dict[str, dict[str, float]] = field(default_factory=dict)

    def mean_k(self) -> dict[str, float]:
        ks = np.array([[row[f"k_{n}"] for n in self.names] for row in self.history])
        return {n: float(v) for n, v in zip(self.names, ks.mean(axis=0))}

    def write_csv(self, path: str | Path) -> None:
        if not self.history:
            return
        keys = list(self.history[0])
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def _val_scores(labels, val_mask, logits: Sequence[np.ndarray], num_classes: int) -> list[float]:
    return [macro_f1(labels[val_mask], l.argmax(axis=1)[val_mask], num_classes) for l in logits]


def train_balanced(model: MultimodalModel, xs: Sequence[np.ndarray], labels, masks: SplitMasks, config: BalanceConfig | None = None) -> TrainReport:
    """Joint training; the final state is the epoch with the best multimodal validation macro F1."""
    config = config or BalanceConfig()
    config.validate()
    labels = np.asarray(labels)
    c = model.num_classes
    opt = ad.MomentumSGD(model.parameters(), config.learning_rate, config.momentum)
    report = TrainReport(list(model.names))
    coeffs = CoefficientState(0, [], [], [1.0] * model.m)
    best_state = model.state()
    for epoch in range(config.epochs):
        if model.m > 1 and epoch % config.reweight_interval == 0:
            uni, _ = model.forward(xs)
            coeffs = coefficients(_val_scores(labels, masks.val, [u.value for u in uni], c), config, c, epoch)
            report.coefficients.append(coeffs)
        # logits of this step come from the parameters before its update
        pre_step = model.state()
        step = joint_step(model, xs, labels, masks.train, coeffs, opt, epoch)
        uni_f1 = _val_scores(labels, masks.val, step.unimodal_logits, c)
        fused_f1 = _val_scores(labels, masks.val, [step.fused_logits], c)[0]
        row = {"epoch": epoch, "loss_total": step.total}
        row.update({f"L_{k}": v for k, v in step.losses.items()})
        row.update({f"k_{n}": float(k) for n, k in zip(model.names, coeffs.k)})
        row.update({f"val_macro_f1_{n}": f for n, f in zip(model.names, uni_f1)})
        row[f"val_macro_f1_{FUSED_HEAD}"] = fused_f1
        report.history.append(row)
        if fused_f1 > report.best_val_macro_f1:
            report.best_val_macro_f1 = fused_f1
            report.best_epoch = epoch
            best_state = pre_step
    model.load_state(best_state)
    report.test_metrics = evaluate_multimodal(model, xs, labels, masks.test)
    return report


def evaluate_multimodal(model: MultimodalModel, xs: Sequence[np.ndarray], labels, mask) -> dict[str, dict[str, float]]:
    uni, fused = model.predict_proba(xs)
    labels = np.asarray(labels)
    out = {FUSED_HEAD: classification_report(labels[mask], fused[mask], model.num_classes)}
    if model.m > 1:
        for name, p in zip(model.names, uni):
            out[name] = classification_report(labels[mask], p[mask], model.num_classes)
    return out
