"""End-to-end stages: prepare -> fuse -> unimodal r-GCNs -> distil -> balanced training."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .balance import BalanceConfig, MultimodalModel, TrainReport, train_balanced
from .data import MultiOmicsDataset, ModalityMatrix, ReductionConfig, SplitMasks, reduce_features, standardize, stratified_split
from .distill import DistillConfig, TeacherSnapshot, pretrain_student, pretrain_teacher, train_encoder
from .gcn import DEFAULT_AVG_EDGES, DEFAULT_DIMS, GcnModel, build_rgcn
from .metrics import LOW_INFORMATION, STRONG, WEAK, LearningState, categorize, classification_report, modality_mi
from .snf import SimilarityNetwork, SnfParams, scaled_exponential_similarity, snf_fuse
from .training import FitResult, softmax

log = logging.getLogger(__name__)

SELF_EDGES = "self"
FUSED_EDGES = "fused"


@dataclass
class EncoderSettings:
    hidden_dims: tuple[int, ...] = DEFAULT_DIMS
    avg_edges_per_node: float = DEFAULT_AVG_EDGES


@dataclass
class Prepared:
    """Reduced, train-standardized features with their split."""

    dataset: MultiOmicsDataset
    masks: SplitMasks
    seed: int

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels

    @property
    def num_classes(self) -> int:
        return self.dataset.num_classes

    def x(self, name: str) -> np.ndarray:
        return self.dataset.modality(name).values


def prepare(
    dataset: MultiOmicsDataset,
    seed: int = 0,
    reduction: ReductionConfig | None = None,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    masks: SplitMasks | None = None,
) -> Prepared:
    reduction = reduction or ReductionConfig()
    masks = masks or stratified_split(dataset.labels, fractions, ad.derive_seed(seed, "split"))
    mods = []
    for m in dataset.modalities:
        if m.dim > reduction.target_dim:
            m = reduce_features(
                m, reduction.target_dim, reduction.method, masks.train,
                ad.derive_seed(seed, "reduce", m.name), reduction.epochs, reduction.learning_rate,
            )
        mods.append(ModalityMatrix(m.name, standardize(m.values, masks.train), m.feature_names, dict(m.meta)))
    ds = MultiOmicsDataset(mods, dataset.labels.copy(), list(dataset.sample_ids), list(dataset.class_names))
    return Prepared(ds, masks, seed)


def similarity_networks(prepared: Prepared, params: SnfParams | None = None) -> dict[str, SimilarityNetwork]:
    return {m.name: scaled_exponential_similarity(m.values, params) for m in prepared.dataset.modalities}


def fuse(networks: dict[str, SimilarityNetwork], params: SnfParams | None = None, include: Sequence[str] | None = None) -> SimilarityNetwork:
    names = list(include) if include is not None else list(networks)
    if len(names) == 1:
        return networks[names[0]]
    return snf_fuse([networks[n] for n in names], params, names)


def build_encoder(
    prepared: Prepared,
    name: str,
    edges: SimilarityNetwork,
    edge_source: str,
    settings: EncoderSettings | None = None,
    seed: int | None = None,
) -> GcnModel:
    settings = settings or EncoderSettings()
    # initial weights depend only on (run seed, modality) so self/fused and
    # distilled/plain variants start from the same point
    seed = ad.derive_seed(prepared.seed if seed is None else seed, "encoder", name)
    return build_rgcn(
        prepared.x(name), edges, prepared.num_classes, settings.hidden_dims, seed,
        settings.avg_edges_per_node, node_source=name, edge_source=edge_source,
    )


def test_metrics(model: GcnModel, prepared: Prepared, name: str) -> dict[str, float]:
    probs = softmax(model.head_logits(model.encode(prepared.x(name))).value)
    mask = prepared.masks.test
    return classification_report(prepared.labels[mask], probs[mask], prepared.num_classes)


@dataclass
class UnimodalRun:
    model: GcnModel
    fit: FitResult
    test: dict[str, float]


def train_unimodal(
    prepared: Prepared,
    name: str,
    edges: SimilarityNetwork,
    edge_source: str,
    settings: EncoderSettings | None = None,
    config: DistillConfig | None = None,
) -> UnimodalRun:
    """Plain cross-entropy (r-)GCN training for one node modality."""
    model = build_encoder(prepared, name, edges, edge_source, settings)
    result = train_encoder(model, prepared.x(name), prepared.labels, prepared.masks, prepared.num_classes, config or DistillConfig())
    return UnimodalRun(model, result, test_metrics(model, prepared, name))


def learning_states(
    prepared: Prepared,
    runs: dict[str, UnimodalRun],
    gamma: float = 1.5,
    mi_mask=None,
) -> tuple[list[LearningState], dict[str, float]]:
    """Categorize modalities by validation macro F1; MI of each non-strong
    modality's predictions with the strong modality's predictions.

    MI is estimated on ``mi_mask`` (default: validation samples), since on
    training rows both classifiers reproduce the labels and the dependence
    is inflated.
    """
    mi_mask = prepared.masks.val if mi_mask is None else np.asarray(mi_mask, dtype=bool)
    names = list(runs)
    states = categorize([runs[n].fit.best_val_macro_f1 for n in names], gamma, prepared.num_classes, names)
    strong = next(s.modality for s in states if s.category == STRONG)
    preds = {n: runs[n].model.head_logits(runs[n].model.encode(prepared.x(n))).value for n in names}
    strong_pred = preds[strong].argmax(axis=1)[mi_mask]
    mi = {n: (modality_mi(preds[n][mi_mask], strong_pred) if n != strong else float("nan")) for n in names}
    return states, mi


@dataclass
class DistillationOutcome:
    teacher: GcnModel
    snapshot: TeacherSnapshot
    students: dict[str, GcnModel]
    fits: dict[str, FitResult]
    distilled: dict[str, bool]
    states: list[LearningState] = field(default_factory=list)
    mi: dict[str, float] = field(default_factory=dict)


def run_distillation(
    prepared: Prepared,
    states: list[LearningState],
    mi: dict[str, float],
    edges: SimilarityNetwork,
    edge_source: str,
    settings: EncoderSettings | None = None,
    config: DistillConfig | None = None,
    pretrain_low_information: bool = False,
) -> DistillationOutcome:
    """Teacher on the strong modality; distilled students for weak modalities and
    for low-information ones that pass the MI gate.  Gated-out modalities
    keep their initial weights unless ``pretrain_low_information``."""
    config = config or DistillConfig()
    strong = next(s.modality for s in states if s.category == STRONG)
    teacher = build_encoder(prepared, strong, edges, edge_source, settings)
    snapshot, teacher_fit = pretrain_teacher(teacher, prepared.x(strong), prepared.labels, prepared.masks, prepared.num_classes, config)
    students: dict[str, GcnModel] = {strong: teacher}
    fits = {strong: teacher_fit}
    distilled = {strong: False}
    for s in states:
        if s.category == STRONG:
            continue
        model = build_encoder(prepared, s.modality, edges, edge_source, settings)
        x = prepared.x(s.modality)
        gated_in = s.category == WEAK or (s.category == LOW_INFORMATION and mi.get(s.modality, 0.0) > config.mi_threshold)
        if gated_in:
            fits[s.modality] = pretrain_student(model, x, snapshot, prepared.labels, prepared.masks, prepared.num_classes, config, s.category, mi.get(s.modality))
        elif pretrain_low_information:
            log.info("modality %s is low-information (MI %.4f <= %.2f); plain pretraining", s.modality, mi.get(s.modality, 0.0), config.mi_threshold)
            fits[s.modality] = train_encoder(model, x, prepared.labels, prepared.masks, prepared.num_classes, config)
        else:
            # a label-fitted encoder on an uninformative modality only carries
            # memorized training labels into joint training
            log.info("modality %s is low-information (MI %.4f <= %.2f); left at initialization", s.modality, mi.get(s.modality, 0.0), config.mi_threshold)
        students[s.modality] = model
        distilled[s.modality] = gated_in
    return DistillationOutcome(teacher, snapshot, students, fits, distilled, states, mi)


def clone(model: GcnModel) -> GcnModel:
    return GcnModel(
        [p.value.copy() for p in model.layers], model.adjacency, {k: v.value.copy() for k, v in model.heads.items()},
        model.seed, model.node_source, model.edge_source,
    )


def run_balanced(
    prepared: Prepared,
    encoders: dict[str, GcnModel],
    config: BalanceConfig | None = None,
    names: Sequence[str] | None = None,
) -> tuple[MultimodalModel, TrainReport]:
    """Joint training from copies of ``encoders`` (the inputs are left untouched)."""
    names = list(names) if names is not None else list(encoders)
    model = MultimodalModel([clone(encoders[n]) for n in names], names, prepared.num_classes, ad.derive_seed(prepared.seed, "balanced"))
    report = train_balanced(model, [prepared.x(n) for n in names], prepared.labels, prepared.masks, config)
    return model, report
