"""Multi-omics datasets: CSV ingestion, synthetic generation, splits, reduction."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import autodiff as ad

log = logging.getLogger(__name__)

TABLE1_CLASS_NAMES = ["Basal-like", "Her2-enriched", "Luminal A", "Luminal B"]
TABLE1_CLASS_COUNTS = [112, 53, 248, 98]


class DatasetError(ValueError):
    pass


@dataclass
class ModalityMatrix:
    name: str
    values: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DatasetError(f"modality {self.name!r} must be a matrix, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DatasetError(f"modality {self.name!r} contains non-finite values")
        if not self.feature_names:
            self.feature_names = [f"{self.name}_{j}" for j in range(self.values.shape[1])]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class MultiOmicsDataset:
    modalities: list[ModalityMatrix]
    labels: np.ndarray
    sample_ids: list[str]
    class_names: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.size
        for m in self.modalities:
            if m.n != n:
                raise DatasetError(f"modality {m.name!r} has {m.n} samples, labels have {n}")
        if len(self.sample_ids) != n:
            raise DatasetError("sample_ids length does not match labels")
        c = len(self.class_names)
        if n and (self.labels.min() < 0 or self.labels.max() >= c):
            raise DatasetError(f"labels must lie in [0, {c})")
        missing = sorted(set(range(c)) - set(self.labels.tolist()))
        if missing:
            raise DatasetError(f"classes without samples: {[self.class_names[i] for i in missing]}")

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def modality(self, name: str) -> ModalityMatrix:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(f"unknown modality {name!r}; available: {self.names}")


@dataclass
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


# ---------------------------------------------------------------------------
# CSV


def _read_numeric_csv(path: Path) -> pd.DataFrame:
    frame = pd.read_csv(path, index_col=0, dtype=str, keep_default_na=False)
    frame.index = frame.index.astype(str)
    try:
        # numpy's string conversion round-trips repr'd floats exactly
        values = pd.DataFrame(frame.to_numpy().astype(np.float64), index=frame.index, columns=frame.columns)
        bad = ~np.isfinite(values.to_numpy())
    except ValueError:
        bad = frame.apply(pd.to_numeric, errors="coerce").isna().to_numpy()
    if bad.any():
        r, c = map(int, np.argwhere(bad)[0])
        raise DatasetError(f"{path}: non-numeric cell {frame.iat[r, c]!r} at row {r + 2} (sample {frame.index[r]}), column {frame.columns[c]!r}")
    if values.index.duplicated().any():
        raise DatasetError(f"{path}: duplicated sample IDs")
    return values


def load_csv_dataset(paths: dict[str, str | Path], labels_path: str | Path, class_names: Sequence[str] | None = None) -> MultiOmicsDataset:
    """Load per-modality CSVs (ID column + feature header) and a labels CSV.

    Samples are aligned on the sorted intersection of IDs; samples missing
    from any file are dropped.  The labels file holds ``sample_id,label``
    where label is a class name or an integer index.
    """
    frames = {name: _read_numeric_csv(Path(p)) for name, p in paths.items()}
    lab = pd.read_csv(labels_path, dtype=str, keep_default_na=False)
    if lab.shape[1] < 2:
        raise DatasetError(f"{labels_path}: expected columns sample_id,label")
    lab_series = pd.Series(lab.iloc[:, 1].to_numpy(), index=lab.iloc[:, 0].astype(str).to_numpy())

    ids = set(lab_series.index)
    for f in frames.values():
        ids &= set(f.index)
    union = set(lab_series.index).union(*[set(f.index) for f in frames.values()])
    if not ids:
        raise DatasetError("no sample ID is present in every modality and the labels file")
    dropped = len(union) - len(ids)
    if dropped:
        msg = f"dropped {dropped} samples missing from at least one modality or the labels"
        warnings.warn(msg)
        log.warning(msg)
    order = sorted(ids)

    raw = lab_series.loc[order].to_numpy()
    if class_names is None:
        if all(v.lstrip("-").isdigit() for v in raw):
            k = max(int(v) for v in raw) + 1
            class_names = [str(i) for i in range(k)]
        else:
            class_names = sorted(set(raw))
    class_names = list(class_names)
    lookup = {name: i for i, name in enumerate(class_names)}
    try:
        labels = np.array([lookup[v] if v in lookup else int(v) for v in raw], dtype=np.int64)
    except ValueError as exc:
        raise DatasetError(f"{labels_path}: unknown label ({exc})") from None
    mods = [ModalityMatrix(name, f.loc[order].to_numpy(), [str(c) for c in f.columns]) for name, f in frames.items()]
    return MultiOmicsDataset(mods, labels, order, class_names)


def write_dataset_csv(dataset: MultiOmicsDataset, out_dir: str | Path, float_format: str = "%.17g") -> dict:
    """Write modality CSVs, labels.csv and manifest.json; returns the manifest.

    The default format round-trips float64 exactly; a shorter one such as
    ``"%.6g"`` trades exactness for file size."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for m in dataset.modalities:
        fname = f"{m.name}.csv"
        frame = pd.DataFrame(m.values, index=dataset.sample_ids, columns=m.feature_names)
        frame.index.name = "sample_id"
        frame.to_csv(out / fname, float_format=float_format)
        files[m.name] = fname
    labels = pd.DataFrame({"sample_id": dataset.sample_ids, "label": [dataset.class_names[i] for i in dataset.labels]})
    labels.to_csv(out / "labels.csv", index=False)
    manifest = {"modalities": files, "labels": "labels.csv", "class_names": dataset.class_names, "num_classes": dataset.num_classes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_manifest(path: str | Path) -> MultiOmicsDataset:
    path = Path(path)
    manifest = json.loads(path.read_text())
    unknown = set(manifest) - {"modalities", "labels", "class_names", "num_classes"}
    if unknown:
        raise DatasetError(f"{path}: unknown manifest keys {sorted(unknown)}")
    base = path.parent
    paths = {name: base / p for name, p in manifest["modalities"].items()}
    ds = load_csv_dataset(paths, base / manifest["labels"], manifest.get("class_names"))
    if "num_classes" in manifest and manifest["num_classes"] != ds.num_classes:
        raise DatasetError(f"{path}: num_classes {manifest['num_classes']} but {ds.num_classes} class names")
    return ds


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class ModalitySpec:
    name: str
    dim: int
    snr: float = 1.0
    margin: float = 1.0
    sharing: float = 0.8


def _default_modalities() -> list[ModalitySpec]:
    # feature counts follow the BRCA cohort; mRNA weak, CNV low-information
    # (no class signal of its own), RPPA strong
    return [
        ModalitySpec("mRNA", 19580, snr=0.04, margin=1.0, sharing=0.8),
        ModalitySpec("CNV", 19273, snr=0.0, margin=1.0, sharing=0.0),
        ModalitySpec("RPPA", 223, snr=0.35, margin=1.5, sharing=0.9),
    ]


@dataclass
class SyntheticSpec:
    """Latent-factor generator for proxy multi-omics cohorts.

    Per sample a class centre and a shared latent factor are drawn; modality
    m sees ``sharing * (margin * centre + shared) + sqrt(1 - sharing^2) *
    private`` through a random linear loading, scaled by ``snr`` and plus unit
    Gaussian noise.
    """

    modalities: list[ModalitySpec] = field(default_factory=_default_modalities)
    class_counts: list[int] = field(default_factory=lambda: list(TABLE1_CLASS_COUNTS))
    class_names: list[str] = field(default_factory=lambda: list(TABLE1_CLASS_NAMES))
    latent_dim: int = 8
    seed: int = 0

    def validate(self) -> None:
        if len(self.class_counts) != len(self.class_names):
            raise ValueError("class_counts and class_names differ in length")
        if any(c < 3 for c in self.class_counts):
            raise ValueError("every class needs at least 3 samples so stratified splits exist")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names {names}")
        for m in self.modalities:
            if m.dim < 1:
                raise ValueError(f"modality {m.name!r}: dim must be >= 1")
            if m.snr < 0:
                raise ValueError(f"modality {m.name!r}: snr must be >= 0")
            if not 0 <= m.sharing <= 1:
                raise ValueError(f"modality {m.name!r}: sharing must be in [0, 1]")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        allowed = {"modalities", "class_counts", "class_names", "latent_dim", "seed"}
        unknown = set(raw) - allowed
        if unknown:
            raise KeyError(f"unknown synthetic spec key(s): {sorted(unknown)}")
        kwargs = dict(raw)
        if "modalities" in kwargs:
            mods = []
            for entry in kwargs["modalities"]:
                bad = set(entry) - {"name", "dim", "snr", "margin", "sharing"}
                if bad:
                    raise KeyError(f"unknown modality spec key(s): {sorted(bad)}")
                mods.append(ModalitySpec(**entry))
            kwargs["modalities"] = mods
        spec = cls(**kwargs)
        spec.validate()
        return spec


def generate_synthetic(spec: SyntheticSpec | None = None) -> MultiOmicsDataset:
    spec = spec or SyntheticSpec()
    spec.validate()
    rng = ad.make_rng(ad.derive_seed(spec.seed, "synthetic"))
    labels = np.repeat(np.arange(len(spec.class_counts)), spec.class_counts)
    labels = labels[rng.permutation(labels.size)]
    n, k = labels.size, spec.latent_dim
    centres = rng.normal(size=(len(spec.class_counts), k)) / np.sqrt(k)
    shared = rng.normal(size=(n, k))
    mods = []
    for m in spec.modalities:
        mrng = ad.make_rng(ad.derive_seed(spec.seed, "modality", m.name))
        private = mrng.normal(size=(n, k))
        latent = m.sharing * (m.margin * np.sqrt(k) * centres[labels] + shared) + np.sqrt(1 - m.sharing**2) * private
        loading = mrng.normal(size=(k, m.dim)) / np.sqrt(k)
        x = m.snr * latent @ loading + mrng.normal(size=(n, m.dim))
        mods.append(ModalityMatrix(m.name, x))
    ids = [f"S{i:04d}" for i in range(n)]
    return MultiOmicsDataset(mods, labels, ids, list(spec.class_names))


# ---------------------------------------------------------------------------
# splits and scaling


def stratified_split(labels, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> SplitMasks:
    """Per-class proportional train/val/test assignment; remainder goes to train."""
    labels = np.asarray(labels, dtype=np.int64)
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {list(fractions)}")
    rng = ad.make_rng(seed)
    masks = [np.zeros(labels.size, dtype=bool) for _ in range(3)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 3:
            raise ValueError(f"class {int(c)} has {idx.size} samples; need >= 3 to cover all splits")
        idx = idx[rng.permutation(idx.size)]
        n_val, n_test = split_counts(idx.size, fr)[1:]
        masks[1][idx[:n_val]] = True
        masks[2][idx[n_val : n_val + n_test]] = True
        masks[0][idx[n_val + n_test :]] = True
    return SplitMasks(*masks)


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_val = max(1, int(np.floor(n * fractions[1])))
    n_test = max(1, int(np.floor(n * fractions[2])))
    while n - n_val - n_test < 1:
        if n_val >= n_test:
            n_val -= 1
        else:
            n_test -= 1
    return n - n_val - n_test, n_val, n_test


def standardize(x: np.ndarray, train_mask) -> np.ndarray:
    """z-score every column with train-row statistics (constant columns -> 0)."""
    x = np.asarray(x, dtype=np.float64)
    ref = x[np.asarray(train_mask, dtype=bool)]
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return (x - mu) / sd


# ---------------------------------------------------------------------------
# reduction


@dataclass
class ReductionConfig:
    method: str = "autoencoder"
    target_dim: int = 100
    epochs: int = 300
    learning_rate: float = 0.01


def _pca_basis(xc: np.ndarray, k: int) -> np.ndarray:
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:k]
    # deterministic signs: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    return (comps * signs[:, None]).T


def reduce_features(
    x: ModalityMatrix | np.ndarray,
    target_dim: int = 100,
    method: str = "autoencoder",
    train_mask=None,
    seed: int = 0,
    epochs: int = 300,
    learning_rate: float = 0.01,
) -> ModalityMatrix:
    """Reduce a modality to ``target_dim`` features fitted on train rows only.

    ``pca`` projects on the top principal directions.  ``autoencoder`` trains a
    linear encoder/decoder pair on mean squared reconstruction error with
    Adam; when the modality has more features than training rows it first
    projects onto the span of the centred training rows, which loses nothing
    on those rows and keeps each epoch cheap.  ``meta['reconstruction_mse']``
    is the training-row reconstruction error.
    """
    mod = x if isinstance(x, ModalityMatrix) else ModalityMatrix("x", np.asarray(x))
    values = mod.values
    n, d = values.shape
    train_mask = np.ones(n, dtype=bool) if train_mask is None else np.asarray(train_mask, dtype=bool)
    if method not in ("autoencoder", "pca"):
        raise ValueError(f"unknown reduction method {method!r}")
    if target_dim >= d:
        warnings.warn(f"modality {mod.name!r}: target_dim {target_dim} >= {d} features; passing through")
        return ModalityMatrix(mod.name, values.copy(), list(mod.feature_names), {"reduction": "passthrough"})

    mean = values[train_mask].mean(axis=0)
    xc = values - mean
    xtr = xc[train_mask]
    if method == "pca":
        basis = _pca_basis(xtr, target_dim)
        z = xc @ basis
        recon = float(np.mean((xtr - (xtr @ basis) @ basis.T) ** 2))
    else:
        span = None
        if d > xtr.shape[0]:
            _, s, vt = np.linalg.svd(xtr, full_matrices=False)
            span = vt[s > s[0] * 1e-12].T
            xc_in, xtr_in = xc @ span, xtr @ span
        else:
            xc_in, xtr_in = xc, xtr
        z, sse = _train_linear_autoencoder(xc_in, xtr_in, target_dim, seed, epochs, learning_rate)
        recon = sse / xtr.size
    names = [f"{mod.name}_{method}_{j}" for j in range(target_dim)]
    return ModalityMatrix(mod.name, z, names, {"reduction": method, "reconstruction_mse": recon, "source_dim": d})


def _train_linear_autoencoder(x_all: np.ndarray, x_train: np.ndarray, k: int, seed: int, epochs: int, lr: float):
    rng = ad.make_rng(seed)
    p = x_all.shape[1]
    # scale-aware init keeps the first Adam steps in a sensible range
    scale = np.sqrt(np.mean(x_train**2)) + 1e-12
    enc = ad.parameter(ad.glorot_uniform(p, k, rng) / scale)
    dec = ad.parameter(ad.glorot_uniform(k, p, rng) * scale)
    opt = ad.Adam([enc, dec], lr=lr)
    xt = ad.constant(x_train)
    denom = x_train.size
    for _ in range(epochs):
        opt.zero_grad()
        recon = ad.matmul(ad.matmul(xt, enc), dec)
        loss = ad.scale(ad.sum_all(ad.square(ad.sub(recon, xt))), 1.0 / denom)
        ad.backward(loss)
        opt.step()
    sse = float(np.sum((x_train - (x_train @ enc.value) @ dec.value) ** 2))
    return x_all @ enc.value, sse
