"""Per-modality similarity networks and Similarity Network Fusion."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

RAW_W = "raw_W"
NORMALIZED_P = "normalized_P"
KNN_S = "knn_S"
FUSED = "fused"

EPS_FLOOR = 1e-12


class IsolatedSampleError(ValueError):
    pass


@dataclass
class SnfParams:
    mu: float = 0.5
    k_neighbors: int | None = None  # None -> max(N // 10, 10), capped at N - 1
    iterations: int = 20
    convergence_tol: float = 1e-6

    def neighbors_for(self, n: int) -> int:
        k = self.k_neighbors if self.k_neighbors is not None else max(n // 10, 10)
        k = min(k, n - 1)
        if k < 1:
            raise ValueError(f"k_neighbors must be in [1, N) for N={n}")
        return k


@dataclass
class SimilarityNetwork:
    kind: str
    matrix: np.ndarray
    warnings: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    d = np.sqrt(d2)
    return (d + d.T) / 2


def _neighbor_order(values: np.ndarray, largest: bool) -> np.ndarray:
    """Per-row neighbor ranking excluding self; ties broken by lower index."""
    n = values.shape[0]
    keyed = -values if largest else values.copy()
    keyed = keyed.astype(np.float64, copy=True)
    np.fill_diagonal(keyed, np.inf)
    return np.argsort(keyed, axis=1, kind="stable")[:, : n - 1]


def scaled_exponential_similarity(x, params: SnfParams | None = None) -> SimilarityNetwork:
    """W(i,j) = exp(-rho^2 / (mu * eps_ij)) with the SNF local scale eps_ij."""
    params = params or SnfParams()
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples")
    if params.mu <= 0:
        raise ValueError("mu must be positive")
    k = params.neighbors_for(n)
    rho = pairwise_distances(x)
    nearest = _neighbor_order(rho, largest=False)[:, :k]
    local = np.take_along_axis(rho, nearest, axis=1).mean(axis=1)
    eps = (local[:, None] + local[None, :] + rho) / 3.0
    notes = []
    if np.any(eps < EPS_FLOOR):
        notes.append(f"local scale below {EPS_FLOOR:g} for {int((eps < EPS_FLOOR).sum())} pairs; floored")
        warnings.warn(notes[-1])
        eps = np.maximum(eps, EPS_FLOOR)
    w = np.exp(-(rho**2) / (params.mu * eps))
    w = (w + w.T) / 2
    np.fill_diagonal(w, 1.0)
    return SimilarityNetwork(RAW_W, w, notes)


def normalize_P(w: SimilarityNetwork | np.ndarray) -> SimilarityNetwork:
    m = np.asarray(w.matrix if isinstance(w, SimilarityNetwork) else w, dtype=np.float64)
    off = m.copy()
    np.fill_diagonal(off, 0.0)
    mass = off.sum(axis=1)
    bad = np.flatnonzero(mass <= 0)
    if bad.size:
        raise IsolatedSampleError(f"sample row {int(bad[0])} has no off-diagonal similarity mass")
    p = off / (2.0 * mass[:, None])
    np.fill_diagonal(p, 0.5)
    return SimilarityNetwork(NORMALIZED_P, p)


def knn_S(w: SimilarityNetwork | np.ndarray, k: int) -> SimilarityNetwork:
    m = np.asarray(w.matrix if isinstance(w, SimilarityNetwork) else w, dtype=np.float64)
    n = m.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must be in [1, {n}), got {k}")
    nearest = _neighbor_order(m, largest=True)[:, :k]
    s = np.zeros_like(m)
    rows = np.arange(n)[:, None]
    s[rows, nearest] = m[rows, nearest]
    mass = s.sum(axis=1)
    bad = np.flatnonzero(mass <= 0)
    if bad.size:
        raise IsolatedSampleError(f"sample row {int(bad[0])} has zero similarity to its {k} nearest neighbors")
    return SimilarityNetwork(KNN_S, s / mass[:, None])


def _renormalize(p: np.ndarray) -> np.ndarray:
    p = normalize_P(p).matrix
    return (p + p.T) / 2


def snf_fuse(networks: Sequence[SimilarityNetwork | np.ndarray], params: SnfParams | None = None, names: Sequence[str] | None = None) -> SimilarityNetwork:
    """Cross-diffuse per-modality status matrices and average them.

    Each status matrix diffuses through its own kNN kernel against the mean
    of the other modalities' status matrices; with two modalities this is the
    pairwise swap update.  After every step the matrix is re-normalized and
    symmetrized.
    """
    params = params or SnfParams()
    mats = [np.asarray(w.matrix if isinstance(w, SimilarityNetwork) else w, dtype=np.float64) for w in networks]
    names = list(names) if names is not None else [f"modality{i}" for i in range(len(mats))]
    if len(mats) < 2:
        raise ValueError("snf_fuse needs at least 2 networks")
    n = mats[0].shape[0]
    for name, m in zip(names, mats):
        if m.shape != (n, n):
            raise ValueError(f"network {name!r} has shape {m.shape}, expected {(n, n)} like {names[0]!r}")
    k = params.neighbors_for(n)
    kernels = [knn_S(m, k).matrix for m in mats]
    status = [normalize_P(m).matrix for m in mats]
    total = sum(status)
    count = len(mats)
    history = []
    converged = False
    for _ in range(params.iterations):
        nxt = []
        for s_m, p_m in zip(kernels, status):
            others = (total - p_m) / (count - 1)
            nxt.append(_renormalize(s_m @ others @ s_m.T))
        change = max(np.linalg.norm(a - b) / np.linalg.norm(b) for a, b in zip(nxt, status))
        history.append(float(change))
        status = nxt
        total = sum(status)
        if change < params.convergence_tol:
            converged = True
            break
    fused = total / count
    diag = {"iterations": len(history), "converged": converged, "relative_change": history, "k_neighbors": k}
    return SimilarityNetwork(FUSED, fused, diagnostics=diag)


def mean_within_class_similarity(matrix: np.ndarray, labels) -> float:
    """Mean off-diagonal similarity over same-class sample pairs."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return float(np.asarray(matrix)[same].mean())


def write_network_csv(network: SimilarityNetwork | np.ndarray, sample_ids: Sequence[str], path: str | Path) -> None:
    import pandas as pd

    m = network.matrix if isinstance(network, SimilarityNetwork) else np.asarray(network)
    frame = pd.DataFrame(m, index=list(sample_ids), columns=list(sample_ids))
    frame.index.name = "sample_id"
    frame.to_csv(path, float_format="%.17g")


def read_network_csv(path: str | Path, kind: str = FUSED) -> tuple[SimilarityNetwork, list[str]]:
    import pandas as pd

    frame = pd.read_csv(path, index_col=0, float_precision="round_trip")
    ids = [str(c) for c in frame.columns]
    if [str(i) for i in frame.index] != ids:
        raise ValueError(f"{path}: row and column sample IDs differ")
    return SimilarityNetwork(kind, frame.to_numpy(dtype=np.float64)), ids
