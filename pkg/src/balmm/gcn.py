"""GCN and revised-GCN (r-GCN) encoders with affine classifier heads.

An r-GCN takes node features from one modality and its edges from a
similarity network fused over several modalities; a plain GCN is the special
case where the edges come from the node modality's own similarity network.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .snf import SimilarityNetwork, SnfParams, scaled_exponential_similarity

CHECKPOINT_VERSION = 1
DEFAULT_DIMS = (64, 64)
DEFAULT_AVG_EDGES = 10.0


class ConfigurationError(ValueError):
    pass


@dataclass
class AdjacencySpec:
    avg_edges_per_node: float
    epsilon: float = 0.0
    self_loops: bool = True
    achieved_avg_edges: float = 0.0
    warnings: list[str] = field(default_factory=list)


def threshold_adjacency(s: SimilarityNetwork | np.ndarray, avg_edges_per_node: float) -> tuple[AdjacencySpec, np.ndarray]:
    """Keep off-diagonal similarities >= eps, with eps the smallest cutoff whose
    mean degree does not exceed ``avg_edges_per_node``."""
    m = np.asarray(s.matrix if isinstance(s, SimilarityNetwork) else s, dtype=np.float64)
    n = m.shape[0]
    if not 1 <= avg_edges_per_node < n:
        raise ValueError(f"avg_edges_per_node must be in [1, {n}), got {avg_edges_per_node}")
    off = ~np.eye(n, dtype=bool)
    values = m[off]
    positive = np.sort(values[values > 0])[::-1]
    spec = AdjacencySpec(avg_edges_per_node)
    if positive.size == 0:
        raise ValueError("similarity network has no positive off-diagonal entries")
    budget = avg_edges_per_node * n
    # count(v >= positive[j]) for each candidate cutoff, ties included
    counts = np.searchsorted(-positive, -positive, side="right")
    ok = np.flatnonzero(counts <= budget)
    if ok.size == 0:
        eps = float(positive[-1])
        msg = f"target degree {avg_edges_per_node} unachievable (tied similarities); keeping all edges"
        spec.warnings.append(msg)
        warnings.warn(msg)
    else:
        eps = float(positive[ok[-1]])
    a = np.where(off & (m >= eps), m, 0.0)
    a = (a + a.T) / 2
    spec.epsilon = eps
    spec.achieved_avg_edges = float((a > 0).sum() / n)
    return spec, a


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = np.asarray(a, dtype=np.float64)
    a_tilde = a + np.eye(a.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    out = inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]
    return (out + out.T) / 2


@dataclass
class EncoderOutput:
    representations: np.ndarray
    logits: dict[str, np.ndarray]


class GcnModel:
    """Stacked GCN layers (ReLU after each) plus named affine heads.

    Heads act on the representation with an appended constant column, so a
    head weight has shape (d + 1, C).
    """

    def __init__(
        self,
        layer_weights: Sequence[np.ndarray],
        normalized_adjacency: np.ndarray,
        head_weights: dict[str, np.ndarray] | None = None,
        seed: int = 0,
        node_source: str = "",
        edge_source: str = "",
    ):
        self.layers = [ad.parameter(w) for w in layer_weights]
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise ConfigurationError(f"layer dims do not chain: {prev.shape} then {nxt.shape}")
        self.adjacency = np.asarray(normalized_adjacency, dtype=np.float64)
        if self.adjacency.shape[0] != self.adjacency.shape[1]:
            raise ConfigurationError(f"adjacency must be square, got {self.adjacency.shape}")
        self.heads = {name: ad.parameter(w) for name, w in (head_weights or {}).items()}
        for name, h in self.heads.items():
            if h.shape[0] != self.representation_dim + 1:
                raise ConfigurationError(f"head {name!r} expects input {h.shape[0] - 1}, representation is {self.representation_dim}")
        self.seed = seed
        self.node_source = node_source
        self.edge_source = edge_source
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def representation_dim(self) -> int:
        return self.layers[-1].shape[1]

    def parameters(self) -> list[ad.Node]:
        return [*self.layers, *self.heads.values()]

    def add_head(self, name: str, num_classes: int, rng: np.random.Generator) -> None:
        d = self.representation_dim
        self.heads[name] = ad.parameter(ad.glorot_uniform(d + 1, num_classes, rng))

    def _propagated_input(self, x: np.ndarray) -> np.ndarray:
        # first layer input A_hat @ X is constant across epochs
        if self._cache is None or self._cache[0] is not x:
            self._cache = (x, self.adjacency @ x)
        return self._cache[1]

    def encode(self, x: np.ndarray) -> ad.Node:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n, self.input_dim):
            raise ConfigurationError(f"features have shape {x.shape}, model expects {(self.n, self.input_dim)}")
        adj = ad.constant(self.adjacency)
        h = ad.relu(ad.matmul(ad.constant(self._propagated_input(x)), self.layers[0]))
        for w in self.layers[1:]:
            h = ad.relu(ad.matmul(adj, ad.matmul(h, w)))
        return h

    def head_logits(self, representation: ad.Node, head: str = "main") -> ad.Node:
        return ad.matmul(ad.append_ones(representation), self.heads[head])

    def state(self) -> dict[str, np.ndarray]:
        out = {f"layer{i}": p.value.copy() for i, p in enumerate(self.layers)}
        out.update({f"head:{k}": v.value.copy() for k, v in self.heads.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, p in enumerate(self.layers):
            p.value[...] = state[f"layer{i}"]
        for k, v in self.heads.items():
            v.value[...] = state[f"head:{k}"]


def gcn_forward(model: GcnModel, x: np.ndarray) -> EncoderOutput:
    rep = model.encode(x)
    logits = {name: model.head_logits(rep, name).value for name in model.heads}
    return EncoderOutput(rep.value, logits)


def init_layers(dims: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigurationError(f"invalid layer sizes {list(dims)}")
    return [ad.glorot_uniform(a, b, rng) for a, b in zip(dims, dims[1:])]


def build_rgcn(
    node_features: np.ndarray,
    fused_edges: SimilarityNetwork | np.ndarray,
    num_classes: int,
    hidden_dims: Sequence[int] = DEFAULT_DIMS,
    seed: int = 0,
    avg_edges_per_node: float = DEFAULT_AVG_EDGES,
    node_source: str = "",
    edge_source: str = "",
) -> GcnModel:
    """r-GCN: node features from one modality, adjacency from ``fused_edges``."""
    x = np.asarray(node_features)
    edges = fused_edges.matrix if isinstance(fused_edges, SimilarityNetwork) else np.asarray(fused_edges)
    if edges.shape[0] != x.shape[0]:
        raise ValueError(
            f"node features {node_source or 'x'} have {x.shape[0]} samples but edges {edge_source or 'network'} cover {edges.shape[0]}"
        )
    _, a = threshold_adjacency(edges, min(avg_edges_per_node, x.shape[0] - 1))
    rng = ad.make_rng(seed)
    layers = init_layers([x.shape[1], *hidden_dims], rng)
    model = GcnModel(layers, normalize_adjacency(a), seed=seed, node_source=node_source, edge_source=edge_source)
    model.add_head("main", num_classes, rng)
    return model


def build_gcn(
    node_features: np.ndarray,
    num_classes: int,
    hidden_dims: Sequence[int] = DEFAULT_DIMS,
    seed: int = 0,
    avg_edges_per_node: float = DEFAULT_AVG_EDGES,
    snf_params: SnfParams | None = None,
    node_source: str = "",
) -> GcnModel:
    """Plain GCN: edges from the node modality's own similarity network."""
    w = scaled_exponential_similarity(node_features, snf_params)
    return build_rgcn(node_features, w, num_classes, hidden_dims, seed, avg_edges_per_node, node_source, node_source)


def spectral_radius(m: np.ndarray, iterations: int = 500, seed: int = 0) -> float:
    v = ad.make_rng(seed).normal(size=m.shape[0])
    lam = 0.0
    for _ in range(iterations):
        w = m @ v
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
    return lam


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, models: dict[str, GcnModel], extra_arrays: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write named models to one .npz container with a JSON header."""
    arrays: dict[str, np.ndarray] = {}
    header = {"version": CHECKPOINT_VERSION, "models": {}, "meta": meta or {}}
    for name, model in models.items():
        header["models"][name] = {
            "n_layers": len(model.layers),
            "heads": list(model.heads),
            "dims": [model.input_dim] + [p.shape[1] for p in model.layers],
            "seed": int(model.seed),
            "node_source": model.node_source,
            "edge_source": model.edge_source,
        }
        arrays[f"{name}/adjacency"] = model.adjacency
        for key, value in model.state().items():
            arrays[f"{name}/{key}"] = value
    for key, value in (extra_arrays or {}).items():
        arrays[f"extra/{key}"] = np.asarray(value)
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, GcnModel], dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        models = {}
        for name, info in header["models"].items():
            layers = [data[f"{name}/layer{i}"] for i in range(info["n_layers"])]
            heads = {h: data[f"{name}/head:{h}"] for h in info["heads"]}
            models[name] = GcnModel(
                layers, data[f"{name}/adjacency"], heads, info["seed"], info["node_source"], info["edge_source"]
            )
        extra = {k[len("extra/") :]: data[k] for k in data.files if k.startswith("extra/")}
    return models, extra, header["meta"]
