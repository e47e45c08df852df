"""Run configuration: nested dataclasses loaded from JSON or YAML with strict keys."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .balance import BalanceConfig
from .baseline import LogisticConfig
from .data import ReductionConfig, SyntheticSpec
from .distill import DistillConfig
from .gcn import DEFAULT_AVG_EDGES, DEFAULT_DIMS
from .snf import SnfParams


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSource:
    # "synthetic" uses ``synthetic``; "csv" reads the manifest written by ``generate``
    kind: str = "synthetic"
    manifest: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def validate(self) -> None:
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and not self.manifest:
            raise ConfigError("dataset.manifest is required when dataset.kind is 'csv'")
        try:
            self.synthetic.validate()
        except ValueError as exc:
            raise ConfigError(f"dataset.synthetic: {exc}") from None


@dataclass
class EncoderConfig:
    hidden_dims: list[int] = field(default_factory=lambda: list(DEFAULT_DIMS))
    avg_edges_per_node: float = DEFAULT_AVG_EDGES
    # modalities entering the fused edge network; None = all
    fusion_include: list[str] | None = None

    def validate(self) -> None:
        if not self.hidden_dims or any(d < 1 for d in self.hidden_dims):
            raise ConfigError(f"encoder.hidden_dims must be positive, got {self.hidden_dims}")
        if self.avg_edges_per_node < 1:
            raise ConfigError("encoder.avg_edges_per_node must be >= 1")


@dataclass
class RunConfig:
    dataset: DatasetSource = field(default_factory=DatasetSource)
    split_fractions: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    reduction: ReductionConfig = field(default_factory=ReductionConfig)
    snf: SnfParams = field(default_factory=SnfParams)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    pretrain_low_information: bool = False
    balance: BalanceConfig = field(default_factory=BalanceConfig)
    baseline: LogisticConfig = field(default_factory=LogisticConfig)
    seed: int = 0

    def validate(self) -> None:
        self.dataset.validate()
        self.encoder.validate()
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1) > 1e-9:
            raise ConfigError(f"split_fractions must be three positive numbers summing to 1, got {fr}")
        if self.reduction.method not in ("autoencoder", "pca") or self.reduction.target_dim < 1:
            raise ConfigError(f"reduction: invalid method/target_dim {self.reduction.method!r}/{self.reduction.target_dim}")
        if self.snf.mu <= 0 or self.snf.iterations < 1 or (self.snf.k_neighbors is not None and self.snf.k_neighbors < 1):
            raise ConfigError("snf: mu must be > 0, iterations >= 1, k_neighbors >= 1")
        for name, sub in (("distill", self.distill), ("balance", self.balance)):
            try:
                sub.validate()
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from None
        if self.baseline.repeats < 1 or self.baseline.l2 < 0:
            raise ConfigError("baseline: repeats must be >= 1 and l2 >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _check_scalar(hint, value, path: str) -> None:
    allowed = typing.get_args(hint) if typing.get_origin(hint) in (typing.Union, type(int | None)) else (hint,)
    if value is None:
        if type(None) not in allowed:
            raise ConfigError(f"{path}: null is not allowed")
        return
    for t in allowed:
        if t is bool and isinstance(value, bool):
            return
        if t is int and isinstance(value, int) and not isinstance(value, bool):
            return
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return
        if t is str and isinstance(value, str):
            return
        if typing.get_origin(t) in (list, tuple) and isinstance(value, (list, tuple)):
            return
    raise ConfigError(f"{path}: value {value!r} has the wrong type (expected {hint})")


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in raw.items():
        path = f"{where}.{key}" if where else key
        hint = hints[key]
        if cls is DatasetSource and key == "synthetic":
            try:
                kwargs[key] = SyntheticSpec.from_dict(value)
            except KeyError as exc:
                raise ConfigError(f"{path}: {exc.args[0]}") from None
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: {exc}") from None
        elif dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, path)
        elif isinstance(value, list) and typing.get_origin(hint) is tuple:
            kwargs[key] = tuple(value)
        else:
            _check_scalar(hint, value, path)
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Read a JSON or YAML run config; missing keys take their defaults."""
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: not valid {'JSON' if path.suffix == '.json' else 'YAML'} ({exc})") from None
    return config_from_dict(raw or {})
