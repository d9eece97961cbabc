"""Experiment configuration.

An experiment is one JSON document with nested sections. Field-level checks
are done by pydantic; cross-field checks run afterwards. Either way every
violation is collected and reported together in one ``ConfigValidationError``.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveFloat, ValidationError

from models.bcrl import TrainConfig
from utils.exceptions import ConfigValidationError

HASH_LENGTH = 16


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MdpSpec(_Section):
    kind: Literal["tabular", "low-rank"] = "low-rank"
    num_states: int = Field(20, ge=1)
    num_actions: int = Field(4, ge=1)
    feature_dim: int = Field(8, ge=1)  # low-rank only
    gamma: float = Field(0.9, gt=0, lt=1)
    stochastic: bool = True  # tabular only
    seed: Optional[NonNegativeInt] = None  # None: a fresh instance per run seed


class PolicySpec(_Section):
    kind: Literal["uniform", "random"] = "uniform"
    concentration: float = Field(1.0, gt=0)


class NuSpec(_Section):
    kind: Literal["behavior", "explicit", "mixture"] = "behavior"
    behavior: Literal["uniform", "random"] = "random"
    table: Literal["uniform", "dirichlet"] = "uniform"
    mixture_weight: float = Field(0.5, ge=0, le=1)


class FeatureSpec(_Section):
    kind: Literal["one-hot", "low-rank-truth", "random-fixed", "rank-one", "trainable"] = "trainable"
    dim: Optional[int] = Field(None, ge=1)  # random-fixed and rank-one; defaults to mdp.feature_dim


class LspeSpec(_Section):
    k_iters: int = Field(50, ge=1)
    w_radius: Optional[float] = Field(None, gt=0)  # None: unconstrained regression
    population: bool = False


class BaselineSpec(_Section):
    fqe: bool = False
    fqe_iters: int = Field(20, ge=1)
    fqe_inner_steps: int = Field(200, ge=1)
    fqe_learning_rate: float = Field(0.05, gt=0)
    fqe_batch_size: Optional[int] = Field(None, ge=1)
    ablations: List[Literal["no-design", "design-only"]] = Field(default_factory=list)


class RankingSpec(_Section):
    enabled: bool = False
    temperatures: List[PositiveFloat] = Field(default_factory=lambda: [0.05, 0.2, 1.0])


class DiagnosticsSpec(_Section):
    horizon_slices: List[NonNegativeInt] = Field(default_factory=lambda: [0, 1, 2, 5, 10])
    n_probes: Optional[int] = Field(None, ge=2)
    lbc_radius: Optional[float] = Field(None, gt=0)  # None: 1 / (1 - gamma)


class ExperimentConfig(_Section):
    name: str = "bcrl"
    mdp: MdpSpec = Field(default_factory=MdpSpec)
    policy: PolicySpec = Field(default_factory=PolicySpec)
    nu: NuSpec = Field(default_factory=NuSpec)
    dataset_size: int = Field(2000, ge=1)  # tuples per split half
    features: FeatureSpec = Field(default_factory=FeatureSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    lspe: LspeSpec = Field(default_factory=LspeSpec)
    baselines: BaselineSpec = Field(default_factory=BaselineSpec)
    ranking: RankingSpec = Field(default_factory=RankingSpec)
    diagnostics: DiagnosticsSpec = Field(default_factory=DiagnosticsSpec)
    seeds: List[NonNegativeInt] = Field(default_factory=lambda: [0])
    output_dir: str = "results"

    @property
    def feature_dim(self) -> int:
        if self.features.kind == "one-hot":
            return self.mdp.num_states * self.mdp.num_actions
        if self.features.kind == "trainable":
            return self.train.feature_dim
        if self.features.kind in ("random-fixed", "rank-one") and self.features.dim is not None:
            return self.features.dim
        return self.mdp.feature_dim

    @property
    def trains(self) -> bool:
        return self.features.kind == "trainable"


def _format_error(error: Dict[str, Any]) -> str:
    location = ".".join(str(part) for part in error["loc"]) or "<root>"
    return f"{location}: {error['msg']}"


def cross_field_violations(config: ExperimentConfig) -> List[str]:
    violations = []
    pairs = config.mdp.num_states * config.mdp.num_actions
    if config.mdp.kind == "low-rank" and config.mdp.feature_dim > pairs:
        violations.append(f"mdp.feature_dim: {config.mdp.feature_dim} exceeds the {pairs} state-action pairs")
    if config.features.kind == "low-rank-truth" and config.mdp.kind != "low-rank":
        violations.append("features.kind: low-rank-truth features need mdp.kind = low-rank")
    if config.baselines.ablations and not config.trains:
        violations.append("baselines.ablations: ablations need features.kind = trainable")
    if (config.trains or config.baselines.ablations) and config.dataset_size < 2 * config.train.batch_size:
        violations.append(
            f"dataset_size: training needs at least 2 * train.batch_size = {2 * config.train.batch_size} tuples"
        )
    if len(set(config.baselines.ablations)) != len(config.baselines.ablations):
        violations.append("baselines.ablations: duplicate entries")
    if not config.seeds:
        violations.append("seeds: at least one seed is required")
    elif len(set(config.seeds)) != len(config.seeds):
        violations.append("seeds: duplicate seeds")
    if config.ranking.enabled and not config.ranking.temperatures:
        violations.append("ranking.temperatures: ranking needs at least one temperature")
    if config.diagnostics.n_probes is not None and config.diagnostics.n_probes < 2 * config.feature_dim:
        violations.append(f"diagnostics.n_probes: must be at least 2 * d = {2 * config.feature_dim}")
    return violations


def validate_config(document: Dict[str, Any]) -> ExperimentConfig:
    try:
        config = ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigValidationError([_format_error(e) for e in exc.errors()]) from None
    violations = cross_field_violations(config)
    if violations:
        raise ConfigValidationError(violations)
    return config


def load_config(source: Union[str, Path, Dict[str, Any]]) -> ExperimentConfig:
    """Validate a config dict or a JSON file."""
    if isinstance(source, dict):
        return validate_config(source)
    path = Path(source)
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigValidationError([f"{path}: no such file"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigValidationError([f"{path}: not valid JSON ({exc})"]) from None
    if not isinstance(document, dict):
        raise ConfigValidationError([f"{path}: top level must be an object"])
    return validate_config(document)


def with_updates(config: ExperimentConfig, updates: Dict[str, Any]) -> ExperimentConfig:
    """Revalidated copy with dotted-path overrides, e.g. {"lspe.k_iters": 20}."""
    document = config.model_dump(mode="json")
    for dotted, value in updates.items():
        node = document
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        node[leaf] = value
    return validate_config(document)


def canonical_json(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    """Identifies the numeric content of a config; the output location is not part of it."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:HASH_LENGTH]
