# supernet_search/config.py
"""
Run configuration.

Typed dataclasses hold every knob; defaults follow the published search recipes
(weight LR 0.1 SGD/Nesterov for the cell space, 3e-4 Adam for the macro space,
AdamW 5e-4 for the LM space, arch LR 3e-4, batch 64, SPOS 250 epochs).
YAML files override them section by section and TNAS_SEED overrides any seed.
"""
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Tuple, Union

import yaml
from dotenv import load_dotenv

from supernet_search.errors import ConfigurationError

logger = logging.getLogger(__name__)

SEED_ENV = "TNAS_SEED"
LOG_LEVEL_ENV = "TNAS_LOG_LEVEL"
DTYPE_ENV = "TNAS_DTYPE"

# optimizer label -> (sampler strategy, supernet mode)
SEARCH_METHODS = {
    "tanglenas-drnas": ("dirichlet", "WE"),
    "tanglenas-darts": ("softmax", "WE"),
    "tanglenas-gdas": ("gumbel_st", "WE"),
    "drnas-ws": ("dirichlet", "WS"),
}


@dataclass
class SamplerConfig:
    strategy: str = "dirichlet"
    tau: float = 1.0
    anneal: str = "none"
    tau_end: float = 1.0
    anneal_steps: int = 0
    seed: int = 0
    dirichlet_epsilon: float = 1e-3
    regularization: str = "l2_anchor"
    reg_scale: float = 1e-3

    def __post_init__(self):
        if self.strategy not in ("softmax", "gumbel_st", "dirichlet"):
            raise ConfigurationError(f"Unknown sampler strategy {self.strategy!r}")
        if self.anneal not in ("none", "linear", "exponential"):
            raise ConfigurationError(f"Unknown anneal schedule {self.anneal!r}")
        if self.tau <= 0 or self.tau_end <= 0:
            raise ConfigurationError(
                f"Temperatures must be > 0 (tau={self.tau}, tau_end={self.tau_end})"
            )
        if self.anneal_steps < 0:
            raise ConfigurationError(f"anneal_steps must be >= 0, got {self.anneal_steps}")
        if self.dirichlet_epsilon <= 0:
            raise ConfigurationError(f"dirichlet_epsilon must be > 0, got {self.dirichlet_epsilon}")
        if self.regularization not in ("none", "l2_anchor"):
            raise ConfigurationError(f"Unknown regularization {self.regularization!r}")
        if self.reg_scale < 0:
            raise ConfigurationError(f"reg_scale must be >= 0, got {self.reg_scale}")


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.1
    min_lr: float = 0.001
    weight_decay: float = 5e-4
    momentum: float = 0.9
    nesterov: bool = True
    betas: Tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ConfigurationError(f"Unknown optimizer kind {self.kind!r}")
        if self.lr < 0 or self.min_lr < 0 or self.weight_decay < 0:
            raise ConfigurationError(
                f"lr={self.lr}, min_lr={self.min_lr}, weight_decay={self.weight_decay} must be >= 0"
            )
        self.betas = tuple(self.betas)


def arch_optimizer_config() -> OptimizerConfig:
    return OptimizerConfig(kind="adamw", lr=3e-4, min_lr=3e-4, weight_decay=1e-3, momentum=0.0,
                           nesterov=False, betas=(0.5, 0.999))


@dataclass
class BilevelConfig:
    epochs: int = 100
    batch_size: int = 64
    train_fraction: float = 0.5
    weights: OptimizerConfig = field(default_factory=OptimizerConfig)
    arch: OptimizerConfig = field(default_factory=arch_optimizer_config)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    check_phases: bool = False
    progress: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )


@dataclass
class SposConfig:
    epochs: int = 250
    batch_size: int = 64
    train_fraction: float = 0.8
    weights: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    progress: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError(f"Invalid epochs={self.epochs} / batch_size={self.batch_size}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )


@dataclass
class EvolutionConfig:
    population: int = 20
    generations: int = 10
    parent_fraction: float = 0.25
    mutation_prob: float = 0.1
    crossover_prob: float = 0.5
    elitism: int = 1
    max_evaluations: Optional[int] = None
    seed: int = 0
    workers: int = 1
    progress: bool = True

    def __post_init__(self):
        if self.population < 2:
            raise ConfigurationError(f"population must be >= 2, got {self.population}")
        if self.generations < 0:
            raise ConfigurationError(f"generations must be >= 0, got {self.generations}")
        for key in ("parent_fraction", "mutation_prob", "crossover_prob"):
            value = getattr(self, key)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{key} must lie in [0, 1], got {value}")
        if self.parent_fraction * self.population < 1:
            raise ConfigurationError(
                f"parent_fraction {self.parent_fraction} selects no parents from {self.population}"
            )
        if not 0 <= self.elitism <= self.population:
            raise ConfigurationError(f"elitism {self.elitism} outside [0, {self.population}]")
        if self.max_evaluations is not None and self.max_evaluations < 1:
            raise ConfigurationError(f"max_evaluations must be >= 1, got {self.max_evaluations}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")


@dataclass
class BenchmarkConfig:
    epochs: int = 5
    seeds: Tuple[int, ...] = (0, 1, 2)
    batch_size: int = 64
    weights: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(
            kind="adamw", lr=3e-4, min_lr=1e-4, weight_decay=5e-4, momentum=0.0, nesterov=False
        )
    )
    budget: int = 10000
    sample_fraction: Optional[float] = None
    workers: int = 1
    progress: bool = True

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(
                f"seeds must be a non-empty set of distinct integers, got {self.seeds}"
            )
        if self.sample_fraction is not None and not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigurationError(
                f"sample_fraction must lie in (0, 1], got {self.sample_fraction}"
            )
        if self.budget < 1 or self.epochs < 0 or self.workers < 1:
            raise ConfigurationError(
                f"Invalid budget={self.budget}, epochs={self.epochs}, workers={self.workers}"
            )


def default_bilevel_config(space_id: str, method: str = "tanglenas-drnas") -> BilevelConfig:
    """Search recipe for a space, before any user overrides."""
    if method not in SEARCH_METHODS:
        raise ConfigurationError(
            f"Unknown search method {method!r}; expected one of {sorted(SEARCH_METHODS)}"
        )
    strategy, _ = SEARCH_METHODS[method]
    regularization = "l2_anchor" if strategy == "dirichlet" else "none"
    sampler = SamplerConfig(strategy=strategy, regularization=regularization)
    if space_id == "toy-cell":
        weights = OptimizerConfig()
        fraction = 0.5
    elif space_id == "conv-macro":
        weights = OptimizerConfig(
            kind="adamw", lr=3e-4, min_lr=1e-4, weight_decay=5e-4, momentum=0.0, nesterov=False
        )
        fraction = 0.8
    elif space_id == "tiny-lm":
        weights = OptimizerConfig(
            kind="adamw", lr=5e-4, min_lr=5e-5, weight_decay=1e-2, momentum=0.0, nesterov=False
        )
        fraction = 0.8
    else:
        raise ConfigurationError(f"Unknown space {space_id!r}")
    return BilevelConfig(weights=weights, train_fraction=fraction, sampler=sampler)


def default_spos_config(space_id: str) -> SposConfig:
    bilevel = default_bilevel_config(space_id)
    return SposConfig(weights=bilevel.weights, train_fraction=bilevel.train_fraction)


SECTIONS = {
    "sampler": SamplerConfig,
    "bilevel": BilevelConfig,
    "spos": SposConfig,
    "evolution": EvolutionConfig,
    "benchmark": BenchmarkConfig,
}
NESTED = {"weights": OptimizerConfig, "arch": OptimizerConfig, "sampler": SamplerConfig}


def _build(cls, values: Dict[str, Any], base: Any, prefix: str, explicit: Set[str]):
    if not isinstance(values, dict):
        raise ConfigurationError(f"Section {prefix!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigurationError(f"Unknown keys in {prefix!r}: {unknown}")
    kwargs = {}
    for key, value in values.items():
        dotted = f"{prefix}.{key}"
        if key in NESTED and isinstance(value, dict) and cls is not SamplerConfig:
            value = _build(NESTED[key], value, getattr(base, key), dotted, explicit)
        else:
            explicit.add(dotted)
        kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as e:
        raise ConfigurationError(f"Invalid values in {prefix!r}: {e}") from e


@dataclass
class RunConfig:
    """Everything one CLI run needs, plus which keys the user set explicitly."""

    space: str = "conv-macro"
    space_options: Dict[str, Any] = field(default_factory=dict)
    method: str = "tanglenas-drnas"
    data: str = "planted-kernel"
    dtype: str = "float32"
    bilevel: BilevelConfig = field(default_factory=BilevelConfig)
    spos: SposConfig = field(default_factory=SposConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    explicit: Set[str] = field(default_factory=set)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data.pop("explicit")
        return data

    def default_keys(self) -> List[str]:
        """Dotted keys left at their default value (flagged in manifests)."""
        keys = []

        def walk(obj: Any, prefix: str) -> None:
            for f in dataclasses.fields(obj):
                dotted = f"{prefix}{f.name}"
                value = getattr(obj, f.name)
                if dataclasses.is_dataclass(value):
                    walk(value, dotted + ".")
                elif dotted not in self.explicit and f.name != "explicit":
                    keys.append(dotted)

        walk(self, "")
        return sorted(keys)


def load_run_config(path: Optional[Union[str, Path]] = None, space: Optional[str] = None,
                    method: Optional[str] = None) -> RunConfig:
    """
    Resolve a RunConfig from space defaults, an optional YAML file and TNAS_SEED.

    Raises:
        ConfigurationError: unreadable file, unknown section or key, invalid value
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigurationError(f"Cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigurationError(f"Config {path} must contain a mapping at top level")

    explicit: Set[str] = set()
    space_id = space or raw.get("space", "conv-macro")
    method_name = method or raw.get("method", "tanglenas-drnas")
    config = RunConfig(space=space_id, method=method_name)
    config.bilevel = default_bilevel_config(space_id, method_name)
    config.spos = default_spos_config(space_id)
    for key in ("space", "method", "data", "dtype", "space_options"):
        if key in raw:
            setattr(config, key, raw[key])
            explicit.add(key)
    if space:
        config.space = space
    if method:
        config.method = method

    for section, cls in SECTIONS.items():
        if section == "sampler":
            continue
        if section in raw:
            built = _build(cls, raw[section], getattr(config, section), section, explicit)
            setattr(config, section, built)
    if "sampler" in raw:
        config.bilevel.sampler = _build(SamplerConfig, raw["sampler"], config.bilevel.sampler,
                                        "bilevel.sampler", explicit)
    top_level = {"space", "method", "data", "dtype", "space_options"}
    unknown = sorted(set(raw) - set(SECTIONS) - top_level)
    if unknown:
        raise ConfigurationError(f"Unknown top-level config keys: {unknown}")
    if config.dtype not in ("float32", "float64"):
        raise ConfigurationError(f"dtype must be float32 or float64, got {config.dtype!r}")

    config.explicit = explicit
    env_seed = seed_from_env()
    if env_seed is not None:
        apply_seed(config, env_seed)
    return config


def apply_seed(config: RunConfig, seed: int) -> None:
    config.bilevel.seed = seed
    config.bilevel.sampler.seed = seed
    config.spos.seed = seed
    config.evolution.seed = seed
    config.explicit.update({"bilevel.seed", "bilevel.sampler.seed", "spos.seed", "evolution.seed"})


def load_environment() -> None:
    """Load a .env file if present (TNAS_SEED, TNAS_LOG_LEVEL, TNAS_DTYPE)."""
    load_dotenv()


def seed_from_env() -> Optional[int]:
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError as e:
        raise ConfigurationError(f"{SEED_ENV} must be an integer, got {value!r}") from e
