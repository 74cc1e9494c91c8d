# supernet_search/search_space.py
"""
Search-space description, architectures, and the supernet base class.

A concrete space subclasses Supernet and supplies three things:

    path_plan(arch)                      which sites one architecture uses, with
                                         their dim assignment and passthrough widths
    apply_path(tensors, x, arch)         the network wiring on given weights
    mixture_forward(x, mixes, bounds)    the same wiring with every site mixed
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np

from supernet_search.autodiff import DiffArray, no_grad
from supernet_search.errors import ConfigurationError, FormatError, InvalidArchitectureError
from supernet_search.layers import MixedSite
from supernet_search.samplers import ArchParams
from supernet_search.superposition import ChoiceDim, check_simplex, support_bounds

logger = logging.getLogger(__name__)

PlanEntry = Tuple[MixedSite, Dict[str, int], Dict[int, int]]


@dataclass(frozen=True, order=True)
class Architecture:
    """One index per dim, stored sorted by dim name so equal assignments compare and hash equal."""

    items: Tuple[Tuple[str, int], ...]

    @classmethod
    def from_mapping(cls, assignment: Mapping[str, int]) -> "Architecture":
        return cls(tuple(sorted((str(name), int(index)) for name, index in assignment.items())))

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        """Inverse of to_text."""
        assignment: Dict[str, int] = {}
        for part in text.strip().split(";"):
            if not part:
                continue
            name, sep, index = part.partition("=")
            if not sep or not name:
                raise InvalidArchitectureError(f"Malformed architecture entry {part!r} in {text!r}")
            if name in assignment:
                raise InvalidArchitectureError(f"Dim {name!r} assigned twice in {text!r}")
            try:
                assignment[name] = int(index)
            except ValueError as e:
                raise InvalidArchitectureError(
                    f"Index {index!r} for dim {name!r} is not an integer"
                ) from e
        if not assignment:
            raise InvalidArchitectureError(f"Empty architecture text {text!r}")
        return cls.from_mapping(assignment)

    def to_text(self) -> str:
        return ";".join(f"{name}={index}" for name, index in self.items)

    def as_dict(self) -> Dict[str, int]:
        return dict(self.items)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.items]

    def __getitem__(self, name: str) -> int:
        for key, index in self.items:
            if key == name:
                return index
        raise KeyError(name)

    def with_choice(self, name: str, index: int) -> "Architecture":
        assignment = self.as_dict()
        assignment[name] = int(index)
        return Architecture.from_mapping(assignment)

    def __str__(self) -> str:
        return self.to_text()


@dataclass(frozen=True)
class SiteSpec:
    """A group of dims searched together: `single` (one dim) or `combi` (cross product)."""

    site_id: str
    dims: Tuple[ChoiceDim, ...]
    grouping: str = "single"


@dataclass(frozen=True)
class SearchSpaceSpec:
    space_id: str
    sites: Tuple[SiteSpec, ...]
    topology: str
    dataset_kind: str

    def __post_init__(self):
        seen = set()
        for site in self.sites:
            if site.grouping not in ("single", "combi"):
                raise ConfigurationError(f"Site {site.site_id}: unknown grouping {site.grouping!r}")
            for dim in site.dims:
                if dim.name in seen:
                    raise ConfigurationError(f"Dim {dim.name!r} appears at more than one site")
                seen.add(dim.name)
        if not seen:
            raise ConfigurationError(f"Space {self.space_id!r} has no searchable dims")

    @property
    def dims(self) -> List[ChoiceDim]:
        return sorted((d for site in self.sites for d in site.dims), key=lambda d: d.name)

    def dim(self, name: str) -> ChoiceDim:
        for d in self.dims:
            if d.name == name:
                return d
        raise InvalidArchitectureError(f"Space {self.space_id!r} has no dim {name!r}")

    @property
    def cardinality(self) -> int:
        return math.prod(d.cardinality for d in self.dims)

    def validate(self, arch: Architecture) -> Architecture:
        names = {d.name for d in self.dims}
        given = set(arch.names)
        if given != names:
            missing, extra = sorted(names - given), sorted(given - names)
            raise InvalidArchitectureError(
                f"Architecture does not match space {self.space_id!r}: "
                f"missing {missing}, unknown {extra}"
            )
        for d in self.dims:
            index = arch[d.name]
            if not 0 <= index < d.cardinality:
                raise InvalidArchitectureError(
                    f"Index {index} for dim {d.name!r} outside [0, {d.cardinality})"
                )
        return arch

    def architecture(self, assignment: Mapping[str, int]) -> Architecture:
        return self.validate(Architecture.from_mapping(assignment))

    def parse(self, text: str) -> Architecture:
        return self.validate(Architecture.parse(text))

    def sample(self, rng: np.random.Generator) -> Architecture:
        """Uniform draw, one index per dim in canonical order."""
        return Architecture(tuple((d.name, int(rng.integers(d.cardinality))) for d in self.dims))

    def enumerate(self) -> Iterator[Architecture]:
        dims = self.dims
        for combo in itertools.product(*(range(d.cardinality) for d in dims)):
            yield Architecture(tuple((d.name, i) for d, i in zip(dims, combo)))

    def largest(self) -> Architecture:
        return Architecture(tuple((d.name, d.cardinality - 1) for d in self.dims))

    def smallest(self) -> Architecture:
        return Architecture(tuple((d.name, 0) for d in self.dims))

    def describe(self, arch: Architecture) -> Dict[str, str]:
        """Dim name -> human label of the chosen value."""
        return {d.name: d.label(arch[d.name]) for d in self.dims}


def cardinality(space: Union[SearchSpaceSpec, "Supernet"]) -> int:
    spec = space.spec if isinstance(space, Supernet) else space
    return spec.cardinality


def discretize(arch_params: Union[ArchParams, Mapping[str, Any]],
               spec: Optional[SearchSpaceSpec] = None) -> Architecture:
    """Per-dim argmax; ties go to the lowest index."""
    alphas = arch_params.alphas if isinstance(arch_params, ArchParams) else arch_params
    assignment = {}
    for name, alpha in alphas.items():
        values = alpha.values if isinstance(alpha, DiffArray) else np.asarray(alpha)
        assignment[name] = int(np.argmax(values))
    arch = Architecture.from_mapping(assignment)
    return spec.validate(arch) if spec is not None else arch


class Supernet:
    """Sites plus wiring for one search space in WE or WS mode."""

    def __init__(self, spec: SearchSpaceSpec, mode: str, config: Any = None):
        if mode not in ("WE", "WS"):
            raise ConfigurationError(f"Unknown supernet mode {mode!r}")
        self.spec = spec
        self.mode = mode
        self.config = config
        self.sites: Dict[str, MixedSite] = {}

    def register(self, site: MixedSite) -> MixedSite:
        if site.name in self.sites:
            raise ConfigurationError(f"Duplicate site name {site.name!r}")
        self.sites[site.name] = site
        return site

    # -- parameters -----------------------------------------------------------

    def named_parameters(self) -> Dict[str, DiffArray]:
        params: Dict[str, DiffArray] = {}
        for site in self.sites.values():
            params.update(site.parameters())
        return params

    def parameters(self) -> List[DiffArray]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(site.param_count() for site in self.sites.values())

    def path_param_count(self, arch: Architecture) -> int:
        plan = self.path_plan(self.spec.validate(arch))
        return sum(site.path_param_count(a, f) for site, a, f in plan)

    def largest_param_count(self) -> int:
        return self.path_param_count(self.spec.largest())

    def state_tensors(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters().items()}

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(tensors))
        if missing:
            raise FormatError(f"Checkpoint lacks supernet tensors {missing[:5]}")
        for name, p in params.items():
            values = np.asarray(tensors[name])
            if values.shape != p.shape:
                raise FormatError(
                    f"Tensor {name!r} has shape {values.shape}, supernet expects {p.shape}"
                )
            p.values = values.astype(p.dtype, copy=True)

    def arch_params(self, seed: int = 0) -> ArchParams:
        return ArchParams(self.spec.dims, seed=seed)

    # -- space hooks ------------------------------------------------------------

    def path_plan(self, arch: Architecture) -> List[PlanEntry]:
        raise NotImplementedError

    def apply_path(self, tensors: Mapping[str, DiffArray], x: Any, arch: Architecture) -> DiffArray:
        raise NotImplementedError

    def mixture_forward(
        self, x: Any, mixes: Mapping[str, DiffArray], bounds: Mapping[str, int]
    ) -> DiffArray:
        raise NotImplementedError

    # -- forward modes ----------------------------------------------------------

    def path_weights(self, arch: Architecture) -> Dict[str, DiffArray]:
        tensors: Dict[str, DiffArray] = {}
        for site, assignment, fixed in self.path_plan(self.spec.validate(arch)):
            tensors.update(site.path_tensors(assignment, fixed))
        return tensors

    def path_masks(self, arch: Architecture) -> Dict[str, np.ndarray]:
        """Active-slice masks for every tensor the path touches."""
        masks: Dict[str, np.ndarray] = {}
        for site, assignment, fixed in self.path_plan(self.spec.validate(arch)):
            masks.update(site.path_masks(assignment, fixed))
        return masks

    def forward_path(self, x: Any, arch: Architecture) -> DiffArray:
        return self.apply_path(self.path_weights(arch), x, arch)

    def forward_mixture(self, x: Any, mixes: Mapping[str, DiffArray]) -> DiffArray:
        """
        Raises:
            ConfigurationError: a dim has no mixture or one of the wrong length
            NormalizationError: a mixture is not a simplex
        """
        checked = {}
        for dim in self.spec.dims:
            if dim.name not in mixes:
                raise ConfigurationError(f"No mixture weights for dim {dim.name!r}")
            check_simplex(mixes[dim.name], dim)
            checked[dim.name] = mixes[dim.name]
        return self.mixture_forward(x, checked, support_bounds(checked))

    def inherit(self, arch: Architecture) -> "StandaloneModel":
        """Standalone model holding copies of the architecture's slices."""
        arch = self.spec.validate(arch)
        with no_grad():
            sliced = self.path_weights(arch)
        tensors = {
            name: DiffArray(t.values.copy(), requires_grad=True, name=name, dtype=t.values.dtype)
            for name, t in sliced.items()
        }
        return StandaloneModel(self, arch, tensors)


class StandaloneModel:
    """A single architecture with its own weights, wired like its supernet's path."""

    def __init__(self, supernet: Supernet, arch: Architecture, tensors: Dict[str, DiffArray]):
        self.supernet = supernet
        self.arch = arch
        self.tensors = tensors

    def named_parameters(self) -> Dict[str, DiffArray]:
        return dict(self.tensors)

    def parameters(self) -> List[DiffArray]:
        return list(self.tensors.values())

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def forward(self, x: Any) -> DiffArray:
        return self.supernet.apply_path(self.tensors, x, self.arch)

    __call__ = forward


def param_count(
    model: Union[Supernet, StandaloneModel], arch: Optional[Architecture] = None
) -> int:
    """Learnable scalars of a model, or of one architecture within a supernet."""
    if arch is not None:
        if not isinstance(model, Supernet):
            raise ConfigurationError("An architecture can only be counted against a supernet")
        return model.path_param_count(arch)
    return model.param_count()


def mixture_from_architecture(spec: SearchSpaceSpec, arch: Architecture,
                              dtype: Optional[type] = None) -> Dict[str, DiffArray]:
    """One-hot mixtures selecting `arch`."""
    spec.validate(arch)
    mixes = {}
    for d in spec.dims:
        values = np.zeros(d.cardinality)
        values[arch[d.name]] = 1.0
        mixes[d.name] = DiffArray(values, dtype=dtype)
    return mixes

