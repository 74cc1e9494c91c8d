# supernet_search/samplers.py
"""
Maps architecture parameters to simplex mixture weights.

Three strategies share one interface:
    softmax    deterministic softmax(alpha / tau)
    gumbel_st  one-hot forward at argmax(alpha + Gumbel noise), softmax gradient
    dirichlet  Dirichlet(softplus(alpha) + eps) draw with pathwise Gamma gradients
"""
import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from supernet_search.autodiff import (
    DiffArray,
    Function,
    add,
    div,
    mul,
    reduce_sum,
    scale,
    softmax,
    softplus,
    straight_through,
)
from supernet_search.config import SamplerConfig
from supernet_search.errors import EvaluationError, PreconditionError
from supernet_search.superposition import ChoiceDim

logger = logging.getLogger(__name__)

ARCH_PREFIX = "arch/"


class ArchParams:
    """One learnable alpha vector per searchable dim, initialised at 1e-3 * N(0, 1)."""

    def __init__(self, dims: Sequence[ChoiceDim], seed: int = 0, init_scale: float = 1e-3):
        rng = np.random.default_rng(seed)
        self.dims: Dict[str, ChoiceDim] = {d.name: d for d in sorted(dims, key=lambda d: d.name)}
        self.alphas: Dict[str, DiffArray] = {
            name: DiffArray(init_scale * rng.standard_normal(dim.cardinality), requires_grad=True,
                            name=f"{ARCH_PREFIX}{name}")
            for name, dim in self.dims.items()
        }

    @property
    def names(self) -> List[str]:
        return list(self.alphas)

    def __getitem__(self, name: str) -> DiffArray:
        return self.alphas[name]

    def __len__(self) -> int:
        return len(self.alphas)

    def parameters(self) -> List[DiffArray]:
        return list(self.alphas.values())

    def snapshot(self) -> Dict[str, List[float]]:
        return {name: alpha.values.astype(float).tolist() for name, alpha in self.alphas.items()}

    def state_tensors(self) -> Dict[str, np.ndarray]:
        return {alpha.name: alpha.values.copy() for alpha in self.alphas.values()}

    def load_state_tensors(self, tensors: Mapping[str, np.ndarray]) -> None:
        for alpha in self.alphas.values():
            if alpha.name in tensors:
                alpha.values[...] = tensors[alpha.name]


def sample_softmax(alpha: DiffArray, tau: float = 1.0) -> DiffArray:
    if not np.all(np.isfinite(alpha.values)):
        raise EvaluationError(f"Non-finite architecture parameters {alpha.values}")
    return softmax(scale(alpha, 1.0 / tau))


def sample_gumbel_st(alpha: DiffArray, tau: float, rng: np.random.Generator) -> DiffArray:
    """Hard one-hot forward; backward as softmax((alpha + g) / tau). Ties go to the lowest index."""
    if tau <= 0:
        raise PreconditionError(f"Temperature must be > 0, got {tau}")
    noise = rng.gumbel(size=alpha.shape)
    perturbed = alpha.values + noise
    hard = np.zeros(alpha.shape, dtype=alpha.dtype)
    hard[int(np.argmax(perturbed))] = 1.0
    soft = softmax(scale(add(alpha, noise.astype(alpha.dtype)), 1.0 / tau))
    return straight_through(soft, hard)


def _accepted_normals(d: np.ndarray, c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Marsaglia-Tsang acceptance loop for shape >= 1; returns the accepted normal draws."""
    flat_d, flat_c = d.reshape(-1), c.reshape(-1)
    eps = np.empty_like(flat_d)
    pending = np.ones(flat_d.shape, dtype=bool)
    while pending.any():
        idx = np.flatnonzero(pending)
        x = rng.standard_normal(idx.size)
        u = rng.random(idx.size)
        v = (1.0 + flat_c[idx] * x) ** 3
        positive = v > 0
        safe_v = np.where(positive, v, 1.0)
        d_idx = flat_d[idx]
        accept = positive & (
            np.log1p(-u) < 0.5 * x * x + d_idx - d_idx * safe_v + d_idx * np.log(safe_v)
        )
        eps[idx[accept]] = x[accept]
        pending[idx[accept]] = False
    return eps.reshape(d.shape)


class GammaSample(Function):
    """
    Gamma(concentration, 1) draw with a pathwise gradient.

    Shape augmentation: G(a) = G(a + 1) * U^(1/a), with G(a + 1) from the
    Marsaglia-Tsang transform d * (1 + eps / (3 sqrt(d)))^3 of an accepted normal.
    """

    name = "gamma_sample"

    def forward(self, concentration, rng=None):
        a = concentration.astype(np.float64)
        d = a + 1.0 - 1.0 / 3.0
        root = np.sqrt(d)
        eps = _accepted_normals(d, 1.0 / (3.0 * root), rng)
        s = eps / (3.0 * root)
        boosted = d * (1.0 + s) ** 3
        u = 1.0 - rng.random(a.shape)
        shrink = u ** (1.0 / a)
        tiny = np.finfo(concentration.dtype).tiny
        z = np.maximum(boosted * shrink, tiny)
        d_boosted = (1.0 + s) ** 2 * (1.0 - 0.5 * s)
        self.dz = d_boosted * shrink - z * np.log(u) / (a * a)
        return z.astype(concentration.dtype)

    def backward(self, grad):
        return (grad * self.dz,)


def sample_dirichlet(
    alpha: DiffArray, rng: np.random.Generator, epsilon: float = 1e-3
) -> DiffArray:
    if epsilon <= 0:
        raise PreconditionError(f"dirichlet epsilon must be > 0, got {epsilon}")
    concentration = add(softplus(alpha), epsilon)
    gammas = GammaSample.apply(concentration, rng=rng)
    return div(gammas, reduce_sum(gammas))


def anneal_step(config: SamplerConfig, step: int) -> float:
    """Temperature at `step`, clamped to the schedule's endpoints."""
    if step < 0:
        raise PreconditionError(f"step must be >= 0, got {step}")
    start, end = config.tau, config.tau_end
    if config.anneal == "none":
        return start
    progress = 1.0 if config.anneal_steps == 0 else min(step / config.anneal_steps, 1.0)
    if config.anneal == "linear":
        tau = start + (end - start) * progress
    else:
        tau = start * math.exp(math.log(end / start) * progress)
    return min(max(tau, min(start, end)), max(start, end))


def anchor_regularizer(alphas: Union[DiffArray, Sequence[DiffArray]], scale_: float) -> DiffArray:
    """scale * ||alpha||^2 summed over every vector given."""
    if scale_ < 0:
        raise PreconditionError(f"Regularization scale must be >= 0, got {scale_}")
    if isinstance(alphas, DiffArray):
        alphas = [alphas]
    total = None
    for alpha in alphas:
        part = reduce_sum(mul(alpha, alpha))
        total = part if total is None else add(total, part)
    return scale(total, scale_)


class Sampler:
    """Draws one mixture per dim from ArchParams according to a SamplerConfig."""

    def __init__(self, config: SamplerConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.step = 0

    @property
    def tau(self) -> float:
        return anneal_step(self.config, self.step)

    def spawn(self, count: int) -> List["Sampler"]:
        """Independent samplers for parallel workers."""
        seeds = np.random.SeedSequence(self.config.seed).spawn(count)
        return [Sampler(self.config, np.random.default_rng(s)) for s in seeds]

    def sample(self, arch_params: ArchParams) -> Dict[str, DiffArray]:
        tau = self.tau
        strategy = self.config.strategy
        mixes = {}
        for name in arch_params.names:
            alpha = arch_params[name]
            if strategy == "softmax":
                mixes[name] = sample_softmax(alpha, tau)
            elif strategy == "gumbel_st":
                mixes[name] = sample_gumbel_st(alpha, tau, self.rng)
            else:
                mixes[name] = sample_dirichlet(alpha, self.rng, self.config.dirichlet_epsilon)
        self.step += 1
        return mixes

    def regularizer(self, arch_params: ArchParams) -> Optional[DiffArray]:
        if self.config.regularization == "none" or self.config.reg_scale == 0:
            return None
        return anchor_regularizer(arch_params.parameters(), self.config.reg_scale)
