# supernet_search/posthoc_search.py
"""
Black-box search over a trained (frozen) supernet.

Candidates are scored by an evaluator: inherited weights on a validation set,
or a lookup in a precomputed benchmark table. Scores are cached by the
architecture's canonical text, so repeated candidates cost nothing and count
once against an evaluation budget. Winners are the highest score, ties going
to the lexicographically smallest text, so results do not depend on the order
workers finish in.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from supernet_search.config import EvolutionConfig
from supernet_search.errors import ConfigurationError, EvaluationError, PreconditionError
from supernet_search.results import ResultRecord
from supernet_search.search_space import Architecture, SearchSpaceSpec, Supernet
from supernet_search.training import ArrayDataset, evaluate_inherited

logger = logging.getLogger(__name__)

RANDOM_SEARCH_METHOD = "random-search"
EVOLUTION_METHOD = "evolution"
POSTHOC_METHODS = (RANDOM_SEARCH_METHOD, EVOLUTION_METHOD)

Evaluator = Callable[[Architecture], float]


class InheritedEvaluator:
    """Validation accuracy of the architecture's sliced supernet weights."""

    def __init__(self, supernet: Supernet, data: ArrayDataset, batch_size: int = 256):
        self.supernet = supernet
        self.data = data
        self.batch_size = batch_size

    def __call__(self, arch: Architecture) -> float:
        return evaluate_inherited(self.supernet, arch, self.data, self.batch_size)


class TableEvaluator:
    """Looks scores up by architecture text in a mapping or in anything with `lookup(arch)`."""

    def __init__(self, table: Any):
        self.table = table

    def __call__(self, arch: Architecture) -> float:
        if hasattr(self.table, "lookup"):
            return float(self.table.lookup(arch))
        text = arch.to_text()
        if text not in self.table:
            raise EvaluationError(f"No table entry for architecture {text}")
        return float(self.table[text])


class EvaluationCache:
    def __init__(self, evaluator: Evaluator, workers: int = 1):
        self.evaluator = evaluator
        self.workers = workers
        self.scores: Dict[str, float] = {}
        self.order: List[Architecture] = []

    def __len__(self) -> int:
        return len(self.scores)

    def evaluate(
        self, archs: Sequence[Architecture], limit: Optional[int] = None
    ) -> List[Optional[float]]:
        """
        Scores for `archs`, evaluating unseen ones (in first-seen order) until
        `limit` distinct evaluations exist. Candidates left unevaluated get None.
        """
        pending: List[Architecture] = []
        seen = set(self.scores)
        for arch in archs:
            text = arch.to_text()
            if text in seen:
                continue
            if limit is not None and len(self.scores) + len(pending) >= limit:
                break
            seen.add(text)
            pending.append(arch)
        if self.workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                values = list(pool.map(self.evaluator, pending))
        else:
            values = [self.evaluator(arch) for arch in pending]
        for arch, value in zip(pending, values):
            if not np.isfinite(value):
                raise EvaluationError(f"Evaluator returned {value} for {arch.to_text()}")
            self.scores[arch.to_text()] = float(value)
            self.order.append(arch)
        return [self.scores.get(arch.to_text()) for arch in archs]

    def best(self) -> Tuple[Architecture, float]:
        arch = min(self.order, key=lambda a: (-self.scores[a.to_text()], a.to_text()))
        return arch, self.scores[arch.to_text()]


@dataclass
class SearchResult:
    best: Architecture
    best_metric: float
    evaluations: int
    history: List[float] = field(default_factory=list)
    records: List[ResultRecord] = field(default_factory=list)


def _space_of(
    space: Union[Supernet, SearchSpaceSpec]
) -> Tuple[SearchSpaceSpec, Optional[Supernet]]:
    if isinstance(space, Supernet):
        return space.spec, space
    return space, None


def _make_evaluator(
    supernet: Optional[Supernet], val: Optional[ArrayDataset], evaluator: Optional[Evaluator]
):
    if evaluator is not None:
        return evaluator
    if supernet is None or val is None:
        raise ConfigurationError(
            "Provide an evaluator, or a supernet together with validation data"
        )
    return InheritedEvaluator(supernet, val)


def sample_architectures(
    spec: SearchSpaceSpec, count: int, rng: np.random.Generator
) -> List[Architecture]:
    return [spec.sample(rng) for _ in range(count)]


def _finish(
    cache: EvaluationCache,
    spec: SearchSpaceSpec,
    supernet: Optional[Supernet],
    run_id: str,
    method: str,
    seed: int,
    started: float,
) -> SearchResult:
    best, metric = cache.best()
    history, running = [], -np.inf
    records = []
    for index, arch in enumerate(cache.order, 1):
        score = cache.scores[arch.to_text()]
        running = max(running, score)
        history.append(running)
        records.append(ResultRecord(
            run_id=run_id,
            method=method,
            space=spec.space_id,
            architecture=arch.to_text(),
            seed=seed,
            val_metric=score,
            test_metric=None,
            epoch=index,
            wall_seconds=time.perf_counter() - started,
            param_count=supernet.path_param_count(arch) if supernet is not None else None,
            supernet_mode=supernet.mode if supernet is not None else "none",
        ))
    logger.info(
        "%s: best %s (%.4f) after %d evaluations", method, best.to_text(), metric, len(cache)
    )
    return SearchResult(best, metric, len(cache), history, records)


def random_search(
    space: Union[Supernet, SearchSpaceSpec],
    val: Optional[ArrayDataset],
    num_samples: int,
    seed: int = 0,
    evaluator: Optional[Evaluator] = None,
    workers: int = 1,
    run_id: str = RANDOM_SEARCH_METHOD,
) -> SearchResult:
    """
    Score `num_samples` uniform draws and return the best.

    Raises:
        PreconditionError: num_samples < 1
    """
    if num_samples < 1:
        raise PreconditionError(f"num_samples must be >= 1, got {num_samples}")
    spec, supernet = _space_of(space)
    cache = EvaluationCache(_make_evaluator(supernet, val, evaluator), workers)
    started = time.perf_counter()
    cache.evaluate(sample_architectures(spec, num_samples, np.random.default_rng(seed)))
    return _finish(cache, spec, supernet, run_id, RANDOM_SEARCH_METHOD, seed, started)


def _offspring(spec: SearchSpaceSpec, parents: List[Architecture], config: EvolutionConfig,
               rng: np.random.Generator) -> Architecture:
    first = parents[int(rng.integers(len(parents)))]
    if rng.random() < config.crossover_prob:
        second = parents[int(rng.integers(len(parents)))]
        assignment = {d.name: (first if rng.random() < 0.5 else second)[d.name] for d in spec.dims}
    else:
        assignment = first.as_dict()
    for d in spec.dims:
        if rng.random() < config.mutation_prob:
            assignment[d.name] = int(rng.integers(d.cardinality))
    return Architecture.from_mapping(assignment)


def evolutionary_search(
    space: Union[Supernet, SearchSpaceSpec],
    val: Optional[ArrayDataset],
    config: EvolutionConfig,
    evaluator: Optional[Evaluator] = None,
    run_id: str = EVOLUTION_METHOD,
) -> SearchResult:
    """
    Uniform initial population, then per generation: keep the top parent
    fraction, breed children by uniform crossover and per-dim mutation, carry
    the best `elitism` members over unchanged.

    With generations=0 this is random_search over `population` samples.
    """
    spec, supernet = _space_of(space)
    cache = EvaluationCache(_make_evaluator(supernet, val, evaluator), config.workers)
    rng = np.random.default_rng(config.seed)
    started = time.perf_counter()
    limit = config.max_evaluations

    population = sample_architectures(spec, config.population, rng)
    cache.evaluate(population, limit)
    n_parents = max(1, int(config.parent_fraction * config.population))
    generations = tqdm(
        range(config.generations), disable=not config.progress, desc=f"evolve {run_id}"
    )
    for generation in generations:
        if limit is not None and len(cache) >= limit:
            logger.info("Evaluation budget %d reached at generation %d", limit, generation)
            break
        scored = [a for a in population if a.to_text() in cache.scores]
        ranked = sorted(scored, key=lambda a: (-cache.scores[a.to_text()], a.to_text()))
        parents = ranked[:n_parents]
        children = ranked[:config.elitism]
        while len(children) < config.population:
            children.append(_offspring(spec, parents, config, rng))
        population = children
        cache.evaluate(population, limit)
        logger.debug("Generation %d: best %.4f", generation + 1, cache.best()[1])
    return _finish(cache, spec, supernet, run_id, EVOLUTION_METHOD, config.seed, started)
