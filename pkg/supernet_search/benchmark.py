# supernet_search/benchmark.py
"""
Tabular benchmarks: train architectures of a small space from scratch and keep
one row per (architecture, seed).

Rows are appended to `results.jsonl` as each training finishes; a rerun with
`resume=True` skips the pairs already present, provided the manifest's config
hash matches the current settings.
"""
import dataclasses
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Set, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from supernet_search.config import BenchmarkConfig
from supernet_search.errors import (
    ConfigurationError,
    ConsistencyError,
    EvaluationError,
    MixedSpaceError,
    ResumeMismatchError,
)
from supernet_search.results import (
    RESULTS_FILE,
    ResultRecord,
    append_records,
    read_manifest,
    read_records,
    stable_hash,
    write_manifest,
)
from supernet_search.search_space import Architecture, SearchSpaceSpec, Supernet
from supernet_search.spaces import build_space
from supernet_search.training import ArrayDataset, evaluate, train_epochs

logger = logging.getLogger(__name__)

BENCHMARK_METHOD = "benchmark"
COLUMNS = ["architecture", "seed", "val_metric", "test_metric", "train_seconds", "param_count"]

BenchmarkData = Tuple[ArrayDataset, ArrayDataset, Optional[ArrayDataset]]


class BenchmarkTable:
    """Per-(architecture, seed) metrics for one space, backed by a pandas frame."""

    def __init__(self, space_id: str, frame: pd.DataFrame):
        duplicated = frame.duplicated(subset=["architecture", "seed"], keep=False)
        if duplicated.any():
            pairs = frame.loc[duplicated, ["architecture", "seed"]].drop_duplicates()
            raise ConsistencyError(
                f"{len(pairs)} duplicate (architecture, seed) rows, e.g. {pairs.iloc[0].tolist()}"
            )
        self.space_id = space_id
        self.frame = frame.reset_index(drop=True)
        self._means = self.frame.groupby("architecture")["val_metric"].mean().to_dict()

    @classmethod
    def from_records(
        cls, records: Iterable[ResultRecord], space_id: Optional[str] = None
    ) -> "BenchmarkTable":
        """
        Raises:
            MixedSpaceError: records from more than one space
            ConsistencyError: a repeated (architecture, seed) pair
        """
        rows = [r for r in records if r.method == BENCHMARK_METHOD]
        spaces = {r.space for r in rows} | ({space_id} if space_id else set())
        if len(spaces) > 1:
            raise MixedSpaceError(f"Benchmark rows span several spaces: {sorted(spaces)}")
        frame = pd.DataFrame(
            [
                {
                    "architecture": r.architecture,
                    "seed": r.seed,
                    "val_metric": r.val_metric,
                    "test_metric": r.test_metric,
                    "train_seconds": r.wall_seconds,
                    "param_count": r.param_count,
                }
                for r in rows
            ],
            columns=COLUMNS,
        )
        return cls(space_id or (spaces.pop() if spaces else ""), frame)

    @classmethod
    def from_file(cls, path: Union[str, Path], space_id: Optional[str] = None) -> "BenchmarkTable":
        path = Path(path)
        if path.is_dir():
            path = path / RESULTS_FILE
        return cls.from_records(read_records(path), space_id)

    def __len__(self) -> int:
        return len(self.frame)

    def __contains__(self, arch: Architecture) -> bool:
        return arch.to_text() in self._means

    def lookup(self, arch: Architecture) -> float:
        """Validation metric averaged over the seeds trained for `arch`."""
        text = arch.to_text()
        if text not in self._means:
            raise EvaluationError(f"Architecture {text} is not in the {self.space_id} benchmark")
        return float(self._means[text])

    def means(self) -> pd.DataFrame:
        grouped = self.frame.groupby("architecture")
        return pd.DataFrame({
            "val_mean": grouped["val_metric"].mean(),
            "val_std": grouped["val_metric"].std(ddof=1),
            "test_mean": grouped["test_metric"].mean(),
            "seeds": grouped["seed"].count(),
        })

    def best(self) -> Tuple[Architecture, float]:
        if not self._means:
            raise EvaluationError(f"The {self.space_id} benchmark is empty")
        text = min(self._means, key=lambda t: (-self._means[t], t))
        return Architecture.parse(text), float(self._means[text])

    def is_complete(self, spec: SearchSpaceSpec, seeds: Iterable[int]) -> bool:
        """True when every architecture of `spec` has a row for every seed."""
        seeds = sorted(set(int(s) for s in seeds))
        if len(self.frame) < spec.cardinality * len(seeds):
            return False
        present = set(zip(self.frame["architecture"], self.frame["seed"].astype(int)))
        return all((arch.to_text(), seed) in present for arch in spec.enumerate() for seed in seeds)


def benchmark_settings(
    space_id: str, options: Mapping[str, Any], config: BenchmarkConfig
) -> Dict[str, Any]:
    """Everything that changes the table's values; worker count and progress bars do not."""
    settings = dataclasses.asdict(config)
    settings.pop("workers")
    settings.pop("progress")
    settings["seeds"] = list(config.seeds)
    return {"space": space_id, "options": dict(options), "benchmark": settings}


def select_architectures(
    spec: SearchSpaceSpec, config: BenchmarkConfig, seed: int = 0
) -> List[Architecture]:
    """
    The whole space when it fits the budget, else a distinct uniform sample of
    `sample_fraction` of it.

    Raises:
        ConfigurationError: space too large and no sampling fraction, or the
            sample exceeds the budget
    """
    total = spec.cardinality
    if total <= config.budget:
        return list(spec.enumerate())
    if config.sample_fraction is None:
        raise ConfigurationError(
            f"{spec.space_id} has {total} architectures, over the budget of {config.budget}; "
            "set sample_fraction"
        )
    count = max(1, int(math.ceil(config.sample_fraction * total)))
    if count > config.budget:
        raise ConfigurationError(
            f"Sampling {count} of {total} architectures exceeds the budget of {config.budget}"
        )
    rng = np.random.default_rng([seed, 17])
    chosen: Dict[str, Architecture] = {}
    while len(chosen) < count:
        arch = spec.sample(rng)
        chosen.setdefault(arch.to_text(), arch)
    return sorted(chosen.values())


def _check_resume(out_dir: Path, settings: Dict[str, Any], resume: bool) -> Set[Tuple[str, int]]:
    manifest = read_manifest(out_dir)
    results = out_dir / RESULTS_FILE
    if manifest is None:
        if results.exists() and results.stat().st_size > 0:
            raise ResumeMismatchError(
                f"{results} exists without a manifest; refusing to append to it"
            )
        return set()
    if not resume:
        raise ConfigurationError(
            f"{out_dir} already holds a benchmark; pass resume=True or pick another directory"
        )
    if manifest.get("config_hash") != stable_hash(settings):
        raise ResumeMismatchError(
            f"Benchmark settings differ from those recorded in {out_dir} "
            f"(hash {manifest.get('config_hash', '')[:12]} vs {stable_hash(settings)[:12]})"
        )
    done = {(r.architecture, r.seed) for r in read_records(results)} if results.exists() else set()
    logger.info("Resuming benchmark in %s: %d rows already present", out_dir, len(done))
    return done


def train_architecture(
    supernet: Supernet,
    arch: Architecture,
    data: BenchmarkData,
    config: BenchmarkConfig,
    seed: int,
) -> ResultRecord:
    """Train `arch` from the seed's initial weights and score it on val (and test)."""
    train, val, test = data
    started = time.perf_counter()
    model = supernet.inherit(arch)
    train_epochs(model.forward, model.parameters(), train, config.epochs, config.weights,
                 batch_size=config.batch_size, seed=seed, label="benchmark")
    return ResultRecord(
        run_id=f"{BENCHMARK_METHOD}-{supernet.spec.space_id}-s{seed}",
        method=BENCHMARK_METHOD,
        space=supernet.spec.space_id,
        architecture=arch.to_text(),
        seed=seed,
        val_metric=evaluate(model.forward, val).accuracy,
        test_metric=evaluate(model.forward, test).accuracy if test is not None else None,
        epoch=config.epochs,
        wall_seconds=time.perf_counter() - started,
        param_count=model.param_count(),
        supernet_mode="none",
    )


def enumerate_and_train(
    space_id: str,
    data: BenchmarkData,
    config: BenchmarkConfig,
    out_dir: Union[str, Path],
    options: Optional[Mapping[str, Any]] = None,
    resume: bool = False,
) -> BenchmarkTable:
    """
    Build (or extend) the benchmark table of a space.

    Args:
        space_id: Registered space id
        data: (train, val, test) datasets; test may be None
        config: Epochs, seeds, optimizer, budget, sampling fraction, workers
        out_dir: Directory receiving manifest.json and results.jsonl
        options: Space config overrides
        resume: Continue an interrupted run in out_dir

    Raises:
        ConfigurationError: space over budget without a sampling fraction, or
            out_dir in use without resume
        ResumeMismatchError: resuming with settings different from the recorded ones
    """
    options = dict(options or {})
    out_dir = Path(out_dir)
    settings = benchmark_settings(space_id, options, config)
    done = _check_resume(out_dir, settings, resume)

    supernets = {
        seed: build_space(space_id, mode="WE", seed=seed, **options) for seed in config.seeds
    }
    spec = supernets[config.seeds[0]].spec
    architectures = select_architectures(spec, config, config.seeds[0])
    if not done:
        write_manifest(out_dir, settings, config.seeds[0], space_id,
                       extra={"kind": BENCHMARK_METHOD, "architectures": len(architectures)})

    jobs = [
        (arch, seed)
        for arch in architectures
        for seed in config.seeds
        if (arch.to_text(), seed) not in done
    ]
    logger.info("Benchmark %s: %d architectures x %d seeds, %d trainings to run",
                space_id, len(architectures), len(config.seeds), len(jobs))
    results_path = out_dir / RESULTS_FILE
    lock = threading.Lock()

    def run(job: Tuple[Architecture, int]) -> None:
        arch, seed = job
        record = train_architecture(supernets[seed], arch, data, config, seed)
        with lock:
            append_records(results_path, [record])

    bar = tqdm(total=len(jobs), disable=not config.progress, desc=f"benchmark {space_id}")
    try:
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                for future in as_completed([pool.submit(run, job) for job in jobs]):
                    future.result()
                    bar.update(1)
        else:
            for job in jobs:
                run(job)
                bar.update(1)
    finally:
        bar.close()

    table = BenchmarkTable.from_file(results_path, space_id)
    if len(architectures) == spec.cardinality and table.is_complete(spec, config.seeds):
        logger.info("Benchmark %s complete: %d rows", space_id, len(table))
    return table
