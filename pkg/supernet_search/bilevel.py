# supernet_search/bilevel.py
"""
Single-stage search: alternate, batch by batch,

    architecture step   sample mixtures, val loss (+ anchor regularizer), update alphas only
    weight step         re-sample mixtures, train loss, update supernet weights only

Each epoch ends by discretizing the alphas and scoring that architecture with
inherited weights, which gives the anytime curve; alpha snapshots form the
trajectory.
"""
import hashlib
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import trange

from supernet_search.autodiff import DiffArray, Tape, add, backward
from supernet_search.config import BilevelConfig
from supernet_search.errors import ConsistencyError
from supernet_search.optim import cosine_learning_rate, make_optimizer
from supernet_search.results import (
    RESULTS_FILE,
    TRAJECTORY_FILE,
    ResultRecord,
    append_jsonl,
    append_records,
)
from supernet_search.samplers import ArchParams, Sampler
from supernet_search.search_space import Architecture, Supernet, discretize
from supernet_search.training import (
    ArrayDataset,
    Splits,
    batches,
    ensure_finite,
    evaluate,
    loss_fn,
    resolve_splits,
)

logger = logging.getLogger(__name__)


@dataclass
class SearchOutcome:
    supernet: Supernet
    arch_params: ArchParams
    architecture: Architecture
    records: List[ResultRecord] = field(default_factory=list)
    trajectory: List[Dict[str, Any]] = field(default_factory=list)


def checksum(params: Sequence[DiffArray]) -> str:
    digest = hashlib.sha256()
    for p in params:
        digest.update(np.ascontiguousarray(p.values).tobytes())
    return digest.hexdigest()


@contextmanager
def frozen(params: Sequence[DiffArray]) -> Iterator[None]:
    """Exclude parameters from the tape while the block runs."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def _cycle(
    dataset: ArrayDataset, batch_size: int, rng: np.random.Generator
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    while True:
        yield from batches(dataset, batch_size, rng)


def _phase_loss(
    supernet: Supernet, sampler: Sampler, arch_params: ArchParams, x, y, regularize: bool
):
    with Tape() as tape:
        mixes = sampler.sample(arch_params)
        loss = loss_fn(supernet.forward_mixture(x, mixes), y)
        total = loss
        if regularize:
            penalty = sampler.regularizer(arch_params)
            if penalty is not None:
                total = add(loss, penalty)
    return tape, loss, total


def train_bilevel(
    supernet: Supernet,
    sampler: Optional[Sampler],
    data: Union[ArrayDataset, Splits],
    config: BilevelConfig,
    arch_params: Optional[ArchParams] = None,
    test: Optional[ArrayDataset] = None,
    run_id: str = "bilevel",
    method: str = "tanglenas-drnas",
    out_dir: Optional[Union[str, Path]] = None,
) -> SearchOutcome:
    """
    Args:
        supernet: WE supernet (or WS for the baseline)
        sampler: Mixture sampler; built from config.sampler when None
        data: Full dataset (split by config.train_fraction) or a (train, val) pair
        config: Epochs, batch size, both optimizers, seed
        arch_params: Starting alphas; seeded from config.seed when None
        test: Optional held-out set scored for every epoch's architecture
        out_dir: When given, records and trajectory rows are appended as they are produced

    Raises:
        DivergenceError: a loss became non-finite (the error carries the diagnostic record)
        ConsistencyError: check_phases found a phase writing the wrong parameters
    """
    train, val = resolve_splits(data, config.train_fraction, config.seed)
    sampler = sampler or Sampler(config.sampler)
    arch_params = arch_params or supernet.arch_params(config.seed)
    weights = supernet.parameters()
    alphas = arch_params.parameters()
    weight_opt = make_optimizer(weights, config.weights)
    arch_opt = make_optimizer(alphas, config.arch)
    rng = np.random.default_rng(config.seed)
    val_stream = _cycle(val, config.batch_size, rng)

    outcome = SearchOutcome(supernet, arch_params, discretize(arch_params, supernet.spec))
    started = time.perf_counter()
    for epoch in trange(config.epochs, disable=not config.progress, desc=f"search {run_id}"):
        weight_opt.set_lr(
            cosine_learning_rate(config.weights.lr, config.weights.min_lr, epoch, config.epochs)
        )
        arch_opt.set_lr(
            cosine_learning_rate(config.arch.lr, config.arch.min_lr, epoch, config.epochs)
        )
        train_losses = []
        for step, (x_train, y_train) in enumerate(batches(train, config.batch_size, rng)):
            where = {"run_id": run_id, "epoch": epoch, "batch": step}
            x_val, y_val = next(val_stream)

            before = checksum(weights) if config.check_phases else None
            with frozen(weights):
                tape, _, total = _phase_loss(
                    supernet, sampler, arch_params, x_val, y_val, regularize=True
                )
            ensure_finite(total, dict(where, phase="architecture"))
            backward(total, tape)
            arch_opt.step()
            if config.check_phases and checksum(weights) != before:
                raise ConsistencyError(f"Architecture step changed supernet weights ({where})")

            before = checksum(alphas) if config.check_phases else None
            with frozen(alphas):
                tape, loss, _ = _phase_loss(
                    supernet, sampler, arch_params, x_train, y_train, regularize=False
                )
            train_losses.append(ensure_finite(loss, dict(where, phase="weights")))
            backward(loss, tape)
            weight_opt.step()
            if config.check_phases and checksum(alphas) != before:
                raise ConsistencyError(f"Weight step changed architecture parameters ({where})")

        arch = discretize(arch_params, supernet.spec)
        model = supernet.inherit(arch)
        val_metric = evaluate(model.forward, val).accuracy
        test_metric = evaluate(model.forward, test).accuracy if test is not None else None
        record = ResultRecord(
            run_id=run_id,
            method=method,
            space=supernet.spec.space_id,
            architecture=arch.to_text(),
            seed=config.seed,
            val_metric=val_metric,
            test_metric=test_metric,
            epoch=epoch + 1,
            wall_seconds=time.perf_counter() - started,
            param_count=supernet.path_param_count(arch),
            supernet_mode=supernet.mode,
        )
        row = {"run_id": run_id, "epoch": epoch + 1, "alphas": arch_params.snapshot()}
        outcome.records.append(record)
        outcome.trajectory.append(row)
        outcome.architecture = arch
        if out_dir is not None:
            append_records(Path(out_dir) / RESULTS_FILE, [record])
            append_jsonl(Path(out_dir) / TRAJECTORY_FILE, [row])
        mean_loss = float(np.mean(train_losses)) if train_losses else float("nan")
        logger.info(
            "Epoch %d/%d: train loss %.4f, val acc %.4f, arch %s",
            epoch + 1, config.epochs, mean_loss, val_metric, arch.to_text(),
        )
    return outcome
