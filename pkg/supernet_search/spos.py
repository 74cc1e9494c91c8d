# supernet_search/spos.py
"""
Single-path supernet training: one uniformly sampled architecture per batch,
slice-local updates.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from tqdm import trange

from supernet_search.autodiff import Tape, backward
from supernet_search.config import SposConfig
from supernet_search.optim import Optimizer, cosine_learning_rate, make_optimizer
from supernet_search.search_space import Architecture, Supernet
from supernet_search.training import (
    ArrayDataset,
    Splits,
    batches,
    ensure_finite,
    loss_fn,
    resolve_splits,
)

logger = logging.getLogger(__name__)


@dataclass
class SposOutcome:
    supernet: Supernet
    epoch_losses: List[float] = field(default_factory=list)
    val: Optional[ArrayDataset] = None


def spos_step(
    supernet: Supernet, optimizer: Optimizer, x, y, arch: Architecture, where=None
) -> float:
    """One path update; only the active slices of the sampled architecture move."""
    with Tape() as tape:
        loss = loss_fn(supernet.forward_path(x, arch), y)
    value = ensure_finite(loss, dict(where or {}, phase="spos", architecture=arch.to_text()))
    backward(loss, tape)
    optimizer.step(masks=supernet.path_masks(arch))
    return value


def train_spos(supernet: Supernet, data: Union[ArrayDataset, Splits], config: SposConfig,
               run_id: str = "spos") -> SposOutcome:
    """
    Args:
        supernet: Supernet to train (normally WE)
        data: Full dataset (split by config.train_fraction) or a (train, val) pair;
            only the train side is used here, val is handed back for the post-hoc search

    Raises:
        DivergenceError: a batch loss was not finite
    """
    train, val = resolve_splits(data, config.train_fraction, config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(supernet.parameters(), config.weights)
    outcome = SposOutcome(supernet, val=val)
    for epoch in trange(config.epochs, disable=not config.progress, desc=f"spos {run_id}"):
        optimizer.set_lr(
            cosine_learning_rate(config.weights.lr, config.weights.min_lr, epoch, config.epochs)
        )
        losses = []
        for step, (x, y) in enumerate(batches(train, config.batch_size, rng)):
            arch = supernet.spec.sample(rng)
            where = {"run_id": run_id, "epoch": epoch, "batch": step}
            losses.append(spos_step(supernet, optimizer, x, y, arch, where))
        outcome.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        logger.info(
            "SPOS epoch %d/%d: loss %.4f", epoch + 1, config.epochs, outcome.epoch_losses[-1]
        )
    return outcome
