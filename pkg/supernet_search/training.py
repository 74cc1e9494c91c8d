# supernet_search/training.py
"""
Datasets, batching, losses and the plain (single-model) training loop.

Image tasks feed [N, C, H, W] float inputs with [N] labels; text tasks feed
[N, T] token ids with [N, T] next-token labels. Metrics are accuracies
(per image or per token), so higher is better everywhere.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import trange

from supernet_search.autodiff import DiffArray, Tape, backward, cross_entropy, no_grad, reshape
from supernet_search.config import OptimizerConfig
from supernet_search.errors import ConfigurationError, ConsistencyError, DivergenceError
from supernet_search.optim import cosine_learning_rate, make_optimizer
from supernet_search.search_space import Architecture, Supernet

logger = logging.getLogger(__name__)


@dataclass
class ArrayDataset:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels)
        if len(self.inputs) != len(self.labels):
            raise ConsistencyError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int]) -> "ArrayDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ArrayDataset(self.inputs[indices], self.labels[indices])


Splits = Tuple[ArrayDataset, ArrayDataset]


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    count: int

    @property
    def perplexity(self) -> float:
        return math.exp(self.loss)


def split_dataset(dataset: ArrayDataset, fraction: float, seed: int = 0) -> Splits:
    """
    Disjoint, seed-deterministic (train, val) split.

    Raises:
        ConfigurationError: fraction outside (0, 1) or either side empty
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"Split fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(fraction * len(dataset)))
    if cut == 0 or cut == len(dataset):
        raise ConfigurationError(
            f"Fraction {fraction} of {len(dataset)} samples leaves an empty split"
        )
    return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))


def resolve_splits(data: Union[ArrayDataset, Splits], fraction: float, seed: int) -> Splits:
    if isinstance(data, ArrayDataset):
        return split_dataset(data, fraction, seed)
    train, val = data
    return train, val


def batches(dataset: ArrayDataset, batch_size: int,
            rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Minibatches in storage order, or shuffled when `rng` is given. The last
    batch may be short.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]


def loss_fn(logits: DiffArray, labels: np.ndarray) -> DiffArray:
    """Mean cross-entropy; [B, T, V] logits are flattened to token rows."""
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = reshape(logits, (logits.shape[0] * logits.shape[1], logits.shape[2]))
        labels = labels.reshape(-1)
    return cross_entropy(logits, labels)


def correct_count(logits: np.ndarray, labels: np.ndarray) -> int:
    predicted = np.argmax(logits, axis=-1)
    return int(np.sum(predicted == np.asarray(labels)))


def ensure_finite(loss: DiffArray, record: Dict[str, Any]) -> float:
    value = float(np.asarray(loss.values).reshape(-1)[0])
    if not np.isfinite(value):
        record = dict(record, loss=repr(value))
        raise DivergenceError(f"Non-finite loss {value} ({record})", record=record)
    return value


def evaluate(
    forward: Callable[[np.ndarray], DiffArray], dataset: ArrayDataset, batch_size: int = 256
) -> EvalResult:
    """Loss and accuracy over the whole dataset, in storage order."""
    total_loss, correct, count = 0.0, 0, 0
    with no_grad():
        for x, y in batches(dataset, batch_size):
            logits = forward(x)
            rows = int(np.asarray(y).size)
            total_loss += float(loss_fn(logits, y).values) * rows
            correct += correct_count(logits.values, y)
            count += rows
    if count == 0:
        raise ConfigurationError("Cannot evaluate on an empty dataset")
    return EvalResult(loss=total_loss / count, accuracy=correct / count, count=count)


def evaluate_inherited(
    supernet: Supernet, arch: Architecture, data: ArrayDataset, batch_size: int = 256
) -> float:
    """Accuracy of the architecture's inherited (sliced, untrained) weights."""
    model = supernet.inherit(arch)
    return evaluate(model.forward, data, batch_size).accuracy


def train_epochs(
    forward: Callable[[np.ndarray], DiffArray],
    params: List[DiffArray],
    data: ArrayDataset,
    epochs: int,
    optimizer_config: OptimizerConfig,
    batch_size: int = 64,
    seed: int = 0,
    progress: bool = False,
    label: str = "train",
) -> List[float]:
    """
    Plain minibatch training with a cosine learning-rate schedule.

    Returns:
        Mean training loss per epoch

    Raises:
        DivergenceError: a batch loss was not finite
    """
    optimizer = make_optimizer(params, optimizer_config)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in trange(epochs, disable=not progress, desc=label):
        optimizer.set_lr(
            cosine_learning_rate(optimizer_config.lr, optimizer_config.min_lr, epoch, epochs)
        )
        losses = []
        for step, (x, y) in enumerate(batches(data, batch_size, rng)):
            with Tape() as tape:
                loss = loss_fn(forward(x), y)
            losses.append(ensure_finite(loss, {"phase": label, "epoch": epoch, "batch": step}))
            backward(loss, tape)
            optimizer.step()
        history.append(float(np.mean(losses)) if losses else float("nan"))
        logger.debug("%s epoch %d: loss %.4f", label, epoch, history[-1])
    return history


def retrain(
    factory: Callable[[int], Supernet],
    arch: Architecture,
    train: ArrayDataset,
    test: ArrayDataset,
    epochs: int,
    seed: int = 0,
    optimizer_config: Optional[OptimizerConfig] = None,
    batch_size: int = 64,
    progress: bool = False,
) -> float:
    """
    Train the architecture from a fresh random initialisation and score it on `test`.

    `factory(seed)` builds a freshly initialised supernet; the architecture's
    slices of it are the starting weights.
    """
    model = factory(seed).inherit(arch)
    train_epochs(
        model.forward,
        model.parameters(),
        train,
        epochs,
        optimizer_config or OptimizerConfig(),
        batch_size=batch_size,
        seed=seed,
        progress=progress,
        label="retrain",
    )
    return evaluate(model.forward, test).accuracy
