# supernet_search/optim.py
"""Optimizers (SGD with Nesterov momentum, AdamW), masked updates and the cosine schedule."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from supernet_search.autodiff import DiffArray
from supernet_search.errors import ConfigurationError, NotReadyError

logger = logging.getLogger(__name__)


@dataclass
class OptimState:
    """Hyperparameters plus per-parameter buffers for one optimizer."""

    kind: str = "sgd"
    lr: float = 0.1
    weight_decay: float = 0.0
    momentum: float = 0.0
    nesterov: bool = False
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ConfigurationError(f"Unknown optimizer kind {self.kind!r}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError(
                f"Learning rate {self.lr} and weight decay {self.weight_decay} must be >= 0"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"Momentum {self.momentum} outside [0, 1)")

    def buffers_for(self, param: DiffArray) -> Dict[str, np.ndarray]:
        return self.buffers.setdefault(id(param), {})


def _label(param: DiffArray) -> str:
    return param.name or f"parameter{param.shape}"


def _apply(param: DiffArray, update: np.ndarray, lr: float, mask: Optional[np.ndarray]) -> None:
    if mask is None:
        param.values -= lr * update
    else:
        param.values[mask] -= lr * update[mask]


def sgd_step(param: DiffArray, state: OptimState, mask: Optional[np.ndarray] = None) -> None:
    """
    SGD with optional (Nesterov) momentum and coupled weight decay.

    With a mask, only the selected entries (and their momentum buffer) change.
    """
    if param.adjoint is None:
        raise NotReadyError(f"{_label(param)} has no adjoint; run backward first")
    grad = param.adjoint
    if state.weight_decay:
        grad = grad + state.weight_decay * param.values

    if state.momentum:
        buffers = state.buffers_for(param)
        previous = buffers.get("momentum")
        if previous is None:
            buf = grad.copy() if mask is None else np.where(mask, grad, 0.0).astype(grad.dtype)
        else:
            fresh = state.momentum * previous + grad
            buf = fresh if mask is None else np.where(mask, fresh, previous)
        buffers["momentum"] = buf
        update = grad + state.momentum * buf if state.nesterov else buf
    else:
        update = grad

    _apply(param, update, state.lr, mask)
    param.adjoint = None


def adamw_step(param: DiffArray, state: OptimState, mask: Optional[np.ndarray] = None) -> None:
    """Adam moments with decoupled weight decay (bias-corrected per parameter)."""
    if param.adjoint is None:
        raise NotReadyError(f"{_label(param)} has no adjoint; run backward first")
    grad = param.adjoint
    beta1, beta2 = state.betas
    buffers = state.buffers_for(param)
    m = buffers.get("exp_avg", np.zeros_like(param.values))
    v = buffers.get("exp_avg_sq", np.zeros_like(param.values))
    t = int(buffers.get("step", np.zeros(())).item()) + 1

    m_new = beta1 * m + (1.0 - beta1) * grad
    v_new = beta2 * v + (1.0 - beta2) * grad * grad
    if mask is not None:
        m_new = np.where(mask, m_new, m)
        v_new = np.where(mask, v_new, v)
    buffers["exp_avg"], buffers["exp_avg_sq"], buffers["step"] = m_new, v_new, np.asarray(t)

    m_hat = m_new / (1.0 - beta1**t)
    v_hat = v_new / (1.0 - beta2**t)
    update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * param.values
    _apply(param, update, state.lr, mask)
    param.adjoint = None


class Optimizer:
    """Applies one update rule to a list of parameters."""

    def __init__(self, params: Sequence[DiffArray], state: OptimState):
        self.params = list(params)
        self.state = state
        self._rule = sgd_step if state.kind == "sgd" else adamw_step

    @property
    def lr(self) -> float:
        return self.state.lr

    def set_lr(self, lr: float) -> None:
        self.state.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.adjoint = None

    def step(self, masks: Optional[Mapping[str, np.ndarray]] = None) -> int:
        """
        Update every parameter holding an adjoint; returns how many were updated.

        Parameters without an adjoint were not on the loss path and are skipped.
        `masks` maps parameter names to boolean masks restricting the update.
        """
        updated = 0
        for p in self.params:
            if p.adjoint is None:
                continue
            mask = masks.get(p.name) if masks is not None and p.name is not None else None
            self._rule(p, self.state, mask)
            updated += 1
        self.state.step += 1
        return updated


def cosine_learning_rate(base: float, minimum: float, epoch: int, epochs: int) -> float:
    """Cosine decay from `base` at epoch 0 to `minimum` at `epochs`."""
    if epochs <= 0:
        return base
    progress = min(max(epoch, 0), epochs) / epochs
    return minimum + 0.5 * (base - minimum) * (1.0 + math.cos(math.pi * progress))


def make_optimizer(params: Sequence[DiffArray], config) -> Optimizer:
    """Build an Optimizer from an OptimizerConfig."""
    state = OptimState(
        kind=config.kind,
        lr=config.lr,
        weight_decay=config.weight_decay,
        momentum=config.momentum if config.kind == "sgd" else 0.0,
        nesterov=config.nesterov,
        betas=tuple(config.betas),
    )
    logger.debug("Optimizer %s lr=%g over %d tensors", config.kind, config.lr, len(params))
    return Optimizer(params, state)
