# supernet_search/analysis.py
"""
Representation similarity (linear CKA) and memory accounting for supernets.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from supernet_search.autodiff import DiffArray, get_default_dtype, no_grad, trace_outputs
from supernet_search.errors import ConfigurationError, DimensionError, UndefinedSimilarityError
from supernet_search.search_space import Supernet
from supernet_search.spaces import build_space

logger = logging.getLogger(__name__)


def _centered(features: Any, label: str) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[0] < 2:
        raise UndefinedSimilarityError(f"CKA needs at least 2 samples, {label} has {x.shape[0]}")
    return x - x.mean(axis=0, keepdims=True)


def linear_cka(x: Any, y: Any) -> float:
    """
    Linear centered kernel alignment between two feature matrices over the same samples.

    Args:
        x: [n, d1] features (extra trailing axes are flattened)
        y: [n, d2] features

    Returns:
        ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F), in [0, 1]

    Raises:
        DimensionError: sample counts differ
        UndefinedSimilarityError: fewer than two samples, or an input with zero variance
    """
    xc, yc = _centered(x, "X"), _centered(y, "Y")
    if xc.shape[0] != yc.shape[0]:
        raise DimensionError(f"CKA inputs cover different samples: {xc.shape[0]} vs {yc.shape[0]}")
    self_x = np.linalg.norm(xc.T @ xc)
    self_y = np.linalg.norm(yc.T @ yc)
    if self_x == 0.0 or self_y == 0.0:
        raise UndefinedSimilarityError("CKA is undefined for an input with zero variance")
    cross = np.linalg.norm(yc.T @ xc)
    return float(cross * cross / (self_x * self_y))


def cka_matrix(features_a: Mapping[str, Any], features_b: Mapping[str, Any]) -> pd.DataFrame:
    """Pairwise linear CKA, rows named after `features_a`, columns after `features_b`."""
    return pd.DataFrame(
        [[linear_cka(a, b) for b in features_b.values()] for a in features_a.values()],
        index=list(features_a),
        columns=list(features_b),
    )


@dataclass
class MemoryReport:
    space: str
    mode: str
    param_count: int
    param_bytes: int
    activation_elements: Optional[int]
    activation_bytes: Optional[int]
    largest_param_count: int
    ws_param_count: int
    we_param_count: int

    @property
    def ws_we_ratio(self) -> float:
        return self.ws_param_count / self.we_param_count

    def to_dict(self) -> Dict[str, Any]:
        row = asdict(self)
        row["ws_we_ratio"] = self.ws_we_ratio
        return row


def blank_input(supernet: Supernet, image_size: int = 8, batch: int = 1) -> np.ndarray:
    """Zero input of the shape the space's forward expects."""
    if supernet.spec.dataset_kind == "text":
        return np.zeros((batch, supernet.config.context), dtype=np.int64)
    shape = (batch, supernet.config.in_channels, image_size, image_size)
    return np.zeros(shape, dtype=get_default_dtype())


def activation_elements(supernet: Supernet, image_size: int = 8) -> int:
    """Output elements produced by one batch-1 uniform-mixture forward."""
    mixes = {
        d.name: DiffArray(np.full(d.cardinality, 1.0 / d.cardinality)) for d in supernet.spec.dims
    }
    with no_grad(), trace_outputs() as trace:
        supernet.forward_mixture(blank_input(supernet, image_size), mixes)
    return trace.elements


def memory_account(space_id: str, mode: str = "WE", image_size: int = 8, activations: bool = True,
                   materialize: bool = False, **options: Any) -> MemoryReport:
    """
    Parameter and activation footprint of a space's supernet in one mode.

    Both modes are built (unmaterialised by default) so the report carries the WS/WE
    parameter ratio. The activation estimate counts output elements along one
    forward pass; pass activations=False to skip it at paper scale.
    """
    if mode not in ("WE", "WS"):
        raise ConfigurationError(f"Unknown supernet mode {mode!r}")
    supernets: Dict[str, Supernet] = {
        m: build_space(space_id, mode=m, materialize=materialize, **options) for m in ("WE", "WS")
    }
    supernet = supernets[mode]
    itemsize = np.dtype(get_default_dtype()).itemsize
    count = supernet.param_count()
    elements = activation_elements(supernet, image_size) if activations else None
    report = MemoryReport(
        space=space_id,
        mode=mode,
        param_count=count,
        param_bytes=count * itemsize,
        activation_elements=elements,
        activation_bytes=None if elements is None else elements * itemsize,
        largest_param_count=supernets["WE"].largest_param_count(),
        ws_param_count=supernets["WS"].param_count(),
        we_param_count=supernets["WE"].param_count(),
    )
    logger.info("%s %s: %d parameters, WS/WE ratio %.3f", space_id, mode, count, report.ws_we_ratio)
    return report


def memory_table(space_ids: Sequence[str], **options: Any) -> pd.DataFrame:
    """One row per (space, mode)."""
    rows = [
        memory_account(space_id, mode, **options).to_dict()
        for space_id in space_ids
        for mode in ("WE", "WS")
    ]
    return pd.DataFrame(rows)
