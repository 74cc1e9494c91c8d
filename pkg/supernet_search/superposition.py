# supernet_search/superposition.py
"""
Entangled parameter storage and weight superposition.

A choice dimension slices one or more axes of a maximal weight tensor. Smaller
choices are nested sub-windows: leading windows for count-like dims (channels,
embedding width, heads, MLP ratio) and centered windows for kernel sizes.
Superposition sums the zero-padded slices weighted by a simplex, so a single
affine op on the result mixes every choice at once.
"""
import itertools
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from supernet_search.autodiff import (
    DiffArray,
    active_tape,
    add,
    conv2d,
    matmul,
    mul,
    reshape,
    slice_view,
    transpose,
    zero_pad,
)
from supernet_search.errors import (
    ChoiceError,
    ConfigurationError,
    DimensionError,
    NormalizationError,
)

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-6

Assignment = Mapping[str, int]
Mixes = Union[Mapping[str, DiffArray], Sequence[DiffArray]]


@dataclass(frozen=True)
class ChoiceDim:
    """
    One searchable dimension.

    `target_axes` and `alignment` describe how the dim slices a particular
    tensor; the same logical dim is bound to different axes of different
    tensors with `bind`. The extent on a target axis is `choice * scale`.
    """

    name: str
    choices: Tuple[int, ...]
    target_axes: Tuple[int, ...] = ()
    alignment: Tuple[str, ...] = ()
    scale: int = 1
    labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        choices = tuple(int(c) for c in self.choices)
        if len(choices) < 2:
            raise ConfigurationError(f"Dim {self.name!r} needs at least 2 choices, got {choices}")
        if any(c <= 0 for c in choices) or any(b <= a for a, b in zip(choices, choices[1:])):
            raise ConfigurationError(
                f"Dim {self.name!r} choices must be positive and strictly increasing: {choices}"
            )
        axes = tuple(int(a) for a in self.target_axes)
        alignment = self.alignment
        if isinstance(alignment, str):
            alignment = (alignment,) * len(axes)
        alignment = tuple(alignment) if alignment else ("leading",) * len(axes)
        if len(alignment) != len(axes):
            raise ConfigurationError(
                f"Dim {self.name!r} has {len(axes)} target axes but {len(alignment)} alignments"
            )
        for mode in alignment:
            if mode not in ("leading", "centered"):
                raise ConfigurationError(f"Dim {self.name!r} has unknown alignment {mode!r}")
        if self.scale < 1:
            raise ConfigurationError(f"Dim {self.name!r} scale must be >= 1, got {self.scale}")
        if self.labels is not None and len(self.labels) != len(choices):
            raise ConfigurationError(
                f"Dim {self.name!r} has {len(self.labels)} labels for {len(choices)} choices"
            )
        object.__setattr__(self, "choices", choices)
        object.__setattr__(self, "target_axes", axes)
        object.__setattr__(self, "alignment", alignment)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def cardinality(self) -> int:
        return len(self.choices)

    def extent(self, index: int) -> int:
        return self.choices[self.check_index(index)] * self.scale

    def check_index(self, index: int) -> int:
        if not 0 <= int(index) < len(self.choices):
            raise ChoiceError(
                f"Index {index} out of range for dim {self.name!r} with {len(self.choices)} choices"
            )
        return int(index)

    def label(self, index: int) -> str:
        if self.labels is not None:
            return self.labels[self.check_index(index)]
        return str(self.choices[self.check_index(index)])

    def bind(self, target_axes: Sequence[int], alignment: Union[str, Sequence[str]] = "leading",
             scale: Optional[int] = None) -> "ChoiceDim":
        """Same dim (name and choices) slicing other axes."""
        return replace(self, target_axes=tuple(target_axes), alignment=alignment,
                       scale=self.scale if scale is None else scale)


class EntangledParameter:
    """
    Maximal weight storage shared by every choice of its dims.

    Axes not targeted by any dim are either full width or, when `fixed` gives an
    extent, a leading window (e.g. input channels coming from the previous
    layer). Bias axis i follows weight axis `bias_axes[i]`.
    """

    def __init__(
        self,
        name: str,
        storage: Union[np.ndarray, DiffArray],
        dims: Sequence[ChoiceDim] = (),
        bias_storage: Union[None, np.ndarray, DiffArray] = None,
        bias_axes: Sequence[int] = (0,),
    ):
        self.name = name
        if not isinstance(storage, DiffArray):
            storage = DiffArray(storage, requires_grad=True)
        self.storage = storage
        self.storage.name = f"{name}/storage"
        self.storage.requires_grad = True
        self.bias_storage = None
        if bias_storage is not None:
            if not isinstance(bias_storage, DiffArray):
                bias_storage = DiffArray(bias_storage, requires_grad=True)
            self.bias_storage = bias_storage
            self.bias_storage.name = f"{name}/bias_storage"
            self.bias_storage.requires_grad = True
        self.dims = list(dims)
        self.bias_axes = tuple(bias_axes)
        self._validate()

    def _validate(self) -> None:
        shape = self.storage.shape
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"{self.name}: duplicate dims {names}")
        self._axis_alignment: Dict[int, str] = {}
        for dim in self.dims:
            for axis, mode in zip(dim.target_axes, dim.alignment):
                if not 0 <= axis < len(shape):
                    raise ConfigurationError(
                        f"{self.name}: dim {dim.name!r} targets axis {axis} "
                        f"of rank-{len(shape)} storage"
                    )
                held = self._axis_alignment.setdefault(axis, mode)
                if held != mode:
                    raise ConfigurationError(
                        f"{self.name}: axis {axis} has conflicting alignments {held}/{mode}"
                    )
        largest = {d.name: d.cardinality - 1 for d in self.dims}
        for axis in self._axis_alignment:
            expected = self._axis_extent(axis, largest)
            if expected != shape[axis]:
                raise ConfigurationError(
                    f"{self.name}: largest choice gives extent {expected} on axis {axis}, "
                    f"storage has {shape[axis]}"
                )
            if self._axis_alignment[axis] == "centered":
                for dim in self.dims:
                    if axis in dim.target_axes and any((shape[axis] - dim.extent(i)) % 2
                                                       for i in range(dim.cardinality)):
                        raise ConfigurationError(
                            f"{self.name}: centered dim {dim.name!r} leaves an odd gap "
                            f"on axis {axis}"
                        )
        if self.bias_storage is not None:
            if len(self.bias_axes) != self.bias_storage.ndim:
                raise ConfigurationError(
                    f"{self.name}: bias rank {self.bias_storage.ndim} vs bias_axes {self.bias_axes}"
                )
            for b_axis, w_axis in enumerate(self.bias_axes):
                if self.bias_storage.shape[b_axis] != shape[w_axis]:
                    raise ConfigurationError(
                        f"{self.name}: bias extent {self.bias_storage.shape[b_axis]} != "
                        f"weight axis {w_axis} extent {shape[w_axis]}"
                    )

    @property
    def searchable_dims(self) -> List[ChoiceDim]:
        return [d for d in self.dims if d.target_axes]

    @property
    def parameters(self) -> List[DiffArray]:
        return [self.storage] + ([self.bias_storage] if self.bias_storage is not None else [])

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters)

    def alignment(self, axis: int) -> str:
        return self._axis_alignment.get(axis, "leading")

    def _axis_extent(self, axis: int, assignment: Assignment) -> int:
        extent = 1
        for dim in self.dims:
            if axis in dim.target_axes:
                if dim.name not in assignment:
                    raise ChoiceError(f"{self.name}: no index assigned for dim {dim.name!r}")
                extent *= dim.extent(assignment[dim.name])
        return extent

    def extents(
        self, assignment: Assignment, fixed: Optional[Mapping[int, int]] = None
    ) -> Tuple[int, ...]:
        fixed = fixed or {}
        out = []
        for axis, full in enumerate(self.storage.shape):
            if axis in self._axis_alignment:
                if axis in fixed:
                    raise ConfigurationError(
                        f"{self.name}: axis {axis} is governed by a dim and cannot be fixed"
                    )
                out.append(self._axis_extent(axis, assignment))
            elif axis in fixed:
                if not 0 < fixed[axis] <= full:
                    raise DimensionError(
                        f"{self.name}: fixed extent {fixed[axis]} outside (0, {full}] "
                        f"on axis {axis}"
                    )
                out.append(int(fixed[axis]))
            else:
                out.append(full)
        return tuple(out)

    def windows(
        self, assignment: Assignment, fixed: Optional[Mapping[int, int]] = None
    ) -> List[Tuple[int, int]]:
        windows = []
        for axis, extent in enumerate(self.extents(assignment, fixed)):
            full = self.storage.shape[axis]
            start = (full - extent) // 2 if self.alignment(axis) == "centered" else 0
            windows.append((start, start + extent))
        return windows

    def bias_windows(
        self, assignment: Assignment, fixed: Optional[Mapping[int, int]] = None
    ) -> List[Tuple[int, int]]:
        weight_windows = self.windows(assignment, fixed)
        return [weight_windows[axis] for axis in self.bias_axes]

    def bias_extents(
        self, assignment: Assignment, fixed: Optional[Mapping[int, int]] = None
    ) -> Tuple[int, ...]:
        return tuple(stop - start for start, stop in self.bias_windows(assignment, fixed))

    def masks(
        self, assignment: Assignment, fixed: Optional[Mapping[int, int]] = None
    ) -> Dict[str, np.ndarray]:
        """Boolean masks of the active window, keyed by tensor name."""
        weight_windows = self.windows(assignment, fixed)
        masks = {self.storage.name: _window_mask(self.storage.shape, weight_windows)}
        if self.bias_storage is not None:
            masks[self.bias_storage.name] = _window_mask(
                self.bias_storage.shape, [weight_windows[a] for a in self.bias_axes]
            )
        return masks


def _window_mask(shape: Tuple[int, ...], windows: Sequence[Tuple[int, int]]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(a, b) for a, b in windows)] = True
    return mask


# ---------------------------------------------------------------------------
# Mixture weights
# ---------------------------------------------------------------------------


def check_simplex(mix: DiffArray, dim: ChoiceDim) -> None:
    values = np.asarray(mix.values, dtype=np.float64)
    if values.shape != (dim.cardinality,):
        raise ConfigurationError(
            f"Mixture for dim {dim.name!r} has shape {values.shape}, expected ({dim.cardinality},)"
        )
    total = values.sum()
    if not np.all(np.isfinite(values)) or values.min() < 0 or abs(total - 1.0) > SIMPLEX_TOLERANCE:
        raise NormalizationError(
            f"Mixture for dim {dim.name!r} is not a simplex: {values} (sum {total})"
        )


def support_index(mix: DiffArray) -> int:
    """
    Largest index that can affect the output or its gradient.

    A mixture on the active tape keeps every index: a zero entry still receives
    the gradient of its choice. Constant mixtures are cut after their last
    nonzero entry.
    """
    if carries_gradient(mix):
        return mix.shape[0] - 1
    nonzero = np.flatnonzero(np.asarray(mix.values) != 0)
    if nonzero.size == 0:
        raise NormalizationError("Mixture has no nonzero entry")
    return int(nonzero[-1])


def carries_gradient(mix: DiffArray) -> bool:
    return mix.requires_grad and active_tape() is not None


def support_bounds(mixes: Mapping[str, DiffArray]) -> Dict[str, int]:
    return {name: support_index(mix) for name, mix in mixes.items()}


def cross_product_weights(mixes: Sequence[np.ndarray]) -> np.ndarray:
    """Outer product of per-dim weights (sums to 1 for simplex inputs)."""
    weights = np.ones(())
    for mix in mixes:
        weights = np.multiply.outer(weights, np.asarray(mix))
    return weights


def _as_mapping(ep: EntangledParameter, mixes: Mixes) -> Dict[str, DiffArray]:
    dims = ep.searchable_dims
    if isinstance(mixes, Mapping):
        missing = [d.name for d in dims if d.name not in mixes]
        if missing:
            raise ConfigurationError(f"{ep.name}: no mixture given for dims {missing}")
        return {d.name: mixes[d.name] for d in dims}
    mixes = list(mixes)
    if len(mixes) != len(dims):
        raise ConfigurationError(f"{ep.name}: {len(mixes)} mixtures given for {len(dims)} dims")
    return {d.name: m for d, m in zip(dims, mixes)}


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def slice_choice(ep: EntangledParameter, assignment: Assignment,
                 fixed: Optional[Mapping[int, int]] = None) -> DiffArray:
    """Sub-tensor of the storage for one choice per dim (a copy on the tape)."""
    for dim in ep.searchable_dims:
        if dim.name not in assignment:
            raise ChoiceError(f"{ep.name}: no index assigned for dim {dim.name!r}")
        dim.check_index(assignment[dim.name])
    return slice_view(ep.storage, ep.windows(assignment, fixed))


def slice_bias(ep: EntangledParameter, assignment: Assignment,
               fixed: Optional[Mapping[int, int]] = None) -> Optional[DiffArray]:
    if ep.bias_storage is None:
        return None
    return slice_view(ep.bias_storage, ep.bias_windows(assignment, fixed))


def superpose_all(
    ep: EntangledParameter,
    mixes: Mixes,
    bound: Optional[Assignment] = None,
    fixed: Optional[Mapping[int, int]] = None,
    validate: bool = True,
) -> Tuple[DiffArray, Optional[DiffArray]]:
    """
    Weighted sum of zero-padded slices over the cross product of all dims.

    `bound` caps each dim at an index (defaults to its largest choice); the
    result is sized for the capped choices, so combinations beyond the caps
    must carry zero weight.
    """
    dims = ep.searchable_dims
    mix_map = _as_mapping(ep, mixes)
    if validate:
        for dim in dims:
            check_simplex(mix_map[dim.name], dim)
    bound = {d.name: d.check_index((bound or {}).get(d.name, d.cardinality - 1)) for d in dims}
    if not dims:
        return slice_choice(ep, {}, fixed), slice_bias(ep, {}, fixed)

    w_target = ep.extents(bound, fixed)
    w_align = [ep.alignment(axis) for axis in range(ep.storage.ndim)]
    b_target = ep.bias_extents(bound, fixed) if ep.bias_storage is not None else None
    b_align = [ep.alignment(axis) for axis in ep.bias_axes]

    weight_sum = bias_sum = None
    names = [d.name for d in dims]
    for combo in itertools.product(*(range(bound[n] + 1) for n in names)):
        assignment = dict(zip(names, combo))
        coefficient = None
        for name, index in assignment.items():
            entry = slice_view(mix_map[name], [(index, index + 1)])
            coefficient = entry if coefficient is None else mul(coefficient, entry)

        part = slice_choice(ep, assignment, fixed)
        if part.shape != w_target:
            part = zero_pad(part, w_target, w_align)
        term = mul(coefficient, part)
        weight_sum = term if weight_sum is None else add(weight_sum, term)

        if ep.bias_storage is not None:
            bias = slice_bias(ep, assignment, fixed)
            if bias.shape != b_target:
                bias = zero_pad(bias, b_target, b_align)
            term = mul(coefficient, bias)
            bias_sum = term if bias_sum is None else add(bias_sum, term)
    return weight_sum, bias_sum


def superpose(ep: EntangledParameter, mix: DiffArray, bound: Optional[Assignment] = None,
              fixed: Optional[Mapping[int, int]] = None) -> DiffArray:
    """Single-dim superposition: sum_i mix[i] * zero_pad(slice_choice(ep, i))."""
    dims = ep.searchable_dims
    if len(dims) != 1:
        raise ConfigurationError(
            f"{ep.name}: superpose needs exactly one dim, found {[d.name for d in dims]}"
        )
    weight, _ = superpose_all(ep, [mix], bound=bound, fixed=fixed)
    return weight


def combi_superpose(
    ep: EntangledParameter,
    mixes: Mixes,
    bound: Optional[Assignment] = None,
    fixed: Optional[Mapping[int, int]] = None,
) -> Tuple[DiffArray, Optional[DiffArray]]:
    """Superposition over the cross product of two or more dims; returns (W_mix, b_mix)."""
    dims = ep.searchable_dims
    count = len(mixes)
    if len(dims) < 2 or count != len(dims):
        raise ConfigurationError(f"{ep.name}: combi_superpose needs one mixture per dim (>= 2); "
                                 f"dims={[d.name for d in dims]}, mixtures={count}")
    return superpose_all(ep, mixes, bound=bound, fixed=fixed)


def mixture_linear(
    x: DiffArray,
    ep: EntangledParameter,
    mixes: Mixes,
    bound: Optional[Assignment] = None,
    fixed: Optional[Mapping[int, int]] = None,
) -> DiffArray:
    """y = x W_mix^T + b_mix with storage laid out as [out, in]."""
    weight, bias = superpose_all(ep, mixes, bound=bound, fixed=fixed)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"{ep.name}: input width {x.shape[-1]} does not match weight {weight.shape}"
        )
    y = matmul(x, transpose(weight, (1, 0)))
    return y if bias is None else add(y, bias)


def mixture_conv2d(
    x: DiffArray,
    ep: EntangledParameter,
    mixes: Mixes,
    stride: int = 1,
    dilation: int = 1,
    groups: int = 1,
    bound: Optional[Assignment] = None,
    fixed: Optional[Mapping[int, int]] = None,
) -> DiffArray:
    """
    One convolution with the superposed kernel. Padding is (k - 1) / 2 * dilation
    for the (bounded) largest kernel so every kernel choice keeps the spatial size.
    """
    weight, bias = superpose_all(ep, mixes, bound=bound, fixed=fixed)
    kernel = weight.shape[-1]
    padding = (kernel - 1) // 2 * dilation
    y = conv2d(x, weight, stride=stride, dilation=dilation, padding=padding, groups=groups)
    if bias is None:
        return y
    return add(y, reshape(bias, (1, bias.shape[0], 1, 1)))
