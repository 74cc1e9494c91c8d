# supernet_search/layers.py
"""
Supernet sites.

A site owns the weights of one operation and runs it three ways:

    mix(x, mixes, bounds)        mixture over its dims (WE: superposed weights,
                                 WS: weighted sum of per-choice outputs)
    path_tensors(assignment)     sliced weights of one choice
    apply(x, tensors)            the plain operation on given weights

Axes of a site's weight that no dim governs may be "passthrough": they are
sliced to the width of the incoming activation.
"""
import itertools
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from supernet_search.autodiff import (
    DiffArray,
    add,
    conv2d,
    embedding,
    get_default_dtype,
    matmul,
    mul,
    normalize_features,
    reshape,
    slice_view,
    transpose,
    zero_pad,
)
from supernet_search.errors import ConfigurationError, DimensionError
from supernet_search.superposition import (
    ChoiceDim,
    EntangledParameter,
    carries_gradient,
    slice_bias,
    slice_choice,
    superpose_all,
)

logger = logging.getLogger(__name__)

MODES = ("WE", "WS")
Combo = Tuple[int, ...]


def lazy_tensor(shape: Sequence[int]) -> DiffArray:
    """Zero-cost read-only storage used when only shapes and counts matter."""
    view = np.broadcast_to(np.zeros((), dtype=get_default_dtype()), tuple(shape))
    return DiffArray._wrap(view, True)


class MixedSite:
    """Shared machinery for WE/WS sites; subclasses define the operation."""

    out_weight_axis = 0
    passthrough_axis: Optional[int] = None

    def __init__(
        self,
        name: str,
        weight_shape: Sequence[int],
        dims: Sequence[ChoiceDim] = (),
        mode: str = "WE",
        bias_shape: Optional[Sequence[int]] = None,
        bias_axes: Sequence[int] = (0,),
        rng: Optional[np.random.Generator] = None,
        materialize: bool = True,
    ):
        if mode not in MODES:
            raise ConfigurationError(f"Site {name}: unknown mode {mode!r}")
        self.name = name
        self.mode = mode
        self.weight_shape = tuple(weight_shape)
        self.bias_shape = None if bias_shape is None else tuple(bias_shape)
        self.bias_axes = tuple(bias_axes)
        self.dims = [d for d in dims if d.target_axes]
        self.layout = EntangledParameter(
            name,
            lazy_tensor(self.weight_shape),
            self.dims,
            None if bias_shape is None else lazy_tensor(self.bias_shape),
            self.bias_axes,
        )
        rng = rng if rng is not None else np.random.default_rng(0)

        self.choices: Dict[Combo, EntangledParameter] = {}
        if mode == "WE" or not self.dims:
            self.entangled = self._make(
                name, self.weight_shape, self.bias_shape, self.dims, rng, materialize
            )
        else:
            self.entangled = None
            for combo in self.combos():
                assignment = self.assignment(combo)
                w_shape = self.layout.extents(assignment)
                b_shape = self.layout.bias_extents(assignment) if bias_shape is not None else None
                label = "-".join(str(i) for i in combo)
                self.choices[combo] = self._make(
                    f"{name}/choice_{label}", w_shape, b_shape, (), rng, materialize
                )

    def _make(self, name, w_shape, b_shape, dims, rng, materialize) -> EntangledParameter:
        if materialize:
            weight = DiffArray(self.init_weight(tuple(w_shape), rng), requires_grad=True)
            bias = None
            if b_shape is not None:
                bias = DiffArray(self.init_bias(tuple(b_shape)), requires_grad=True)
        else:
            weight = lazy_tensor(w_shape)
            bias = None if b_shape is None else lazy_tensor(b_shape)
        return EntangledParameter(name, weight, dims, bias, self.bias_axes)

    def init_weight(self, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    def init_bias(self, shape: Tuple[int, ...]) -> np.ndarray:
        return np.zeros(shape)

    # -- structure ----------------------------------------------------------

    def combos(self) -> List[Combo]:
        return list(itertools.product(*(range(d.cardinality) for d in self.dims)))

    def assignment(self, combo: Combo) -> Dict[str, int]:
        return {d.name: i for d, i in zip(self.dims, combo)}

    def combo_of(self, assignment: Mapping[str, int]) -> Combo:
        return tuple(int(assignment[d.name]) for d in self.dims)

    def entangled_parameters(self) -> List[EntangledParameter]:
        return [self.entangled] if self.entangled is not None else list(self.choices.values())

    def parameters(self) -> Dict[str, DiffArray]:
        return {p.name: p for ep in self.entangled_parameters() for p in ep.parameters}

    def param_count(self) -> int:
        return sum(ep.param_count() for ep in self.entangled_parameters())

    def path_param_count(
        self, assignment: Mapping[str, int], fixed: Optional[Mapping[int, int]] = None
    ) -> int:
        weight = int(np.prod(self.layout.extents(assignment, fixed)))
        if self.bias_shape is None:
            return weight
        return weight + int(np.prod(self.layout.bias_extents(assignment, fixed)))

    # -- operation hooks ------------------------------------------------------

    def input_fixed(self, x) -> Dict[int, int]:
        return {}

    def op(self, x, weight: DiffArray, bias: Optional[DiffArray]) -> DiffArray:
        raise NotImplementedError

    def output_axis(self, y: DiffArray) -> int:
        return y.ndim - 1

    # -- forward modes --------------------------------------------------------

    def mix(self, x, mixes: Mapping[str, DiffArray], bounds: Mapping[str, int]) -> DiffArray:
        fixed = self.input_fixed(x)
        if self.entangled is not None:
            weight, bias = superpose_all(
                self.entangled, mixes, bound=bounds, fixed=fixed, validate=False
            )
            return self.op(x, weight, bias)

        out_extent = self.layout.extents(bounds, fixed)[self.out_weight_axis]
        result = None
        names = [d.name for d in self.dims]
        for combo in itertools.product(*(range(bounds[n] + 1) for n in names)):
            coefficient = None
            for name, index in zip(names, combo):
                entry = slice_view(mixes[name], [(index, index + 1)])
                coefficient = entry if coefficient is None else mul(coefficient, entry)
            if not carries_gradient(coefficient) and not np.any(coefficient.values):
                continue
            param = self.choices[combo]
            y = self.op(x, slice_choice(param, {}, fixed), slice_bias(param, {}, fixed))
            axis = self.output_axis(y)
            if y.shape[axis] != out_extent:
                target = list(y.shape)
                target[axis] = out_extent
                y = zero_pad(y, target, "leading")
            term = mul(coefficient, y)
            result = term if result is None else add(result, term)
        return result

    def path_tensors(self, assignment: Mapping[str, int],
                     fixed: Optional[Mapping[int, int]] = None) -> Dict[str, DiffArray]:
        if self.entangled is not None:
            local = {d.name: assignment[d.name] for d in self.dims}
            weight = slice_choice(self.entangled, local, fixed)
            bias = slice_bias(self.entangled, local, fixed)
        else:
            param = self.choices[self.combo_of(assignment)]
            weight = slice_choice(param, {}, fixed)
            bias = slice_bias(param, {}, fixed)
        tensors = {f"{self.name}/weight": weight}
        if bias is not None:
            tensors[f"{self.name}/bias"] = bias
        return tensors

    def path_masks(self, assignment: Mapping[str, int],
                   fixed: Optional[Mapping[int, int]] = None) -> Dict[str, np.ndarray]:
        if self.entangled is not None:
            return self.entangled.masks({d.name: assignment[d.name] for d in self.dims}, fixed)
        return self.choices[self.combo_of(assignment)].masks({}, fixed)

    def apply(self, x, tensors: Mapping[str, DiffArray]) -> DiffArray:
        return self.op(x, tensors[f"{self.name}/weight"], tensors.get(f"{self.name}/bias"))

    def forward_path(self, x, assignment: Mapping[str, int]) -> DiffArray:
        return self.apply(x, self.path_tensors(assignment, self.input_fixed(x)))


def _narrow(x: DiffArray, axis: int, width: int) -> DiffArray:
    if x.shape[axis] == width:
        return x
    if x.shape[axis] < width:
        raise DimensionError(
            f"Activation width {x.shape[axis]} on axis {axis} is below the weight width {width}"
        )
    windows = [None] * x.ndim
    windows[axis] = (0, width)
    return slice_view(x, windows)


class EntangledLinear(MixedSite):
    """Affine map with weight [out, in]; the input axis is passthrough unless a dim governs it."""

    def __init__(
        self,
        name: str,
        out_features: int,
        in_features: int,
        dims: Sequence[ChoiceDim] = (),
        mode: str = "WE",
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        materialize: bool = True,
    ):
        governed = {a for d in dims for a in d.target_axes}
        self.passthrough_axis = None if 1 in governed else 1
        super().__init__(
            name,
            (out_features, in_features),
            dims,
            mode,
            bias_shape=(out_features,) if bias else None,
            rng=rng,
            materialize=materialize,
        )

    def input_fixed(self, x) -> Dict[int, int]:
        return {} if self.passthrough_axis is None else {1: x.shape[-1]}

    def op(self, x, weight, bias):
        x = _narrow(x, x.ndim - 1, weight.shape[1])
        y = matmul(x, transpose(weight, (1, 0)))
        return y if bias is None else add(y, bias)


class EntangledConv2d(MixedSite):
    """
    Convolution with weight [out, in, k, k] (depthwise: [C, 1, k, k]).

    Padding is (k - 1) / 2 * dilation so every kernel choice keeps the spatial size.
    """

    def __init__(
        self,
        name: str,
        out_channels: int,
        in_channels: int,
        kernel_size: int,
        dims: Sequence[ChoiceDim] = (),
        mode: str = "WE",
        stride: int = 1,
        dilation: int = 1,
        depthwise: bool = False,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        materialize: bool = True,
    ):
        if depthwise and in_channels != out_channels:
            raise ConfigurationError(f"{name}: depthwise conv needs equal in/out channels")
        self.stride = stride
        self.dilation = dilation
        self.depthwise = depthwise
        self.passthrough_axis = None if depthwise else 1
        shape = (out_channels, 1 if depthwise else in_channels, kernel_size, kernel_size)
        super().__init__(
            name,
            shape,
            dims,
            mode,
            bias_shape=(out_channels,) if bias else None,
            rng=rng,
            materialize=materialize,
        )

    def input_fixed(self, x) -> Dict[int, int]:
        return {} if self.depthwise else {1: x.shape[1]}

    def output_axis(self, y):
        return 1

    def op(self, x, weight, bias):
        kernel = weight.shape[-1]
        y = conv2d(
            x,
            weight,
            stride=self.stride,
            dilation=self.dilation,
            padding=(kernel - 1) // 2 * self.dilation,
            groups=x.shape[1] if self.depthwise else 1,
        )
        if bias is None:
            return y
        return add(y, reshape(bias, (1, bias.shape[0], 1, 1)))


class EntangledNorm(MixedSite):
    """Per-channel standardization with entangled gamma (weight) and beta (bias)."""

    def __init__(
        self,
        name: str,
        features: int,
        dims: Sequence[ChoiceDim] = (),
        mode: str = "WE",
        axes: Sequence[int] = (-1,),
        channel_axis: int = -1,
        rng: Optional[np.random.Generator] = None,
        materialize: bool = True,
    ):
        self.axes = tuple(axes)
        self.channel_axis = channel_axis
        super().__init__(
            name, (features,), dims, mode, bias_shape=(features,), rng=rng, materialize=materialize
        )

    def init_weight(self, shape, rng):
        return np.ones(shape)

    def output_axis(self, y):
        return self.channel_axis % y.ndim

    def op(self, x, weight, bias):
        x = _narrow(x, self.channel_axis % x.ndim, weight.shape[0])
        return normalize_features(x, weight, bias, axes=self.axes, channel_axis=self.channel_axis)


class EntangledEmbedding(MixedSite):
    """Lookup table [rows, features]; the feature axis may be entangled."""

    out_weight_axis = 1

    def __init__(
        self,
        name: str,
        num_embeddings: int,
        features: int,
        dims: Sequence[ChoiceDim] = (),
        mode: str = "WE",
        rng: Optional[np.random.Generator] = None,
        materialize: bool = True,
        init_std: float = 0.02,
    ):
        self.init_std = init_std
        super().__init__(
            name, (num_embeddings, features), dims, mode, rng=rng, materialize=materialize
        )

    def init_weight(self, shape, rng):
        return self.init_std * rng.standard_normal(shape)

    def op(self, ids, weight, bias):
        return embedding(weight, ids)
