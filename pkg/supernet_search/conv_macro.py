# supernet_search/conv_macro.py
"""
Four-layer convolutional macro space.

Each layer picks a kernel size and an output width; both dims are entangled
on the layer's single weight (kernel centered on the spatial axes, width
leading on the output axis). Input channels follow the previous layer's width.
Layer 1 keeps the resolution, layers 2-4 downsample by 2. The head is global
average pooling plus a linear classifier sized for the widest last layer.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Mapping, Tuple

import numpy as np

from supernet_search.autodiff import DiffArray, reduce_mean, relu
from supernet_search.errors import ConfigurationError
from supernet_search.layers import EntangledConv2d, EntangledLinear, MixedSite
from supernet_search.search_space import (
    Architecture,
    PlanEntry,
    SearchSpaceSpec,
    SiteSpec,
    Supernet,
)
from supernet_search.superposition import ChoiceDim

logger = logging.getLogger(__name__)

SPACE_ID = "conv-macro"


@dataclass
class ConvMacroConfig:
    kernels: Tuple[int, ...] = (3, 5, 7)
    channels: Tuple[Tuple[int, ...], ...] = (
        (8, 16, 32),
        (16, 32, 64),
        (32, 64, 128),
        (64, 128, 256),
    )
    in_channels: int = 1
    num_classes: int = 10

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        self.channels = tuple(tuple(int(c) for c in layer) for layer in self.channels)
        if any(k % 2 == 0 for k in self.kernels):
            raise ConfigurationError(f"Kernel choices must be odd, got {self.kernels}")
        if not self.channels:
            raise ConfigurationError("At least one layer is required")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigurationError(
                f"in_channels={self.in_channels} must be >= 1 "
                f"and num_classes={self.num_classes} >= 2"
            )

    @property
    def num_layers(self) -> int:
        return len(self.channels)


def kernel_dim(layer: int) -> str:
    return f"layer{layer}/kernel"


def channel_dim(layer: int) -> str:
    return f"layer{layer}/channels"


def conv_macro_spec(config: ConvMacroConfig) -> SearchSpaceSpec:
    sites = tuple(
        SiteSpec(
            f"layer{layer}",
            (ChoiceDim(kernel_dim(layer), config.kernels), ChoiceDim(channel_dim(layer), widths)),
            grouping="combi",
        )
        for layer, widths in enumerate(config.channels, 1)
    )
    return SearchSpaceSpec(SPACE_ID, sites, topology="layer-stack", dataset_kind="image")


class ConvMacroSupernet(Supernet):
    def __init__(
        self,
        config: ConvMacroConfig = None,
        mode: str = "WE",
        seed: int = 0,
        materialize: bool = True,
    ):
        config = config or ConvMacroConfig()
        super().__init__(conv_macro_spec(config), mode, config)
        rng = np.random.default_rng(seed)
        self.layers: List[EntangledConv2d] = []
        in_channels = config.in_channels
        for layer, widths in enumerate(config.channels, 1):
            dims = [
                ChoiceDim(channel_dim(layer), widths, (0,), "leading"),
                ChoiceDim(kernel_dim(layer), config.kernels, (2, 3), "centered"),
            ]
            site = EntangledConv2d(
                f"layer{layer}/conv",
                max(widths),
                in_channels,
                max(config.kernels),
                dims,
                mode,
                stride=1 if layer == 1 else 2,
                rng=rng,
                materialize=materialize,
            )
            self.layers.append(self.register(site))
            in_channels = max(widths)
        self.head = self.register(
            EntangledLinear(
                "head", config.num_classes, in_channels, mode=mode, rng=rng, materialize=materialize
            )
        )
        logger.debug(
            "Built %s supernet (%s) with %d parameters", SPACE_ID, mode, self.param_count()
        )

    def path_plan(self, arch: Architecture) -> List[PlanEntry]:
        assignment = arch.as_dict()
        plan = []
        width = self.config.in_channels
        for layer, site in enumerate(self.layers, 1):
            plan.append((site, assignment, {1: width}))
            width = self.config.channels[layer - 1][assignment[channel_dim(layer)]]
        plan.append((self.head, assignment, {1: width}))
        return plan

    def _wire(self, x, run: Callable[[MixedSite, DiffArray], DiffArray]) -> DiffArray:
        h = x
        for site in self.layers:
            h = relu(run(site, h))
        return run(self.head, reduce_mean(h, axis=(2, 3)))

    def apply_path(self, tensors: Mapping[str, DiffArray], x, arch: Architecture) -> DiffArray:
        return self._wire(x, lambda site, h: site.apply(h, tensors))

    def mixture_forward(self, x, mixes, bounds) -> DiffArray:
        return self._wire(x, lambda site, h: site.mix(h, mixes, bounds))


def build_toy_conv_macro(config: ConvMacroConfig = None, mode: str = "WE", seed: int = 0,
                         materialize: bool = True) -> ConvMacroSupernet:
    return ConvMacroSupernet(config, mode=mode, seed=seed, materialize=materialize)
