# supernet_search/toy_cell.py
"""
Cell-based toy space.

Stem (3x3 conv + norm), then three cells: reduce, normal, reduce. A cell
preprocesses its input (relu, 1x1 conv, norm) to C channels, computes

    node1 = edge(0->1)(node0)
    node2 = edge(0->2)(node0) + edge(1->2)(node1)

and outputs concat(node1, node2). Every edge chooses one of four ops. Both
reduce cells follow one genotype; each cell position keeps its own weights.

In WE mode an edge holds one block per op type with the kernel sizes of that
type entangled; in WS mode it holds one block per op.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from supernet_search.autodiff import (
    DiffArray,
    add,
    concat,
    div,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    slice_view,
)
from supernet_search.errors import ConfigurationError
from supernet_search.layers import EntangledConv2d, EntangledLinear, EntangledNorm, MixedSite
from supernet_search.search_space import (
    Architecture,
    PlanEntry,
    SearchSpaceSpec,
    SiteSpec,
    Supernet,
)
from supernet_search.superposition import ChoiceDim, carries_gradient, support_index

logger = logging.getLogger(__name__)

SPACE_ID = "toy-cell"
OPS = ("sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5")
OP_TYPES = (("sep", (3, 5), (0, 1)), ("dil", (3, 5), (2, 3)))
EDGES = ((0, 1), (0, 2), (1, 2))
CELL_KINDS = ("reduce", "normal", "reduce")


@dataclass
class ToyCellConfig:
    base_channels: int = 8
    num_classes: int = 10
    in_channels: int = 1

    def __post_init__(self):
        if self.base_channels < 4:
            raise ConfigurationError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.num_classes < 2 or self.in_channels < 1:
            raise ConfigurationError(
                f"num_classes={self.num_classes}, in_channels={self.in_channels} out of range"
            )


def edge_dim(cell_kind: str, edge: Tuple[int, int]) -> str:
    return f"{cell_kind}/edge_{edge[0]}_{edge[1]}"


def toy_cell_spec(config: ToyCellConfig) -> SearchSpaceSpec:
    sites = tuple(
        SiteSpec(edge_dim(kind, edge), (ChoiceDim(edge_dim(kind, edge), (1, 2, 3, 4), labels=OPS),))
        for kind in ("normal", "reduce")
        for edge in EDGES
    )
    return SearchSpaceSpec(SPACE_ID, sites, topology="cell-dag", dataset_kind="image")


class OpBlock:
    """
    sep: relu -> depthwise kxk -> pointwise 1x1 -> norm
    dil: relu -> kxk conv (dilation 2) -> norm
    """

    def __init__(
        self,
        name: str,
        kind: str,
        channels: int,
        kernels: Sequence[int],
        stride: int,
        rng: np.random.Generator,
        materialize: bool,
    ):
        self.name = name
        self.kind = kind
        self.kernels = tuple(kernels)
        self.dim = None
        if len(self.kernels) > 1:
            self.dim = ChoiceDim(f"{name}/kernel", self.kernels, (2, 3), "centered")
        dims = [self.dim] if self.dim is not None else []
        k = max(self.kernels)
        if kind == "sep":
            self.sites: List[MixedSite] = [
                EntangledConv2d(
                    f"{name}/depthwise", channels, channels, k, dims, stride=stride, depthwise=True,
                    bias=False, rng=rng, materialize=materialize,
                ),
                EntangledConv2d(
                    f"{name}/pointwise", channels, channels, 1, bias=False, rng=rng,
                    materialize=materialize,
                ),
            ]
        else:
            self.sites = [
                EntangledConv2d(
                    f"{name}/dilated", channels, channels, k, dims, stride=stride, dilation=2,
                    bias=False, rng=rng, materialize=materialize,
                ),
            ]
        norm = EntangledNorm(
            f"{name}/norm", channels, axes=(2, 3), channel_axis=1, rng=rng, materialize=materialize
        )
        self.sites.append(norm)

    def _local(self, kernel_index: int) -> Dict[str, int]:
        return {self.dim.name: kernel_index} if self.dim is not None else {}

    def mix(self, x, inner: Optional[DiffArray]) -> DiffArray:
        mixes = {self.dim.name: inner} if self.dim is not None else {}
        bounds = {self.dim.name: support_index(inner)} if self.dim is not None else {}
        h = relu(x)
        for site in self.sites:
            h = site.mix(h, mixes, bounds)
        return h

    def plan(self, kernel_index: int, channels: int) -> List[PlanEntry]:
        local = self._local(kernel_index)
        entries = []
        for site in self.sites:
            fixed = {} if site.passthrough_axis is None else {site.passthrough_axis: channels}
            entries.append((site, local, fixed))
        return entries

    def apply(self, x, tensors: Mapping[str, DiffArray]) -> DiffArray:
        h = relu(x)
        for site in self.sites:
            h = site.apply(h, tensors)
        return h

    def path_param_count(self, kernel_index: int, channels: int) -> int:
        return sum(site.path_param_count(a, f) for site, a, f in self.plan(kernel_index, channels))


class MixedEdge:
    """
    Branches are (block, op indices it serves). An op's kernel index is its
    position within the branch.
    """

    def __init__(
        self,
        name: str,
        channels: int,
        stride: int,
        mode: str,
        rng: np.random.Generator,
        materialize: bool,
    ):
        self.channels = channels
        if mode == "WE":
            self.branches = [
                (OpBlock(f"{name}/{kind}", kind, channels, kernels, stride, rng, materialize), ops)
                for kind, kernels, ops in OP_TYPES
            ]
        else:
            self.branches = []
            for kind, kernels, ops in OP_TYPES:
                for kernel, op in zip(kernels, ops):
                    block = OpBlock(
                        f"{name}/{OPS[op]}", kind, channels, (kernel,), stride, rng, materialize
                    )
                    self.branches.append((block, (op,)))

    @property
    def sites(self) -> List[MixedSite]:
        return [site for block, _ in self.branches for site in block.sites]

    def locate(self, op: int) -> Tuple[OpBlock, int]:
        for block, ops in self.branches:
            if op in ops:
                return block, ops.index(op)
        raise ConfigurationError(f"Op index {op} not served by any branch")

    def mix(self, x, weights: DiffArray) -> DiffArray:
        out = None
        for block, ops in self.branches:
            part = slice_view(weights, [(ops[0], ops[-1] + 1)])
            if not np.any(part.values):
                if carries_gradient(part):
                    out = self._zero_share(x, block, ops, weights, out)
                continue
            if len(ops) == 1:
                share, inner = part, None
            else:
                share = reduce_sum(part)
                inner = div(part, share)
            term = mul(share, block.mix(x, inner))
            out = term if out is None else add(out, term)
        return out

    @staticmethod
    def _zero_share(
        x,
        block: OpBlock,
        ops: Sequence[int],
        weights: DiffArray,
        out: Optional[DiffArray],
    ) -> DiffArray:
        # share * block(part / share) at share = 0 has derivative f_j(x) along each op j
        for offset, op in enumerate(ops):
            inner = None
            if len(ops) > 1:
                inner = DiffArray(np.eye(len(ops), dtype=weights.values.dtype)[offset])
            term = mul(slice_view(weights, [(op, op + 1)]), block.mix(x, inner))
            out = term if out is None else add(out, term)
        return out

    def plan(self, op: int) -> List[PlanEntry]:
        block, kernel_index = self.locate(op)
        return block.plan(kernel_index, self.channels)

    def apply(self, x, op: int, tensors: Mapping[str, DiffArray]) -> DiffArray:
        return self.locate(op)[0].apply(x, tensors)

    def union_param_count(self) -> int:
        """Largest kernel of every op type."""
        best: Dict[str, int] = {}
        for block, _ in self.branches:
            count = block.path_param_count(len(block.kernels) - 1, self.channels)
            best[block.kind] = max(best.get(block.kind, 0), count)
        return sum(best.values())


class Cell:
    def __init__(
        self,
        name: str,
        kind: str,
        in_channels: int,
        channels: int,
        mode: str,
        rng: np.random.Generator,
        materialize: bool,
    ):
        self.kind = kind
        self.channels = channels
        self.preprocess = [
            EntangledConv2d(
                f"{name}/pre/conv", channels, in_channels, 1, bias=False, rng=rng,
                materialize=materialize,
            ),
            EntangledNorm(
                f"{name}/pre/norm", channels, axes=(2, 3), channel_axis=1, rng=rng,
                materialize=materialize,
            ),
        ]
        stride = 2 if kind == "reduce" else 1
        self.edges: Dict[Tuple[int, int], MixedEdge] = {
            edge: MixedEdge(
                f"{name}/edge_{edge[0]}_{edge[1]}", channels, stride if edge[0] == 0 else 1, mode,
                rng, materialize,
            )
            for edge in EDGES
        }

    @property
    def sites(self) -> List[MixedSite]:
        return self.preprocess + [site for edge in self.edges.values() for site in edge.sites]

    def forward(self, x, run_edge, run_site) -> DiffArray:
        s0 = relu(x)
        for site in self.preprocess:
            s0 = run_site(site, s0)
        node1 = run_edge((0, 1), s0)
        node2 = add(run_edge((0, 2), s0), run_edge((1, 2), node1))
        return concat([node1, node2], axis=1)

    def plan(self, arch: Architecture, in_channels: int) -> List[PlanEntry]:
        plan: List[PlanEntry] = [
            (self.preprocess[0], {}, {1: in_channels}),
            (self.preprocess[1], {}, {}),
        ]
        for edge, mixed in self.edges.items():
            plan.extend(mixed.plan(arch[edge_dim(self.kind, edge)]))
        return plan


class ToyCellSupernet(Supernet):
    def __init__(
        self,
        config: ToyCellConfig = None,
        mode: str = "WE",
        seed: int = 0,
        materialize: bool = True,
    ):
        config = config or ToyCellConfig()
        super().__init__(toy_cell_spec(config), mode, config)
        rng = np.random.default_rng(seed)
        base = config.base_channels
        self.stem = [
            EntangledConv2d(
                "stem/conv", base, config.in_channels, 3, bias=False, rng=rng,
                materialize=materialize,
            ),
            EntangledNorm(
                "stem/norm", base, axes=(2, 3), channel_axis=1, rng=rng, materialize=materialize
            ),
        ]
        self.cells: List[Cell] = []
        in_channels = base
        for index, kind in enumerate(CELL_KINDS):
            channels = base * 2 if index == len(CELL_KINDS) - 1 else base
            cell = Cell(f"cell{index}", kind, in_channels, channels, mode, rng, materialize)
            self.cells.append(cell)
            in_channels = 2 * channels
        self.head = EntangledLinear(
            "head", config.num_classes, in_channels, rng=rng, materialize=materialize
        )
        for site in self.stem + [s for cell in self.cells for s in cell.sites] + [self.head]:
            self.register(site)
        self.out_channels = in_channels
        logger.debug(
            "Built %s supernet (%s) with %d parameters", SPACE_ID, mode, self.param_count()
        )

    def path_plan(self, arch: Architecture) -> List[PlanEntry]:
        plan: List[PlanEntry] = [
            (self.stem[0], {}, {1: self.config.in_channels}),
            (self.stem[1], {}, {}),
        ]
        in_channels = self.config.base_channels
        for cell in self.cells:
            plan.extend(cell.plan(arch, in_channels))
            in_channels = 2 * cell.channels
        plan.append((self.head, {}, {1: in_channels}))
        return plan

    def largest_param_count(self) -> int:
        """Fixed sites plus, per edge, the largest block of each op type."""
        fixed_sites = self.stem + [s for cell in self.cells for s in cell.preprocess] + [self.head]
        total = sum(site.param_count() for site in fixed_sites)
        edges = [edge for cell in self.cells for edge in cell.edges.values()]
        return total + sum(edge.union_param_count() for edge in edges)

    def _wire(self, x, run_edge, run_site) -> DiffArray:
        h = x
        for site in self.stem:
            h = run_site(site, h)
        for cell in self.cells:
            h = cell.forward(h, lambda edge, t, cell=cell: run_edge(cell, edge, t), run_site)
        return run_site(self.head, reduce_mean(h, axis=(2, 3)))

    def apply_path(self, tensors: Mapping[str, DiffArray], x, arch: Architecture) -> DiffArray:
        def run_edge(cell, edge, t):
            return cell.edges[edge].apply(t, arch[edge_dim(cell.kind, edge)], tensors)

        return self._wire(x, run_edge, lambda site, t: site.apply(t, tensors))

    def mixture_forward(self, x, mixes, bounds) -> DiffArray:
        def run_edge(cell, edge, t):
            return cell.edges[edge].mix(t, mixes[edge_dim(cell.kind, edge)])

        return self._wire(x, run_edge, lambda site, t: site.mix(t, {}, {}))

    def genotype_text(self, arch: Architecture) -> str:
        arch = self.spec.validate(arch)
        parts = []
        for kind in ("normal", "reduce"):
            pairs = ", ".join(f"('{OPS[arch[edge_dim(kind, edge)]]}', {edge[0]})" for edge in EDGES)
            parts.append(f"{kind}=[{pairs}], {kind}_concat=range(1, 3)")
        return f"Genotype({', '.join(parts)})"


def build_toy_cell_space(config: ToyCellConfig = None, mode: str = "WE", seed: int = 0,
                         materialize: bool = True) -> ToyCellSupernet:
    return ToyCellSupernet(config, mode=mode, seed=seed, materialize=materialize)
