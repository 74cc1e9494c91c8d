# supernet_search/tiny_lm.py
"""
Decoder-only transformer space with four global dims:

    embed      model width e (token/position tables, norms, residual stream)
    heads      attention heads h; per-head width is fixed at max(embed) / max(heads)
    mlp_ratio  hidden width of the MLP is e * r
    layers     depth

Weights are entangled through leading slices: Q/K/V [:h*dh, :e], attention
output [:e, :h*dh], MLP in [:e*r, :e], MLP out [:e, :e*r]. Depth is mixed by
weighting the logits of each candidate layer prefix, so every prefix shares
the same trunk.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np

from supernet_search.autodiff import (
    DiffArray,
    add,
    gelu,
    matmul,
    mul,
    reshape,
    scale,
    slice_view,
    softmax,
    transpose,
)
from supernet_search.errors import ConfigurationError, DimensionError, UnknownPresetError
from supernet_search.layers import EntangledEmbedding, EntangledLinear, EntangledNorm, MixedSite
from supernet_search.search_space import (
    Architecture,
    PlanEntry,
    SearchSpaceSpec,
    SiteSpec,
    Supernet,
)
from supernet_search.superposition import ChoiceDim, carries_gradient

logger = logging.getLogger(__name__)

SPACE_ID = "tiny-lm"
EMBED, HEADS, RATIO, LAYERS = "embed", "heads", "mlp_ratio", "layers"
MASK_VALUE = -1e9

PRESETS: Dict[str, Dict[str, Tuple[int, ...]]] = {
    "paper": {
        "embed": (384, 576, 768),
        "heads": (6, 8, 12),
        "mlp_ratio": (2, 3, 4),
        "layers": (5, 6, 7),
    },
    "desk": {"embed": (32, 48, 64), "heads": (2, 4), "mlp_ratio": (2, 4), "layers": (2, 3, 4)},
}


@dataclass
class TinyLMConfig:
    vocab_size: int = 64
    context: int = 32
    embed: Tuple[int, ...] = PRESETS["desk"]["embed"]
    heads: Tuple[int, ...] = PRESETS["desk"]["heads"]
    mlp_ratio: Tuple[int, ...] = PRESETS["desk"]["mlp_ratio"]
    layers: Tuple[int, ...] = PRESETS["desk"]["layers"]

    def __post_init__(self):
        for key in ("embed", "heads", "mlp_ratio", "layers"):
            setattr(self, key, tuple(int(v) for v in getattr(self, key)))
        if self.vocab_size < 2 or self.context < 1:
            raise ConfigurationError(
                f"vocab_size={self.vocab_size} must be >= 2 and context={self.context} >= 1"
            )
        if max(self.embed) % max(self.heads):
            raise ConfigurationError(
                f"Largest embed {max(self.embed)} is not divisible by "
                f"the largest head count {max(self.heads)}"
            )

    @property
    def head_dim(self) -> int:
        return max(self.embed) // max(self.heads)


def tiny_lm_config(preset: str = "desk", **overrides) -> TinyLMConfig:
    if preset not in PRESETS:
        raise UnknownPresetError(
            f"Unknown tiny-lm preset {preset!r}; expected one of {sorted(PRESETS)}"
        )
    values = dict(PRESETS[preset])
    values.update(overrides)
    return TinyLMConfig(**values)


def tiny_lm_spec(config: TinyLMConfig) -> SearchSpaceSpec:
    dims = (
        ChoiceDim(EMBED, config.embed),
        ChoiceDim(HEADS, config.heads),
        ChoiceDim(RATIO, config.mlp_ratio),
        ChoiceDim(LAYERS, config.layers),
    )
    return SearchSpaceSpec(
        SPACE_ID,
        (SiteSpec("global", dims, grouping="combi"),),
        topology="decoder-stack",
        dataset_kind="text",
    )


class Block:
    def __init__(
        self,
        name: str,
        config: TinyLMConfig,
        mode: str,
        rng: np.random.Generator,
        materialize: bool,
    ):
        e_max, dh = max(config.embed), config.head_dim
        width = max(config.heads) * dh
        hidden = e_max * max(config.mlp_ratio)
        embed = ChoiceDim(EMBED, config.embed)
        heads = ChoiceDim(HEADS, config.heads)
        ratio = ChoiceDim(RATIO, config.mlp_ratio)
        common = dict(mode=mode, rng=rng, materialize=materialize)

        def norm(label):
            return EntangledNorm(f"{name}/{label}", e_max, [embed.bind((0,))], **common)

        def attention_in(label):
            return EntangledLinear(f"{name}/{label}", width, e_max,
                                   [heads.bind((0,), scale=dh), embed.bind((1,))], **common)

        self.ln1 = norm("ln1")
        self.query = attention_in("query")
        self.key = attention_in("key")
        self.value = attention_in("value")
        self.proj = EntangledLinear(f"{name}/proj", e_max, width,
                                    [embed.bind((0,)), heads.bind((1,), scale=dh)], **common)
        self.ln2 = norm("ln2")
        self.fc1 = EntangledLinear(
            f"{name}/fc1", hidden, e_max, [embed.bind((0, 1)), ratio.bind((0,))], **common
        )
        self.fc2 = EntangledLinear(
            f"{name}/fc2", e_max, hidden, [embed.bind((0, 1)), ratio.bind((1,))], **common
        )
        self.head_dim = dh

    @property
    def sites(self) -> List[MixedSite]:
        return [self.ln1, self.query, self.key, self.value, self.proj, self.ln2, self.fc1, self.fc2]

    def _attention(self, q: DiffArray, k: DiffArray, v: DiffArray) -> DiffArray:
        batch, steps, width = q.shape
        heads = width // self.head_dim

        def split(t):
            return transpose(reshape(t, (batch, steps, heads, self.head_dim)), (0, 2, 1, 3))

        scores = matmul(split(q), transpose(split(k), (0, 1, 3, 2)))
        scores = scale(scores, 1.0 / math.sqrt(self.head_dim))
        mask = np.triu(np.full((steps, steps), MASK_VALUE, dtype=scores.dtype), k=1)
        weights = softmax(add(scores, mask), axis=-1)
        out = transpose(matmul(weights, split(v)), (0, 2, 1, 3))
        return reshape(out, (batch, steps, width))

    def forward(self, h: DiffArray, run: Callable[[MixedSite, DiffArray], DiffArray]) -> DiffArray:
        a = run(self.ln1, h)
        attended = self._attention(run(self.query, a), run(self.key, a), run(self.value, a))
        h = add(h, run(self.proj, attended))
        m = gelu(run(self.fc1, run(self.ln2, h)))
        return add(h, run(self.fc2, m))


class TinyLMSupernet(Supernet):
    def __init__(
        self,
        config: TinyLMConfig = None,
        mode: str = "WE",
        seed: int = 0,
        materialize: bool = True,
    ):
        config = config or TinyLMConfig()
        super().__init__(tiny_lm_spec(config), mode, config)
        rng = np.random.default_rng(seed)
        e_max = max(config.embed)
        embed_cols = [ChoiceDim(EMBED, config.embed).bind((1,))]
        common = dict(mode=mode, rng=rng, materialize=materialize)
        self.tokens = self.register(
            EntangledEmbedding("tokens", config.vocab_size, e_max, embed_cols, **common)
        )
        self.positions = self.register(
            EntangledEmbedding("positions", config.context, e_max, embed_cols, **common)
        )
        self.blocks: List[Block] = []
        for index in range(max(config.layers)):
            block = Block(f"block{index}", config, mode, rng, materialize)
            for site in block.sites:
                self.register(site)
            self.blocks.append(block)
        embed_rows = [ChoiceDim(EMBED, config.embed).bind((0,))]
        self.ln_f = self.register(EntangledNorm("ln_f", e_max, embed_rows, **common))
        self.lm_head = self.register(
            EntangledLinear("lm_head", config.vocab_size, e_max, embed_cols, bias=False, **common)
        )
        logger.debug(
            "Built %s supernet (%s) with %d parameters", SPACE_ID, mode, self.param_count()
        )

    def path_plan(self, arch: Architecture) -> List[PlanEntry]:
        assignment = arch.as_dict()
        depth = self.config.layers[assignment[LAYERS]]
        sites = [self.tokens, self.positions]
        for block in self.blocks[:depth]:
            sites.extend(block.sites)
        sites.extend([self.ln_f, self.lm_head])
        return [(site, assignment, {}) for site in sites]

    def _embed(self, ids, run) -> DiffArray:
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] > self.config.context:
            raise DimensionError(
                f"Token ids must be [batch, <= {self.config.context}], got {ids.shape}"
            )
        return add(run(self.tokens, ids), run(self.positions, np.arange(ids.shape[1])))

    def _logits(self, h, run) -> DiffArray:
        return run(self.lm_head, run(self.ln_f, h))

    def apply_path(self, tensors: Mapping[str, DiffArray], ids, arch: Architecture) -> DiffArray:
        def run(site, t):
            return site.apply(t, tensors)

        h = self._embed(ids, run)
        for block in self.blocks[: self.config.layers[arch[LAYERS]]]:
            h = block.forward(h, run)
        return self._logits(h, run)

    def mixture_forward(self, ids, mixes, bounds) -> DiffArray:
        def run(site, t):
            return site.mix(t, mixes, bounds)

        depth_mix = mixes[LAYERS]
        h = self._embed(ids, run)
        done = 0
        logits = None
        for index in range(bounds[LAYERS] + 1):
            depth = self.config.layers[index]
            for block in self.blocks[done:depth]:
                h = block.forward(h, run)
            done = depth
            weight = slice_view(depth_mix, [(index, index + 1)])
            if not carries_gradient(weight) and not np.any(weight.values):
                continue
            term = mul(weight, self._logits(h, run))
            logits = term if logits is None else add(logits, term)
        return logits


def build_tiny_lm_space(
    preset: str = "desk",
    config: TinyLMConfig = None,
    mode: str = "WE",
    seed: int = 0,
    materialize: bool = True,
    **overrides,
) -> TinyLMSupernet:
    """`config` wins over `preset`; keyword overrides apply to the preset's values."""
    if config is None:
        config = tiny_lm_config(preset, **overrides)
    return TinyLMSupernet(config, mode=mode, seed=seed, materialize=materialize)
