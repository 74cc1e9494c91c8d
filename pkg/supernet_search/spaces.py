# supernet_search/spaces.py
"""Space registry: build any supernet from its id and plain option values."""
import logging
from typing import Any, Dict

from supernet_search.conv_macro import ConvMacroConfig, ConvMacroSupernet
from supernet_search.errors import ConfigurationError
from supernet_search.search_space import Supernet
from supernet_search.tiny_lm import TinyLMSupernet, tiny_lm_config
from supernet_search.toy_cell import ToyCellConfig, ToyCellSupernet

logger = logging.getLogger(__name__)

SPACE_IDS = ("toy-cell", "conv-macro", "tiny-lm")


def space_config(space_id: str, **options: Any):
    """Config dataclass for a space; unknown option names are configuration errors."""
    try:
        if space_id == "toy-cell":
            return ToyCellConfig(**options)
        if space_id == "conv-macro":
            return ConvMacroConfig(**options)
        if space_id == "tiny-lm":
            options = dict(options)
            return tiny_lm_config(options.pop("preset", "desk"), **options)
    except TypeError as e:
        raise ConfigurationError(f"Invalid options for space {space_id!r}: {e}") from e
    raise ConfigurationError(f"Unknown space {space_id!r}; expected one of {list(SPACE_IDS)}")


def build_space(space_id: str, mode: str = "WE", seed: int = 0, materialize: bool = True,
                **options: Any) -> Supernet:
    config = space_config(space_id, **options)
    builders: Dict[str, type] = {
        "toy-cell": ToyCellSupernet,
        "conv-macro": ConvMacroSupernet,
        "tiny-lm": TinyLMSupernet,
    }
    supernet = builders[space_id](config, mode=mode, seed=seed, materialize=materialize)
    logger.info("Built %s supernet in %s mode: %d parameters, %d architectures",
                space_id, mode, supernet.param_count(), supernet.spec.cardinality)
    return supernet
