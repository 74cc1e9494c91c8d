# supernet_search/synthetic_data.py
"""
Synthetic tasks with known structure.

planted_kernel   8x8 images; each class is a signed pattern on the border ring of
                 an m x m square placed at a random position. Seeing a whole ring
                 needs an m x m receptive field in one layer, so the planted
                 optimum uses kernel m everywhere with the widest channels.
planted_channel  the same construction with 3x3 motifs and many classes; the
                 planted optimum uses kernel 3 and, per layer, the narrowest width
                 that still covers the class count.
char_grammar     character streams drawn from a small probabilistic grammar.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from supernet_search.conv_macro import ConvMacroConfig, channel_dim, kernel_dim
from supernet_search.errors import ConfigurationError
from supernet_search.search_space import Architecture
from supernet_search.training import ArrayDataset

logger = logging.getLogger(__name__)

KINDS = ("planted_kernel", "planted_channel", "char_grammar")

GRAMMAR: Dict[str, List[Tuple[Tuple[str, ...], float]]] = {
    "S": [(("NP", "VP"), 1.0)],
    "NP": [(("Det", "N"), 0.6), (("Det", "Adj", "N"), 0.4)],
    "VP": [(("V", "NP"), 0.5), (("V",), 0.3), (("V", "Adv"), 0.2)],
    "Det": [(("the",), 0.6), (("a",), 0.4)],
    "N": [(("cat",), 0.3), (("dog",), 0.3), (("bird",), 0.2), (("fish",), 0.2)],
    "Adj": [(("big",), 0.4), (("small",), 0.3), (("red",), 0.3)],
    "V": [(("sees",), 0.4), (("chases",), 0.3), (("likes",), 0.3)],
    "Adv": [(("fast",), 0.5), (("slowly",), 0.5)],
}
MAX_DEPTH = 8


@dataclass
class SyntheticTaskSpec:
    kind: str = "planted_kernel"
    seed: int = 0
    num_classes: int = 4
    image_size: int = 8
    motif_extent: int = 5
    noise: float = 0.3
    train_size: int = 512
    val_size: int = 128
    test_size: int = 256
    sentences: int = 2000
    context: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(
                f"Unknown synthetic task kind {self.kind!r}; expected one of {KINDS}"
            )
        if self.kind == "planted_channel":
            self.motif_extent = 3
        if self.motif_extent % 2 == 0 or not 3 <= self.motif_extent <= self.image_size:
            raise ConfigurationError(
                f"motif_extent {self.motif_extent} must be odd and within [3, {self.image_size}]"
            )
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise ConfigurationError("Every split needs at least one sample")

    def planted_optimum(self, config: Optional[ConvMacroConfig] = None) -> Optional[Architecture]:
        """Architecture of the conv-macro space the task is built to favour (None for text)."""
        if self.kind == "char_grammar":
            return None
        config = config or ConvMacroConfig(num_classes=self.num_classes)
        if self.motif_extent not in config.kernels:
            raise ConfigurationError(
                f"Motif extent {self.motif_extent} is not a kernel choice {config.kernels}"
            )
        assignment = {}
        for layer, widths in enumerate(config.channels, 1):
            assignment[kernel_dim(layer)] = config.kernels.index(self.motif_extent)
            if self.kind == "planted_kernel":
                assignment[channel_dim(layer)] = len(widths) - 1
            else:
                wide_enough = [i for i, w in enumerate(widths) if w >= self.num_classes]
                assignment[channel_dim(layer)] = wide_enough[0] if wide_enough else len(widths) - 1
        return Architecture.from_mapping(assignment)


@dataclass
class SyntheticImages:
    train: ArrayDataset
    val: ArrayDataset
    test: ArrayDataset
    planted: Architecture
    motifs: np.ndarray


@dataclass
class CharCorpus:
    vocabulary: List[str]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    unigram_perplexity: float
    bigram_perplexity: float

    def encode(self, text: str) -> np.ndarray:
        index = {ch: i for i, ch in enumerate(self.vocabulary)}
        return np.array([index[ch] for ch in text], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.vocabulary[int(i)] for i in ids)


def ring_positions(extent: int) -> List[Tuple[int, int]]:
    """Border cells of an extent x extent square, clockwise from the top-left corner."""
    last = extent - 1
    top = [(0, j) for j in range(extent)]
    right = [(i, last) for i in range(1, extent)]
    bottom = [(last, j) for j in range(last - 1, -1, -1)]
    left = [(i, 0) for i in range(last - 1, 0, -1)]
    return top + right + bottom + left


def class_motifs(spec: SyntheticTaskSpec) -> np.ndarray:
    """[classes, m, m] signed ring patterns, pairwise distinct."""
    rng = np.random.default_rng([spec.seed, 1])
    ring = ring_positions(spec.motif_extent)
    motifs = np.zeros((spec.num_classes, spec.motif_extent, spec.motif_extent))
    seen = set()
    for c in range(spec.num_classes):
        while True:
            signs = rng.choice([-1.0, 1.0], size=len(ring))
            key = tuple(signs)
            if key not in seen and tuple(-signs) not in seen:
                seen.add(key)
                break
        for (i, j), s in zip(ring, signs):
            motifs[c, i, j] = s
    return motifs


def _images(
    spec: SyntheticTaskSpec, motifs: np.ndarray, count: int, rng: np.random.Generator
) -> ArrayDataset:
    labels = rng.permutation(np.arange(count) % spec.num_classes)
    size, m = spec.image_size, spec.motif_extent
    images = spec.noise * rng.standard_normal((count, 1, size, size))
    corners = rng.integers(0, size - m + 1, size=(count, 2))
    for n in range(count):
        i, j = corners[n]
        images[n, 0, i:i + m, j:j + m] += motifs[labels[n]]
    return ArrayDataset(images, labels.astype(np.int64))


def synth_image_dataset(spec: SyntheticTaskSpec) -> SyntheticImages:
    if spec.kind == "char_grammar":
        raise ConfigurationError("synth_image_dataset needs an image task kind")
    motifs = class_motifs(spec)
    rng = np.random.default_rng([spec.seed, 2])
    train = _images(spec, motifs, spec.train_size, rng)
    val = _images(spec, motifs, spec.val_size, rng)
    test = _images(spec, motifs, spec.test_size, rng)
    logger.info(
        "Generated %s task: %d/%d/%d images, %d classes",
        spec.kind, len(train), len(val), len(test), spec.num_classes,
    )
    return SyntheticImages(train, val, test, spec.planted_optimum(), motifs)


def _expand(symbol: str, rng: np.random.Generator, depth: int) -> List[str]:
    if symbol not in GRAMMAR:
        return [symbol]
    if depth > MAX_DEPTH:
        raise ConfigurationError(f"Grammar recursion deeper than {MAX_DEPTH} at {symbol!r}")
    rules = GRAMMAR[symbol]
    probs = np.array([p for _, p in rules])
    choice = rules[int(rng.choice(len(rules), p=probs / probs.sum()))][0]
    words: List[str] = []
    for part in choice:
        words.extend(_expand(part, rng, depth + 1))
    return words


def _perplexity(train: np.ndarray, held_out: np.ndarray, vocab_size: int, bigram: bool) -> float:
    """Add-one smoothed unigram or bigram perplexity of `held_out`."""
    unigram = np.bincount(train, minlength=vocab_size) + 1.0
    unigram_p = unigram / unigram.sum()
    if not bigram:
        return float(np.exp(-np.mean(np.log(unigram_p[held_out]))))
    pairs = np.ones((vocab_size, vocab_size))
    np.add.at(pairs, (train[:-1], train[1:]), 1.0)
    pair_p = pairs / pairs.sum(axis=1, keepdims=True)
    log_p = np.concatenate(
        [[np.log(unigram_p[held_out[0]])], np.log(pair_p[held_out[:-1], held_out[1:]])]
    )
    return float(np.exp(-np.mean(log_p)))


def synth_char_corpus(spec: SyntheticTaskSpec) -> CharCorpus:
    """Sentences split 80/10/10 into train/val/test streams; vocabulary is every character used."""
    if spec.kind != "char_grammar":
        raise ConfigurationError("synth_char_corpus needs kind='char_grammar'")
    rng = np.random.default_rng([spec.seed, 3])
    sentences = [" ".join(_expand("S", rng, 0)) + ".\n" for _ in range(spec.sentences)]
    vocabulary = sorted(set("".join(sentences)))
    index = {ch: i for i, ch in enumerate(vocabulary)}

    def encode(chunk: List[str]) -> np.ndarray:
        return np.array([index[ch] for ch in "".join(chunk)], dtype=np.int64)

    first, second = int(0.8 * len(sentences)), int(0.9 * len(sentences))
    train = encode(sentences[:first])
    val = encode(sentences[first:second])
    test = encode(sentences[second:])
    logger.info(
        "Char corpus: %d sentences, %d symbols, %d train tokens",
        len(sentences), len(vocabulary), len(train),
    )
    return CharCorpus(
        vocabulary=vocabulary,
        train=train,
        val=val,
        test=test,
        unigram_perplexity=_perplexity(train, val, len(vocabulary), bigram=False),
        bigram_perplexity=_perplexity(train, val, len(vocabulary), bigram=True),
    )


def lm_dataset(stream: np.ndarray, context: int) -> ArrayDataset:
    """Non-overlapping windows: inputs stream[i:i+T], labels stream[i+1:i+T+1]."""
    count = (len(stream) - 1) // context
    if count < 1:
        raise ConfigurationError(
            f"Stream of {len(stream)} tokens is shorter than context {context} + 1"
        )
    starts = np.arange(count) * context
    inputs = np.stack([stream[s:s + context] for s in starts])
    labels = np.stack([stream[s + 1:s + context + 1] for s in starts])
    return ArrayDataset(inputs, labels)

