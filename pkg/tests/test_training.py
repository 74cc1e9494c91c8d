import math

import numpy as np
import pytest

from supernet_search.autodiff import DiffArray
from supernet_search.config import OptimizerConfig
from supernet_search.conv_macro import ConvMacroSupernet
from supernet_search.errors import ConfigurationError, ConsistencyError, DivergenceError
from supernet_search.training import (
    ArrayDataset,
    batches,
    correct_count,
    evaluate,
    evaluate_inherited,
    loss_fn,
    resolve_splits,
    retrain,
    split_dataset,
    train_epochs,
)


def test_split_is_disjoint_and_deterministic(tiny_images):
    train, val = split_dataset(tiny_images, 0.75, seed=5)
    assert (len(train), len(val)) == (18, 6)
    again, _ = split_dataset(tiny_images, 0.75, seed=5)
    np.testing.assert_array_equal(train.inputs, again.inputs)
    rows = {tuple(x.ravel()) for x in train.inputs} | {tuple(x.ravel()) for x in val.inputs}
    assert len(rows) == 24
    kept_train, kept_val = resolve_splits((train, val), 0.1, 0)
    assert kept_train is train and kept_val is val


@pytest.mark.parametrize("fraction", [0.0, 1.0, 0.01])
def test_split_rejects_empty_sides(tiny_images, fraction):
    with pytest.raises(ConfigurationError):
        split_dataset(tiny_images, fraction)


def test_dataset_lengths_must_agree():
    with pytest.raises(ConsistencyError):
        ArrayDataset(np.zeros((3, 2)), np.zeros(2))


def test_batches_cover_every_row_once(tiny_images):
    seen = np.concatenate([y for _, y in batches(tiny_images, 5, np.random.default_rng(0))])
    assert sorted(seen.tolist()) == sorted(tiny_images.labels.tolist())
    sizes = [len(y) for _, y in batches(tiny_images, 5)]
    assert sizes == [5, 5, 5, 5, 4]
    with pytest.raises(ConfigurationError):
        next(batches(tiny_images, 0))


def test_token_loss_flattens_the_sequence(rng):
    logits = rng.standard_normal((2, 3, 5))
    labels = rng.integers(0, 5, size=(2, 3))
    flat = loss_fn(DiffArray(logits.reshape(6, 5)), labels.reshape(-1)).item()
    assert loss_fn(DiffArray(logits), labels).item() == pytest.approx(flat)
    assert correct_count(logits, labels) == int(np.sum(logits.argmax(-1) == labels))


def test_evaluate_reports_loss_accuracy_and_perplexity(small_macro, tiny_images):
    model = small_macro.inherit(small_macro.spec.largest())
    result = evaluate(model.forward, tiny_images, batch_size=7)
    assert result.count == 24
    assert 0.0 <= result.accuracy <= 1.0
    assert result.perplexity == pytest.approx(math.exp(result.loss))
    inherited = evaluate_inherited(small_macro, small_macro.spec.largest(), tiny_images)
    assert inherited == result.accuracy


def test_train_epochs_lowers_the_loss(small_macro, tiny_images):
    model = small_macro.inherit(small_macro.spec.largest())
    history = train_epochs(model.forward, model.parameters(), tiny_images, 8,
                           OptimizerConfig(kind="adamw", lr=1e-2, weight_decay=0.0), batch_size=8)
    assert len(history) == 8
    assert history[-1] < history[0]


def test_train_epochs_stops_on_a_non_finite_loss(tiny_images):
    def forward(x):
        return DiffArray(np.full((len(x), 4), np.nan))

    with pytest.raises(DivergenceError) as info:
        train_epochs(forward, [], tiny_images, 1, OptimizerConfig())
    assert info.value.record["phase"] == "train"


def test_retrain_starts_from_a_fresh_initialisation(small_macro_config, tiny_images):
    train, test = split_dataset(tiny_images, 0.5, seed=0)
    arch = ConvMacroSupernet(small_macro_config).spec.smallest()

    def factory(seed):
        return ConvMacroSupernet(small_macro_config, seed=seed)

    first = retrain(factory, arch, train, test, epochs=2, seed=1)
    second = retrain(factory, arch, train, test, epochs=2, seed=1)
    assert first == second
    assert 0.0 <= first <= 1.0
