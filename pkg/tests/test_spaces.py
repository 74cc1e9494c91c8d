import numpy as np
import pytest

from supernet_search.autodiff import DiffArray, Tape, backward, parameter
from supernet_search.checkpoint import load_checkpoint, save_checkpoint
from supernet_search.config import SamplerConfig
from supernet_search.conv_macro import ConvMacroSupernet
from supernet_search.errors import (
    ConfigurationError,
    FormatError,
    InvalidArchitectureError,
    NormalizationError,
)
from supernet_search.layers import EntangledLinear
from supernet_search.samplers import Sampler
from supernet_search.search_space import (
    Architecture,
    discretize,
    mixture_from_architecture,
    param_count,
)
from supernet_search.spaces import SPACE_IDS, build_space, space_config
from supernet_search.superposition import ChoiceDim
from supernet_search.tiny_lm import TinyLMSupernet
from supernet_search.toy_cell import ToyCellSupernet
from supernet_search.training import loss_fn


def _sample(spec, count, seed=0):
    rng = np.random.default_rng(seed)
    return [spec.sample(rng) for _ in range(count)]


def _one_hot_forward(supernet, x, arch):
    return supernet.forward_mixture(x, mixture_from_architecture(supernet.spec, arch)).values


# -- architectures -------------------------------------------------------------


def test_architecture_text_is_canonical():
    arch = Architecture.from_mapping({"layer2/kernel": 1, "layer1/kernel": 0})
    assert arch.to_text() == "layer1/kernel=0;layer2/kernel=1"
    assert Architecture.parse(arch.to_text()) == arch
    assert arch.with_choice("layer1/kernel", 2)["layer1/kernel"] == 2


@pytest.mark.parametrize("text", ["", "a", "a=1;a=2", "a=x", "=1"])
def test_malformed_architecture_text(text):
    with pytest.raises(InvalidArchitectureError):
        Architecture.parse(text)


def test_spec_validation(small_macro):
    spec = small_macro.spec
    with pytest.raises(InvalidArchitectureError):
        spec.parse("layer1/kernel=0")
    bad = dict(spec.largest().as_dict(), **{"layer1/kernel": 2})
    with pytest.raises(InvalidArchitectureError):
        spec.architecture(bad)


def test_discretize_breaks_ties_low():
    arch = discretize({"a": np.array([0.5, 0.5, 0.1]), "b": np.array([0.0, 1.0])})
    assert arch.as_dict() == {"a": 0, "b": 1}


# -- cardinality and parameter accounting ----------------------------------------


@pytest.mark.parametrize(
    "space_id,expected", [("conv-macro", 6561), ("toy-cell", 4096), ("tiny-lm", 36)]
)
def test_default_cardinalities(space_id, expected):
    assert build_space(space_id, materialize=False).spec.cardinality == expected


@pytest.mark.parametrize("space_id", SPACE_IDS)
def test_entangled_supernet_is_as_large_as_its_largest_architecture(space_id):
    we = build_space(space_id, mode="WE", materialize=False)
    ws = build_space(space_id, mode="WS", materialize=False)
    assert we.param_count() == we.largest_param_count()
    assert ws.param_count() / we.param_count() > 1.0


@pytest.mark.parametrize("space_id", ["conv-macro", "tiny-lm"])
def test_largest_architecture_path_count(space_id):
    we = build_space(space_id, mode="WE", materialize=False)
    assert param_count(we, we.spec.largest()) == param_count(we)


def test_lazy_storage_counts_like_materialized(small_macro_config):
    lazy = ConvMacroSupernet(small_macro_config, mode="WS", materialize=False)
    real = ConvMacroSupernet(small_macro_config, mode="WS", materialize=True)
    assert lazy.param_count() == real.param_count()


def test_param_count_of_standalone_needs_no_arch(small_macro):
    model = small_macro.inherit(small_macro.spec.smallest())
    assert param_count(model) == small_macro.path_param_count(small_macro.spec.smallest())
    with pytest.raises(ConfigurationError):
        param_count(model, small_macro.spec.smallest())


# -- one-hot mixtures reproduce the single path exactly ----------------------------


def test_one_hot_conv_macro_is_bit_identical(small_macro, image_batch):
    for arch in small_macro.spec.enumerate():
        path = small_macro.forward_path(image_batch, arch).values
        mixed = _one_hot_forward(small_macro, image_batch, arch)
        np.testing.assert_array_equal(mixed, path)


def test_one_hot_weight_sharing_macro_is_bit_identical(small_macro_config, image_batch):
    supernet = ConvMacroSupernet(small_macro_config, mode="WS", seed=3)
    for arch in supernet.spec.enumerate():
        path = supernet.forward_path(image_batch, arch).values
        mixed = _one_hot_forward(supernet, image_batch, arch)
        np.testing.assert_array_equal(mixed, path)


def test_one_hot_toy_cell_is_bit_identical(small_cell, image_batch):
    spec = small_cell.spec
    for arch in _sample(spec, 6) + [spec.largest(), spec.smallest()]:
        path = small_cell.forward_path(image_batch, arch).values
        mixed = _one_hot_forward(small_cell, image_batch, arch)
        np.testing.assert_array_equal(mixed, path)


def test_one_hot_tiny_lm_is_bit_identical(small_lm, token_batch):
    for arch in small_lm.spec.enumerate():
        path = small_lm.forward_path(token_batch, arch).values
        mixed = _one_hot_forward(small_lm, token_batch, arch)
        np.testing.assert_array_equal(mixed, path)


def test_desk_lm_one_hot_is_bit_identical(rng):
    supernet = build_space("tiny-lm", vocab_size=16, context=8)
    ids = rng.integers(0, 16, size=(1, 8))
    for arch in [supernet.spec.largest(), supernet.spec.smallest()] + _sample(supernet.spec, 3):
        path = supernet.forward_path(ids, arch).values
        mixed = _one_hot_forward(supernet, ids, arch)
        np.testing.assert_array_equal(mixed, path)


# -- forward modes ---------------------------------------------------------------


def test_output_shapes(small_macro, small_cell, small_lm, image_batch, token_batch):
    assert small_macro.forward_path(image_batch, small_macro.spec.largest()).shape == (3, 4)
    assert small_cell.forward_path(image_batch, small_cell.spec.smallest()).shape == (3, 4)
    assert small_lm.forward_path(token_batch, small_lm.spec.largest()).shape == (2, 6, 12)


def test_dense_mixture_runs_every_space(
    small_macro, small_cell, small_lm, image_batch, token_batch
):
    cases = ((small_macro, image_batch), (small_cell, image_batch), (small_lm, token_batch))
    for supernet, x in cases:
        mixes = {
            d.name: DiffArray(np.full(d.cardinality, 1.0 / d.cardinality))
            for d in supernet.spec.dims
        }
        assert np.all(np.isfinite(supernet.forward_mixture(x, mixes).values))


def test_mixture_validation(small_macro, image_batch):
    mixes = mixture_from_architecture(small_macro.spec, small_macro.spec.smallest())
    name = small_macro.spec.dims[0].name
    with pytest.raises(NormalizationError):
        small_macro.forward_mixture(image_batch, dict(mixes, **{name: DiffArray([0.7, 0.7])}))
    mixes.pop(name)
    with pytest.raises(ConfigurationError):
        small_macro.forward_mixture(image_batch, mixes)


def test_different_paths_give_different_outputs(small_macro, image_batch):
    spec = small_macro.spec
    outputs = {
        arch.to_text(): small_macro.forward_path(image_batch, arch).values
        for arch in spec.enumerate()
    }
    texts = sorted(outputs)
    for i, a in enumerate(texts):
        for b in texts[i + 1:]:
            assert not np.allclose(outputs[a], outputs[b])


def test_inherit_copies_slices(small_macro, image_batch, rng):
    arch = _sample(small_macro.spec, 1, seed=5)[0]
    model = small_macro.inherit(arch)
    for _ in range(20):
        x = rng.standard_normal(image_batch.shape)
        expected = small_macro.forward_path(x, arch).values
        np.testing.assert_array_equal(model.forward(x).values, expected)
    before = small_macro.state_tensors()
    for p in model.parameters():
        p.values += 1.0
    for name, values in small_macro.state_tensors().items():
        np.testing.assert_array_equal(values, before[name])


def test_path_masks_count_the_path(small_macro, small_cell):
    for supernet in (small_macro, small_cell):
        for arch in _sample(supernet.spec, 4):
            masks = supernet.path_masks(arch)
            assert sum(int(m.sum()) for m in masks.values()) == supernet.path_param_count(arch)


def test_entangled_and_shared_sites_agree_with_tied_weights(rng):
    dims = [ChoiceDim("out", (3, 6), (0,))]
    we = EntangledLinear("fc", 6, 4, dims, mode="WE", rng=rng)
    ws = EntangledLinear("fc", 6, 4, dims, mode="WS", rng=rng)
    for combo, param in ws.choices.items():
        rows = dims[0].choices[combo[0]]
        param.storage.values[...] = we.entangled.storage.values[:rows]
        param.bias_storage.values[...] = we.entangled.bias_storage.values[:rows]
    x = DiffArray(rng.standard_normal((5, 4)))
    for _ in range(10):
        mixes = {"out": DiffArray(rng.dirichlet(np.ones(2)))}
        np.testing.assert_allclose(
            ws.mix(x, mixes, {"out": 1}).values,
            we.mix(x, mixes, {"out": 1}).values,
            rtol=1e-8,
            atol=1e-12,
        )


# -- mixture gradients at one-hot points -------------------------------------------


def _full_bounds(spec):
    return {d.name: d.cardinality - 1 for d in spec.dims}


def _mixture_gradients(supernet, x, labels, arch):
    one_hot = mixture_from_architecture(supernet.spec, arch)
    mixes = {name: parameter(m.values) for name, m in one_hot.items()}
    with Tape() as tape:
        loss = loss_fn(supernet.forward_mixture(x, mixes), labels)
    backward(loss, tape)
    return {name: m.adjoint for name, m in mixes.items()}


def _numeric_gradients(supernet, x, labels, arch, step=1e-5):
    base = {name: m.values for name, m in mixture_from_architecture(supernet.spec, arch).items()}
    bounds = _full_bounds(supernet.spec)
    grads = {}
    for name, values in base.items():
        grad = np.zeros_like(values)
        for j in range(values.size):
            losses = []
            for sign in (1.0, -1.0):
                shifted = values.copy()
                shifted[j] += sign * step
                mixes = {n: DiffArray(shifted if n == name else v) for n, v in base.items()}
                losses.append(loss_fn(supernet.mixture_forward(x, mixes, bounds), labels).item())
            grad[j] = (losses[0] - losses[1]) / (2 * step)
        grads[name] = grad
    return grads


def _assert_gradients_match(supernet, x, labels, arch):
    analytic = _mixture_gradients(supernet, x, labels, arch)
    numeric = _numeric_gradients(supernet, x, labels, arch)
    for name in numeric:
        np.testing.assert_allclose(
            analytic[name], numeric[name], rtol=1e-4, atol=1e-6, err_msg=name
        )


@pytest.mark.parametrize("mode", ["WE", "WS"])
def test_one_hot_macro_mixture_gradient_covers_unselected_choices(
    small_macro_config, image_batch, mode
):
    supernet = ConvMacroSupernet(small_macro_config, mode=mode, seed=2)
    labels = np.array([0, 1, 3])
    _assert_gradients_match(supernet, image_batch, labels, supernet.spec.smallest())


def test_one_hot_cell_mixture_gradient_covers_zero_weight_op_types(small_cell, image_batch):
    # smallest() picks sep_conv_3x3 everywhere, so the dilated branch carries zero weight
    labels = np.array([2, 0, 1])
    _assert_gradients_match(small_cell, image_batch, labels, small_cell.spec.smallest())


def test_one_hot_lm_mixture_gradient_covers_deeper_prefixes(small_lm, token_batch):
    labels = np.roll(token_batch, -1, axis=1)
    _assert_gradients_match(small_lm, token_batch, labels, small_lm.spec.smallest())


@pytest.mark.parametrize("strategy", ["gumbel_st", "dirichlet"])
def test_sampled_alpha_gradient_matches_full_cross_product(small_macro, image_batch, strategy):
    labels = np.array([1, 2, 0])
    grads = []
    for bounds in (None, _full_bounds(small_macro.spec)):
        arch_params = small_macro.arch_params(seed=4)
        sampler = Sampler(SamplerConfig(strategy=strategy, seed=7))
        with Tape() as tape:
            mixes = sampler.sample(arch_params)
            if bounds is None:
                logits = small_macro.forward_mixture(image_batch, mixes)
            else:
                logits = small_macro.mixture_forward(image_batch, mixes, bounds)
            loss = loss_fn(logits, labels)
        backward(loss, tape)
        grads.append({name: arch_params[name].adjoint.copy() for name in arch_params.names})
    for name in grads[0]:
        np.testing.assert_allclose(
            grads[0][name], grads[1][name], rtol=1e-10, atol=1e-12, err_msg=name
        )


# -- state and registry ------------------------------------------------------------


def test_state_round_trip_through_checkpoint(tmp_path, small_macro_config, image_batch):
    source = ConvMacroSupernet(small_macro_config, seed=1)
    path = save_checkpoint(tmp_path / "s.tnas", source.state_tensors())
    target = ConvMacroSupernet(small_macro_config, seed=2)
    target.load_state_tensors(load_checkpoint(path))
    arch = source.spec.largest()
    np.testing.assert_array_equal(target.forward_path(image_batch, arch).values,
                                  source.forward_path(image_batch, arch).values)


def test_state_must_match_the_supernet(small_macro_config):
    supernet = ConvMacroSupernet(small_macro_config)
    state = supernet.state_tensors()
    state.pop(next(iter(state)))
    with pytest.raises(FormatError):
        supernet.load_state_tensors(state)


def test_registry():
    assert isinstance(build_space("toy-cell", materialize=False), ToyCellSupernet)
    assert isinstance(build_space("tiny-lm", materialize=False), TinyLMSupernet)
    assert space_config("tiny-lm", preset="paper").embed == (384, 576, 768)
    with pytest.raises(ConfigurationError):
        space_config("resnet")
    with pytest.raises(ConfigurationError):
        space_config("conv-macro", depth=3)
    with pytest.raises(ConfigurationError):
        space_config("tiny-lm", preset="huge")


def test_cell_genotype_text(small_cell):
    text = small_cell.genotype_text(small_cell.spec.smallest())
    assert text.startswith("Genotype(normal=[('sep_conv_3x3', 0)")
    assert "reduce_concat=range(1, 3)" in text
    assert small_cell.spec.describe(small_cell.spec.largest())["normal/edge_0_1"] == "dil_conv_5x5"
