import itertools

import numpy as np
import pytest

from supernet_search.autodiff import DiffArray, conv2d, grad_check, parameter, reduce_sum, softmax
from supernet_search.errors import ChoiceError, ConfigurationError, NormalizationError
from supernet_search.superposition import (
    ChoiceDim,
    EntangledParameter,
    check_simplex,
    combi_superpose,
    cross_product_weights,
    mixture_conv2d,
    mixture_linear,
    slice_choice,
    superpose,
    superpose_all,
    support_bounds,
)

TRIALS = 100


def _choices(rng, pool, low=2, high=3):
    count = int(rng.integers(low, high + 1))
    return tuple(sorted(rng.choice(pool, size=count, replace=False).tolist()))


def _simplex(rng, size):
    return DiffArray(rng.dirichlet(np.ones(size)))


def _linear_case(rng):
    outs, ins = _choices(rng, np.arange(1, 7)), _choices(rng, np.arange(1, 7))
    storage = rng.standard_normal((max(outs), max(ins)))
    bias = rng.standard_normal(max(outs))
    dims = [ChoiceDim("out", outs, (0,)), ChoiceDim("in", ins, (1,))]
    ep = EntangledParameter("fc", storage, dims, bias)
    return ep, outs, ins


def test_mixture_linear_matches_per_choice_outputs(rng):
    for _ in range(TRIALS):
        ep, outs, ins = _linear_case(rng)
        x = rng.standard_normal((3, max(ins)))
        mix_out, mix_in = _simplex(rng, len(outs)), _simplex(rng, len(ins))
        got = mixture_linear(DiffArray(x), ep, {"out": mix_out, "in": mix_in}).values

        expected = np.zeros((3, max(outs)))
        storage, bias = ep.storage.values, ep.bias_storage.values
        for (i, o), (j, n) in itertools.product(enumerate(outs), enumerate(ins)):
            y = x[:, :n] @ storage[:o, :n].T + bias[:o]
            expected[:, :o] += mix_out.values[i] * mix_in.values[j] * y
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)


def test_mixture_conv2d_matches_per_choice_outputs(rng):
    for _ in range(TRIALS):
        widths = _choices(rng, np.arange(1, 6))
        kernels = _choices(rng, np.array([1, 3, 5]), low=2, high=3)
        dilation = int(rng.integers(1, 3))
        c_in, k_max = int(rng.integers(1, 4)), max(kernels)
        storage = rng.standard_normal((max(widths), c_in, k_max, k_max))
        bias = rng.standard_normal(max(widths))
        dims = [
            ChoiceDim("channels", widths, (0,)),
            ChoiceDim("kernel", kernels, (2, 3), "centered"),
        ]
        ep = EntangledParameter("conv", storage, dims, bias)
        x = rng.standard_normal((2, c_in, 6, 6))
        mix_c, mix_k = _simplex(rng, len(widths)), _simplex(rng, len(kernels))

        mixes = {"channels": mix_c, "kernel": mix_k}
        got = mixture_conv2d(DiffArray(x), ep, mixes, dilation=dilation).values

        expected = np.zeros((2, max(widths), 6, 6))
        for (i, c), (j, k) in itertools.product(enumerate(widths), enumerate(kernels)):
            start = (k_max - k) // 2
            kernel = storage[:c, :, start:start + k, start:start + k]
            padding = (k - 1) // 2 * dilation
            y = conv2d(DiffArray(x), DiffArray(kernel), dilation=dilation, padding=padding).values
            weight = mix_c.values[i] * mix_k.values[j]
            expected[:, :c] += weight * (y + bias[:c].reshape(1, c, 1, 1))
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)


def test_combi_superpose_four_term_loop():
    storage = np.arange(8.0).reshape(4, 2) + 1.0
    dims = [ChoiceDim("embed", (1, 2), (0, 1)), ChoiceDim("ratio", (1, 2), (0,))]
    ep = EntangledParameter("fc1", storage, dims)
    half = DiffArray([0.5, 0.5])
    weight, bias = combi_superpose(ep, [half, half])
    expected = np.zeros((4, 2))
    for e, r in itertools.product((1, 2), (1, 2)):
        expected[:e * r, :e] += 0.25 * storage[:e * r, :e]
    np.testing.assert_array_equal(weight.values, expected)
    assert bias is None


def test_one_hot_is_the_padded_slice(rng):
    storage = rng.standard_normal((5, 5))
    ep = EntangledParameter("k", storage, [ChoiceDim("kernel", (1, 3, 5), (0, 1), "centered")])
    for index, k in enumerate((1, 3, 5)):
        mix = np.zeros(3)
        mix[index] = 1.0
        full = superpose(ep, DiffArray(mix)).values
        expected = np.zeros((5, 5))
        start = (5 - k) // 2
        expected[start:start + k, start:start + k] = storage[start:start + k, start:start + k]
        np.testing.assert_array_equal(full, expected)
        bound = support_bounds({"kernel": DiffArray(mix)})
        bounded = superpose(ep, DiffArray(mix), bound=bound).values
        np.testing.assert_array_equal(bounded, slice_choice(ep, {"kernel": index}).values)


def test_cross_product_weights_sum_to_one(rng):
    weights = cross_product_weights([rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(2))])
    assert weights.shape == (3, 2)
    assert weights.sum() == pytest.approx(1.0)


def test_simplex_validation(rng):
    dim = ChoiceDim("d", (1, 2, 3))
    check_simplex(DiffArray([0.2, 0.3, 0.5]), dim)
    with pytest.raises(NormalizationError):
        check_simplex(DiffArray([0.2, 0.3, 0.6]), dim)
    with pytest.raises(NormalizationError):
        check_simplex(DiffArray([-0.5, 0.5, 1.0]), dim)
    with pytest.raises(ConfigurationError):
        check_simplex(DiffArray([0.5, 0.5]), dim)


def test_choice_and_layout_errors(rng):
    ep = EntangledParameter("w", rng.standard_normal((4, 3)), [ChoiceDim("out", (2, 4), (0,))])
    with pytest.raises(ChoiceError):
        slice_choice(ep, {"out": 2})
    with pytest.raises(ChoiceError):
        slice_choice(ep, {})
    with pytest.raises(ConfigurationError):
        EntangledParameter("w", rng.standard_normal((4, 3)), [ChoiceDim("out", (2, 3), (0,))])
    with pytest.raises(ConfigurationError):
        EntangledParameter(
            "k",
            rng.standard_normal((1, 1, 3, 3)),
            [ChoiceDim("kernel", (2, 3), (2, 3), "centered")],
        )
    with pytest.raises(ConfigurationError):
        ChoiceDim("d", (3, 2))
    with pytest.raises(ConfigurationError):
        combi_superpose(ep, [DiffArray([0.5, 0.5])])


def test_masks_cover_the_active_window(rng):
    storage = rng.standard_normal((4, 2, 5, 5))
    dims = [ChoiceDim("channels", (2, 4), (0,)), ChoiceDim("kernel", (3, 5), (2, 3), "centered")]
    ep = EntangledParameter("conv", storage, dims, rng.standard_normal(4))
    masks = ep.masks({"channels": 0, "kernel": 0}, fixed={1: 1})
    weight_mask = masks["conv/storage"]
    assert weight_mask.sum() == 2 * 1 * 3 * 3
    assert weight_mask[:2, :1, 1:4, 1:4].all()
    assert masks["conv/bias_storage"].tolist() == [True, True, False, False]


@pytest.mark.parametrize("trial", range(20))
def test_gradients_through_superpose(trial):
    rng = np.random.default_rng(100 + trial)
    storage = parameter(rng.standard_normal((5, 5)))
    ep = EntangledParameter("k", storage, [ChoiceDim("kernel", (1, 3, 5), (0, 1), "centered")])
    alpha = parameter(rng.standard_normal(3))
    target = rng.standard_normal((5, 5))

    def f(params):
        weight = superpose(ep, softmax(params[1]))
        return reduce_sum(weight * weight * target)

    assert grad_check(f, [storage, alpha]) < 1e-6


@pytest.mark.parametrize("trial", range(20))
def test_gradients_through_combi_superpose(trial):
    rng = np.random.default_rng(200 + trial)
    storage = parameter(rng.standard_normal((8, 4)))
    bias = parameter(rng.standard_normal(8))
    dims = [ChoiceDim("embed", (2, 4), (0, 1)), ChoiceDim("ratio", (1, 2), (0,))]
    ep = EntangledParameter("fc1", storage, dims, bias)
    alpha_e, alpha_r = parameter(rng.standard_normal(2)), parameter(rng.standard_normal(2))
    x = DiffArray(rng.standard_normal((3, 4)))

    def f(params):
        y = mixture_linear(x, ep, [softmax(params[2]), softmax(params[3])])
        return reduce_sum(y * y)

    assert grad_check(f, [storage, bias, alpha_e, alpha_r]) < 1e-6


def test_superpose_all_without_dims_is_the_storage(rng):
    ep = EntangledParameter("plain", rng.standard_normal((3, 2)), [], rng.standard_normal(3))
    weight, bias = superpose_all(ep, {})
    np.testing.assert_array_equal(weight.values, ep.storage.values)
    np.testing.assert_array_equal(bias.values, ep.bias_storage.values)
