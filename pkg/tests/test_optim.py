import numpy as np
import pytest

from supernet_search.autodiff import parameter
from supernet_search.config import OptimizerConfig
from supernet_search.errors import ConfigurationError, NotReadyError
from supernet_search.optim import (
    OptimState,
    Optimizer,
    adamw_step,
    cosine_learning_rate,
    make_optimizer,
    sgd_step,
)


def test_plain_sgd_step():
    p = parameter([1.0, 2.0])
    p.adjoint = np.array([0.5, -1.0])
    sgd_step(p, OptimState(lr=0.1))
    np.testing.assert_allclose(p.values, [0.95, 2.1])
    assert p.adjoint is None


def test_step_without_adjoint_raises():
    with pytest.raises(NotReadyError):
        sgd_step(parameter([1.0]), OptimState())
    with pytest.raises(NotReadyError):
        adamw_step(parameter([1.0]), OptimState(kind="adamw"))


def test_nesterov_momentum_second_step():
    p = parameter([0.0])
    state = OptimState(lr=1.0, momentum=0.5, nesterov=True)
    p.adjoint = np.array([1.0])
    sgd_step(p, state)
    # buf = 1, update = 1 + 0.5 * 1
    np.testing.assert_allclose(p.values, [-1.5])
    p.adjoint = np.array([1.0])
    sgd_step(p, state)
    # buf = 0.5 * 1 + 1 = 1.5, update = 1 + 0.5 * 1.5
    np.testing.assert_allclose(p.values, [-3.25])


def test_adamw_first_step_moves_by_lr():
    p = parameter([1.0, -1.0])
    p.adjoint = np.array([3.0, -0.2])
    adamw_step(p, OptimState(kind="adamw", lr=0.01))
    np.testing.assert_allclose(p.values, [0.99, -0.99], rtol=1e-6)


@pytest.mark.parametrize("kind", ["sgd", "adamw"])
def test_masked_update_leaves_rest_untouched(kind):
    p = parameter(np.arange(6.0).reshape(2, 3), name="w")
    before = p.values.copy()
    mask = np.array([[True, False, False], [True, True, False]])
    state = OptimState(kind=kind, lr=0.1, weight_decay=0.1, momentum=0.9 if kind == "sgd" else 0.0)
    optimizer = Optimizer([p], state)
    for _ in range(3):
        p.adjoint = np.ones((2, 3))
        optimizer.step(masks={"w": mask})
    np.testing.assert_array_equal(p.values[~mask], before[~mask])
    assert np.all(p.values[mask] != before[mask])
    for buffer in state.buffers[id(p)].values():
        if buffer.shape == mask.shape:
            assert np.all(buffer[~mask] == 0)


def test_optimizer_skips_parameters_off_the_path():
    on, off = parameter([1.0], name="on"), parameter([1.0], name="off")
    on.adjoint = np.array([1.0])
    optimizer = Optimizer([on, off], OptimState(lr=0.5))
    assert optimizer.step() == 1
    np.testing.assert_array_equal(off.values, [1.0])


def test_cosine_schedule_endpoints():
    assert cosine_learning_rate(0.1, 0.001, 0, 10) == pytest.approx(0.1)
    assert cosine_learning_rate(0.1, 0.001, 10, 10) == pytest.approx(0.001)
    assert cosine_learning_rate(0.1, 0.001, 5, 10) == pytest.approx(0.0505)
    assert cosine_learning_rate(0.1, 0.001, 3, 0) == 0.1


def test_make_optimizer_drops_momentum_for_adamw():
    config = OptimizerConfig(kind="adamw", lr=1e-3, momentum=0.9)
    optimizer = make_optimizer([parameter([1.0])], config)
    assert optimizer.state.kind == "adamw"
    assert optimizer.state.momentum == 0.0


def test_invalid_state():
    with pytest.raises(ConfigurationError):
        OptimState(kind="lbfgs")
    with pytest.raises(ConfigurationError):
        OptimState(momentum=1.0)
