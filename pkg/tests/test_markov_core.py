"""Reversible jump-chain construction, exact transition matrices, sampling."""

import numpy as np
import pytest

from conftest import ring_kernel, two_state_model
from htlab.errors import (DegenerateInputError, HTLabError,
                          ModelValidationError)
from htlab.markov_core import (JumpKernel, PathSample, StateSpace, TimeGrid,
                               build_metropolis, build_reversible_model,
                               check_detailed_balance, check_irreducibility,
                               detailed_balance_violation, empirical_marginal,
                               generator_apply, sample_path_R, sample_paths_R,
                               transition_matrix)


def test_metropolis_two_state_example():
    """Tilting by U = (0, log 2) halves one rate and quadruples the mass ratio."""
    model = two_state_model()
    np.testing.assert_allclose(model.J.rates, [[0.0, 0.5], [2.0, 0.0]],
                               rtol=0, atol=1e-15)
    np.testing.assert_allclose(model.m, [0.8, 0.2], rtol=0, atol=1e-15)


def test_metropolis_zero_potential_is_identity():
    space = StateSpace(("a", "b", "c"))
    J0 = ring_kernel(3, 0.7)
    m0 = np.array([2.0, 2.0, 2.0])
    model = build_metropolis(space, J0, m0, np.zeros(3))
    np.testing.assert_array_equal(model.J.rates, J0.rates)
    np.testing.assert_allclose(model.m, m0 / m0.sum(), atol=1e-15)


def test_metropolis_preserves_detailed_balance_on_ring():
    space = StateSpace(("a", "b", "c"))
    model = build_metropolis(space, ring_kernel(3), np.full(3, 1 / 3),
                             np.array([0.4, -1.1, 2.3]))
    assert check_detailed_balance(model) <= 1e-14


def test_metropolis_rejects_unbalanced_base():
    space = StateSpace(("a", "b"))
    J0 = JumpKernel(np.array([[0.0, 1.0], [2.0, 0.0]]))
    with pytest.raises(ModelValidationError) as err:
        build_metropolis(space, J0, np.array([0.5, 0.5]), np.zeros(2))
    assert err.value.reason == "detailed_balance_violation"


def test_metropolis_rejects_reducible_base():
    space = StateSpace(("a", "b"))
    rates = np.array([[0.0, 1.0], [0.0, 0.0]])
    with pytest.raises(HTLabError):
        # the one-way kernel dies earlier (absorbing row) or at irreducibility
        build_metropolis(space, JumpKernel(rates), np.full(2, 0.5), np.zeros(2))


def test_detailed_balance_violation_examples():
    """Hand values: the tilted model balances, a lopsided kernel misses by 0.5."""
    assert check_detailed_balance(two_state_model()) <= 1e-14
    sym = JumpKernel(ring_kernel(3).rates)
    model = build_reversible_model(StateSpace(("a", "b", "c")), sym,
                                   np.full(3, 1 / 3))
    assert check_detailed_balance(model) == 0.0
    viol = detailed_balance_violation(np.array([[0.0, 1.0], [2.0, 0.0]]),
                                      np.array([0.5, 0.5]))
    assert viol == pytest.approx(0.5, abs=1e-15)


def test_irreducibility():
    two_way = np.array([[0.0, 1.0], [3.0, 0.0]])
    one_way = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert check_irreducibility(JumpKernel(two_way))
    assert not check_irreducibility(one_way)
    directed_ring = np.zeros((4, 4))
    for i in range(4):
        directed_ring[i, (i + 1) % 4] = 1.0
    assert check_irreducibility(directed_ring)


def test_generator_apply():
    model = two_state_model()
    np.testing.assert_allclose(generator_apply(model, np.ones(2)), 0.0,
                               atol=1e-15)
    np.testing.assert_allclose(generator_apply(model, np.array([0.0, 1.0])),
                               [0.5, -2.0], atol=1e-15)
    u = np.array([0.3, -1.7])
    assert abs(model.m @ generator_apply(model, u)) <= 1e-14
    with pytest.raises(ModelValidationError):
        generator_apply(model, np.ones(3))


def test_model_invariants():
    model = two_state_model()
    np.testing.assert_allclose(model.Q.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(model.m @ model.Q, 0.0, atol=1e-12)


def test_transition_matrix_closed_form():
    """2-state transition matrix from the spectral decomposition, rate 2.5."""
    model = two_state_model()
    np.testing.assert_array_equal(transition_matrix(model, 0.0), np.eye(2))
    for t in (0.1, 0.5, 1.3):
        decay = np.exp(-2.5 * t)
        expected = np.array([[0.8 + 0.2 * decay, 0.2 - 0.2 * decay],
                             [0.8 - 0.8 * decay, 0.2 + 0.8 * decay]])
        np.testing.assert_allclose(transition_matrix(model, t), expected,
                                   atol=1e-13)
    long_run = transition_matrix(model, 50.0)
    np.testing.assert_allclose(long_run, np.tile(model.m, (2, 1)), atol=1e-12)


def test_transition_matrix_is_stochastic_and_nonnegative():
    model = two_state_model()
    for t in (0.01, 0.3, 2.0):
        T = transition_matrix(model, t)
        assert np.all(T >= 0.0)
        np.testing.assert_allclose(T.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ModelValidationError):
        transition_matrix(model, -0.1)


def test_chapman_kolmogorov():
    model = two_state_model()
    for s in np.arange(0.1, 1.0, 0.2):
        for t in np.arange(0.1, 1.0, 0.2):
            gap = np.abs(transition_matrix(model, s + t)
                         - transition_matrix(model, s) @ transition_matrix(model, t))
            assert gap.max() <= 1e-10


def test_generator_matches_transition_finite_difference():
    """(e^{Qh}u - u)/h - Qu shrinks linearly in h."""
    model = two_state_model()
    u = np.array([0.2, -1.0])
    Qu = generator_apply(model, u)

    def defect(h):
        return np.max(np.abs((transition_matrix(model, h) @ u - u) / h - Qu))

    d1, d2 = defect(1e-2), defect(5e-3)
    assert d2 <= 0.6 * d1


def test_sampler_stationarity():
    """Paths started from m keep it: empirical marginal within 3 binomial sigma."""
    model = two_state_model()
    n_paths = 100_000
    paths = sample_paths_R(model, n_paths, seed=11)
    emp = empirical_marginal(paths, 1.0)
    sigma = np.sqrt(model.m * (1.0 - model.m) / n_paths)
    np.testing.assert_array_less(np.abs(emp - model.m), 3.0 * sigma)


def test_sampler_matches_transition_law():
    """Short-horizon occupancy from a fixed start against the analytic row."""
    model = two_state_model()
    n_paths, h = 100_000, 0.35
    paths = sample_paths_R(model, n_paths, seed=5, x0=0)
    emp = empirical_marginal(paths, h)
    row = transition_matrix(model, h)[0]
    sigma = np.sqrt(row * (1.0 - row) / n_paths)
    np.testing.assert_array_less(np.abs(emp - row), 3.0 * sigma)


def test_sampler_determinism():
    model = two_state_model()
    a = sample_path_R(model, 0, seed=123)
    b = sample_path_R(model, 0, seed=123)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.x0 == b.x0


def test_empirical_marginal_edge_cases():
    model = two_state_model()
    lone = sample_path_R(model, 1, seed=7)
    at0 = empirical_marginal([lone], 0.0)
    np.testing.assert_array_equal(at0, [0.0, 1.0])
    with pytest.raises(DegenerateInputError):
        empirical_marginal([], 0.5)
    with pytest.raises(ModelValidationError):
        empirical_marginal([lone], 1.5)


def test_path_sample_right_continuity():
    path = PathSample(x0=0, times=np.array([0.5]), states=np.array([1]),
                      n_states=2, seed=(0,))
    assert path.state_at(0.49) == 0
    assert path.state_at(0.5) == 1
    segs = path.segments()
    assert segs == [(0.0, 0.5, 0), (0.5, 1.0, 1)]


def test_path_sample_validation():
    with pytest.raises(ModelValidationError):
        PathSample(x0=0, times=np.array([0.6, 0.4]), states=np.array([1, 0]),
                   n_states=2, seed=(0,))
    with pytest.raises(ModelValidationError):
        PathSample(x0=0, times=np.array([0.4]), states=np.array([0]),
                   n_states=2, seed=(0,))


def test_state_space_validation():
    with pytest.raises(ModelValidationError):
        StateSpace(("only",))
    with pytest.raises(ModelValidationError):
        StateSpace(("a", "a"))
    space = StateSpace(("a", "b"))
    assert space.index("b") == 1
    with pytest.raises(ModelValidationError):
        space.index("zz")


def test_jump_kernel_validation():
    with pytest.raises(ModelValidationError):
        JumpKernel(np.array([[0.0, -1.0], [1.0, 0.0]]))
    with pytest.raises(ModelValidationError):
        JumpKernel(np.array([[0.1, 1.0], [1.0, 0.0]]))
    with pytest.raises(DegenerateInputError):
        JumpKernel(np.array([[0.0, 0.0], [1.0, 0.0]]))


def test_reversible_model_validation():
    from htlab.markov_core import ReversibleModel

    space = StateSpace(("a", "b"))
    J = JumpKernel(np.array([[0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(ModelValidationError):
        build_reversible_model(space, J, np.array([1.0, -0.5]))
    with pytest.raises(ModelValidationError):
        ReversibleModel(space=space, J=J, m=np.array([0.5, 0.6]))


def test_time_grid():
    grid = TimeGrid(10)
    assert grid.dt == 0.1
    assert grid.node_index(0.3) == 3
    with pytest.raises(ModelValidationError):
        grid.node_index(0.25)
    with pytest.raises(ModelValidationError):
        TimeGrid(1)
