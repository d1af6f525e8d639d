"""Shared model builders for the test suite."""

import numpy as np

from htlab.feynman_kac import InitialWeight, PotentialField, TerminalWeight
from htlab.h_transform import build_h_process
from htlab.markov_core import (JumpKernel, StateSpace, TimeGrid,
                               build_metropolis, build_reversible_model)


def two_state_model():
    """Two-state tilted chain with J = [[0, 0.5], [2, 0]] and m = (0.8, 0.2)."""
    space = StateSpace(("lo", "hi"))
    J0 = JumpKernel(np.array([[0.0, 1.0], [1.0, 0.0]]))
    return build_metropolis(space, J0, np.array([1.0, 1.0]),
                            np.array([0.0, np.log(2.0)]))


def ring_kernel(n: int, scale: float = 1.0) -> JumpKernel:
    """Nearest-neighbour ring with symmetric rates."""
    rates = np.zeros((n, n))
    for i in range(n):
        rates[i, (i + 1) % n] = scale
        rates[i, (i - 1) % n] = scale
    return JumpKernel(rates)


def five_state_model():
    """Five-state Metropolis ring used across the solver tests."""
    n = 5
    U = np.array([0.0, 0.3, -0.2, 0.5, 0.1])
    space = StateSpace(tuple(f"s{i}" for i in range(n)))
    return build_metropolis(space, ring_kernel(n, 0.3), np.full(n, 1.0 / n), U)


def wavy_potential(model, grid: TimeGrid) -> PotentialField:
    """Smooth nonconstant potential: 0.25 sin(pi t) + 0.1 x."""
    ts = grid.nodes
    xs = np.arange(model.n, dtype=float)
    return PotentialField(0.25 * np.sin(np.pi * ts)[:, None] + 0.1 * xs[None, :])


def identity_hprocess(model, N: int = 100):
    """Transform with unit weights and zero potential: the reference law."""
    grid = TimeGrid(N)
    return build_h_process(model, InitialWeight(np.ones(model.n)),
                           TerminalWeight(np.ones(model.n)),
                           PotentialField.constant(0.0, grid, model.n), grid)


def generic_hprocess(N: int = 100):
    """Five-state transform with nonconstant potential and terminal weight."""
    model = five_state_model()
    grid = TimeGrid(N)
    return build_h_process(model, InitialWeight(np.ones(model.n)),
                           TerminalWeight(np.array([0.2, 0.5, 1.0, 0.3, 0.8])),
                           wavy_potential(model, grid), grid)


def reversible_two_state():
    """Plain (non-tilted) 2-state model J = [[0,1],[2,0]], m = (2/3, 1/3)."""
    space = StateSpace(("a", "b"))
    J = JumpKernel(np.array([[0.0, 1.0], [2.0, 0.0]]))
    return build_reversible_model(space, J, np.array([2.0, 1.0]))
