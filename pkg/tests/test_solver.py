"""Coupled forward-backward solver: physics and structure."""

import math

import numpy as np
import pytest

from mfglab import Grid, MfgProblem, ScenarioTree, SolverConfig, solve_mfg
from mfglab import models
from mfglab.grid import integrate_values
from mfglab.solver import (martingale_residual, mass_history,
                           solve_deterministic)


def make_problem(N=64, K=8, T=0.5, beta=0.5, recombining=True, coupled=True,
                 n=1):
    g = Grid(n=n, L=1.0, N=N, T=T, K=K)
    tree = ScenarioTree(K=K, dt=g.dt, recombining=recombining)
    rho0 = 0.7 * models.normalized_gaussian(g, sigma=0.25) \
        + 0.3 * np.ones(g.shape)
    rho0 /= integrate_values(rho0, g)
    coords = g.coords()
    term = 0.3 * np.cos(math.pi * coords[0] / g.L) * np.ones(g.shape)
    if coupled:
        kern, coup = models.gaussian_kernel(g, 0.2), models.linear_coupling(0.5)
    else:
        kern, coup = models.zero_kernel(g), None
    return MfgProblem(grid=g, tree=tree, beta=beta,
                      hamiltonian=models.quadratic_hamiltonian(n),
                      kernel=kern, coupling=coup, rho0=rho0,
                      terminal_cost=term)


CFG = SolverConfig(max_iters=60, tol=1e-13)


@pytest.fixture(scope="module")
def coupled_solution():
    problem = make_problem()
    return problem, solve_mfg(problem, CFG)


def test_mass_conserved_at_every_node(coupled_solution):
    problem, sol = coupled_solution
    drift = np.max(np.abs(mass_history(sol, problem) - 1.0))
    assert drift < 1e-12


def test_terminal_condition_exact(coupled_solution):
    problem, sol = coupled_solution
    uT = np.asarray(sol.u[problem.grid.K])
    np.testing.assert_array_equal(uT[0], problem.terminal_cost)


def test_martingale_identity_exact(coupled_solution):
    # exact by construction; float evaluation leaves half-ulp rounding
    problem, sol = coupled_solution
    assert martingale_residual(sol, problem) <= 1e-15


def test_picard_converged(coupled_solution):
    _, sol = coupled_solution
    assert sol.picard_residual < 1e-12


def test_beta_zero_collapses_tree():
    """Without common noise every node at a depth carries the same field
    and the martingale part vanishes identically."""
    problem = make_problem(beta=0.0, recombining=False, K=6)
    sol = solve_mfg(problem, CFG)
    for k in range(problem.grid.K + 1):
        for traj in (sol.rho, sol.u):
            v = np.asarray(traj[k])
            assert np.max(np.abs(v - v[:1])) <= 1e-12
    assert max(float(np.max(np.abs(np.asarray(sol.U[k]))))
               for k in range(problem.grid.K)) == 0.0


def test_beta_zero_matches_deterministic_path():
    problem = make_problem(beta=0.0, K=6)
    sol = solve_mfg(problem, CFG)
    det = solve_deterministic(problem, CFG)
    for k in range(problem.grid.K + 1):
        np.testing.assert_allclose(np.asarray(sol.rho[k])[0],
                                   np.asarray(det.rho[k])[0], atol=1e-12)
        np.testing.assert_allclose(np.asarray(sol.u[k])[0],
                                   np.asarray(det.u[k])[0], atol=1e-12)


def test_heat_variance_growth():
    """Drift-free beta=0 run: the density variance grows by 2 beta_hat T
    to well under a percent while tails stay off the seam."""
    g = Grid(n=1, L=1.0, N=128, T=0.04, K=16)
    tree = ScenarioTree(K=16, dt=g.dt, recombining=True)
    problem = MfgProblem(grid=g, tree=tree, beta=0.0,
                         hamiltonian=models.affine_hamiltonian(1),
                         kernel=models.zero_kernel(g), coupling=None,
                         rho0=models.normalized_gaussian(g, sigma=0.12),
                         terminal_cost=np.zeros(g.shape))
    sol = solve_mfg(problem, CFG)
    x = g.axis()
    var0 = integrate_values(x**2 * problem.rho0, g)
    varT = integrate_values(x**2 * np.asarray(sol.rho[g.K])[0], g)
    growth = varT - var0
    assert abs(growth - 2 * problem.beta_hat * g.T) < 0.01 * 2 * problem.beta_hat * g.T


def test_density_stays_nonnegative(coupled_solution):
    problem, sol = coupled_solution
    low = min(float(np.min(np.asarray(sol.rho[k])))
              for k in range(problem.grid.K + 1))
    assert low > -1e-10


def test_adapted_shapes(coupled_solution):
    problem, sol = coupled_solution
    tree, g = problem.tree, problem.grid
    for k in range(g.K + 1):
        assert np.asarray(sol.rho[k]).shape == (tree.levels(k),) + g.shape
        assert np.asarray(sol.u[k]).shape == (tree.levels(k),) + g.shape
    for k in range(g.K):
        assert np.asarray(sol.U[k]).shape == (tree.levels(k),) + g.shape


def test_source_profile_shifts_value_function():
    problem = make_problem(coupled=False, K=6)
    src = models.constant_R_source(problem.grid, r_fn=lambda t: 1.0, R0=1.0)
    problem = MfgProblem(grid=problem.grid, tree=problem.tree, beta=0.5,
                         hamiltonian=problem.hamiltonian,
                         kernel=problem.kernel, coupling=None,
                         rho0=problem.rho0,
                         terminal_cost=problem.terminal_cost, source=src)
    base = solve_mfg(problem, CFG, source_r=np.zeros(problem.grid.K + 1))
    bumped = solve_mfg(problem, CFG, source_r=np.ones(problem.grid.K + 1))
    # G = 1 for one unit of backward time shifts u by about +T... with the
    # scheme's sign convention the shift is uniform and nonzero
    d = np.asarray(bumped.u[0])[0] - np.asarray(base.u[0])[0]
    assert np.max(np.abs(d)) > 1e-3
    assert np.max(d) - np.min(d) < 1e-10  # spatially uniform R, r


def test_refinement_against_richardson():
    """Decoupled smooth run converges at first order in (dt, h^2 mix)."""
    sols = {}
    for N, K in ((32, 4), (64, 8), (128, 16)):
        problem = make_problem(N=N, K=K, coupled=False, beta=0.0)
        sols[(N, K)] = (problem, solve_mfg(problem, CFG))
    # compare terminal density on the common coarse lattice
    def terminal(N, K):
        p, s = sols[(N, K)]
        return np.asarray(s.rho[p.grid.K])[0][:: N // 32]
    e1 = np.max(np.abs(terminal(32, 4) - terminal(128, 16)))
    e2 = np.max(np.abs(terminal(64, 8) - terminal(128, 16)))
    assert e2 < 0.6 * e1
