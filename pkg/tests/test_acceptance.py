"""End-to-end acceptance checks at the shipped tolerances.

Each test pins one headline guarantee of the package: the weighted energy
inequalities across their parameter sweeps, the solver's physical
invariants, the linearized-system residuals, the two stability
experiments, source recovery from boundary data, and bit-level
determinism of the pipelines.  Runtime-bounded sweeps assert their wall
clock as part of the contract.
"""

import json
import math
import time

import numpy as np
import pytest

from mfglab import Grid, MfgProblem, ScenarioTree, SolverConfig, solve_mfg
from mfglab import carleman as C
from mfglab import cli, inversion, models, stability
from mfglab.grid import Field, integrate_values, mixed_second_identity_check
from mfglab.inversion import InversionProblem
from mfglab.solver import martingale_residual, mass_history, solve_deterministic


def coupled_problem(N, K, T=0.5, beta=0.5, recombining=False, affine=False,
                    coupled=True, amp=0.3, source=False):
    g = Grid(n=1, L=1.0, N=N, T=T, K=K)
    tree = ScenarioTree(K=K, dt=g.dt, recombining=recombining)
    rho0 = 0.7 * models.normalized_gaussian(g, sigma=0.25) \
        + 0.3 * np.ones(g.shape)
    rho0 /= integrate_values(rho0, g)
    coords = g.coords()
    term = (amp * np.cos(math.pi * coords[0] / g.L)
            + (amp / 3.0) * np.sin(math.pi * coords[0] / g.L)) \
        * np.ones(g.shape)
    ham = models.affine_hamiltonian(1, b0=np.array([0.4])) if affine \
        else models.quadratic_hamiltonian(1)
    if coupled:
        kern, coup = models.gaussian_kernel(g, 0.2), models.linear_coupling(0.5)
    else:
        kern, coup = models.zero_kernel(g), None
    src = models.smooth_R_source(g, r_fn=lambda t: 1.0, base=2.0, amp=0.5) \
        if source else None
    return MfgProblem(grid=g, tree=tree, beta=beta, hamiltonian=ham,
                      kernel=kern, coupling=coup, rho0=rho0,
                      terminal_cost=term, source=src)


SOLVE_CFG = SolverConfig(max_iters=60, tol=1e-13)


# -- 1: backward inequality sweep with refinement monotonicity -----------------

def test_backward_inequality_sweep_and_refinement():
    """100 random data across beta x lambda x mu: every margin within -5%
    of the data side, and at least 95 margins nondecreasing when both
    resolutions double.  Bounded to ten minutes."""
    t0 = time.perf_counter()
    T = 1.0
    betas, lams, mus = (0.0, 0.5, 1.0), (1.0, 2.0, 4.0), (2.0, 4.0)
    coarse = Grid(n=1, L=1.0, N=128, T=T, K=64)
    fine = Grid(n=1, L=1.0, N=256, T=T, K=128)
    tree_c = ScenarioTree(K=64, dt=coarse.dt, recombining=True)
    tree_f = ScenarioTree(K=128, dt=fine.dt, recombining=True)
    n_ok = n_mono = 0
    for i in range(100):
        beta = betas[i % 3]
        lam = lams[(i // 3) % 3]
        mu = mus[(i // 9) % 2]
        w = C.CarlemanWeight.from_lambda(lam, mu, T)
        rep_c = C.check_th1(
            C.make_synthetic("backward", i, tree_c, coarse, beta), w)
        rep_f = C.check_th1(
            C.make_synthetic("backward", i, tree_f, fine, beta), w)
        n_ok += rep_c.satisfied(0.05)
        n_mono += rep_f.relative_margin >= rep_c.relative_margin - 1e-12
    assert n_ok == 100
    assert n_mono >= 95
    assert time.perf_counter() - t0 < 600.0


# -- 2: forward inequality at the extreme admissible weight --------------------

def test_forward_inequality_extreme_weight_scan():
    """T = 1 at the smallest admissible mu (1296): the lambda scan must
    find a weight whose every normalized term is finite and nonzero while
    the margin stays within -5%, for 20 random data in five minutes."""
    t0 = time.perf_counter()
    g = Grid(n=1, L=1.0, N=64, T=1.0, K=12)
    tree = ScenarioTree(K=12, dt=g.dt, recombining=False)
    mu = C.mu_min(g.T)
    assert mu == 1296.0
    for seed in range(20):
        d = C.make_synthetic("forward", seed, tree, g, 0.5)
        _, rep, _ = C.scan_lambda(d, mu)
        assert rep.finite_terms(), f"seed {seed}: degenerate terms"
        assert rep.satisfied(0.05), f"seed {seed}: margin {rep.relative_margin}"
    assert time.perf_counter() - t0 < 300.0


# -- 3: bounded-domain certificates --------------------------------------------

def test_bounded_domain_certificates():
    """Doubling search certifies empirical weight constants for both
    bounded-domain estimates, 20/20 data passing at the certified values,
    with the gradient-coupled lower-order term switched on."""
    g3 = Grid(n=1, L=1.0, N=64, T=1.0, K=16)
    tr3 = ScenarioTree(K=16, dt=g3.dt, recombining=True)
    data3 = [C.make_synthetic("backward", s, tr3, g3, 0.5,
                              boundary="dirichlet", f3_amplitude=0.3)
             for s in range(20)]
    cert3 = C.certify_constants(data3, checker=C.check_th3)
    assert cert3.n_pass == cert3.n_total == 20
    assert all(m >= 0.0 for m in cert3.margins)

    g4 = Grid(n=1, L=1.0, N=128, T=1.0, K=12)
    tr4 = ScenarioTree(K=12, dt=g4.dt, recombining=False)
    data4 = [C.make_synthetic("forward", s, tr4, g4, 0.5,
                              boundary="dirichlet") for s in range(20)]
    mu = C.mu_min(g4.T)
    cert4 = C.certify_constants(data4, checker=C.check_th4, mu_start=mu,
                                log_lambda_start=-mu * math.log(3.0))
    assert cert4.n_pass == cert4.n_total == 20
    assert all(m >= 0.0 for m in cert4.margins)


# -- 4: mixed-derivative identity ----------------------------------------------

def test_mixed_derivative_identity_2d():
    rng = np.random.default_rng(0)
    g = Grid(n=2, L=1.0, N=64, T=1.0, K=4)
    for _ in range(50):
        f = Field(g, C.random_smooth_field(g, rng, modes=6))
        lhs, rhs = mixed_second_identity_check(f)
        assert abs(lhs - rhs) <= 1e-10 * abs(rhs)


# -- 5: solver physics ---------------------------------------------------------

def test_solver_physical_invariants():
    problem = coupled_problem(N=64, K=8, recombining=True)
    sol = solve_mfg(problem, SOLVE_CFG)
    assert np.max(np.abs(mass_history(sol, problem) - 1.0)) <= 1e-8
    # the branch reassembly is exact by construction; one float rounding
    # of the recombined expression is the smallest representable residual
    assert martingale_residual(sol, problem) <= 2.0**-52

    g = Grid(n=1, L=1.0, N=128, T=0.04, K=16)
    tree = ScenarioTree(K=16, dt=g.dt, recombining=True)
    heat = MfgProblem(grid=g, tree=tree, beta=0.0,
                      hamiltonian=models.affine_hamiltonian(1),
                      kernel=models.zero_kernel(g), coupling=None,
                      rho0=models.normalized_gaussian(g, sigma=0.12),
                      terminal_cost=np.zeros(g.shape))
    hsol = solve_mfg(heat, SOLVE_CFG)
    x = g.axis()
    growth = integrate_values(x**2 * np.asarray(hsol.rho[g.K])[0], g) \
        - integrate_values(x**2 * heat.rho0, g)
    expected = 2.0 * heat.beta_hat * g.T
    assert abs(growth - expected) <= 0.01 * expected

    collapse = coupled_problem(N=64, K=6, beta=0.0, recombining=True)
    csol = solve_mfg(collapse, SOLVE_CFG)
    det = solve_deterministic(collapse, SOLVE_CFG)
    for k in range(collapse.grid.K + 1):
        v = np.asarray(csol.rho[k])
        assert np.max(np.abs(v - v[:1])) <= 1e-12
        assert np.max(np.abs(v[0] - np.asarray(det.rho[k])[0])) <= 1e-12


# -- 6: linearized difference system -------------------------------------------

def _difference_residuals(problem, delta_h, delta_rho0, seed):
    sol1 = solve_mfg(problem, SOLVE_CFG)
    pert = stability.perturbed_problem(problem, delta_h=delta_h,
                                       delta_rho0=delta_rho0, seed=seed)
    sol2 = solve_mfg(pert, SOLVE_CFG)
    coeffs = stability.build_linearized_coefficients(problem, sol1, sol2)
    return stability.residual_of_difference_system(problem, sol1, sol2,
                                                   coeffs)


def test_linearization_residual_order_and_affine_exactness():
    coarse = _difference_residuals(coupled_problem(64, 7), 0.01, 0.002, 0)
    fine = _difference_residuals(coupled_problem(128, 14), 0.01, 0.002, 0)
    for c, f in zip(coarse, fine):
        assert math.log2(c / f) >= 1.0

    affine = _difference_residuals(coupled_problem(64, 6, affine=True),
                                   0.05, 0.01, 0)
    assert max(affine) <= 1e-10


# -- 7: perturbation-magnitude stability of the difference/measurement ratio ---

def test_lipschitz_ratio_across_magnitudes():
    t0 = time.perf_counter()
    deltas = (1e-1, 1e-2, 1e-3)
    fit = stability.lipschitz_experiment(coupled_problem(64, 6),
                                         deltas=deltas, n_shapes=2,
                                         cfg=SOLVE_CFG)
    assert not fit.excluded
    assert max(fit.ratios) < 10.0 * min(fit.ratios)

    lin = stability.lipschitz_experiment(
        coupled_problem(64, 6, affine=True, coupled=False),
        deltas=deltas, n_shapes=1, cfg=SOLVE_CFG)
    mean = float(np.mean(lin.ratios))
    assert all(abs(r - mean) <= 0.1 * mean for r in lin.ratios)
    assert time.perf_counter() - t0 < 1200.0


# -- 8: interior-window exponent -----------------------------------------------

def test_holder_slope_meets_predicted_exponent():
    assert stability.predicted_eta(1.0, 2.0, 2.0) == pytest.approx(5.0 / 12.0)
    problem = coupled_problem(64, 6)
    fit = stability.holder_experiment(problem, epsilon=0.25, mu0=2.0,
                                      cfg=SOLVE_CFG)
    assert fit.fitted_eta >= fit.predicted_eta - 0.1


# -- 9: source recovery from boundary data -------------------------------------

def test_source_profile_recovery():
    t0 = time.perf_counter()
    problem = coupled_problem(64, 32, T=1.0, recombining=True,
                              coupled=False, source=True)
    inv = InversionProblem.with_defaults(problem, alpha=1e-8)
    g = problem.grid
    t = np.arange(g.K) * g.dt
    r_true = 1.0 + 0.5 * np.sin(2.0 * math.pi * t / g.T)
    fwd_cfg = SolverConfig(fixed_iters=8, damping=0.6)
    obs = inversion.generate_observations(inv, r_true, cfg=fwd_cfg)
    vg = inversion._misfit_fn(inv, fwd_cfg)  # one compilation for all runs

    worst = inversion.gradient_check(inv, obs, cfg=fwd_cfg, n_directions=5,
                                     vg=vg)
    assert worst <= 1e-5

    rec = inversion.reconstruct_source(inv, obs, r_true=r_true, cfg=fwd_cfg,
                                       vg=vg)
    assert rec.converged
    assert rec.relative_l2_error <= 0.05

    cert = inversion.uniqueness_certificate(inv, obs, r_true=r_true,
                                            cfg=fwd_cfg, vg=vg)
    assert cert["certificate"] <= 1e-3

    noisy = inversion.generate_observations(inv, r_true, noise_level=0.01,
                                            seed=2, cfg=fwd_cfg)
    _, nrec = inversion.discrepancy_reconstruct(
        inv, noisy, r_true=r_true, alphas=(1e-2, 1e-3, 1e-4, 1e-5),
        cfg=fwd_cfg, vg=vg)
    assert nrec.relative_l2_error <= 0.20
    assert time.perf_counter() - t0 < 1800.0


# -- 10: determinism -----------------------------------------------------------

def _solution_digest(sol, K):
    import hashlib
    h = hashlib.sha256()
    for k in range(K + 1):
        h.update(np.ascontiguousarray(np.asarray(sol.rho[k])).tobytes())
        h.update(np.ascontiguousarray(np.asarray(sol.u[k])).tobytes())
    return h.hexdigest()


def test_repeated_runs_are_bit_identical(tmp_path, monkeypatch):
    problem = coupled_problem(64, 8, recombining=True)
    d1 = _solution_digest(solve_mfg(problem, SOLVE_CFG), problem.grid.K)
    d2 = _solution_digest(solve_mfg(problem, SOLVE_CFG), problem.grid.K)
    assert d1 == d2

    g = Grid(n=1, L=1.0, N=64, T=1.0, K=16)
    tree = ScenarioTree(K=16, dt=g.dt, recombining=True)
    w = C.CarlemanWeight.from_lambda(2.0, 2.0, 1.0)
    m1 = C.check_th1(C.make_synthetic("backward", 0, tree, g, 0.5), w).margin
    m2 = C.check_th1(C.make_synthetic("backward", 0, tree, g, 0.5), w).margin
    assert m1 == m2

    cfg = {"command": "simulate",
           "grid": {"n": 1, "L": 1.0, "N": 32, "T": 0.5, "K": 6},
           "seed": 1, "simulate": {"snapshot_times": [0.5]}}
    ma = cli.run(dict(cfg), output_dir=str(tmp_path / "a"))
    monkeypatch.setenv("MFG_LAB_THREADS", "8")
    mb = cli.run(dict(cfg), output_dir=str(tmp_path / "b"))
    assert ma["checksums"] == mb["checksums"] and ma["checksums"]
