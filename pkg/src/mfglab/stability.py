"""Twin experiments for Lipschitz and Hoelder stability of the coupled system.

Two solutions (rho_i, u_i, U_i) of the coupled system differ by a pair
(rho, u, U) = (rho_1 - rho_2, ...) that satisfies a *linear* system whose
coefficients are tau-integrals of the Hamiltonian derivatives along the
segment between the two solutions:

    d rho - bhat Lap rho dt = (B1 rho + B2.grad rho + B3.grad u
                               + sum_jk B4jk u_xjxk) dt - beta grad rho . dW
    d u   + bhat Lap u dt   = -beta div U dt - B5.grad u dt
                              - (F1 K rho + F2 rho) dt + U . dW

``build_linearized_coefficients`` evaluates those coefficients with
8-point Gauss-Legendre quadrature in tau;
``residual_of_difference_system`` substitutes the stored difference
trajectories into the discrete forms of the two equations.  Because the
forward/backward stepping identities are recoverable exactly from stored
slices (conditional means are plain averages on a non-recombining tree),
the residuals vanish to rounding when the drift is affine in p and the
coupling linear, and decay at first order in (h, dt) otherwise.

The experiment harnesses perturb the data pair (terminal cost, initial
density) over several magnitudes, re-solve, and measure both sides of
the stability estimates:

* Lipschitz: solution-difference energy over (0, T) against the three
  measurements (terminal value-function H1 norm, terminal density L2
  norm, initial density H1 norm); reported as the worst ratio.
* Hoelder: energy over (epsilon, T) against the two terminal
  measurements only, with the initial-density difference held fixed; the
  fitted log-log slope is compared with the predicted exponent
  eta = ((2+eps)^mu0 - 2^mu0) / ((T+2)^mu0 - 2^mu0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .carleman import random_smooth_field
from .grid import Grid, expected_norm, h1_norm
from .models import MfgProblem
from .solver import MfgSolution, SolverConfig, solve_mfg

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
_TAU = 0.5 * (_GL_NODES + 1.0)       # mapped to [0, 1]
_TAU_W = 0.5 * _GL_WEIGHTS


class StabilityError(ValueError):
    pass


# -- linearized coefficients ---------------------------------------------------

@dataclass
class LinearizedCoefficients:
    """Per-time-slice coefficient fields of the difference system.

    Lists over k = 0..K-1; vector entries are tuples over spatial axes,
    B4 is an n x n nested tuple.  All fields live on the tree slice
    (leading level axis broadcastable).
    """

    B1: list
    B2: list
    B3: list
    B4: list
    B5: list
    F1: list
    F2: list

    def sup_norm(self) -> float:
        total = 0.0
        for k in range(len(self.B1)):
            total = max(
                total,
                float(np.max(np.abs(self.B1[k])))
                + sum(float(np.max(np.abs(v))) for v in self.B2[k])
                + sum(float(np.max(np.abs(v))) for v in self.B3[k])
                + sum(float(np.max(np.abs(v))) for row in self.B4[k] for v in row)
                + sum(float(np.max(np.abs(v))) for v in self.B5[k])
                + float(np.max(np.abs(self.F1[k])))
                + float(np.max(np.abs(self.F2[k]))),
            )
        return total


def _tau_average(fn) -> np.ndarray:
    """8-point Gauss-Legendre average of fn(tau) over [0, 1]."""
    out = None
    for tau, wt in zip(_TAU, _TAU_W):
        v = wt * np.asarray(fn(float(tau)))
        out = v if out is None else out + v
    return out


def build_linearized_coefficients(problem: MfgProblem, sol1: MfgSolution,
                                  sol2: MfgSolution) -> LinearizedCoefficients:
    g = problem.grid
    ham = problem.hamiltonian
    n = g.n
    coords = g.coords()
    B1l, B2l, B3l, B4l, B5l, F1l, F2l = [], [], [], [], [], [], []
    for k in range(g.K):
        t = k * g.dt
        u1, u2 = np.asarray(sol1.u[k]), np.asarray(sol2.u[k])
        r1, r2 = np.asarray(sol1.rho[k]), np.asarray(sol2.rho[k])
        g1 = np.stack(kernels.gradient_central(np, u1, g.h, n))
        g2 = np.stack(kernels.gradient_central(np, u2, g.h, n))
        u1xx = [[kernels.d1_central(np, g1[j], g.h, kk, n) for kk in range(n)]
                for j in range(n)]
        u2xx = [[kernels.d1_central(np, g2[j], g.h, kk, n) for kk in range(n)]
                for j in range(n)]
        r2x = kernels.gradient_central(np, r2, g.h, n)

        Bpp_1 = np.asarray(ham.B_pp(t, coords, g1)) * np.ones((n, n) + u1.shape)
        Bpx_1 = np.asarray(ham.B_px(t, coords, g1)) * np.ones((n,) + u1.shape)
        B1 = sum(Bpx_1[j] for j in range(n)) \
            + sum(Bpp_1[j, kk] * u1xx[j][kk] for j in range(n) for kk in range(n))
        B2 = tuple(np.asarray(ham.B_p(t, coords, g1))[a] * np.ones(u1.shape)
                   for a in range(n))
        B4 = tuple(tuple(r2 * Bpp_1[j, kk] for kk in range(n)) for j in range(n))

        seg = lambda tau: g1 + tau * (g2 - g1)
        Bpp_tau = _tau_average(lambda tau: np.asarray(
            ham.B_pp(t, coords, seg(tau))) * np.ones((n, n) + u1.shape))
        Bppx_tau = _tau_average(lambda tau: np.asarray(
            ham.B_ppx(t, coords, seg(tau))) * np.ones((n, n) + u1.shape))
        Bppp_tau = _tau_average(lambda tau: np.asarray(
            ham.B_ppp(t, coords, seg(tau))) * np.ones((n, n, n) + u1.shape))
        B3 = []
        for j in range(n):
            term = sum(r2x[kk] * Bpp_tau[j, kk] for kk in range(n))
            term = term + sum(r2 * Bppx_tau[j, kk] for kk in range(n))
            term = term + sum(r2 * u2xx[jp][kp] * Bppp_tau[jp, j, kp]
                              for jp in range(n) for kp in range(n))
            B3.append(term)
        B5 = tuple(
            _tau_average(lambda tau: np.asarray(
                ham.B_p(t, coords, seg(tau)))[a] * np.ones(u1.shape))
            for a in range(n)
        )

        if problem.coupling is None:
            F1 = np.zeros(u1.shape)
            F2 = np.zeros(u1.shape)
        else:
            conv1 = problem.kernel.apply(t, r1)
            conv2 = problem.kernel.apply(t, r2)
            F1 = _tau_average(lambda tau: np.asarray(problem.coupling.F_y(
                conv1 + tau * (conv2 - conv1), r1 + tau * (r2 - r1)))
                * np.ones(u1.shape))
            F2 = _tau_average(lambda tau: np.asarray(problem.coupling.F_z(
                conv1 + tau * (conv2 - conv1), r1 + tau * (r2 - r1)))
                * np.ones(u1.shape))
        B1l.append(B1)
        B2l.append(B2)
        B3l.append(tuple(B3))
        B4l.append(B4)
        B5l.append(B5)
        F1l.append(F1)
        F2l.append(F2)
    return LinearizedCoefficients(B1=B1l, B2=B2l, B3=B3l, B4=B4l, B5=B5l,
                                  F1=F1l, F2=F2l)


def residual_of_difference_system(problem: MfgProblem, sol1: MfgSolution,
                                  sol2: MfgSolution,
                                  coeffs: LinearizedCoefficients
                                  ) -> tuple[float, float]:
    """Probability-weighted L2 residual norms of the two linearized
    equations on the stored solution pair.

    The half-step slices are recovered as conditional means of the next
    stored slices, which is exact on a non-recombining tree, so for an
    affine drift with a linear coupling both residuals sit at rounding
    level; otherwise they decay at first order under refinement.
    """
    g, tree = problem.grid, problem.tree
    bhat, beta = problem.beta_hat, problem.beta
    n = g.n
    fp_sq, hjb_sq = 0.0, 0.0
    vol, dt = g.h**g.n, g.dt
    for k in range(g.K):
        probs = tree.probabilities(k)
        rd = np.asarray(sol1.rho[k]) - np.asarray(sol2.rho[k])
        ud = np.asarray(sol1.u[k]) - np.asarray(sol2.u[k])
        rd_next = np.asarray(sol1.rho[k + 1]) - np.asarray(sol2.rho[k + 1])
        rstar_d = tree.cond_mean(rd_next, k)
        lin = coeffs.B1[k] * rd
        lin = lin + sum(coeffs.B2[k][a] * kernels.d1_central(np, rd, g.h, a, n)
                        for a in range(n))
        lin = lin + sum(coeffs.B3[k][a] * kernels.d1_central(np, ud, g.h, a, n)
                        for a in range(n))
        gud = kernels.gradient_central(np, ud, g.h, n)
        lin = lin + sum(coeffs.B4[k][j][kk]
                        * kernels.d1_central(np, gud[j], g.h, kk, n)
                        for j in range(n) for kk in range(n))
        fp_res = (rstar_d - rd) / dt \
            - bhat * kernels.laplacian_stencil(np, rstar_d, g.h, n) - lin

        md = tree.cond_mean(np.asarray(sol1.u[k + 1]), k) \
            - tree.cond_mean(np.asarray(sol2.u[k + 1]), k)
        Ud = np.asarray(sol1.U[k]) - np.asarray(sol2.U[k])
        # the backward step freezes the Hamiltonian at the conditional
        # mean, so the gradient coupling acts on md, not ud
        gmd = kernels.gradient_central(np, md, g.h, n)
        hterm = sum(coeffs.B5[k][a] * gmd[a] for a in range(n))
        if problem.coupling is not None:
            conv_d = problem.kernel.apply(k * dt, rd)
            hterm = hterm + coeffs.F1[k] * conv_d + coeffs.F2[k] * rd
        hjb_res = (md - ud) / dt \
            + bhat * kernels.laplacian_stencil(np, ud, g.h, n) \
            + beta * kernels.d1_central(np, Ud, g.h, 0, n) + hterm

        fp_sq += dt * float(probs @ (np.sum(
            fp_res**2, axis=tuple(range(1, fp_res.ndim))) * vol))
        hjb_sq += dt * float(probs @ (np.sum(
            hjb_res**2, axis=tuple(range(1, hjb_res.ndim))) * vol))
    return math.sqrt(fp_sq), math.sqrt(hjb_sq)


# -- experiment harnesses ------------------------------------------------------

@dataclass
class StabilityFit:
    lhs_norms: list
    rhs_norms: list
    ratios: list
    fitted_C: float
    excluded: list
    epsilon: float | None = None
    fitted_eta: float | None = None
    predicted_eta: float | None = None
    mu0_used: float | None = None


def predicted_eta(epsilon: float, T: float, mu0: float) -> float:
    """Hoelder exponent ((2+eps)^mu0 - 2^mu0) / ((T+2)^mu0 - 2^mu0)."""
    if not 0.0 < epsilon < T:
        raise StabilityError(f"epsilon must lie in (0, T), got {epsilon}")
    return ((2.0 + epsilon) ** mu0 - 2.0**mu0) \
        / ((T + 2.0) ** mu0 - 2.0**mu0)


def _difference_energy(sol1: MfgSolution, sol2: MfgSolution,
                       problem: MfgProblem, k_lo: int = 0) -> float:
    """L2-in-time H1-in-space energy of (u_d, rho_d) over [t_{k_lo}, T)."""
    g, tree = problem.grid, problem.tree
    vol, dt = g.h**g.n, g.dt
    total = 0.0
    for k in range(k_lo, g.K):
        probs = tree.probabilities(k)
        for a, b in ((sol1.u[k], sol2.u[k]), (sol1.rho[k], sol2.rho[k])):
            d = np.asarray(a) - np.asarray(b)
            sq = np.sum(d**2, axis=tuple(range(1, d.ndim))) * vol
            for ax in range(g.n):
                dd = kernels.d1_central(np, d, g.h, ax, g.n)
                sq = sq + np.sum(dd**2, axis=tuple(range(1, dd.ndim))) * vol
            total += dt * float(probs @ sq)
    return math.sqrt(total)


def _measurements(sol1: MfgSolution, sol2: MfgSolution, problem: MfgProblem,
                  include_rho0: bool = True) -> float:
    """E||u_d(T)||_H1 + E||rho_d(T)||_L2 (+ ||rho_d(0)||_H1)."""
    g, tree = problem.grid, problem.tree
    uT = np.asarray(sol1.u[g.K]) - np.asarray(sol2.u[g.K])
    rT = np.asarray(sol1.rho[g.K]) - np.asarray(sol2.rho[g.K])
    probs = tree.probabilities(g.K)
    out = expected_norm(uT, probs, g, kind="h1") \
        + expected_norm(rT, probs, g, kind="l2")
    if include_rho0:
        r0 = np.asarray(sol1.rho[0])[0] - np.asarray(sol2.rho[0])[0]
        out += h1_norm(r0, g)
    return out


def perturbed_problem(problem: MfgProblem, delta_h: float, delta_rho0: float,
                      seed: int) -> MfgProblem:
    """Same model, data perturbed by fixed band-limited shapes.

    The density shape has zero mean (no constant Fourier mode), so the
    perturbed initial density keeps unit mass; magnitudes are kept small
    enough to preserve nonnegativity of the shipped base densities.
    """
    g = problem.grid
    rng = np.random.default_rng(seed)
    shape_h = random_smooth_field(g, rng, modes=3)
    shape_r = random_smooth_field(g, rng, modes=3)
    rho0 = problem.rho0 + delta_rho0 * shape_r
    if np.min(rho0) < 0:
        raise StabilityError("density perturbation too large: negative density")
    return replace(problem, terminal_cost=problem.terminal_cost
                   + delta_h * shape_h, rho0=rho0)


def lipschitz_experiment(problem: MfgProblem,
                         deltas=(1e-1, 1e-2, 1e-3),
                         n_shapes: int = 2,
                         cfg: SolverConfig | None = None,
                         seed: int = 0,
                         residual_cutoff: float = 1e-9) -> StabilityFit:
    """Worst ratio of solution-difference energy to the three-measurement
    sum across perturbation magnitudes spanning three decades."""
    cfg = cfg or SolverConfig()
    base = solve_mfg(problem, cfg)
    lhs, rhs, ratios, excluded = [], [], [], []
    for s in range(n_shapes):
        for d in deltas:
            tag = f"shape{s}-delta{d:g}"
            pert = perturbed_problem(problem, delta_h=d, delta_rho0=0.25 * d,
                                     seed=seed + 17 * s)
            sol = solve_mfg(pert, cfg)
            if sol.picard_residual > residual_cutoff:
                excluded.append((tag, sol.picard_residual))
                continue
            num = _difference_energy(base, sol, problem)
            den = _measurements(base, sol, problem)
            lhs.append(num)
            rhs.append(den)
            ratios.append(num / den if den > 0 else 0.0)
    fitted = max(ratios) if ratios else 0.0
    return StabilityFit(lhs_norms=lhs, rhs_norms=rhs, ratios=ratios,
                        fitted_C=fitted, excluded=excluded)


def holder_experiment(problem: MfgProblem, epsilon: float, mu0: float,
                      deltas=(1e-1, 3e-2, 1e-2, 3e-3, 1e-3),
                      cfg: SolverConfig | None = None,
                      rho0_delta: float = 1e-7,
                      seed: int = 0) -> StabilityFit:
    """Slope of log(difference energy over (eps, T)) against log(terminal
    measurements), with the initial-density difference pinned small.

    The predicted exponent is a worst-case lower bound, so the fitted
    slope is expected at or above it (linear response gives slope ~ 1).
    """
    g = problem.grid
    if not 0.0 < epsilon < g.T:
        raise StabilityError(f"epsilon must lie in (0, T), got {epsilon}")
    cfg = cfg or SolverConfig()
    k_eps = int(round(epsilon / g.dt))  # snap to the grid
    base = solve_mfg(problem, cfg)
    lhs, rhs = [], []
    for d in deltas:
        pert = perturbed_problem(problem, delta_h=d, delta_rho0=rho0_delta,
                                 seed=seed)
        sol = solve_mfg(pert, cfg)
        lhs.append(_difference_energy(base, sol, problem, k_lo=k_eps))
        rhs.append(_measurements(base, sol, problem, include_rho0=False))
    logx = np.log(np.asarray(rhs))
    logy = np.log(np.asarray(lhs))
    slope = float(np.polyfit(logx, logy, 1)[0])
    eta = predicted_eta(epsilon, g.T, mu0)
    ratios = [float(a / b) for a, b in zip(lhs, rhs)]
    return StabilityFit(lhs_norms=lhs, rhs_norms=rhs, ratios=ratios,
                        fitted_C=max(ratios) if ratios else 0.0,
                        excluded=[], epsilon=epsilon, fitted_eta=slope,
                        predicted_eta=eta, mu0_used=mu0)
