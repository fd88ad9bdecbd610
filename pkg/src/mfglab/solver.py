"""Coupled forward-backward solver on the binary scenario tree.

The state is a pair of tree-indexed trajectories

    rho[k] : (levels(k), *grid.shape)   density, forward in time
    u[k]   : (levels(k), *grid.shape)   value function, backward in time

plus the martingale field U[k] (the e_1 component; the noise is scalar).

One forward step (density, per node):

    (I - beta_hat dt Lap) rho* = rho + dt div(rho grad_p B(grad u))
    rho_child = rho* -/+ beta sqrt(dt) d_1 rho*   (up / down branch)

so the deterministic identity (rho* - rho)/dt - beta_hat Lap rho* =
div(rho b) holds exactly for the stored slices.  All three sub-steps
conserve mass to rounding: the flux difference telescopes, the implicit
solve leaves the zero mode untouched, and the central stochastic shift
sums to zero.

One backward step (value function, per node):

    m = E[u_next | node],   U = (u_up - u_down) / (2 sqrt(dt))
    (I - beta_hat dt Lap) u = m + dt (beta d_1 U + H(t, x, grad m; rho))

i.e. implicit diffusion with the Hamiltonian frozen at the conditional
mean (semi-implicit).  The martingale identity u_child = m +/- U sqrt(dt)
is exact by construction.

The coupling is resolved by damped Picard iteration on u, finished by one
undamped forward-then-backward sweep so the stored pair satisfies both
discrete identities (exactly when the drift is u-independent, to Picard
tolerance otherwise).  Every kernel takes the array module ``xp`` and
avoids in-place mutation, so the same loop differentiates under jax for
the source-reconstruction gradient (with a fixed iteration count there).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .models import MfgProblem, ModelError
from .tree import ScenarioTree


@dataclass
class SolverConfig:
    max_iters: int = 60
    tol: float = 1e-13
    damping: float = 0.5          # Picard relaxation factor in (0, 1]
    transport: str = "central"    # "central" (residual-exact) or "upwind"
    final_undamped: bool = True
    fixed_iters: int | None = None  # run exactly this many sweeps (traceable)


@dataclass
class MfgSolution:
    rho: list                     # K+1 arrays, (levels(k), *shape)
    u: list                       # K+1 arrays, (levels(k), *shape)
    U: list                       # K arrays,   (levels(k), *shape)
    iterations: int
    picard_residual: float
    config: SolverConfig = field(repr=False, default_factory=SolverConfig)


def _coords(problem: MfgProblem):
    return problem.grid.coords()


def _drift(problem: MfgProblem, t: float, u_slice, xp):
    """grad_p B(grad u): the optimal feedback velocity, per spatial axis."""
    g = problem.grid
    p = kernels.gradient_central(xp, u_slice, g.h, g.n)
    return problem.hamiltonian.B_p_xp(xp, t, _coords(problem), p)


def _hamiltonian_slice(problem: MfgProblem, t: float, grad_u, rho_slice,
                       source_val, xp):
    ham = problem.hamiltonian
    val = ham.B_xp(xp, t, _coords(problem), grad_u)
    if source_val is not None:
        val = val + source_val
    if problem.coupling is not None:
        conv = problem.kernel.apply(t, rho_slice, xp=xp)
        val = val + problem.coupling.F_xp(xp, conv, rho_slice)
    return val


def _source_slices(problem: MfgProblem, source_r, xp):
    """Per-time G slices; ``source_r`` overrides the stored time profile.

    ``source_r`` has shape (K+1,) in 1-D, (K+1, N) over the transverse
    axis in 2-D.  Returns None when the problem carries no source.
    """
    src = problem.source
    if src is None and source_r is None:
        return None
    g = problem.grid
    coords = g.coords()
    times = g.times()
    R = [np.asarray(src.R_fn(t, coords)) * np.ones(g.shape) for t in times] \
        if src is not None else [np.ones(g.shape) for _ in times]
    if source_r is None:
        r = xp.asarray([src.r_fn(t) for t in times])
    else:
        r = xp.asarray(source_r)
    out = []
    for k in range(g.K + 1):
        rk = r[k]
        if g.n == 2 and rk.ndim == 1:
            rk = rk[None, :]  # transverse profile, constant in x_1
        out.append(rk * xp.asarray(R[k]))
    return out


def fp_step(problem: MfgProblem, rho, u_slice, t: float, cfg: SolverConfig, xp):
    """Deterministic part of one forward step; returns rho*."""
    g = problem.grid
    b = _drift(problem, t, u_slice, xp)
    flux = kernels.flux_divergence(xp, rho, b, g.h, g.n, scheme=cfg.transport)
    return kernels.heat_solve(xp, rho + g.dt * flux, problem.beta_hat * g.dt,
                              g.h, g.n)


def fp_branches(problem: MfgProblem, rho_star, xp):
    """Stochastic transport: the up/down children of rho*."""
    g = problem.grid
    shift = problem.beta * math.sqrt(g.dt) * kernels.d1_central(
        xp, rho_star, g.h, 0, g.n
    )
    return rho_star - shift, rho_star + shift


def hjb_step(problem: MfgProblem, mean, U_slice, rho_slice, t: float,
             source_val, cfg: SolverConfig, xp):
    """One backward step from the conditional mean of the next slice."""
    g = problem.grid
    grad_m = kernels.gradient_central(xp, mean, g.h, g.n)
    H = _hamiltonian_slice(problem, t, grad_m, rho_slice, source_val, xp)
    rhs = mean + g.dt * (problem.beta * kernels.d1_central(xp, U_slice, g.h, 0, g.n)
                         + H)
    return kernels.heat_solve(xp, rhs, problem.beta_hat * g.dt, g.h, g.n)


def solve_fp_forward(problem: MfgProblem, u_traj, cfg: SolverConfig, xp=np):
    """Propagate the density forward through the tree given u."""
    g, tree = problem.grid, problem.tree
    rho = [xp.asarray(problem.rho0)[None, ...]]
    for k in range(g.K):
        t = k * g.dt
        star = fp_step(problem, rho[k], u_traj[k], t, cfg, xp)
        up, down = fp_branches(problem, star, xp)
        rho.append(tree.scatter_children(up, down, k, xp))
    return rho


def solve_hjb_backward(problem: MfgProblem, rho_traj, cfg: SolverConfig,
                       xp=np, source_r=None):
    """Propagate the value function backward through the tree given rho."""
    g, tree = problem.grid, problem.tree
    G = _source_slices(problem, source_r, xp)
    u = [None] * (g.K + 1)
    U = [None] * g.K
    term = xp.asarray(problem.terminal_cost)
    u[g.K] = xp.broadcast_to(term, (tree.levels(g.K),) + g.shape) + 0.0 * term
    for k in range(g.K - 1, -1, -1):
        t = k * g.dt
        mean = tree.cond_mean(u[k + 1], k, xp)
        U[k] = tree.martingale_part(u[k + 1], k, xp)
        src = None if G is None else G[k]
        u[k] = hjb_step(problem, mean, U[k], rho_traj[k], t, src, cfg, xp)
    return u, U


def solve_mfg(problem: MfgProblem, cfg: SolverConfig | None = None, xp=np,
              source_r=None) -> MfgSolution:
    """Damped Picard iteration on the coupled forward-backward pair."""
    cfg = cfg or SolverConfig()
    if not 0.0 < cfg.damping <= 1.0:
        raise ModelError(f"damping must lie in (0, 1], got {cfg.damping}")
    g, tree = problem.grid, problem.tree
    term = xp.asarray(problem.terminal_cost)
    u = [xp.broadcast_to(term, (tree.levels(k),) + g.shape) + 0.0 * term
         for k in range(g.K + 1)]
    gamma = cfg.damping
    n_sweeps = cfg.fixed_iters if cfg.fixed_iters is not None else cfg.max_iters
    track = cfg.fixed_iters is None and xp is np
    residual = float("inf")
    done = 0
    for it in range(n_sweeps):
        rho = solve_fp_forward(problem, u, cfg, xp)
        u_new, _ = solve_hjb_backward(problem, rho, cfg, xp, source_r)
        if track:
            residual = max(
                float(np.max(np.abs(np.asarray(u_new[k]) - np.asarray(u[k]))))
                for k in range(g.K + 1)
            )
        u = [(1.0 - gamma) * u[k] + gamma * u_new[k] for k in range(g.K + 1)]
        done = it + 1
        if track and residual < cfg.tol:
            break
    if cfg.final_undamped:
        rho = solve_fp_forward(problem, u, cfg, xp)
        u, U = solve_hjb_backward(problem, rho, cfg, xp, source_r)
    else:
        rho = solve_fp_forward(problem, u, cfg, xp)
        _, U = solve_hjb_backward(problem, rho, cfg, xp, source_r)
    return MfgSolution(rho=rho, u=u, U=U, iterations=done,
                       picard_residual=residual, config=cfg)


def solve_deterministic(problem: MfgProblem, cfg: SolverConfig | None = None,
                        xp=np, source_r=None) -> MfgSolution:
    """Single-path reference solver (no noise terms), used for the beta = 0
    collapse check; trajectories keep a leading level axis of size 1."""
    cfg = cfg or SolverConfig()
    g = problem.grid
    G = _source_slices(problem, source_r, xp)

    def forward(u):
        rho = [xp.asarray(problem.rho0)[None, ...]]
        for k in range(g.K):
            rho.append(fp_step(problem, rho[k], u[k], k * g.dt, cfg, xp))
        return rho

    def backward(rho):
        u = [None] * (g.K + 1)
        u[g.K] = xp.asarray(problem.terminal_cost)[None, ...]
        zero = xp.zeros((1,) + g.shape)
        for k in range(g.K - 1, -1, -1):
            src = None if G is None else G[k]
            u[k] = hjb_step(problem, u[k + 1], zero, rho[k], k * g.dt, src,
                            cfg, xp)
        return u

    term = xp.asarray(problem.terminal_cost)[None, ...]
    u = [term + 0.0 for _ in range(g.K + 1)]
    gamma = cfg.damping
    residual = float("inf")
    done = 0
    for it in range(cfg.max_iters):
        rho = forward(u)
        u_new = backward(rho)
        residual = max(
            float(np.max(np.abs(np.asarray(u_new[k]) - np.asarray(u[k]))))
            for k in range(g.K + 1)
        )
        u = [(1.0 - gamma) * u[k] + gamma * u_new[k] for k in range(g.K + 1)]
        done = it + 1
        if residual < cfg.tol:
            break
    rho = forward(u)
    u = backward(rho)
    U = [xp.zeros((1,) + g.shape) for _ in range(g.K)]
    return MfgSolution(rho=rho, u=u, U=U, iterations=done,
                       picard_residual=residual, config=cfg)


# -- solver diagnostics --------------------------------------------------------

def mass_history(solution: MfgSolution, problem: MfgProblem) -> np.ndarray:
    """Expected total mass per time slice (should stay at 1)."""
    g, tree = problem.grid, problem.tree
    out = np.empty(g.K + 1)
    vol = g.h**g.n
    for k in range(g.K + 1):
        per_node = np.sum(np.asarray(solution.rho[k]),
                          axis=tuple(range(1, g.n + 1))) * vol
        out[k] = float(tree.probabilities(k) @ per_node)
    return out


def martingale_residual(solution: MfgSolution, problem: MfgProblem) -> float:
    """max |u_child - (mean +/- U sqrt(dt))| over the whole tree."""
    tree = problem.tree
    s = math.sqrt(problem.grid.dt)
    worst = 0.0
    for k in range(problem.grid.K):
        mean = tree.cond_mean(np.asarray(solution.u[k + 1]), k)
        U = np.asarray(solution.U[k])
        up_pred, down_pred = mean + U * s, mean - U * s
        child = np.asarray(solution.u[k + 1])
        if tree.recombining:
            up, down = child[1:], child[:-1]
        else:
            up, down = child[1::2], child[0::2]
        worst = max(worst, float(np.max(np.abs(up - up_pred))),
                    float(np.max(np.abs(down - down_pred))))
    return worst
