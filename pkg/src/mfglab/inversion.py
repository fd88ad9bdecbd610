"""Inverse source problem: recover the time profile r in the separated
source G = r(t, x') R(t, x) of the value-function equation from the
terminal density and lateral Cauchy traces on x_1 in {0, 1}.

The uniqueness theory rests on a chain of transformations of the
difference system of two solutions: v = u / R removes the unknown source
from the x_1-derivative (r does not depend on x_1), the smooth cutoff
chi(t) kills the unknown initial data, and w = chi v_{x_1},
p = chi rho_{x_1} satisfy driftless-source equations amenable to the
weighted energy estimates.  ``verify_theorem3_transformations`` builds
the transformed fields and coefficient sets and measures the discrete
residuals of the transformed equations, plus the Poincare-type
inequalities used to close the argument.

The reconstruction itself is ours: Tikhonov-regularized least squares

    J(r) = 1/2 ||rho_r(T) - rho_obs(T)||^2  (on (0,1))
         + 1/2 sum_traces ||traces_r - traces_obs||^2 / rms^2
         + alpha ||r||^2,

minimized by L-BFGS with the gradient obtained by automatic
differentiation through the (numpy/jax dual) discrete solver, so the
gradient is the exact adjoint of the scheme actually solved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

import jax
import jax.numpy as jnp

from . import kernels
from .carleman import CarlemanWeight
from .grid import Grid
from .models import MfgProblem, ModelError
from .solver import MfgSolution, SolverConfig, solve_mfg
from .stability import LinearizedCoefficients, build_linearized_coefficients

jax.config.update("jax_enable_x64", True)

TRACE_NAMES = ("rho", "u", "rho_x1", "u_x1", "rho_x1x1", "u_x1x1")


class InversionError(ValueError):
    pass


# -- cutoff --------------------------------------------------------------------

def cutoff_chi(t, t1: float, t2: float):
    """Quintic smoothstep ramp: 0 below t1, 1 above t2, C^2 throughout."""
    if t1 >= t2:
        raise InversionError(f"need t1 < t2, got {t1} >= {t2}")
    s = np.clip((np.asarray(t, dtype=float) - t1) / (t2 - t1), 0.0, 1.0)
    out = s**3 * (10.0 - 15.0 * s + 6.0 * s**2)
    return float(out) if np.isscalar(t) else out


def cutoff_chi_dt(t, t1: float, t2: float):
    """Time derivative of the ramp; max value 1.875 / (t2 - t1)."""
    if t1 >= t2:
        raise InversionError(f"need t1 < t2, got {t1} >= {t2}")
    s = np.clip((np.asarray(t, dtype=float) - t1) / (t2 - t1), 0.0, 1.0)
    out = 30.0 * s**2 * (1.0 - s) ** 2 / (t2 - t1)
    return float(out) if np.isscalar(t) else out


# -- problem and observations --------------------------------------------------

@dataclass
class InversionProblem:
    """Coupled problem with separated source plus observation protocol."""

    problem: MfgProblem
    epsilon: float
    t1: float
    t2: float
    alpha: float = 1e-8
    weight: CarlemanWeight | None = None

    def __post_init__(self):
        T = self.problem.grid.T
        if not 0.0 < self.t1 < self.t2 < self.epsilon < T:
            raise InversionError(
                f"need 0 < t1 < t2 < epsilon < T, got "
                f"({self.t1}, {self.t2}, {self.epsilon}, {T})"
            )
        if self.problem.source is None:
            raise InversionError("inversion requires a separated source term")

    @classmethod
    def with_defaults(cls, problem: MfgProblem, alpha: float = 1e-8,
                      weight=None) -> "InversionProblem":
        eps = problem.grid.T / 4.0
        return cls(problem=problem, epsilon=eps, t1=eps / 3.0,
                   t2=2.0 * eps / 3.0, alpha=alpha, weight=weight)


@dataclass
class CauchyTraceSet:
    """Six lateral traces per time slice: arrays (levels(k), 2[, N'])
    for the faces x_1 = 0 and x_1 = 1."""

    traces: dict  # name -> list over k = 0..K of arrays

    def stacked(self, name: str) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.traces[name]])


def _face_values(values, grid: Grid, xp=np):
    """Values and first two x_1 derivatives on the faces x_1 in {0, 1}.

    On the periodic box with L = 1 the faces sit at lattice indices N/2
    and 0 (x = 1 wraps to -1).  Returns a dict name -> (levels, 2[, N']).
    """
    i0, i1 = grid.N // 2, 0
    d1 = kernels.d1_central(xp, values, grid.h, 0, grid.n)
    d2 = kernels.d2_central(xp, values, grid.h, 0, grid.n)
    lead = values.ndim - grid.n
    def take(arr):
        sl0 = arr[(slice(None),) * lead + (i0,)]
        sl1 = arr[(slice(None),) * lead + (i1,)]
        return xp.stack([sl0, sl1], axis=lead)
    return take(values), take(d1), take(d2)


def _collect_traces(solution: MfgSolution, grid: Grid, xp=np) -> dict:
    out = {name: [] for name in TRACE_NAMES}
    for k in range(grid.K + 1):
        rho = xp.asarray(solution.rho[k]) * xp.ones((1,) + grid.shape)
        u = xp.asarray(solution.u[k]) * xp.ones((1,) + grid.shape)
        r0, r1, r2 = _face_values(rho, grid, xp)
        u0, u1, u2 = _face_values(u, grid, xp)
        for name, val in zip(TRACE_NAMES, (r0, u0, r1, u1, r2, u2)):
            out[name].append(val)
    return out


@dataclass
class Observations:
    terminal_rho: np.ndarray          # (levels(K), N') - restricted to (0,1)
    traces: CauchyTraceSet
    trace_rms: dict
    noise_level: float = 0.0


def _restrict_terminal(rho_T, grid: Grid, xp=np):
    """Slice of the box field over x_1 in [0, 1) (the observation window)."""
    lead = rho_T.ndim - grid.n
    # slices the first spatial axis (x_1); remaining axes stay whole
    return rho_T[(slice(None),) * lead + (slice(grid.N // 2, None),)]


def generate_observations(inv: InversionProblem, r_true: np.ndarray,
                          noise_level: float = 0.0, seed: int = 0,
                          cfg: SolverConfig | None = None) -> Observations:
    """Forward-solve with the known source profile and record the data.

    ``noise_level`` is relative: each observation array receives additive
    Gaussian noise with standard deviation noise_level times its RMS.
    """
    cfg = cfg or SolverConfig()
    g = inv.problem.grid
    sol = solve_mfg(inv.problem, cfg, source_r=_pad_profile(r_true, g))
    term = np.asarray(_restrict_terminal(np.asarray(sol.rho[g.K]), g))
    traces = _collect_traces(sol, g)
    rms = {}
    for name in TRACE_NAMES:
        flat = np.concatenate([np.ravel(a) for a in traces[name]])
        rms[name] = float(np.sqrt(np.mean(flat**2)))
    # a trace that vanishes identically (e.g. an odd derivative of an even
    # field at a symmetry point) carries no information; flooring its rms
    # relative to the largest trace keeps its misfit weight from amplifying
    # rounding noise by many orders of magnitude
    floor = max(1e-3 * max(rms.values()), 1e-30)
    rms = {name: max(v, floor) for name, v in rms.items()}
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        t_rms = float(np.sqrt(np.mean(term**2)))
        term = term + noise_level * t_rms * rng.standard_normal(term.shape)
        for name in TRACE_NAMES:
            traces[name] = [
                a + noise_level * rms[name] * rng.standard_normal(a.shape)
                for a in traces[name]
            ]
    return Observations(terminal_rho=term, traces=CauchyTraceSet(traces),
                        trace_rms=rms, noise_level=noise_level)


def _pad_profile(r, grid: Grid, xp=np):
    """Extend the K interior source values to the K+1 slots the solver
    expects (the terminal slot never enters the backward recursion)."""
    r = xp.asarray(r)
    if r.shape[0] == grid.K + 1:
        return r
    if r.shape[0] != grid.K:
        raise InversionError(f"source profile needs K={grid.K} entries")
    return xp.concatenate([r, r[-1:]], axis=0)


# -- misfit and reconstruction -------------------------------------------------

def _obs_arguments(obs: Observations):
    """Pack the observation arrays into the pytree arguments the compiled
    misfit expects, so one compilation serves every data set of the same
    shapes (noise-free, noisy, rescaled regularization)."""
    term = jnp.asarray(obs.terminal_rho)
    traces = {
        name: tuple(jnp.asarray(a) for a in obs.traces.traces[name])
        for name in TRACE_NAMES
    }
    rms = {name: float(obs.trace_rms[name]) for name in TRACE_NAMES}
    return term, traces, rms


def _misfit_fn(inv: InversionProblem, cfg: SolverConfig):
    """Compiled (r, term_obs, traces_obs, rms, alpha) -> (J, dJ/dr).

    The gradient is the exact discrete adjoint of the solver because it is
    produced by automatic differentiation of the very recursion that is
    solved.  Observations and the Tikhonov weight are traced arguments, so
    the expensive compilation happens once per problem geometry.
    """
    g = inv.problem.grid
    probs_T = jnp.asarray(inv.problem.tree.probabilities(g.K))
    vol = g.h**g.n
    time_w = np.ones(g.K + 1)
    if inv.weight is not None:
        time_w = np.array([
            math.exp(inv.weight.normalized_log_weight(min(k * g.dt, g.T)))
            for k in range(g.K + 1)
        ])
    time_w = jnp.asarray(time_w)

    def J(r, term_obs, trace_obs, rms, alpha):
        sol = solve_mfg(inv.problem, cfg, xp=jnp,
                        source_r=_pad_profile(r, g, jnp))
        rT = _restrict_terminal(sol.rho[g.K], g, jnp)
        dterm = rT - term_obs
        lead_axes = tuple(range(1, dterm.ndim))
        out = 0.5 * jnp.sum(probs_T * jnp.sum(dterm**2, axis=lead_axes)) * vol
        for k in range(g.K + 1):
            probs = jnp.asarray(inv.problem.tree.probabilities(k))
            rho = sol.rho[k] * jnp.ones((1,) + g.shape)
            u = sol.u[k] * jnp.ones((1,) + g.shape)
            r0, r1d, r2d = _face_values(rho, g, jnp)
            u0, u1d, u2d = _face_values(u, g, jnp)
            for name, val in zip(TRACE_NAMES, (r0, u0, r1d, u1d, r2d, u2d)):
                d = val - trace_obs[name][k]
                axes = tuple(range(1, d.ndim))
                out = out + 0.5 * time_w[k] * g.dt / rms[name] ** 2 \
                    * jnp.sum(probs * jnp.sum(d**2, axis=axes))
        out = out + alpha * g.dt * jnp.sum(r**2)
        return out

    return jax.jit(jax.value_and_grad(J))


@dataclass
class ReconstructionResult:
    r_hat: np.ndarray
    relative_l2_error: float | None
    misfit_history: list
    grad_norms: list
    alpha: float
    converged: bool
    n_iterations: int


def reconstruct_source(inv: InversionProblem, obs: Observations,
                       r0: np.ndarray | None = None,
                       r_true: np.ndarray | None = None,
                       cfg: SolverConfig | None = None,
                       max_iters: int = 200,
                       gtol: float = 1e-12,
                       vg=None) -> ReconstructionResult:
    """L-BFGS minimization of the regularized data misfit.

    Pass the ``vg`` returned by :func:`_misfit_fn` to reuse one
    compilation across reconstructions of the same geometry."""
    cfg = cfg or SolverConfig(fixed_iters=8, damping=0.6)
    g = inv.problem.grid
    if vg is None:
        vg = _misfit_fn(inv, cfg)
    term_obs, trace_obs, rms = _obs_arguments(obs)
    history, gnorms = [], []

    def fun(x):
        val, grad = vg(jnp.asarray(x), term_obs, trace_obs, rms, inv.alpha)
        gnorms.append(float(np.linalg.norm(np.asarray(grad))))
        return float(val), np.asarray(grad, dtype=float)

    x0 = np.zeros(g.K) if r0 is None else np.asarray(r0, dtype=float)
    res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                   callback=lambda xk: history.append(fun(xk)[0]),
                   options={"maxiter": max_iters, "gtol": gtol,
                            "ftol": 1e-16})
    r_hat = np.asarray(res.x)
    rel = None
    if r_true is not None:
        denom = float(np.linalg.norm(r_true))
        rel = float(np.linalg.norm(r_hat - np.asarray(r_true))) \
            / max(denom, 1e-30)
    return ReconstructionResult(r_hat=r_hat, relative_l2_error=rel,
                                misfit_history=history, grad_norms=gnorms,
                                alpha=inv.alpha, converged=bool(res.success),
                                n_iterations=int(res.nit))


def gradient_check(inv: InversionProblem, obs: Observations,
                   cfg: SolverConfig | None = None, n_directions: int = 10,
                   seed: int = 0, step: float = 1e-5, vg=None) -> float:
    """Worst relative error of the adjoint gradient against central finite
    differences over random directions."""
    cfg = cfg or SolverConfig(fixed_iters=8, damping=0.6)
    g = inv.problem.grid
    if vg is None:
        vg = _misfit_fn(inv, cfg)
    term_obs, trace_obs, rms = _obs_arguments(obs)
    ev = lambda x: vg(jnp.asarray(x), term_obs, trace_obs, rms, inv.alpha)
    rng = np.random.default_rng(seed)
    r = rng.normal(scale=0.5, size=g.K)
    _, grad = ev(r)
    grad = np.asarray(grad)
    worst = 0.0
    for _ in range(n_directions):
        d = rng.normal(size=g.K)
        d /= np.linalg.norm(d)
        jp = float(ev(r + step * d)[0])
        jm = float(ev(r - step * d)[0])
        fd = (jp - jm) / (2.0 * step)
        an = float(grad @ d)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-30))
    return worst


def uniqueness_certificate(inv: InversionProblem, obs: Observations,
                           r_true: np.ndarray | None = None,
                           cfg: SolverConfig | None = None,
                           seed: int = 1, max_iters: int = 200,
                           vg=None) -> dict:
    """Distance between reconstructions started from zero and from a
    random profile - numerical evidence for the uniqueness conclusion."""
    g = inv.problem.grid
    rec1 = reconstruct_source(inv, obs, r0=None, r_true=r_true, cfg=cfg,
                              max_iters=max_iters, vg=vg)
    rng = np.random.default_rng(seed)
    rec2 = reconstruct_source(inv, obs, r0=rng.normal(scale=0.5, size=g.K),
                              r_true=r_true, cfg=cfg, max_iters=max_iters,
                              vg=vg)
    if not (rec1.converged and rec2.converged):
        raise InversionError("a reconstruction failed to converge")
    value = float(np.linalg.norm(rec1.r_hat - rec2.r_hat)) \
        / max(float(np.linalg.norm(rec1.r_hat)), 1.0)
    return {
        "certificate": value,
        "rel_error_from_zero": rec1.relative_l2_error,
        "rel_error_from_random": rec2.relative_l2_error,
        "epsilon": inv.epsilon,
    }


def discrepancy_reconstruct(inv: InversionProblem, obs: Observations,
                            r_true: np.ndarray | None = None,
                            noise_floor: float | None = None,
                            alphas=(1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7),
                            cfg: SolverConfig | None = None,
                            max_iters: int = 200,
                            vg=None) -> tuple[float, ReconstructionResult]:
    """Reconstruction with the Tikhonov weight chosen by the discrepancy
    principle: among the candidate weights, keep the one whose pure data
    misfit lands closest to the noise floor (from above when possible).

    The floor is the misfit of the exact profile against the noisy data;
    in this twin setting it is computed directly when ``r_true`` is given.
    """
    from dataclasses import replace as dc_replace
    cfg = cfg or SolverConfig(fixed_iters=8, damping=0.6)
    if vg is None:
        vg = _misfit_fn(inv, cfg)
    term_obs, trace_obs, rms = _obs_arguments(obs)
    data_misfit = lambda r: float(
        vg(jnp.asarray(r), term_obs, trace_obs, rms, 0.0)[0])
    if noise_floor is None:
        if r_true is None:
            raise InversionError("need r_true or an explicit noise_floor")
        noise_floor = data_misfit(r_true)
    best = None
    for alpha in alphas:
        inv_a = dc_replace(inv, alpha=float(alpha))
        rec = reconstruct_source(inv_a, obs, r_true=r_true, cfg=cfg,
                                 max_iters=max_iters, vg=vg)
        gap = abs(math.log(max(data_misfit(rec.r_hat), 1e-300))
                  - math.log(max(noise_floor, 1e-300)))
        if best is None or gap < best[0]:
            best = (gap, float(alpha), rec)
    return best[1], best[2]


# -- transformation-chain verification ----------------------------------------

@dataclass
class TransformationReport:
    w_residual: float
    p_residual: float
    w_scale: float
    p_scale: float
    poincare_pass: int
    poincare_total: int


def _source_R_fields(problem: MfgProblem, k: int):
    g = problem.grid
    src = problem.source
    t = k * g.dt
    coords = g.coords()
    R = np.asarray(src.R_fn(t, coords)) * np.ones(g.shape)
    Rt = np.asarray(src.R_t(t, coords)) * np.ones(g.shape)
    Rg = np.asarray(src.R_grad(t, coords)) * np.ones((g.n,) + g.shape)
    Rl = np.asarray(src.R_lap(t, coords)) * np.ones(g.shape)
    return R, Rt, Rg, Rl


def verify_theorem3_transformations(inv: InversionProblem,
                                    sol1: MfgSolution, sol2: MfgSolution,
                                    r1: np.ndarray, r2: np.ndarray,
                                    n_poincare: int = 50,
                                    seed: int = 0) -> TransformationReport:
    """Residuals of the transformed difference equations.

    Builds v = (u1-u2)/R, V = (U1-U2)/R, w = chi v_x1, p = chi rho_x1
    with the linearized coefficients of the difference system, and
    substitutes them into the discrete transformed equations.  The
    equations hold exactly in the continuum; the discrete residuals decay
    at first order under joint (h, dt) refinement.  Also counts the
    Poincare inequalities on random fields vanishing at x_1 = 0.
    """
    problem = inv.problem
    g, tree = problem.grid, problem.tree
    beta, bhat = problem.beta, problem.beta_hat
    if problem.source.min_R <= 1e-8:
        raise ModelError("R too close to zero for the division by R")
    coeffs = build_linearized_coefficients(problem, sol1, sol2)
    n = g.n
    dt = g.dt
    sd1 = lambda f, a=0: kernels.spectral_d1(np, f, g.h, a, n)
    slap = lambda f: kernels.spectral_laplacian(np, f, g.h, n)

    def fields_at(k):
        R, Rt, Rg, Rl = _source_R_fields(problem, k)
        ud = np.asarray(sol1.u[k]) - np.asarray(sol2.u[k])
        rd = np.asarray(sol1.rho[k]) - np.asarray(sol2.rho[k])
        v = ud / R
        chi = cutoff_chi(k * dt, inv.t1, inv.t2)
        return R, Rt, Rg, Rl, ud, rd, v, chi

    w_sq = p_sq = w_ref = p_ref = 0.0
    vol = g.h**g.n
    for k in range(g.K):
        R, Rt, Rg, Rl, ud, rd, v, chi = fields_at(k)
        Ud = np.asarray(sol1.U[k]) - np.asarray(sol2.U[k])
        V = Ud / R
        w = chi * sd1(v)
        Wc = chi * sd1(V)
        p = chi * sd1(rd)
        # next-slice transforms (per child, then conditional mean)
        Rn = _source_R_fields(problem, k + 1)[0]
        udn = np.asarray(sol1.u[k + 1]) - np.asarray(sol2.u[k + 1])
        rdn = np.asarray(sol1.rho[k + 1]) - np.asarray(sol2.rho[k + 1])
        chin = cutoff_chi((k + 1) * dt, inv.t1, inv.t2)
        w_next = tree.cond_mean(chin * sd1(udn / Rn), k)
        p_next = tree.cond_mean(chin * sd1(rdn), k)
        # the cutoff enters through its exact per-step increment applied
        # to the next conditional mean (discrete product rule), so the
        # ramp need not be resolved by the time grid
        dchi = (chin - chi) / dt
        chit_w = dchi * tree.cond_mean(sd1(udn / Rn), k)
        chit_p = dchi * tree.cond_mean(sd1(rdn), k)

        B5 = coeffs.B5[k]
        B5dR = sum(B5[a] * Rg[a] for a in range(n))
        f1 = -Rt / R - bhat * Rl / R - B5dR / R
        f2 = tuple(-2.0 * bhat * Rg[a] / R - B5[a] for a in range(n))
        f3_1 = -beta * Rg[0] / R  # e_1 component (scalar noise)
        # value-function transform: drift of dw + bhat Lap w dt
        drift_w = chit_w + f1 * w + sum(f2[a] * sd1(w, a)
                                        for a in range(n))
        drift_w = drift_w + sd1(f1) * chi * v \
            + chi * sum(sd1(f2[a]) * sd1(v, a) for a in range(n))
        drift_w = drift_w + f3_1 * Wc - beta * sd1(Wc) + chi * sd1(f3_1) * V
        if problem.coupling is not None:
            conv_d = problem.kernel.apply(k * dt, rd)
            coupling_term = chi * (coeffs.F1[k] * conv_d
                                   + coeffs.F2[k] * rd) / R
            drift_w = drift_w - sd1(coupling_term)
        res_w = (w_next - w) / dt + bhat * slap(w) - drift_w

        # density transform: drift of dp - bhat Lap p dt
        g5 = coeffs.B1[k]
        g4 = coeffs.B2[k]
        B3 = coeffs.B3[k]
        B4 = coeffs.B4[k]
        Rxx = [[sd1(Rg[j], kk) for kk in range(n)] for j in range(n)]
        g1c = sum(B3[a] * Rg[a] for a in range(n)) \
            + sum(B4[j][kk] * Rxx[j][kk] for j in range(n) for kk in range(n))
        g2 = tuple(R * B3[j] + 2.0 * sum(B4[j][kk] * Rg[kk]
                                         for kk in range(n))
                   for j in range(n))
        g3 = [[B4[j][kk] * R for kk in range(n)] for j in range(n)]
        lin = chit_p + g1c * w \
            + sum(g2[a] * sd1(w, a) for a in range(n)) \
            + sum(g3[j][kk] * sd1(sd1(w, j), kk)
                  for j in range(n) for kk in range(n)) \
            + sum(g4[a] * sd1(p, a) for a in range(n)) + g5 * p
        lin = lin + chi * (
            sd1(g1c) * v
            + sum(sd1(g2[a]) * sd1(v, a) for a in range(n))
            + sum(sd1(g3[j][kk]) * sd1(sd1(v, j), kk)
                  for j in range(n) for kk in range(n))
            + sum(sd1(g4[a]) * sd1(rd, a) for a in range(n))
            + sd1(g5) * rd
        )
        res_p = (p_next - p) / dt - bhat * slap(p) - lin

        probs = tree.probabilities(k)
        acc = lambda f: dt * float(probs @ (
            np.sum((f * np.ones((len(probs),) + g.shape)) ** 2,
                   axis=tuple(range(1, 1 + n))) * vol))
        w_sq += acc(res_w)
        p_sq += acc(res_p)
        w_ref += acc(w / dt)
        p_ref += acc(p / dt)

    pass_cnt, total = poincare_check(seed=seed, n_fields=n_poincare)
    return TransformationReport(
        w_residual=math.sqrt(w_sq), p_residual=math.sqrt(p_sq),
        w_scale=math.sqrt(w_ref), p_scale=math.sqrt(p_ref),
        poincare_pass=pass_cnt, poincare_total=total,
    )


def poincare_check(seed: int = 0, n_fields: int = 50,
                   n_quad: int = 801) -> tuple[int, int]:
    """int_0^1 v^2 <= int_0^1 (v')^2 for random smooth v with v(0) = 0.

    v is drawn from a sine basis vanishing at 0 (quarter-wave modes, so
    v(1) is generically nonzero); the derivative is analytic and the
    integrals use the trapezoid rule.
    """
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, n_quad)
    n_pass = 0
    for _ in range(n_fields):
        coef = rng.normal(size=8)
        v = np.zeros_like(x)
        dv = np.zeros_like(x)
        for m, c in enumerate(coef, start=1):
            om = (m - 0.5) * math.pi
            v += c * np.sin(om * x)
            dv += c * om * np.cos(om * x)
        if np.trapezoid(v**2, x) <= np.trapezoid(dv**2, x) * (1 + 1e-12):
            n_pass += 1
    return n_pass, n_fields
