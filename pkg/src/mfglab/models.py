"""Model library: Hamiltonians, interaction kernels, couplings, sources.

The Hamiltonian of the control problem reduces, after resolving the inner
minimization over actions analytically, to

    H(t, x, p; rho) = B(t, x, p) + G(t, x) + F( (K rho)(t, x), rho(t, x) )

with (K rho)(t, x) = int K(t, x, y) rho(t, y) dy.  Shipped reduced drifts:

* ``quadratic``:      B = -|p|^2 / 2              (from B(a) = a, b = |a|^2/2)
* ``smooth_linear``:  B = -Ma * sqrt(|p|^2 + eps^2)  (bounded control,
  smoothed to keep three p-derivatives)
* ``affine``:         B = b0 . p + c              (linearization-exact tests)

All shipped drifts are x-independent, so the mixed p-x derivative
callbacks return zero; the callbacks are still part of the interface and
are validated against finite differences of B at construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from . import kernels
from .grid import Grid, GridError, integrate_values
from .tree import ScenarioTree


class ModelError(ValueError):
    """Model construction or validation failure."""


# -- reduced Hamiltonian drift -------------------------------------------------

@dataclass(frozen=True)
class Hamiltonian:
    """Reduced drift B with analytic p-derivative callbacks.

    Callbacks take (t, x, p) with x a tuple of coordinate arrays and p an
    array of shape (n, *spatial); outputs broadcast over the spatial axes:

        B      -> (*spatial)
        B_p    -> (n, *spatial)          d/dp_j
        B_pp   -> (n, n, *spatial)       d^2/dp_j dp_k
        B_ppp  -> (n, n, n, *spatial)
        B_px   -> (n, *spatial)          B_{p_j x_j} (diagonal pair)
        B_ppx  -> (n, n, *spatial)       B_{p_j p_k x_k}
    """

    id: str
    B: Callable
    B_p: Callable
    B_pp: Callable
    B_ppp: Callable
    B_px: Callable
    B_ppx: Callable
    n: int
    # backend-generic forms taking (xp, t, x, p_tuple); used on the
    # differentiable execution path where numpy ufuncs cannot trace
    B_xp: Callable | None = None
    B_p_xp: Callable | None = None

    def __post_init__(self):
        self._validate_gradient()

    def _validate_gradient(self, step: float = 1e-4, tol: float = 1e-6) -> None:
        rng = np.random.default_rng(0)
        p = rng.uniform(-2.0, 2.0, size=(self.n, 5))
        x = tuple(rng.uniform(-1.0, 1.0, size=5) for _ in range(self.n))
        t = 0.3
        g = np.asarray(self.B_p(t, x, p)) * np.ones_like(p)
        for j in range(self.n):
            dp = np.zeros_like(p)
            dp[j] = step
            fd = (self.B(t, x, p + dp) - self.B(t, x, p - dp)) / (2 * step)
            scale = max(1.0, float(np.max(np.abs(g[j]))))
            if np.max(np.abs(fd - g[j])) / scale > tol:
                raise ModelError(
                    f"{self.id}: grad_p callback disagrees with finite differences"
                )


def quadratic_hamiltonian(n: int) -> Hamiltonian:
    zero = lambda shape: (lambda t, x, p: np.zeros(shape + p.shape[1:]))
    eye = np.eye(n)
    return Hamiltonian(
        id="quadratic",
        B=lambda t, x, p: -0.5 * np.sum(p**2, axis=0),
        B_p=lambda t, x, p: -p,
        B_pp=lambda t, x, p: -eye.reshape((n, n) + (1,) * (p.ndim - 1))
        * np.ones((n, n) + p.shape[1:]),
        B_ppp=zero((n, n, n)),
        B_px=zero((n,)),
        B_ppx=zero((n, n)),
        n=n,
        B_xp=lambda xp, t, x, p: -0.5 * sum(pi * pi for pi in p),
        B_p_xp=lambda xp, t, x, p: tuple(-pi for pi in p),
    )


def smooth_linear_hamiltonian(n: int, Ma: float = 1.0, eps: float = 1e-3) -> Hamiltonian:
    """B = -Ma * s with s = sqrt(|p|^2 + eps^2): bounded-speed control."""

    def s(p):
        return np.sqrt(np.sum(p**2, axis=0) + eps**2)

    def B(t, x, p):
        return -Ma * s(p)

    def B_p(t, x, p):
        return -Ma * p / s(p)

    def B_pp(t, x, p):
        ss = s(p)
        eye = np.eye(n).reshape((n, n) + (1,) * (p.ndim - 1))
        return -Ma * (eye / ss - p[None, :] * p[:, None] / ss**3)

    def B_ppp(t, x, p):
        ss = s(p)
        eye = np.eye(n)
        out = np.zeros((n, n, n) + p.shape[1:])
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    out[i, j, k] = -Ma * (
                        -(eye[j, k] * p[i] + eye[i, k] * p[j] + eye[i, j] * p[k]) / ss**3
                        + 3.0 * p[i] * p[j] * p[k] / ss**5
                    )
        return out

    zero = lambda shape: (lambda t, x, p: np.zeros(shape + p.shape[1:]))

    def B_xp(xp, t, x, p):
        return -Ma * xp.sqrt(sum(pi * pi for pi in p) + eps**2)

    def B_p_xp(xp, t, x, p):
        ss = xp.sqrt(sum(pi * pi for pi in p) + eps**2)
        return tuple(-Ma * pi / ss for pi in p)

    return Hamiltonian(
        id="smooth_linear", B=B, B_p=B_p, B_pp=B_pp, B_ppp=B_ppp,
        B_px=zero((n,)), B_ppx=zero((n, n)), n=n,
        B_xp=B_xp, B_p_xp=B_p_xp,
    )


def affine_hamiltonian(n: int, b0=None, c: float = 0.0) -> Hamiltonian:
    b0 = np.zeros(n) if b0 is None else np.asarray(b0, dtype=float)
    zero = lambda shape: (lambda t, x, p: np.zeros(shape + p.shape[1:]))
    return Hamiltonian(
        id="affine",
        B=lambda t, x, p: np.tensordot(b0, p, axes=(0, 0)) + c,
        B_p=lambda t, x, p: b0.reshape((n,) + (1,) * (p.ndim - 1))
        * np.ones(p.shape),
        B_pp=zero((n, n)),
        B_ppp=zero((n, n, n)),
        B_px=zero((n,)),
        B_ppx=zero((n, n)),
        n=n,
        B_xp=lambda xp, t, x, p: sum(float(b0[a]) * p[a] for a in range(n)) + c,
        B_p_xp=lambda xp, t, x, p: tuple(
            float(b0[a]) * xp.ones_like(p[a]) for a in range(n)
        ),
    )


HAMILTONIANS = {
    "quadratic": quadratic_hamiltonian,
    "smooth_linear": smooth_linear_hamiltonian,
    "affine": affine_hamiltonian,
}


# -- interaction kernel --------------------------------------------------------

class InteractionKernel:
    """Interaction kernel K(t, x, y); shipped kernels are convolutional.

    ``apply`` evaluates (K rho)(x) = int K(x, y) rho(y) dy by FFT
    convolution; ``l2_norm_box`` is ||K||_{L^2(box x box)} for the
    Assumption-2 bound M2.
    """

    def __init__(self, grid: Grid, profile: Callable, norm_bound: float,
                 kind: str = "gaussian"):
        self.grid = grid
        self.kind = kind
        self.norm_bound = float(norm_bound)
        z = grid.coords()
        self._samples = np.asarray(profile(*z)) * np.ones(grid.shape)
        self._hat = np.fft.rfftn(self._roll_to_origin())
        observed = self.l2_norm_box()
        if observed > self.norm_bound * (1 + 1e-9):
            raise ModelError(
                f"kernel L2 norm {observed:.6g} exceeds declared bound {norm_bound:.6g}"
            )

    def _roll_to_origin(self) -> np.ndarray:
        # profile sampled on [-L, L); shift so z = 0 sits at index 0
        return np.roll(self._samples, (-(self.grid.N // 2),) * self.grid.n,
                       axis=tuple(range(self.grid.n)))

    def apply(self, t: float, rho, xp=np):
        """(K rho)(x) with K(x, y) = profile(x - y), periodic convolution."""
        g = self.grid
        axes = tuple(range(rho.ndim - g.n, rho.ndim))
        F = xp.fft.rfftn(rho, axes=axes) * self._hat
        return xp.fft.irfftn(F, s=g.shape, axes=axes) * g.h**g.n

    def sample(self, t, x, y):
        """Pointwise K(t, x, y) for oracles; x, y scalar coordinates (n=1)."""
        g = self.grid
        z = np.asarray(x) - np.asarray(y)
        z = (z + g.L) % (2 * g.L) - g.L
        idx = np.rint((z + g.L) / g.h).astype(int) % g.N
        return self._samples[idx]

    def l2_norm_box(self) -> float:
        g = self.grid
        return math.sqrt((2 * g.L) ** g.n * np.sum(self._samples**2) * g.h**g.n)

    def dx1_l2_norm_box(self) -> float:
        g = self.grid
        d = kernels.spectral_d1(np, self._samples, g.h, 0, g.n)
        return math.sqrt((2 * g.L) ** g.n * np.sum(d**2) * g.h**g.n)


def gaussian_kernel(grid: Grid, amplitude: float = 1.0, sigma: float = 0.5,
                    norm_bound: float | None = None) -> InteractionKernel:
    """Truncated Gaussian convolution kernel a * exp(-|z|^2 / 2 sigma^2)."""

    def profile(*z):
        r2 = sum(zi**2 for zi in z)
        return amplitude * np.exp(-r2 / (2 * sigma**2))

    if norm_bound is None:
        # ||K||^2 = (2L)^n * a^2 * (sigma sqrt(pi))^n on the untruncated line
        norm_bound = abs(amplitude) * math.sqrt(
            (2 * grid.L) ** grid.n * (sigma * math.sqrt(math.pi)) ** grid.n
        ) * 1.001
    return InteractionKernel(grid, profile, norm_bound, kind="gaussian")


def zero_kernel(grid: Grid) -> InteractionKernel:
    return InteractionKernel(grid, lambda *z: 0.0 * z[0], 1e-12, kind="zero")


# -- coupling ------------------------------------------------------------------

@dataclass(frozen=True)
class Coupling:
    """C^1 coupling F(y, z) with partial-derivative callbacks."""

    id: str
    F: Callable
    F_y: Callable
    F_z: Callable
    F_xp: Callable | None = None  # (xp, y, z), backend-generic

    def __post_init__(self):
        rng = np.random.default_rng(1)
        y, z = rng.normal(size=8), rng.normal(size=8)
        step = 1e-5
        for name, deriv, arg in (("F_y", self.F_y, 0), ("F_z", self.F_z, 1)):
            d = np.asarray(deriv(y, z)) * np.ones(8)
            if arg == 0:
                fd = (self.F(y + step, z) - self.F(y - step, z)) / (2 * step)
            else:
                fd = (self.F(y, z + step) - self.F(y, z - step)) / (2 * step)
            if np.max(np.abs(fd - d)) > 1e-6 * max(1.0, float(np.max(np.abs(d)))):
                raise ModelError(f"{self.id}: {name} disagrees with finite differences")


def linear_coupling(c1: float = 1.0, c2: float = 0.0) -> Coupling:
    return Coupling(
        id="linear",
        F=lambda y, z: c1 * y + c2 * z,
        F_y=lambda y, z: c1 * np.ones_like(np.asarray(y, dtype=float)),
        F_z=lambda y, z: c2 * np.ones_like(np.asarray(z, dtype=float)),
        F_xp=lambda xp, y, z: c1 * y + c2 * z,
    )


def saturating_coupling(c: float = 1.0) -> Coupling:
    """F = c * tanh(y) + z^2 / (1 + z^2): bounded with bounded derivatives."""
    return Coupling(
        id="saturating",
        F=lambda y, z: c * np.tanh(y) + z**2 / (1.0 + z**2),
        F_y=lambda y, z: c / np.cosh(y) ** 2 * np.ones_like(np.asarray(z, dtype=float)),
        F_z=lambda y, z: 2.0 * z / (1.0 + z**2) ** 2
        * np.ones_like(np.asarray(y, dtype=float)),
        F_xp=lambda xp, y, z: c * xp.tanh(y) + z**2 / (1.0 + z**2),
    )


COUPLINGS = {"linear": linear_coupling, "saturating": saturating_coupling}


# -- source term G = r(t, x') R(t, x) -----------------------------------------

@dataclass
class SourceTerm:
    """Separated source G(t, x) = r(t, x') R(t, x); r never depends on x_1.

    For n = 1 the transverse variable is empty and r = r(t) is scalar per
    time.  R must be bounded away from zero on the closed observation slab
    (checked on a sample lattice at construction).
    """

    r_fn: Callable          # (t,) -> scalar for n=1, (t, x') -> array for n=2
    R_fn: Callable          # (t, coords) -> array on the grid
    R_t: Callable
    R_grad: Callable        # (t, coords) -> (n, *spatial)
    R_lap: Callable
    grid: Grid
    r_independent_of_x1: bool = True
    min_R: float = dc_field(init=False, default=0.0)

    def __post_init__(self):
        if not self.r_independent_of_x1:
            raise ModelError("the source factor r must not depend on x_1")
        g = self.grid
        coords = g.coords()
        lo = np.inf
        for t in np.linspace(0.0, g.T, 7):
            Rv = np.abs(np.asarray(self.R_fn(t, coords)) * np.ones(g.shape))
            lo = min(lo, float(np.min(Rv)))
        self.min_R = lo
        if lo <= 0.0:
            raise ModelError("R must satisfy inf |R| > 0 on the closed domain")

    def G_field(self, t: float, coords) -> np.ndarray:
        r = self.r_fn(t)
        return np.asarray(r) * np.asarray(self.R_fn(t, coords))


def constant_R_source(grid: Grid, r_fn: Callable, R0: float = 1.0) -> SourceTerm:
    zero_vec = lambda t, c: np.zeros((grid.n,) + grid.shape)
    return SourceTerm(
        r_fn=r_fn,
        R_fn=lambda t, c: R0 * np.ones(grid.shape),
        R_t=lambda t, c: np.zeros(grid.shape),
        R_grad=zero_vec,
        R_lap=lambda t, c: np.zeros(grid.shape),
        grid=grid,
    )


def smooth_R_source(grid: Grid, r_fn: Callable, base: float = 2.0,
                    amp: float = 0.5) -> SourceTerm:
    """R = base + amp * cos(pi x_1 / L) * exp(-t): smooth, sign-definite."""
    if amp >= base:
        raise ModelError("need amp < base so that inf |R| > 0")
    w = math.pi / grid.L

    def R_fn(t, c):
        return base + amp * np.cos(w * c[0]) * math.exp(-t) * np.ones(grid.shape)

    def R_t(t, c):
        return -amp * np.cos(w * c[0]) * math.exp(-t) * np.ones(grid.shape)

    def R_grad(t, c):
        out = np.zeros((grid.n,) + grid.shape)
        out[0] = -amp * w * np.sin(w * c[0]) * math.exp(-t)
        return out

    def R_lap(t, c):
        return -amp * w**2 * np.cos(w * c[0]) * math.exp(-t) * np.ones(grid.shape)

    return SourceTerm(r_fn=r_fn, R_fn=R_fn, R_t=R_t, R_grad=R_grad,
                      R_lap=R_lap, grid=grid)


# -- the assembled problem -----------------------------------------------------

@dataclass
class MfgProblem:
    """Everything the coupled forward-backward solver needs."""

    grid: Grid
    tree: ScenarioTree
    hamiltonian: Hamiltonian
    kernel: InteractionKernel
    coupling: Coupling | None
    beta: float
    terminal_cost: np.ndarray
    rho0: np.ndarray
    source: SourceTerm | None = None

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ModelError(f"beta must lie in [0, 1], got {self.beta}")
        g = self.grid
        if self.tree.K != g.K:
            raise ModelError("tree depth must equal the number of time steps")
        self.terminal_cost = np.asarray(self.terminal_cost, dtype=float)
        self.rho0 = np.asarray(self.rho0, dtype=float)
        if self.terminal_cost.shape != g.shape or self.rho0.shape != g.shape:
            raise GridError("terminal cost / initial density shape mismatch")
        mass = integrate_values(self.rho0, g)
        if abs(mass - 1.0) > 1e-10:
            raise ModelError(f"initial density mass {mass} != 1")
        if np.min(self.rho0) < -1e-14:
            raise ModelError("initial density must be nonnegative")

    @property
    def beta_hat(self) -> float:
        return (1.0 + self.beta**2) / 2.0


def normalized_gaussian(grid: Grid, center=0.0, sigma: float = 0.4) -> np.ndarray:
    c = np.broadcast_to(np.atleast_1d(center), (grid.n,))
    coords = grid.coords()
    r2 = sum((coords[a] - c[a]) ** 2 for a in range(grid.n))
    vals = np.exp(-r2 / (2 * sigma**2)) * np.ones(grid.shape)
    return vals / (np.sum(vals) * grid.h**grid.n)


# -- Hamiltonian evaluation ----------------------------------------------------

def hamiltonian_eval(model: Hamiltonian, t: float, x, p, rho_slice: np.ndarray,
                     kernel: InteractionKernel, coupling: Coupling | None,
                     grid: Grid, G_value=0.0) -> float:
    """Pointwise H = B + G + F((K rho)(x), rho(x)) at one state point."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if not np.all(np.isfinite(p)):
        raise ModelError("non-finite momentum rejected")
    x = tuple(np.atleast_1d(xi) for xi in np.atleast_1d(x))
    val = float(np.asarray(model.B(t, x, p.reshape(p.shape + (1,)))).ravel()[0])
    val += float(np.asarray(G_value))
    if coupling is not None:
        conv = kernel.apply(t, rho_slice)
        idx = tuple(
            int(np.rint((float(xi) + grid.L) / grid.h)) % grid.N for xi in x
        )
        val += float(coupling.F(conv[idx], rho_slice[idx]))
    return val


def hamiltonian_field(model: Hamiltonian, t: float, coords, grad_u,
                      rho_slice, kernel: InteractionKernel,
                      coupling: Coupling | None, G_slice=None, xp=np):
    """H evaluated on the whole grid (arrays may carry a leading level axis)."""
    p = xp.stack(grad_u, axis=0)
    val = model.B(t, coords, p)
    if G_slice is not None:
        val = val + G_slice
    if coupling is not None:
        conv = kernel.apply(t, rho_slice, xp=xp)
        val = val + coupling.F(conv, rho_slice)
    return val


# -- assumption validation -----------------------------------------------------

@dataclass(frozen=True)
class AssumptionBounds:
    """Observed constants of the standing assumptions.

    M = max{1, C(M3), M2, M3} aggregates the drift-derivative constant at
    momentum radius M3, the kernel bound, and the a-priori solution bound.
    """

    M1: float
    M2: float
    M3: float
    C_of_M1: float
    M: float
    passed: bool
    details: dict

    def __post_init__(self):
        if self.M < 1.0:
            raise ModelError("aggregate constant M must be >= 1")


def drift_derivative_constant(model: Hamiltonian, M1: float,
                              n_probe: int = 64, seed: int = 0) -> float:
    """Largest sampled value of the summed derivative magnitudes |B_{p x}|
    + |B_{pp}| + |B_{ppx}| + |B_{ppp}| over |p| <= M1."""
    rng = np.random.default_rng(seed)
    n = model.n
    p = rng.uniform(-1.0, 1.0, size=(n, n_probe))
    norms = np.sqrt(np.sum(p**2, axis=0))
    p = p / np.maximum(norms / M1, 1.0)
    x = tuple(rng.uniform(-1.0, 1.0, size=n_probe) for _ in range(n))
    t = 0.5
    total = np.zeros(n_probe)
    B_px = np.asarray(model.B_px(t, x, p)) * np.ones((n, n_probe))
    B_pp = np.asarray(model.B_pp(t, x, p)) * np.ones((n, n, n_probe))
    B_ppx = np.asarray(model.B_ppx(t, x, p)) * np.ones((n, n, n_probe))
    B_ppp = np.asarray(model.B_ppp(t, x, p)) * np.ones((n, n, n, n_probe))
    for j in range(n):
        total += np.abs(B_px[j])
        for k in range(n):
            total += np.abs(B_pp[j, k]) + np.abs(B_ppx[j, k])
            for jp in range(n):
                total += np.abs(B_ppp[jp, j, k])
    return float(np.max(total))


def validate_assumptions(problem: MfgProblem, solution=None,
                         M1: float = 2.0, M2: float | None = None,
                         M3: float | None = None) -> AssumptionBounds:
    """A-posteriori check of the standing assumptions on a computed solution.

    Derivative bounds are sampled on a probe lattice; the W^{2,inf} /
    W^{1,inf} norms of (u, rho) are discrete sup-norms over all tree
    nodes.  Always reports; ``passed`` compares against the configured
    bounds.
    """
    g = problem.grid
    obs_M2 = problem.kernel.l2_norm_box()
    details: dict = {"kernel_l2": obs_M2}
    obs_M3 = 0.0
    if solution is not None:
        sup = 0.0
        for k in range(g.K + 1):
            u = np.asarray(solution.u[k])
            rho = np.asarray(solution.rho[k])
            m = float(np.max(np.abs(u))) + float(np.max(np.abs(rho)))
            for a in range(g.n):
                du = kernels.d1_central(np, u, g.h, a, g.n)
                dr = kernels.d1_central(np, rho, g.h, a, g.n)
                m = max(m, float(np.max(np.abs(du))) + float(np.max(np.abs(dr))))
                for b in range(g.n):
                    d2u = kernels.d1_central(np, du, g.h, b, g.n)
                    m = max(m, float(np.max(np.abs(d2u))))
            sup = max(sup, m)
        obs_M3 = sup
        details["solution_sup_norms"] = sup
    M2 = obs_M2 if M2 is None else M2
    M3 = max(obs_M3, 1e-12) if M3 is None else M3
    C_M1 = drift_derivative_constant(problem.hamiltonian, M1)
    C_M3 = drift_derivative_constant(problem.hamiltonian, M3)
    details["C_of_M3"] = C_M3
    M = max(1.0, C_M3, M2, M3)
    passed = (obs_M2 <= M2 * (1 + 1e-9)) and (obs_M3 <= M3 * (1 + 1e-9) or solution is None)
    return AssumptionBounds(M1=M1, M2=M2, M3=M3, C_of_M1=C_M1, M=M,
                            passed=passed, details=details)
