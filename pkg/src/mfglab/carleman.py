"""Weighted-in-time energy inequalities for stochastic heat operators.

The weight is theta = exp(l), l = lambda (t+2)^mu.  For the admissible
mu >= 144 (T+2)^2 of the forward estimate, raw theta spans thousands of
orders of magnitude, so the machinery here never exponentiates an
unnormalized exponent:

* lambda is carried as ``log_lambda`` (useful lambdas can be far below
  the smallest positive double);
* every weighted integral is accumulated per time slice in log space,
  with the reference shift 2 lambda (T+2)^mu subtracted so the largest
  possible weight is exactly 1;
* the per-term totals are combined by log-sum-exp, and one extra common
  shift is applied to both sides of a report when even the normalized
  totals leave the double range.

Both sides of a report share the same normalization, so the margin sign
is meaningful; the inequalities themselves are homogeneous in the common
factor, making the normalization exact rather than approximate.

Synthetic data are manufactured so the defining equation holds exactly at
the discrete level: the free right-hand side (f1 for the backward
equation, g1 for the forward one) is *defined* as the discrete residual
of randomly drawn band-limited fields.  Bounded-domain variants put the
fields in a C-infinity profile compactly supported in x_1 in (0, 1), so
homogeneous Dirichlet conditions hold to rounding and the periodic-box
spectral operators remain applicable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .grid import Grid, GridError, half_axis0_integral
from .tree import ScenarioTree

NEG_INF = float("-inf")
_SHIFT_THRESHOLD = 700.0  # |log| beyond this cannot be exponentiated


class CarlemanError(ValueError):
    """Precondition failure of an inequality evaluator."""


# -- the weight ----------------------------------------------------------------

@dataclass(frozen=True)
class CarlemanWeight:
    """theta(t) = exp(lambda (t+2)^mu), held in log space.

    ``reference_shift`` is the log-space normalization 2 lambda (T+2)^mu
    (it may round to inf for extreme parameters; the normalized
    evaluators below never need it in linear space).
    """

    log_lambda: float
    mu: float
    T: float

    def __post_init__(self):
        if self.mu <= 0 or self.T <= 0:
            raise CarlemanError("mu and T must be positive")

    @classmethod
    def from_lambda(cls, lam: float, mu: float, T: float) -> "CarlemanWeight":
        if lam <= 0:
            raise CarlemanError("lambda must be positive (use log_lambda directly)")
        return cls(log_lambda=math.log(lam), mu=mu, T=T)

    @property
    def lam(self) -> float:
        return math.exp(self.log_lambda)  # may under/overflow; informational

    @property
    def reference_shift(self) -> float:
        return math.exp(math.log(2.0) + self.log_lambda
                        + self.mu * math.log(self.T + 2.0)) \
            if self.log_lambda + self.mu * math.log(self.T + 2.0) < _SHIFT_THRESHOLD \
            else float("inf")

    def weight_log(self, t: float) -> float:
        """l(t) = lambda (t+2)^mu; exponentiate only after normalizing."""
        if not 0.0 <= t <= self.T * (1 + 1e-12):
            raise CarlemanError(f"t = {t} outside [0, {self.T}]")
        e = self.log_lambda + self.mu * math.log(t + 2.0)
        return math.exp(e) if e < _SHIFT_THRESHOLD else float("inf")

    def normalized_log_weight(self, t: float, power: float = 2.0) -> float:
        """log of theta(t)^power / exp(reference_shift), always <= 0.

        Computed as -exp(m) with m assembled from logs, so it stays exact
        even when the raw exponents dwarf the double range; returns -inf
        when the normalized weight underflows entirely.
        """
        a = self.mu * math.log(t + 2.0)
        b = self.mu * math.log(self.T + 2.0)
        # power * lam * e^a - 2 * lam * e^b = -lam * e^b * (2 - power e^{a-b})
        ratio = (power / 2.0) * math.exp(min(a - b, 0.0))
        if ratio >= 1.0:  # only at t = T with power = 2
            return 0.0
        m = self.log_lambda + math.log(2.0) + b + math.log1p(-ratio)
        return -math.exp(m) if m < _SHIFT_THRESHOLD else NEG_INF


def mu_min(T: float) -> float:
    """Smallest admissible mu of the forward estimate: 144 (T+2)^2."""
    if T <= 0:
        raise CarlemanError("T must be positive")
    return 144.0 * (T + 2.0) ** 2


# -- synthetic data ------------------------------------------------------------

@dataclass
class SyntheticDatum:
    """Fields satisfying the auxiliary equation exactly at the discrete level.

    backward kind: w (K+1 slices), f1, f2 (K slices; f2 is the e_1
    component of the vector field - the noise is scalar), optional f3;
    forward kind: p (K+1 slices), g1 (K slices).
    All slices carry a leading tree-level axis.
    """

    kind: str                 # "backward" or "forward"
    grid: Grid
    tree: ScenarioTree
    beta: float
    w: list | None = None
    f1: list | None = None
    f2: list | None = None
    f3: list | None = None
    p: list | None = None
    g1: list | None = None
    boundary: str = "periodic"

    def scaled(self, c: float) -> "SyntheticDatum":
        sc = lambda traj: None if traj is None else [c * v for v in traj]
        return SyntheticDatum(kind=self.kind, grid=self.grid, tree=self.tree,
                              beta=self.beta, w=sc(self.w), f1=sc(self.f1),
                              f2=sc(self.f2), f3=self.f3, p=sc(self.p),
                              g1=sc(self.g1), boundary=self.boundary)


def random_smooth_field(grid: Grid, rng: np.random.Generator,
                        modes: int = 4, scale: float = 1.0) -> np.ndarray:
    """Random band-limited real field with fixed low-mode content.

    The Fourier coefficients are drawn once per seed and reused verbatim
    at any resolution, so refining the grid samples the *same* smooth
    function more finely.
    """
    spec = np.zeros(grid.shape[:-1] + (grid.N // 2 + 1,), dtype=complex)
    if grid.n == 1:
        spec[1:modes + 1] = rng.normal(size=modes) + 1j * rng.normal(size=modes)
    else:
        for kx in list(range(modes + 1)) + list(range(-modes, 0)):
            lo = rng.normal(size=modes + 1) + 1j * rng.normal(size=modes + 1)
            spec[kx, :modes + 1] = lo
    out = np.fft.irfftn(spec, s=grid.shape,
                        axes=tuple(range(grid.n))) * grid.N**grid.n
    # normalize by the coefficient norm, which is resolution-independent,
    # so refined grids sample the identical function (a sampled-peak
    # normalization would rescale fields as the mesh refines)
    norm = math.sqrt(float(np.sum(np.abs(spec) ** 2)))
    return out * (scale / norm) if norm > 0 else out


def smooth_spacetime(grid: Grid, rng: np.random.Generator, modes: int = 4,
                     scale: float = 1.0):
    """t -> field, smooth in time: A + t B + sin(t) C with random A, B, C."""
    A = random_smooth_field(grid, rng, modes, scale)
    B = random_smooth_field(grid, rng, modes, scale)
    C = random_smooth_field(grid, rng, modes, scale)
    return lambda t: A + t * B + math.sin(t) * C


def dirichlet_profile(grid: Grid, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """C-infinity profile in x_1, compactly supported in (lo, hi) in (0, 1).

    exp(4 - 1/(s(1-s))) with s = (x-lo)/(hi-lo), zero elsewhere; every
    derivative vanishes at the support endpoints, so products with any
    smooth field satisfy homogeneous Dirichlet conditions on x_1 in
    {0, 1} to rounding.  Requires L = 1.
    """
    if abs(grid.L - 1.0) > 1e-14:
        raise GridError("the Dirichlet profile requires L = 1")
    if not 0.0 <= lo < hi <= 1.0:
        raise CarlemanError(f"need 0 <= lo < hi <= 1, got ({lo}, {hi})")
    x = grid.axis()
    s = (x - lo) / (hi - lo)
    inside = (s > 0.0) & (s < 1.0)
    prof = np.zeros(grid.N)
    si = s[inside]
    prof[inside] = np.exp(4.0 - 1.0 / (si * (1.0 - si)))
    if grid.n == 2:
        return prof[:, None] * np.ones((1, grid.N))
    return prof


def make_synthetic(kind: str, seed: int, tree: ScenarioTree, grid: Grid,
                   beta: float, boundary: str = "periodic",
                   f3_amplitude: float = 0.0, modes: int = 4,
                   quad_scale: float = 0.25) -> SyntheticDatum:
    """Draw a random smooth datum whose equation residual is exactly zero.

    backward: w(t, W, x) = a + b W + c W^2 with band-limited a, b, c on a
    recombining tree; f2 is the martingale part of w and f1 the discrete
    drift residual.  forward: p is evolved node-by-node on a
    non-recombining tree from a random initial slice with a drawn g1.
    """
    if kind not in ("backward", "forward"):
        raise CarlemanError(f"unknown datum kind {kind!r}")
    rng = np.random.default_rng(seed)
    bhat = (1.0 + beta**2) / 2.0
    g, dt, s = grid, grid.dt, math.sqrt(grid.dt)
    prof = dirichlet_profile(g) if boundary == "dirichlet" else 1.0

    if kind == "backward":
        if not tree.recombining:
            raise CarlemanError("backward data use a recombining tree")
        a = smooth_spacetime(g, rng, modes)
        b = smooth_spacetime(g, rng, modes, scale=0.5)
        # the W^2 component couples to the tree's fourth moment, which
        # carries an O(dt) correction (E W^4 = 3t^2 - 2t dt); pass
        # quad_scale=0 when slice energies must be resolution-exact
        c = smooth_spacetime(g, rng, modes, scale=quad_scale)
        f3 = None
        if f3_amplitude != 0.0:
            f3c = smooth_spacetime(g, rng, modes, scale=f3_amplitude)
            f3 = [(prof * f3c(k * dt))[None, ...] for k in range(g.K)]
        w = []
        for k in range(g.K + 1):
            t = k * dt
            W = tree.brownian_values(k).reshape((k + 1,) + (1,) * g.n)
            w.append(prof * (a(t)[None] + b(t)[None] * W + c(t)[None] * W**2))
        f1, f2 = [], []
        for k in range(g.K):
            mean = tree.cond_mean(w[k + 1], k)
            f2k = tree.martingale_part(w[k + 1], k)
            lap = kernels.spectral_laplacian(np, w[k], g.h, g.n)
            res = (mean - w[k]) / dt + bhat * lap \
                + beta * kernels.spectral_d1(np, f2k, g.h, 0, g.n)
            if f3 is not None:
                res = res - f3[k] * f2k
            f1.append(res)
            f2.append(f2k)
        return SyntheticDatum(kind=kind, grid=g, tree=tree, beta=beta,
                              w=w, f1=f1, f2=f2, f3=f3, boundary=boundary)

    if tree.recombining:
        raise CarlemanError("forward data use a non-recombining tree "
                            "(the evolution is path dependent)")
    if boundary == "dirichlet":
        # the central stencils widen the support by one cell per step, so
        # anchor the profile on an inner interval that leaves room for the
        # noise-transport chain to reach, but never touch, the boundary
        margin = (g.K + 2) * g.h
        if margin >= 0.25:
            raise CarlemanError(
                f"grid too coarse for K={g.K} Dirichlet transport "
                f"(need ({g.K}+2) h < 0.25, h={g.h:g})")
        prof = dirichlet_profile(g, lo=0.25, hi=0.75)
    afun = smooth_spacetime(g, rng, modes)
    bfun = smooth_spacetime(g, rng, modes, scale=0.5)
    p0 = prof * random_smooth_field(g, rng, modes)
    p = [p0[None, ...]]
    g1 = []
    for k in range(g.K):
        t = k * dt
        W = tree.brownian_values(k).reshape((-1,) + (1,) * g.n)
        # choose the conditional mean of the next slice freely (profile
        # supported), then define g1 as the exact discrete drift residual
        mean_next = prof * (afun(t)[None] + bfun(t)[None] * W)
        lap = kernels.laplacian_stencil(np, p[k], g.h, g.n)
        d1 = kernels.d1_central(np, p[k], g.h, 0, g.n)
        g1.append((mean_next - p[k]) / dt - bhat * lap)
        up = mean_next - beta * s * d1      # dW = +sqrt(dt)
        down = mean_next + beta * s * d1
        p.append(tree.scatter_children(up, down, k))
    return SyntheticDatum(kind=kind, grid=g, tree=tree, beta=beta,
                          p=p, g1=g1, boundary=boundary)


def datum_residual(datum: SyntheticDatum) -> float:
    """Max-norm residual of the defining equation, relative to the field
    scale; exact (rounding level) by construction.

    The normalization matters for the bounded-domain transport chain,
    whose repeated derivatives of the compactly supported profile reach
    large magnitudes: 'exact' means exact at working precision relative
    to the numbers actually combined.
    """
    g, tree, beta = datum.grid, datum.tree, datum.beta
    bhat = (1.0 + beta**2) / 2.0
    dt, s = g.dt, math.sqrt(g.dt)
    traj = datum.w if datum.kind == "backward" else datum.p
    data = datum.f1 if datum.kind == "backward" else datum.g1
    scale = max(
        max(float(np.max(np.abs(v))) for v in traj),
        max(float(np.max(np.abs(v))) for v in data) * dt,
        1.0,
    )
    worst = 0.0
    if datum.kind == "backward":
        for k in range(g.K):
            mean = tree.cond_mean(datum.w[k + 1], k)
            f2k = tree.martingale_part(datum.w[k + 1], k)
            lap = kernels.spectral_laplacian(np, datum.w[k], g.h, g.n)
            drift = datum.f1[k] - beta * kernels.spectral_d1(np, f2k, g.h, 0, g.n)
            if datum.f3 is not None:
                drift = drift + datum.f3[k] * f2k
            res = (mean - datum.w[k]) / dt + bhat * lap - drift
            worst = max(worst, float(np.max(np.abs(res))))
            worst = max(worst, float(np.max(np.abs(f2k - datum.f2[k]))))
    else:
        for k in range(g.K):
            lap = kernels.laplacian_stencil(np, datum.p[k], g.h, g.n)
            d1 = kernels.d1_central(np, datum.p[k], g.h, 0, g.n)
            drift = datum.p[k] + dt * (bhat * lap + datum.g1[k])
            up_pred = drift - beta * s * d1
            down_pred = drift + beta * s * d1
            child = datum.p[k + 1]
            worst = max(
                worst,
                float(np.max(np.abs(child[1::2] - up_pred))),
                float(np.max(np.abs(child[0::2] - down_pred))),
            )
    return worst / scale


# -- report --------------------------------------------------------------------

@dataclass(frozen=True)
class InequalityReport:
    theorem_id: str
    lhs_terms: dict
    rhs_terms: dict
    lhs_logs: dict = field(repr=False, default_factory=dict)
    rhs_logs: dict = field(repr=False, default_factory=dict)
    lhs_total: float = 0.0
    rhs_total: float = 0.0
    margin: float = 0.0
    normalization_log: float = 0.0  # log factor removed from BOTH sides

    def satisfied(self, slack: float = 0.05) -> bool:
        return self.margin >= -slack * self.rhs_total

    @property
    def relative_margin(self) -> float:
        return self.margin / self.rhs_total if self.rhs_total > 0 else 0.0

    def finite_terms(self) -> bool:
        """True when every term survived normalization with a finite,
        strictly positive value (no overflow, no underflow)."""
        vals = list(self.lhs_terms.values()) + list(self.rhs_terms.values())
        return all(np.isfinite(v) and v > 0.0 for v in vals)


def _integrate_slice(sq, grid: Grid, domain: str) -> np.ndarray:
    """Per-level integral of a squared field, leading axis = tree levels."""
    if domain == "box":
        return np.sum(sq, axis=tuple(range(1, sq.ndim))) * grid.h**grid.n
    return np.array([half_axis0_integral(sq[lev], grid)
                     for lev in range(sq.shape[0])])


def _expected_integral(sq, probs, grid: Grid, domain: str) -> float:
    sq = sq * np.ones((len(probs),) + grid.shape)
    return float(probs @ _integrate_slice(sq, grid, domain))


def _accumulate(contribs: list[float]) -> float:
    finite = [c for c in contribs if c > NEG_INF]
    return float(logsumexp(finite)) if finite else NEG_INF


_GL16_T, _GL16_W = np.polynomial.legendre.leggauss(16)


def _interval_mass_log(weight: CarlemanWeight, t0: float, t1: float,
                       coeff_log, power: float,
                       energies: tuple[float, float] | None = None) -> float:
    """log of int_{t0}^{t1} coeff(t) theta~(t)^power E(t) dt (normalized
    weight), by 16-point Gauss-Legendre accumulated in log space.

    When ``energies`` is given it holds the endpoint values (E0, E1) of a
    slice energy that is interpolated linearly across the interval;
    otherwise E is dropped (taken as one).
    """
    vals = []
    for xi, wgt in zip(_GL16_T, _GL16_W):
        s = 0.5 * (1.0 + xi)
        t = t0 + s * (t1 - t0)
        c = coeff_log(t)
        if c == NEG_INF:
            return NEG_INF
        lw = weight.normalized_log_weight(min(t, weight.T), power)
        if lw == NEG_INF:
            continue
        if energies is not None:
            e = (1.0 - s) * energies[0] + s * energies[1]
            if e <= 0.0:
                continue
            lw += math.log(e)
        vals.append(c + lw + math.log(wgt * 0.5 * (t1 - t0)))
    return _accumulate(vals)


def _interior_term(weight: CarlemanWeight, tree: ScenarioTree, grid: Grid,
                   domain: str, fields, coeff_log, power: float = 2.0,
                   staggered: bool = False, mode: str = "max") -> float:
    """log of sum_k M_k E||.||^2, M_k the exact per-interval weighted mass.

    ``fields`` maps a slice index to the squared integrand; ``coeff_log``
    maps t to the log of the positive coefficient (may be -inf when it
    vanishes identically).  The weight factor is integrated exactly per
    interval, so the sharp terminal layer of the weight never depends on
    the time resolution.  Trajectory fields are combined with the weight
    either as the larger of the two interval-endpoint energies
    (``mode="max"``, an upper bound that refinement can only lower) or
    linearly interpolated inside the quadrature (``mode="interp"``, a
    neutral second-order estimate for sharp-constant inequalities);
    staggered step-valued fields sit at their native slice.
    """
    dt = grid.dt
    out = []
    for k in range(grid.K):
        if staggered:
            M = _interval_mass_log(weight, k * dt, (k + 1) * dt, coeff_log,
                                   power)
            if M == NEG_INF:
                if coeff_log(k * dt) == NEG_INF:
                    return NEG_INF
                continue
            I = _expected_integral(fields(k), tree.probabilities(k), grid,
                                   domain)
            if I <= 0.0:
                continue
            out.append(M + math.log(I))
            continue
        E0 = _expected_integral(fields(k), tree.probabilities(k), grid,
                                domain)
        E1 = _expected_integral(fields(k + 1), tree.probabilities(k + 1),
                                grid, domain)
        if mode == "interp":
            M = _interval_mass_log(weight, k * dt, (k + 1) * dt, coeff_log,
                                   power, energies=(E0, E1))
            if M == NEG_INF:
                if coeff_log(k * dt) == NEG_INF:
                    return NEG_INF
                continue
            out.append(M)
            continue
        M = _interval_mass_log(weight, k * dt, (k + 1) * dt, coeff_log, power)
        if M == NEG_INF:
            if coeff_log(k * dt) == NEG_INF:
                return NEG_INF
            continue
        I = max(E0, E1)
        if I <= 0.0:
            continue
        out.append(M + math.log(I))
    return _accumulate(out)


def _slice_term(weight: CarlemanWeight, tree: ScenarioTree, grid: Grid,
                domain: str, sq, depth: int, t: float, coeff_log: float) -> float:
    if coeff_log == NEG_INF:
        return NEG_INF
    I = _expected_integral(sq, tree.probabilities(depth), grid, domain)
    if I <= 0.0:
        return NEG_INF
    lw = weight.normalized_log_weight(t, 2.0)
    return coeff_log + lw + math.log(I) if lw > NEG_INF else NEG_INF


def _assemble(theorem_id: str, weight: CarlemanWeight,
              lhs_logs: dict, rhs_logs: dict) -> InequalityReport:
    all_logs = [v for v in list(lhs_logs.values()) + list(rhs_logs.values())
                if v > NEG_INF]
    shift = 0.0
    if all_logs:
        peak = max(all_logs)
        if abs(peak) > _SHIFT_THRESHOLD:
            shift = peak
    to_val = lambda d: {k: (math.exp(v - shift) if v > NEG_INF else 0.0)
                        for k, v in d.items()}
    lhs_terms, rhs_terms = to_val(lhs_logs), to_val(rhs_logs)
    lhs_total = sum(lhs_terms.values())
    rhs_total = sum(rhs_terms.values())
    b = weight.mu * math.log(weight.T + 2.0)
    ref = math.log(2.0) + weight.log_lambda + b
    norm = (math.exp(ref) if ref < _SHIFT_THRESHOLD else float("inf")) + shift
    return InequalityReport(theorem_id=theorem_id, lhs_terms=lhs_terms,
                            rhs_terms=rhs_terms, lhs_logs=lhs_logs,
                            rhs_logs=rhs_logs, lhs_total=lhs_total,
                            rhs_total=rhs_total,
                            margin=rhs_total - lhs_total,
                            normalization_log=norm)


def _check_boundary(traj, grid: Grid) -> None:
    """Homogeneous Dirichlet trace on x_1 in {0, 1} (indices N/2 and 0)."""
    worst = 0.0
    for v in traj:
        v = np.asarray(v) * np.ones((v.shape[0],) + grid.shape)
        worst = max(worst, float(np.max(np.abs(v[:, grid.N // 2]))),
                    float(np.max(np.abs(v[:, 0]))))
    if worst > 1e-12:
        raise CarlemanError(f"boundary trace {worst:.3e} exceeds 1e-12")


# -- the four inequality evaluators -------------------------------------------

def check_th1(datum: SyntheticDatum, weight: CarlemanWeight,
              domain: str = "box", f2_coeff: float = 1.0,
              f1_coeff: float = 2.0, theorem_id: str = "th1") -> InequalityReport:
    """Backward estimate: weighted interior energies of w and the noise
    intensity f2 against the free drift f1 and the terminal slice."""
    if datum.kind != "backward":
        raise CarlemanError("backward-kind datum required")
    g, tree, beta = datum.grid, datum.tree, datum.beta
    bhat = (1.0 + beta**2) / 2.0
    l, m = weight.log_lambda, weight.mu
    lnm = math.log(m)

    def sq_lap(k):
        return kernels.spectral_laplacian(np, datum.w[k], g.h, g.n) ** 2

    def sq_grad(tr):
        def f(k):
            v = tr[k]
            return sum(kernels.spectral_d1(np, v, g.h, a, g.n) ** 2
                       for a in range(g.n))
        return f

    lhs = {
        "lap_w": _interior_term(weight, tree, g, domain, sq_lap,
                                lambda t: math.log(0.5 * bhat**2)),
        "w": _interior_term(weight, tree, g, domain,
                            lambda k: datum.w[k] ** 2,
                            lambda t: math.log(0.5) + 2 * (l + lnm)
                            + (2 * m - 2) * math.log(t + 2.0)),
        "grad_w": _interior_term(weight, tree, g, domain, sq_grad(datum.w),
                                 lambda t: l + lnm + (m - 1) * math.log(t + 2.0)),
        "f2": _interior_term(weight, tree, g, domain,
                             lambda k: datum.f2[k] ** 2,
                             lambda t: math.log(f2_coeff) + l + lnm
                             + (m - 1) * math.log(t + 2.0),
                             power=1.0, staggered=True),
        "div_f2": _interior_term(
            weight, tree, g, domain,
            lambda k: kernels.spectral_d1(np, datum.f2[k], g.h, 0, g.n) ** 2,
            (lambda t: NEG_INF) if beta == 1.0
            else (lambda t, c=math.log((1 - beta**2) / 2): c),
            staggered=True),
    }
    wT = datum.w[g.K]
    gT = sum(kernels.spectral_d1(np, wT, g.h, a, g.n) ** 2 for a in range(g.n))
    rhs = {
        "f1": _interior_term(weight, tree, g, domain,
                             lambda k: datum.f1[k] ** 2,
                             lambda t: math.log(f1_coeff), staggered=True),
        "w_T": _slice_term(weight, tree, g, domain, wT**2, g.K, g.T,
                           l + lnm + (m - 1) * math.log(g.T + 2.0)),
        "grad_w_T": _slice_term(weight, tree, g, domain, gT, g.K, g.T,
                                math.log(bhat)),
    }
    return _assemble(theorem_id, weight, lhs, rhs)


def check_th2(datum: SyntheticDatum, weight: CarlemanWeight,
              domain: str = "box", theorem_id: str = "th2") -> InequalityReport:
    """Forward estimate; requires mu >= 144 (T+2)^2."""
    if datum.kind != "forward":
        raise CarlemanError("forward-kind datum required")
    g, tree, beta = datum.grid, datum.tree, datum.beta
    if weight.mu < mu_min(g.T) * (1 - 1e-12):
        raise CarlemanError(
            f"mu = {weight.mu} below the admissible bound "
            f"mu_min(T) = {mu_min(g.T)}"
        )
    bhat = (1.0 + beta**2) / 2.0
    l, m = weight.log_lambda, weight.mu
    lnm = math.log(m)

    def sq_grad(k):
        return sum(kernels.spectral_d1(np, datum.p[k], g.h, a, g.n) ** 2
                   for a in range(g.n))

    lhs = {
        "p": _interior_term(weight, tree, g, domain,
                            lambda k: datum.p[k] ** 2,
                            lambda t: math.log(0.25) + l + 2 * lnm
                            + (m - 2) * math.log(t + 2.0), mode="interp"),
        "grad_p": _interior_term(weight, tree, g, domain, sq_grad,
                                 lambda t: 0.5 * lnm, mode="interp"),
    }
    pT, p0 = datum.p[g.K], datum.p[0]
    g0 = sum(kernels.spectral_d1(np, p0, g.h, a, g.n) ** 2 for a in range(g.n))
    rhs = {
        "g1": _interior_term(weight, tree, g, domain,
                             lambda k: datum.g1[k] ** 2,
                             lambda t: math.log(2.0), staggered=True),
        "p_T": _slice_term(weight, tree, g, domain, pT**2, g.K, g.T,
                           math.log(2.0) + l + lnm
                           + (m - 1) * math.log(g.T + 2.0)),
        "grad_p_0": _slice_term(weight, tree, g, domain, g0, 0, 0.0,
                                math.log(bhat)),
        "p_0": _slice_term(weight, tree, g, domain, p0**2, 0, 0.0, 0.5 * lnm),
    }
    return _assemble(theorem_id, weight, lhs, rhs)


def check_th3(datum: SyntheticDatum, weight: CarlemanWeight) -> InequalityReport:
    """Bounded-domain backward estimate on (0,1) x transverse box; the
    noise-intensity term carries the extra 1/2 and the free drift the
    constant 4.  Fields must vanish on x_1 in {0, 1}."""
    _check_boundary(datum.w, datum.grid)
    return check_th1(datum, weight, domain="half", f2_coeff=0.5,
                     f1_coeff=4.0, theorem_id="th3")


def check_th4(datum: SyntheticDatum, weight: CarlemanWeight) -> InequalityReport:
    """Bounded-domain forward estimate (the t = 0 terms are integrated
    over the bounded domain as well)."""
    _check_boundary(datum.p, datum.grid)
    return check_th2(datum, weight, domain="half", theorem_id="th4")


# -- parameter searches --------------------------------------------------------

@dataclass(frozen=True)
class ScanRow:
    log10_lambda: float
    margin: float
    rhs_total: float
    finite: bool


def scan_lambda(datum: SyntheticDatum, mu: float,
                checker=check_th2, log10_min: float = -660.0,
                log10_max: float = 0.0, num: int = 34):
    """Scan lambda in log steps; prefer weights whose every normalized
    term stays finite and nonzero, then maximize the relative margin."""
    T = datum.grid.T
    best = None
    rows = []
    for e in np.linspace(log10_min, log10_max, num):
        w = CarlemanWeight(log_lambda=e * math.log(10.0), mu=mu, T=T)
        rep = checker(datum, w)
        rows.append(ScanRow(log10_lambda=float(e), margin=rep.margin,
                            rhs_total=rep.rhs_total,
                            finite=rep.finite_terms()))
        key = (rep.finite_terms(), rep.relative_margin)
        if best is None or key > best[0]:
            best = (key, w, rep)
    return best[1], best[2], rows


@dataclass(frozen=True)
class ConstantCertificate:
    """Smallest tested (lambda0, mu0) for which a whole batch passes."""
    lambda0: float
    mu0: float
    n_pass: int
    n_total: int
    margins: tuple
    history: tuple  # (log_lambda, mu, n_pass) per attempt
    log_lambda0: float = float("nan")


def certify_constants(data: list[SyntheticDatum], checker=check_th3,
                      lambda_start: float = 1.0, mu_start: float = 2.0,
                      max_doublings: int = 8, slack: float = 0.0,
                      log_lambda_start: float | None = None,
                      require_finite: bool = True):
    """Doubling search for empirical weight constants making every datum
    of the batch satisfy its inequality (the theory asserts existence of
    such constants without formulas).

    lambda doubles in log space, so ``log_lambda_start`` admits starting
    values far below the smallest positive double (needed at large mu).
    A datum only counts as passing when its report is nondegenerate:
    every term finite and positive, so an all-underflow report can never
    certify.  The reported ``lambda0`` is ``exp(log_lambda0)`` and may
    round to zero; ``log_lambda0`` is exact.
    """
    history = []
    mu = mu_start
    base_log = math.log(lambda_start) if log_lambda_start is None \
        else log_lambda_start
    for _ in range(max_doublings):
        log_lam = base_log
        for _ in range(max_doublings):
            margins = []
            n_pass = 0
            for d in data:
                rep = checker(d, CarlemanWeight(log_lambda=log_lam, mu=mu,
                                                T=d.grid.T))
                margins.append(rep.relative_margin)
                ok = rep.satisfied(slack)
                if require_finite:
                    ok = ok and rep.finite_terms()
                n_pass += ok
            history.append((log_lam, mu, n_pass))
            if n_pass == len(data):
                lam0 = math.exp(log_lam) if log_lam < _SHIFT_THRESHOLD else float("inf")
                return ConstantCertificate(lambda0=lam0, mu0=mu,
                                           n_pass=n_pass,
                                           n_total=len(data),
                                           margins=tuple(margins),
                                           history=tuple(history),
                                           log_lambda0=log_lam)
            log_lam += math.log(2.0)
        mu *= 2.0
    return ConstantCertificate(lambda0=float("nan"), mu0=float("nan"),
                               n_pass=0, n_total=len(data), margins=(),
                               history=tuple(history),
                               log_lambda0=float("nan"))


def report_row(report: InequalityReport, weight: CarlemanWeight, beta: float,
               grid: Grid) -> dict:
    """Flatten a report into one CSV-friendly row."""
    row = {
        "theorem": report.theorem_id,
        "log_lambda": weight.log_lambda,
        "mu": weight.mu,
        "beta": beta,
        "N": grid.N,
        "K": grid.K,
    }
    for k, v in report.lhs_terms.items():
        row[f"lhs_{k}"] = v
    for k, v in report.rhs_terms.items():
        row[f"rhs_{k}"] = v
    row["lhs_total"] = report.lhs_total
    row["rhs_total"] = report.rhs_total
    row["margin"] = report.margin
    row["normalized"] = True
    return row
