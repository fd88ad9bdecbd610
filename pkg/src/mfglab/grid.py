"""Uniform periodic space-time grids, discrete operators, and norms.

The continuous problem lives on (0, T) x R^n; at desk scale we truncate to
the periodic box [-L, L)^n with data supported well inside the box, so the
boundary terms that vanish on R^n vanish here by periodicity.

Two derivative backends are provided:

* ``"stencil"``: second-order central differences (default, fast);
* ``"spectral"``: discrete-Fourier derivatives, exact for band-limited
  fields, used where discrete identities must hold to rounding (e.g. the
  mixed-second-derivative / Laplacian-square identity in 2-D).

Time quadrature is the left-endpoint rule, matching the non-anticipating
convention of the stochastic integrals.  Expectations over the scenario
tree are exact probability-weighted sums, so every norm is deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels


class GridError(ValueError):
    """Invalid grid parameters or mismatched field shapes."""


@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice on [-L, L)^n plus a uniform time axis.

    Attributes:
        n: spatial dimension, 1 or 2.
        L: half-width of the periodic box.
        N: points per axis (even, >= 8).
        T: time horizon.
        K: number of time steps.
    """

    n: int
    L: float
    N: int
    T: float
    K: int

    def __post_init__(self):
        if self.n not in (1, 2):
            raise GridError(f"spatial dimension must be 1 or 2, got {self.n}")
        if self.N < 8 or self.N % 2 != 0:
            raise GridError(f"N must be even and >= 8, got {self.N}")
        if self.L <= 0 or self.T <= 0 or self.K < 1:
            raise GridError("L, T must be positive and K >= 1")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def size(self) -> int:
        return self.N**self.n

    def axis(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.N)

    def coords(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays broadcastable to ``shape`` (one per axis)."""
        ax = self.axis()
        if self.n == 1:
            return (ax,)
        return (ax[:, None] * np.ones((1, self.N)), ax[None, :] * np.ones((self.N, 1)))

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.K + 1)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)


@dataclass
class Field:
    """One real time slice on a grid (one scenario-tree node)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise GridError(
                f"field shape {self.values.shape} != grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise GridError("field contains non-finite values")

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "Field":
        return cls(grid, np.asarray(fn(*grid.coords()), dtype=float) * np.ones(grid.shape))


@dataclass(frozen=True)
class NormReport:
    """Named norms of a (possibly stochastic) space-time trajectory.

    ``l2_space``/``h1_space`` refer to the terminal slice; the time norms
    integrate over [0, T) with the left-endpoint rule and weight tree
    nodes by their probabilities.
    """

    l2_space: float
    h1_space: float
    l2_time_h1: float
    l2_time_l2: float
    linf: float


# -- pointwise operators on Field --------------------------------------------

def gradient(f: Field, backend: str = "stencil") -> tuple[Field, ...]:
    g = f.grid
    if backend == "stencil":
        parts = kernels.gradient_central(np, f.values, g.h, g.n)
    elif backend == "spectral":
        parts = tuple(
            kernels.spectral_d1(np, f.values, g.h, a, g.n) for a in range(g.n)
        )
    else:
        raise GridError(f"unknown backend {backend!r}")
    return tuple(Field(g, p) for p in parts)


def divergence(fs: tuple[Field, ...], backend: str = "stencil") -> Field:
    g = fs[0].grid
    out = np.zeros(g.shape)
    for a, f in enumerate(fs):
        if backend == "stencil":
            out = out + kernels.d1_central(np, f.values, g.h, a, g.n)
        else:
            out = out + kernels.spectral_d1(np, f.values, g.h, a, g.n)
    return Field(g, out)


def laplacian(f: Field, backend: str = "stencil") -> Field:
    g = f.grid
    if backend == "stencil":
        return Field(g, kernels.laplacian_stencil(np, f.values, g.h, g.n))
    return Field(g, kernels.spectral_laplacian(np, f.values, g.h, g.n))


def integrate(f: Field) -> float:
    """h^n * sum: the exact trapezoid rule on a periodic lattice."""
    return float(np.sum(f.values)) * f.grid.h**f.grid.n


def integrate_values(values: np.ndarray, grid: Grid) -> float:
    return float(np.sum(values)) * grid.h**grid.n


def half_axis0_integral(values: np.ndarray, grid: Grid) -> float:
    """Trapezoid integral over x_1 in [0, 1], full box in the other axes.

    Used for the bounded-domain estimates on (0, 1) x (transverse box).
    Requires L = 1 on axis 0 so that x_1 = 0 is the lattice midpoint and
    x_1 = 1 wraps to the first lattice point.
    """
    if abs(grid.L - 1.0) > 1e-14:
        raise GridError("half-box integration requires L = 1")
    N = grid.N
    i0, i1 = N // 2, 0  # x1 = 0 and x1 = 1 (periodic wrap of -1)
    interior = values[np.r_[N // 2 + 1: N]]
    s = 0.5 * values[i0] + 0.5 * values[i1] + np.sum(interior, axis=0)
    s = float(np.sum(s)) * grid.h ** (grid.n - 1) if grid.n > 1 else float(np.sum(s))
    return s * grid.h


def l2_norm(values: np.ndarray, grid: Grid) -> float:
    return float(np.sqrt(np.sum(values**2) * grid.h**grid.n))


def h1_norm(values: np.ndarray, grid: Grid, backend: str = "stencil") -> float:
    sq = np.sum(values**2)
    for a in range(grid.n):
        if backend == "stencil":
            d = kernels.d1_central(np, values, grid.h, a, grid.n)
        else:
            d = kernels.spectral_d1(np, values, grid.h, a, grid.n)
        sq += np.sum(d**2)
    return float(np.sqrt(sq * grid.h**grid.n))


def mixed_second_identity_check(p: Field) -> tuple[float, float]:
    """Spectral check that sum_jk int p_{x_j x_k}^2 dx equals int (Lap p)^2 dx.

    The identity is the integration-by-parts rearrangement used to trade
    mixed second derivatives for the Laplacian; with discrete-Fourier
    derivatives it holds exactly on the periodic lattice.
    """
    g = p.grid
    if g.n != 2:
        raise GridError("identity check requires n = 2 (trivial for n = 1)")
    lhs = 0.0
    for j in range(2):
        for k in range(2):
            d = kernels.spectral_mixed(np, p.values, g.h, j, k, 2)
            lhs += np.sum(d**2)
    lap = kernels.spectral_laplacian(np, p.values, g.h, 2)
    rhs = np.sum(lap**2)
    scale = g.h**2
    return float(lhs * scale), float(rhs * scale)


# -- trajectory norms ---------------------------------------------------------

def sobolev_norms(trajectory, tree, grid: Grid, backend: str = "stencil") -> NormReport:
    """Norms of a tree-indexed trajectory.

    ``trajectory`` is a list over depths 0..K of arrays with a leading
    tree-level axis, shape (levels(k), *grid.shape).
    """
    if len(trajectory) != tree.K + 1:
        raise GridError(
            f"trajectory has {len(trajectory)} depths, tree wants {tree.K + 1}"
        )
    dt = grid.dt
    vol = grid.h**grid.n
    sq_l2_time = 0.0
    sq_h1_time = 0.0
    linf = 0.0
    for k in range(tree.K + 1):
        vals = np.asarray(trajectory[k])
        if vals.shape != (tree.levels(k),) + grid.shape:
            raise GridError(f"slice {k}: shape {vals.shape} mismatched with tree/grid")
        probs = tree.probabilities(k)
        sq_l2 = np.sum(vals**2, axis=tuple(range(1, vals.ndim))) * vol
        sq_h1 = sq_l2.copy()
        for a in range(grid.n):
            if backend == "stencil":
                d = kernels.d1_central(np, vals, grid.h, a, grid.n)
            else:
                d = kernels.spectral_d1(np, vals, grid.h, a, grid.n)
            sq_h1 += np.sum(d**2, axis=tuple(range(1, vals.ndim))) * vol
        linf = max(linf, float(np.max(np.abs(vals))) if vals.size else 0.0)
        if k < tree.K:  # left-endpoint time rule
            sq_l2_time += dt * float(probs @ sq_l2)
            sq_h1_time += dt * float(probs @ sq_h1)
        else:
            term_l2 = float(np.sqrt(probs @ sq_l2))
            term_h1 = float(np.sqrt(probs @ sq_h1))
    return NormReport(
        l2_space=term_l2,
        h1_space=term_h1,
        l2_time_h1=float(np.sqrt(sq_h1_time)),
        l2_time_l2=float(np.sqrt(sq_l2_time)),
        linf=linf,
    )


def expected_norm(slice_values: np.ndarray, probs: np.ndarray, grid: Grid,
                  kind: str = "l2", backend: str = "stencil") -> float:
    """Probability-weighted mean of per-node spatial norms, E ||f||."""
    out = 0.0
    for lev in range(slice_values.shape[0]):
        v = slice_values[lev]
        nrm = l2_norm(v, grid) if kind == "l2" else h1_norm(v, grid, backend)
        out += float(probs[lev]) * nrm
    return out


# -- field snapshot format ----------------------------------------------------

def write_fld(path, field: Field, time: float = 0.0, node_id: int = 0) -> None:
    """Write the `.fld` snapshot: one JSON header line + raw LE float64."""
    g = field.grid
    header = {"n": g.n, "L": g.L, "N": g.N, "time": time, "node_id": node_id}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(field.values.astype("<f8").tobytes(order="C"))


def read_fld(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    count = header["N"] ** header["n"]
    values = np.frombuffer(raw, dtype="<f8", count=count)
    return header, values.reshape((header["N"],) * header["n"])
