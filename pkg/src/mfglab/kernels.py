"""Array kernels shared by the numpy and jax execution paths.

Every function takes the array module ``xp`` (``numpy`` or ``jax.numpy``)
as its first argument and is written without in-place mutation, so the
same code runs eagerly on numpy and traces cleanly under jax for the
adjoint-gradient path of the source reconstruction.

Fields may carry leading batch axes (e.g. a tree-level axis); the spatial
axes are always the last ``n`` axes and all operators act on those only.
Spatial discretization is a uniform periodic lattice with spacing ``h``.
"""

from __future__ import annotations

import numpy as np


def _ax(f, n: int, axis: int) -> int:
    """Absolute index of spatial axis ``axis`` (0-based among the last n)."""
    return f.ndim - n + axis


def d1_central(xp, f, h: float, axis: int, n: int):
    """Second-order central first derivative along one spatial axis."""
    a = _ax(f, n, axis)
    return (xp.roll(f, -1, axis=a) - xp.roll(f, 1, axis=a)) / (2.0 * h)


def d2_central(xp, f, h: float, axis: int, n: int):
    """Second-order central second derivative along one spatial axis."""
    a = _ax(f, n, axis)
    return (xp.roll(f, -1, axis=a) - 2.0 * f + xp.roll(f, 1, axis=a)) / (h * h)


def gradient_central(xp, f, h: float, n: int):
    return tuple(d1_central(xp, f, h, axis, n) for axis in range(n))


def laplacian_stencil(xp, f, h: float, n: int):
    out = d2_central(xp, f, h, 0, n)
    for axis in range(1, n):
        out = out + d2_central(xp, f, h, axis, n)
    return out


# -- spectral derivatives (discrete Fourier, exact for band-limited fields) --

def _wavenumbers(N: int, h: float) -> np.ndarray:
    return 2.0 * np.pi * np.fft.fftfreq(N, d=h)


def spectral_d1(xp, f, h: float, axis: int, n: int):
    """Spectral first derivative; the Nyquist mode is zeroed (odd stencil)."""
    a = _ax(f, n, axis)
    N = f.shape[a]
    k = _wavenumbers(N, h)
    k[N // 2] = 0.0
    shape = [1] * f.ndim
    shape[a] = N
    F = xp.fft.fft(f, axis=a) * (1j * k.reshape(shape))
    return xp.real(xp.fft.ifft(F, axis=a))


def spectral_d2(xp, f, h: float, axis: int, n: int, order: int = 2):
    """Spectral even-order derivative along one spatial axis."""
    a = _ax(f, n, axis)
    N = f.shape[a]
    k = _wavenumbers(N, h)
    shape = [1] * f.ndim
    shape[a] = N
    mult = (1j * k.reshape(shape)) ** order
    F = xp.fft.fft(f, axis=a) * mult
    return xp.real(xp.fft.ifft(F, axis=a))


def spectral_mixed(xp, f, h: float, axis_a: int, axis_b: int, n: int):
    """Spectral mixed second derivative f_{x_a x_b}."""
    if axis_a == axis_b:
        return spectral_d2(xp, f, h, axis_a, n)
    # Nyquist zeroing on both axes keeps the product Hermitian-consistent.
    g = spectral_d1(xp, f, h, axis_a, n)
    return spectral_d1(xp, g, h, axis_b, n)


def spectral_laplacian(xp, f, h: float, n: int):
    out = spectral_d2(xp, f, h, 0, n)
    for axis in range(1, n):
        out = out + spectral_d2(xp, f, h, axis, n)
    return out


# -- implicit diffusion solve ------------------------------------------------

_SYMBOL_CACHE: dict = {}


def stencil_symbol(shape: tuple[int, ...], h: float) -> np.ndarray:
    """Eigenvalues of the 2n+1-point periodic Laplacian on the rfftn grid.

    All eigenvalues are <= 0, so ``1 - coef * sym >= 1`` for coef >= 0 and
    the implicit heat step is unconditionally solvable.
    """
    key = (shape, h)
    if key in _SYMBOL_CACHE:
        return _SYMBOL_CACHE[key]
    n = len(shape)
    parts = []
    for axis, N in enumerate(shape):
        j = np.arange(N if axis < n - 1 else N // 2 + 1)
        lam = (2.0 * np.cos(2.0 * np.pi * j / N) - 2.0) / (h * h)
        sh = [1] * n
        sh[axis] = lam.size
        parts.append(lam.reshape(sh))
    sym = parts[0]
    for p in parts[1:]:
        sym = sym + p
    _SYMBOL_CACHE[key] = sym
    return sym


def heat_solve(xp, rhs, coef: float, h: float, n: int):
    """Solve (I - coef * Lap) u = rhs with the stencil Laplacian.

    Exactly mass-conserving: the zero mode has eigenvalue 0.
    """
    shape = rhs.shape[rhs.ndim - n:]
    sym = stencil_symbol(shape, h)
    axes = tuple(range(rhs.ndim - n, rhs.ndim))
    F = xp.fft.rfftn(rhs, axes=axes)
    F = F / (1.0 - coef * sym)
    return xp.fft.irfftn(F, s=shape, axes=axes)


# -- conservative transport --------------------------------------------------

def flux_divergence(xp, rho, b, h: float, n: int, scheme: str = "upwind"):
    """Discrete div(rho * b) in conservative flux form.

    ``b`` is a tuple of per-axis velocity arrays broadcastable to rho.
    The flux difference telescopes over the periodic lattice, so the sum
    of the returned array is zero to rounding: the drift step conserves
    mass exactly.
    """
    div = xp.zeros_like(rho)
    for axis in range(n):
        a = _ax(rho, n, axis)
        bf = 0.5 * (b[axis] + xp.roll(b[axis], -1, axis=a))
        if scheme == "upwind":
            face = xp.where(bf > 0, rho, xp.roll(rho, -1, axis=a)) * bf
        elif scheme == "central":
            face = bf * 0.5 * (rho + xp.roll(rho, -1, axis=a))
        else:
            raise ValueError(f"unknown transport scheme {scheme!r}")
        div = div + (face - xp.roll(face, 1, axis=a)) / h
    return div
