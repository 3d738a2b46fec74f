"""Wigner and Husimi transforms, Weyl quantization and symbol pairings.

Conventions
-----------
``W(x, xi) = (2 pi)^-d  int exp(i xi.v) psi(x - eps v/2) conj(psi(x + eps v/2)) dv``

``op(a) f(x) = (2 pi)^-d  int int a((x+x')/2, eps xi) exp(i xi.(x-x')) f(x') dx' dxi``

so that ``<a, W(f)> = (op(a) f, f)``. The momentum grid of a Wigner field
is ``eps`` times the FFT wavenumber grid of the wavefunction, sorted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SupportClipped, UnderResolved
from .quantum import WavefunctionGrid
from .symbols import SymbolSpec

MAX_DENSE = 2 ** 25
CLIP_TOL = 1e-6


@dataclass
class PhaseSpaceField:
    """Real field sampled on ``x_axes x xi_axes`` (values shape ``nx... + nxi...``)."""

    x_axes: list
    xi_axes: list
    values: np.ndarray
    eps: float
    kind: str = "wigner"

    @property
    def dim(self):
        return len(self.x_axes)

    @property
    def dx(self):
        return np.array([ax[1] - ax[0] for ax in self.x_axes])

    @property
    def dxi(self):
        return np.array([ax[1] - ax[0] for ax in self.xi_axes])

    @property
    def cell(self):
        return float(np.prod(self.dx) * np.prod(self.dxi))

    def mass(self):
        return float(self.values.sum() * self.cell)

    def x_marginal(self):
        d = self.dim
        return self.values.sum(axis=tuple(range(d, 2 * d))) * np.prod(self.dxi)

    def xi_marginal(self):
        d = self.dim
        return self.values.sum(axis=tuple(range(d))) * np.prod(self.dx)

    def x_window(self):
        return [(ax[0], ax[-1] + (ax[1] - ax[0])) for ax in self.x_axes]

    def xi_window(self):
        return [(ax[0], ax[-1] + (ax[1] - ax[0])) for ax in self.xi_axes]

    def mesh(self):
        """Phase-space points, shape ``values.shape + (2d,)``."""
        grids = np.meshgrid(*self.x_axes, *self.xi_axes, indexing="ij")
        return np.stack(grids, axis=-1)


def refine(values):
    """Trigonometric interpolation onto the grid with twice the points per axis.

    The Nyquist coefficient is split evenly between ``+n/2`` and ``-n/2`` so
    real data stays real.
    """
    f = np.fft.fftn(values)
    for axis, n in enumerate(values.shape):
        f = np.moveaxis(f, axis, 0)
        h = n // 2
        out = np.zeros((2 * n,) + f.shape[1:], dtype=complex)
        out[:h] = f[:h]
        out[-h + 1:] = f[h + 1:] if h > 1 else out[-h + 1:]
        out[h] = 0.5 * f[h]
        out[-h] = 0.5 * f[h]
        f = np.moveaxis(out, 0, axis)
    return np.fft.ifftn(f) * (2 ** values.ndim)


def _offsets(n):
    """Correlation offsets ``m`` (in half grid steps) in FFT order: 0..n/2-1, -n/2..-1."""
    return np.fft.fftfreq(n, d=1.0 / n).astype(int)


def _wigner_block(psi2, shape, eps, dx, rows):
    """Wigner values for first-axis indices ``rows`` (FFT-ordered momenta)."""
    d = len(shape)
    idx_minus, idx_plus = [], []
    for axis, n in enumerate(shape):
        j = np.arange(n) if axis else np.asarray(rows)
        m = _offsets(n)
        idx_minus.append((2 * j[:, None] - m[None, :]) % (2 * n))
        idx_plus.append((2 * j[:, None] + m[None, :]) % (2 * n))
    # broadcast to (j_1..j_d, m_1..m_d)
    def expand(arrs):
        out = []
        for axis, a in enumerate(arrs):
            shp = [1] * (2 * d)
            shp[axis] = a.shape[0]
            shp[d + axis] = a.shape[1]
            out.append(a.reshape(shp))
        return tuple(out)

    corr = psi2[expand(idx_minus)] * np.conj(psi2[expand(idx_plus)])
    m_axes = tuple(range(d, 2 * d))
    n_tot = int(np.prod(shape))
    spec = np.fft.ifftn(corr, axes=m_axes) * n_tot
    pref = np.prod(dx / 2) / (np.pi * eps) ** d
    return (spec.real * pref)


def _sorted_xi(grid):
    return [np.fft.fftshift(grid.eps * grid.wavenumbers(i)) for i in range(grid.dim)]


def iter_wigner_blocks(psi, rows_per_block=None):
    """Yield ``(row_slice, block)`` with momentum axes sorted; blocks cover the first x axis."""
    g = psi.grid
    d = g.dim
    shape = g.shape
    psi2 = refine(psi.values)
    if rows_per_block is None:
        per_row = int(np.prod(shape[1:])) * int(np.prod(shape))
        rows_per_block = max(1, min(shape[0], (1 << 22) // max(per_row, 1)))
    xi_axes = tuple(range(d, 2 * d))
    for start in range(0, shape[0], rows_per_block):
        rows = np.arange(start, min(shape[0], start + rows_per_block))
        block = _wigner_block(psi2, shape, g.eps, g.dx, rows)
        yield slice(start, rows[-1] + 1), np.fft.fftshift(block, axes=xi_axes)


def _check_resolution(psi):
    tail = psi.spectral_tail()
    if tail > 1e-6:
        raise UnderResolved(f"wavefunction not resolved (spectral tail {tail:.2e})")


def wigner_transform(psi, check=True):
    """Dense Wigner function of ``psi`` on ``x-grid x (eps * wavenumber grid)``."""
    if check:
        _check_resolution(psi)
    g = psi.grid
    total = int(np.prod(g.shape)) ** 2
    if total > MAX_DENSE:
        raise MemoryError(f"dense Wigner array would have {total} entries; use pair_symbol_streaming")
    values = np.empty(g.shape + g.shape)
    for sl, block in iter_wigner_blocks(psi):
        values[sl] = block
    x_axes = [g.coords(i) for i in range(g.dim)]
    return PhaseSpaceField(x_axes, _sorted_xi(g), values, g.eps, "wigner")


def _gauss_kernel_fft(axis_coords, var):
    n = axis_coords.size
    h = axis_coords[1] - axis_coords[0]
    u = h * np.fft.fftfreq(n, d=1.0 / n)
    k = np.exp(-u * u / (2 * var))
    k /= k.sum()
    return np.fft.fft(k)


def husimi(field):
    """Convolve a Wigner field with the phase-space Gaussian of variance eps/2 per axis."""
    var = field.eps / 2
    vals = field.values.astype(complex)
    axes = list(field.x_axes) + list(field.xi_axes)
    for axis, coords in enumerate(axes):
        kf = _gauss_kernel_fft(coords, var)
        shape = [1] * vals.ndim
        shape[axis] = -1
        vals = np.fft.ifft(np.fft.fft(vals, axis=axis) * kf.reshape(shape), axis=axis)
    return PhaseSpaceField(field.x_axes, field.xi_axes, vals.real, field.eps, "husimi")


def _symbol_on_field(a, field):
    d = field.dim
    if isinstance(a, SymbolSpec):
        out = np.asarray(a.amp, dtype=float)
        profiles = a.x_profile(field.x_axes) + a.xi_profile(field.xi_axes)
        for axis, prof in enumerate(profiles):
            shape = [1] * (2 * d)
            shape[axis] = -1
            out = out * np.asarray(prof, float).reshape(shape)
        return np.broadcast_to(out, field.values.shape)
    mesh = field.mesh()
    return a(mesh[..., :d], mesh[..., d:])


def _check_clipping(a, x_window, xi_window):
    if isinstance(a, SymbolSpec):
        frac = a.clipped_fraction(x_window, xi_window)
        if frac >= CLIP_TOL:
            raise SupportClipped(f"symbol {a.label!r}: fraction {frac:.2e} of its mass lies outside the window")


def pair_symbol(a, field, check_support=True):
    """Quadrature of ``a * field`` over the phase-space grid."""
    if check_support:
        _check_clipping(a, field.x_window(), field.xi_window())
    vals = _symbol_on_field(a, field)
    return float(np.sum(vals * field.values) * field.cell)


def pair_symbol_streaming(symbols, psi, check_support=True):
    """``<a, W(psi)>`` for each symbol without materializing the full Wigner array."""
    g = psi.grid
    _check_resolution(psi)
    x_axes = [g.coords(i) for i in range(g.dim)]
    xi_axes = _sorted_xi(g)
    dummy = PhaseSpaceField(x_axes, xi_axes, np.empty((0,)), g.eps)
    if check_support:
        for a in symbols:
            _check_clipping(a, dummy.x_window(), dummy.xi_window())
    sums = np.zeros(len(symbols))
    for sl, block in iter_wigner_blocks(psi):
        part = PhaseSpaceField([x_axes[0][sl]] + x_axes[1:], xi_axes, block, g.eps)
        for k, a in enumerate(symbols):
            sums[k] += np.sum(_symbol_on_field(a, part) * block)
    return sums * dummy.cell


def _weyl_1d(a, psi):
    g = psi.grid
    lo, hi, n = g.axes[0]
    dx = (hi - lo) / n
    mid = lo + 0.5 * dx * np.arange(2 * n - 1)
    xi = g.eps * g.wavenumbers(0)
    A = a(mid[:, None, None], xi[None, :, None])
    A = np.broadcast_to(A, (2 * n - 1, n))
    Ahat = np.fft.ifft(A, axis=1)
    i = np.arange(n)
    K = Ahat[i[:, None] + i[None, :], (i[:, None] - i[None, :]) % n]
    return K @ psi.values


def _weyl_2d(a, psi):
    g = psi.grid
    (lo1, hi1, n1), (lo2, hi2, n2) = g.axes
    dx1, dx2 = (hi1 - lo1) / n1, (hi2 - lo2) / n2
    mid2 = lo2 + 0.5 * dx2 * np.arange(2 * n2 - 1)
    xi1 = g.eps * g.wavenumbers(0)
    xi2 = g.eps * g.wavenumbers(1)
    XI1, XI2 = np.meshgrid(xi1, xi2, indexing="ij")
    xi_pts = np.stack([XI1, XI2], axis=-1)
    i2 = np.arange(n2)
    S2 = i2[:, None] + i2[None, :]
    R2 = (i2[:, None] - i2[None, :]) % n2
    out = np.zeros((n1, n2), dtype=complex)
    vals = psi.values
    for s1 in range(2 * n1 - 1):
        m1 = lo1 + 0.5 * dx1 * s1
        x_pts = np.stack([np.full_like(mid2, m1), mid2], axis=-1)
        A = a(x_pts[:, None, None, :], xi_pts[None, :, :, :])
        A = np.broadcast_to(A, (2 * n2 - 1, n1, n2))
        Ahat = np.fft.ifftn(A, axes=(1, 2))
        for i1 in range(max(0, s1 - n1 + 1), min(n1 - 1, s1) + 1):
            j1 = s1 - i1
            r1 = (i1 - j1) % n1
            K = Ahat[S2, r1, R2]
            out[i1] += K @ vals[j1]
    return out


def apply_weyl(a, psi):
    """Apply the semiclassical Weyl operator with symbol ``a`` to ``psi``.

    The kernel ``K(x_i, x_j)`` is formed at the midpoint ``(x_i+x_j)/2`` (a
    point of the half-step grid) by an inverse DFT of ``a(mid, eps k)`` over
    the momentum grid, evaluated at the separation ``i - j``.
    """
    _check_resolution(psi)
    d = psi.dim
    if d == 1:
        out = _weyl_1d(a, psi)
    elif d == 2:
        n_mid = int(np.prod([2 * n - 1 for n in psi.grid.shape]))
        if n_mid * int(np.prod(psi.grid.shape)) > 2 ** 27:
            raise MemoryError("grid too large for Weyl application in two dimensions")
        out = _weyl_2d(a, psi)
    else:
        raise NotImplementedError("Weyl application is implemented for d = 1, 2")
    return WavefunctionGrid(psi.grid, out)


def weyl_expectation(a, psi):
    """``Re (op(a) psi, psi)``."""
    return apply_weyl(a, psi).inner(psi).real


def cross_check_marginals(psi, field):
    """Max deviations of the two marginals from ``|psi|^2`` and ``|psi_hat|^2``."""
    rho = np.abs(psi.values) ** 2
    dens, _ = psi.momentum_density()
    dens = np.fft.fftshift(dens)
    return (float(np.max(np.abs(field.x_marginal() - rho))),
            float(np.max(np.abs(field.xi_marginal() - dens))))
