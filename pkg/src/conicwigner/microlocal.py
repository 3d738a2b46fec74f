"""Finite-eps diagnostics for concentration on the singular set.

Everything here assumes the canonical flat family ``g = (x_1, ..., x_p)``
when it needs the transverse coordinate ``x' = (x_1, ..., x_p)``.

The fixed cutoff is ``chi(r) = 1`` for ``r <= 1``, ``0`` for ``r >= 2`` and
``1 - S(r - 1)`` in between, with the quintic smoothstep
``S(u) = 10 u^3 - 15 u^4 + 6 u^5`` (so ``chi`` is C^2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ScaleOrderingViolated, ZoomWindowExceedsGrid
from .phase_space import PhaseSpaceField, apply_weyl
from .quantum import Grid, WavefunctionGrid

SMOOTHSTEP = (0.0, 0.0, 0.0, 10.0, -15.0, 6.0)


def chi(r):
    """Smooth radial cutoff: 1 on ``[0, 1]``, 0 on ``[2, inf)``."""
    r = np.abs(np.asarray(r, dtype=float))
    u = np.clip(r - 1.0, 0.0, 1.0)
    return 1.0 - u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)


def _transverse_norm(x, p):
    x = np.asarray(x, dtype=float)
    return np.sqrt(np.sum(x[..., :p] ** 2, axis=-1))


@dataclass
class TwoMicrolocalSymbol:
    """``b(x, xi, y) = base(x, xi) * beta(y)`` with ``y = x'/eps``.

    ``kind="compact"``: ``beta(y) = exp(-|y|^2 / 2 y_width^2)`` (``y_width =
    inf`` gives ``beta = 1``).
    ``kind="homogeneous"``: ``beta(y) = chi(|y|/R0) beta0 + (1 - chi(|y|/R0))
    direction(y/|y|)``, homogeneous of degree 0 beyond ``2 R0``.
    """

    base: object
    codim: int = 1
    kind: str = "compact"
    y_width: float = math.inf
    R0: float = 1.0
    beta0: float = 1.0
    direction: object = None
    label: str = "b"

    def beta(self, y):
        y = np.asarray(y, dtype=float)
        r = np.sqrt(np.sum(y * y, axis=-1))
        if self.kind == "compact":
            if not math.isfinite(self.y_width):
                return np.ones_like(r)
            return np.exp(-0.5 * (r / self.y_width) ** 2)
        if self.kind == "homogeneous":
            safe = np.where(r > 0, r, 1.0)
            unit = y / safe[..., None]
            far = np.ones_like(r) if self.direction is None else self.direction(unit)
            c = chi(r / self.R0)
            return c * self.beta0 + (1.0 - c) * far
        raise ValueError(f"unknown two-microlocal kind {self.kind!r}")

    def __call__(self, x, xi, y):
        return self.base(x, xi) * self.beta(y)

    def on_phase_space(self, eps):
        """The ordinary symbol ``(x, xi) -> b(x, xi, x'/eps)``."""
        p = self.codim

        def a(x, xi):
            x = np.asarray(x, dtype=float)
            return self(x, xi, x[..., :p] / eps)
        return a


def _cutoff_symbols(b, eps, R, delta):
    p = b.codim
    full = b.on_phase_space(eps)

    def inner(x, xi):
        return full(x, xi) * chi(_transverse_norm(x, p) / (R * eps))

    def outer(x, xi):
        r = _transverse_norm(x, p)
        return full(x, xi) * (1.0 - chi(r / (R * eps))) * chi(r / delta)

    def bulk(x, xi):
        return full(x, xi) * (1.0 - chi(_transverse_norm(x, p) / delta))

    return full, inner, outer, bulk


def split_observable(b, psi, R, delta, return_full=False):
    """Pairings of ``psi`` with ``b`` cut at scales ``R eps`` and ``delta`` around S.

    Returns ``(inner, outer, bulk)`` (and the untruncated pairing when
    ``return_full``). Each term is ``Re (op(b * cutoff) psi, psi)`` evaluated
    with its own Weyl operator, so the sum is an honest check of the
    partition of unity.
    """
    eps = psi.eps
    if R * eps >= delta / 2:
        raise ScaleOrderingViolated(f"R*eps = {R * eps:.4g} must be below delta/2 = {delta / 2:.4g}")
    full, inner, outer, bulk = _cutoff_symbols(b, eps, R, delta)
    vals = tuple(apply_weyl(a, psi).inner(psi).real for a in (inner, outer, bulk))
    if return_full:
        return vals + (apply_weyl(full, psi).inner(psi).real,)
    return vals


def split_lattice(b, states, R_list, delta_list):
    """Rows ``(eps, R, delta, inner, outer, bulk, full)`` for every admissible lattice point.

    ``states`` maps eps to a wavefunction. Lattice points violating the
    scale ordering are skipped.
    """
    rows = []
    for eps in sorted(states, reverse=True):
        psi = states[eps]
        for R in R_list:
            for delta in delta_list:
                if R * eps >= delta / 2:
                    continue
                rows.append((eps, R, delta) + split_observable(b, psi, R, delta, return_full=True))
    return rows


def _interp_matrix(lo, length, n, targets):
    """Matrix evaluating the periodic trigonometric interpolant at ``targets``."""
    k = np.fft.fftfreq(n, d=1.0 / n)
    phase = np.exp(2j * np.pi * np.outer((targets - lo) / length, k))
    # Nyquist mode split symmetrically so real data interpolates to real values
    nyq = n // 2
    phase[:, nyq] = np.cos(np.pi * (targets - lo) / length * n)
    return phase / n


def rescale_concentration(psi, p, y_max, n_y=None):
    """Zoom ``psi`` on the scale ``eps`` around the flat singular set.

    Returns ``Phi(y, x'') = eps^{p/2} psi(eps y, x'')`` on the periodic grid
    ``y in [-y_max, y_max)^p`` (other axes untouched), obtained by
    trigonometric interpolation.
    """
    g = psi.grid
    eps = g.eps
    if not 1 <= p <= g.dim:
        raise ValueError("codimension out of range")
    half = eps * y_max
    axes = list(g.axes)
    for i in range(p):
        lo, hi, n = axes[i]
        if -half < lo or half > hi:
            raise ZoomWindowExceedsGrid(
                f"zoom window |x_{i + 1}| <= {half:.4g} exceeds grid [{lo:.4g}, {hi:.4g})")
    vals = psi.values
    new_axes = []
    for i in range(g.dim):
        lo, hi, n = axes[i]
        if i >= p:
            new_axes.append((lo, hi, n))
            continue
        dx = (hi - lo) / n
        if n_y is None:
            need = 2 * (2 * half / dx)
            m = 2
            while m < need:
                m *= 2
        else:
            m = int(n_y)
        ys = -y_max + 2 * y_max / m * np.arange(m)
        mat = _interp_matrix(lo, hi - lo, n, eps * ys)
        coef = np.fft.fft(vals, axis=i)
        vals = np.moveaxis(np.tensordot(mat, np.moveaxis(coef, i, 0), axes=(1, 0)), 0, i)
        new_axes.append((-y_max, y_max, m))
    zoom_grid = Grid(tuple(new_axes), eps)
    return WavefunctionGrid(zoom_grid, vals * eps ** (p / 2))


def restricted_mass(psi, p, radius):
    """``int_{|x'| <= radius} |psi|^2`` on the grid."""
    pts = psi.grid.points()
    mask = _transverse_norm(pts, p) <= radius
    return float(np.sum(np.abs(psi.values[mask]) ** 2) * psi.grid.cell)


def mass_near_S(pot, measure, r, xi_window=None):
    """Mass of ``measure`` in ``{|g(x)| < r, |dg(x) xi| > sstar_tol}`` (and the xi window).

    ``measure`` is a :class:`PhaseSpaceField` or a particle measure with
    ``x``, ``xi`` and ``weights`` arrays. ``xi_window`` is a list of
    ``(lo, hi)`` per axis.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    if isinstance(measure, PhaseSpaceField):
        d = measure.dim
        pts = measure.mesh()
        x, xi = pts[..., :d], pts[..., d:]
        w = measure.values * measure.cell
    else:
        x, xi, w = measure.x, measure.xi, measure.weights
    gn = pot.g_norm(x)
    dgxi = np.linalg.norm(np.einsum("...pd,...d->...p", pot.dg(x), xi), axis=-1)
    mask = (gn < r) & (dgxi > pot.sstar_tol)
    if xi_window is not None:
        for i, (lo, hi) in enumerate(xi_window):
            mask &= (xi[..., i] >= lo) & (xi[..., i] <= hi)
    return float(np.sum(np.where(mask, w, 0.0)))


def time_averaged_mass_near_S(pot, fields, times, r, xi_window=None):
    """Trapezoid time average of :func:`mass_near_S` over a list of fields."""
    vals = np.array([mass_near_S(pot, f, r, xi_window) for f in fields])
    t = np.asarray(times, dtype=float)
    return float(np.trapezoid(vals, t) / (t[-1] - t[0]))
