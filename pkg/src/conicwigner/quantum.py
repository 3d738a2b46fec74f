"""Split-step spectral propagation of ``i eps dpsi/dt = -(eps^2/2) Lap psi + V psi``.

Wavefunctions live on periodic uniform grids; the kinetic factor is applied
exactly in Fourier space and the potential pointwise (Strang splitting).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalFailure, UnderResolved
from .potential import Polynomial

TAIL_FRACTION = 0.8
TAIL_TOL = 1e-6
NORM_DRIFT_TOL = 1e-10


@dataclass(frozen=True)
class Grid:
    """Periodic tensor grid; ``axes`` holds ``(lo, hi, n)`` per dimension, ``hi`` excluded."""

    axes: tuple
    eps: float

    def __post_init__(self):
        axes = tuple((float(lo), float(hi), int(n)) for lo, hi, n in self.axes)
        for lo, hi, n in axes:
            if hi <= lo:
                raise ValueError("grid axis must have hi > lo")
            if n < 2 or n & (n - 1):
                raise ValueError(f"points per axis must be a power of two, got {n}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def dim(self):
        return len(self.axes)

    @property
    def shape(self):
        return tuple(n for _, _, n in self.axes)

    @property
    def lengths(self):
        return np.array([hi - lo for lo, hi, _ in self.axes])

    @property
    def dx(self):
        return np.array([(hi - lo) / n for lo, hi, n in self.axes])

    @property
    def cell(self):
        return float(np.prod(self.dx))

    def coords(self, axis):
        lo, hi, n = self.axes[axis]
        return lo + (hi - lo) / n * np.arange(n)

    def points(self):
        """Grid points as an array of shape ``shape + (dim,)``."""
        mesh = np.meshgrid(*[self.coords(i) for i in range(self.dim)], indexing="ij")
        return np.stack(mesh, axis=-1)

    def wavenumbers(self, axis):
        lo, hi, n = self.axes[axis]
        return 2 * np.pi * np.fft.fftfreq(n, d=(hi - lo) / n)

    def k_squared(self):
        ks = np.meshgrid(*[self.wavenumbers(i) for i in range(self.dim)], indexing="ij")
        return sum(k * k for k in ks)

    @property
    def xi_max(self):
        """Largest representable momentum ``eps * k_max`` per axis."""
        return self.eps * np.pi / self.dx


@dataclass
class WavefunctionGrid:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {self.grid.shape}")

    @property
    def eps(self):
        return self.grid.eps

    @property
    def dim(self):
        return self.grid.dim

    def norm2(self):
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.cell)

    def normalized(self):
        return WavefunctionGrid(self.grid, self.values / math.sqrt(self.norm2()))

    def inner(self, other):
        """``(self, other)`` = integral of ``self * conj(other)``."""
        return complex(np.sum(self.values * np.conj(other.values)) * self.grid.cell)

    def copy(self):
        return WavefunctionGrid(self.grid, self.values.copy())

    def position_mean(self):
        rho = np.abs(self.values) ** 2
        pts = self.grid.points()
        return np.tensordot(rho, pts, axes=(tuple(range(self.dim)), tuple(range(self.dim)))) * self.grid.cell / self.norm2()

    def momentum_density(self):
        """``|psi_hat(xi)|^2`` on the FFT-ordered momentum grid (sums to the norm with ``dxi``)."""
        f = np.fft.fftn(self.values)
        g = self.grid
        dxi = np.prod(g.eps * 2 * np.pi / g.lengths)
        return np.abs(f) ** 2 * (g.cell ** 2 / (2 * np.pi * g.eps) ** g.dim), dxi

    def momentum_mean(self):
        dens, dxi = self.momentum_density()
        out = []
        for i in range(self.dim):
            shape = [1] * self.dim
            shape[i] = -1
            xi = (self.eps * self.grid.wavenumbers(i)).reshape(shape)
            out.append(float(np.sum(dens * xi) * dxi))
        return np.array(out) / self.norm2()

    def spectral_tail(self, fraction=TAIL_FRACTION):
        """Fraction of momentum mass in ``|k_j| > fraction * k_max`` on any axis."""
        p = np.abs(np.fft.fftn(self.values)) ** 2
        mask = np.zeros(self.grid.shape, dtype=bool)
        for i in range(self.dim):
            k = np.abs(self.grid.wavenumbers(i))
            shape = [1] * self.dim
            shape[i] = -1
            mask |= (k > fraction * k.max()).reshape(shape)
        return float(p[mask].sum() / p.sum())


@dataclass
class InitialStateSpec:
    """Coherent state centred at ``(q, p)`` or WKB state ``A exp(i S / eps)``."""

    kind: str
    q: np.ndarray | None = None
    p: np.ndarray | None = None
    amplitude: Polynomial | None = None
    phase: Polynomial | None = None
    box: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def coherent(cls, q, p):
        return cls("coherent", q=np.atleast_1d(np.asarray(q, float)), p=np.atleast_1d(np.asarray(p, float)))

    @classmethod
    def wkb(cls, amplitude, phase, box=None):
        return cls("wkb", amplitude=amplitude, phase=phase,
                   box=None if box is None else np.asarray(box, float))

    @classmethod
    def from_spec(cls, spec, dim):
        kind = spec["kind"]
        if kind == "coherent":
            return cls.coherent(spec["q"], spec["p"])
        if kind == "wkb":
            return cls.wkb(Polynomial.from_spec(spec.get("A", 1.0), dim),
                           Polynomial.from_spec(spec.get("S", 0.0), dim), spec.get("box"))
        raise ValueError(f"unknown initial state kind {kind!r}")

    @property
    def dim(self):
        if self.kind == "coherent":
            return self.q.size
        return self.amplitude.dim


def coherent_values(points, q, p, eps):
    """Unnormalized-free coherent state ``(pi eps)^{-d/4} exp(-|x-q|^2/2eps + i p.(x-q)/eps)``."""
    d = points.shape[-1]
    dxq = points - q
    return (np.pi * eps) ** (-d / 4) * np.exp(-np.sum(dxq ** 2, axis=-1) / (2 * eps)
                                              + 1j * (dxq @ p) / eps)


def make_initial_state(spec, grid):
    """Sample the initial state on ``grid`` and renormalize to unit L2 norm."""
    if isinstance(grid, WavefunctionGrid):
        grid = grid.grid
    eps = grid.eps
    pts = grid.points()
    if spec.kind == "coherent":
        if np.any(grid.dx > math.sqrt(eps) / 4):
            raise UnderResolved(f"grid spacing {grid.dx.max():.4g} exceeds sqrt(eps)/4 = {math.sqrt(eps) / 4:.4g}")
        reach = np.abs(spec.p) + 6 * math.sqrt(eps / 2)
        if np.any(reach > TAIL_FRACTION * grid.xi_max):
            raise UnderResolved(f"momentum {spec.p.tolist()} not inside the grid window {grid.xi_max.tolist()}")
        vals = coherent_values(pts, spec.q, spec.p, eps)
    elif spec.kind == "wkb":
        grad_s = spec.phase.gradient(pts)
        if np.any(np.abs(grad_s) > TAIL_FRACTION * grid.xi_max):
            raise UnderResolved("WKB phase gradient leaves the grid momentum window")
        vals = spec.amplitude(pts) * np.exp(1j * spec.phase(pts) / eps)
    else:
        raise ValueError(f"unknown initial state kind {spec.kind!r}")
    psi = WavefunctionGrid(grid, vals)
    n2 = psi.norm2()
    if n2 == 0:
        raise ValueError("initial state vanishes on the grid")
    return psi.normalized()


def potential_on_grid(pot, grid):
    return pot.eval_V(grid.points(), check_box=False)


def dt_max(pot, grid):
    """Largest step keeping the potential phase per step below pi/4."""
    vmax = float(np.max(np.abs(potential_on_grid(pot, grid))))
    if vmax == 0:
        return 0.01
    return min(0.01, grid.eps * np.pi / (4 * vmax))


def min_points(length, xi_window, eps, safety=1.5):
    """Smallest power of two with ``n >= length * xi_window / (pi eps) * safety``."""
    need = length * xi_window / (np.pi * eps) * safety
    n = 2
    while n < need:
        n *= 2
    return n


class SplitStepPropagator:
    """Strang splitting with cached phase factors for a fixed ``(pot, grid, dt)``."""

    def __init__(self, pot, grid, dt):
        self.grid = grid
        self.dt = float(dt)
        self.V = potential_on_grid(pot, grid)
        eps = grid.eps
        self.half_potential = np.exp(-0.5j * self.V * self.dt / eps)
        self.kinetic = np.exp(-0.5j * eps * grid.k_squared() * self.dt)

    def step_values(self, values, n=1):
        hp, kin = self.half_potential, self.kinetic
        v = values
        for _ in range(n):
            v = np.fft.ifftn(kin * np.fft.fftn(hp * v)) * hp
        return v

    def __call__(self, psi, n=1):
        return WavefunctionGrid(psi.grid, self.step_values(psi.values, n))


def strang_step(pot, psi, dt):
    """One Strang step: half potential phase, exact kinetic phase, half potential phase."""
    if dt == 0:
        return psi.copy()
    return SplitStepPropagator(pot, psi.grid, dt)(psi)


def energy(pot, psi):
    """``<psi, (-eps^2/2 Lap + V) psi> / ||psi||^2``."""
    g = psi.grid
    f = np.fft.fftn(psi.values)
    kin = 0.5 * g.eps ** 2 * np.sum(g.k_squared() * np.abs(f) ** 2) / f.size * g.cell
    pot_e = np.sum(potential_on_grid(pot, g) * np.abs(psi.values) ** 2) * g.cell
    return float((kin + pot_e) / psi.norm2())


def evolve(pot, psi0, t_final, dt=None, times=None, check=True):
    """Propagate ``psi0`` and return ``(times, snapshots)``.

    ``times`` are the observation times (default ``[0, t_final]``); each
    interval between them is split into equal steps no longer than ``dt``.
    """
    t_final = float(t_final)
    if t_final < 0:
        raise ValueError("t_final must be non-negative")
    limit = dt_max(pot, psi0.grid)
    if dt is None:
        dt = limit
    elif dt > limit * (1 + 1e-12):
        raise UnderResolved(f"dt={dt:.4g} exceeds dt_max={limit:.4g} for eps={psi0.eps}")
    if times is None:
        times = [0.0, t_final] if t_final > 0 else [0.0]
    times = sorted(float(t) for t in times)
    if times[0] < 0 or times[-1] > t_final + 1e-12:
        raise ValueError("observation times must lie in [0, t_final]")
    n0 = psi0.norm2()
    out = []
    cur = psi0.values.copy()
    t_now = 0.0
    props = {}
    for t_obs in times:
        span = t_obs - t_now
        if span > 0:
            n = max(1, math.ceil(span / dt - 1e-9))
            h = span / n
            key = round(h, 15)
            if key not in props:
                props[key] = SplitStepPropagator(pot, psi0.grid, h)
            cur = props[key].step_values(cur, n)
            t_now = t_obs
        snap = WavefunctionGrid(psi0.grid, cur.copy())
        if check:
            drift = abs(snap.norm2() - n0)
            if drift > NORM_DRIFT_TOL * max(1.0, n0):
                raise NumericalFailure(f"norm drift {drift:.3e} at t={t_obs}")
            tail = snap.spectral_tail()
            if tail > TAIL_TOL:
                raise UnderResolved(f"spectral tail mass {tail:.3e} > {TAIL_TOL} at t={t_obs}")
        out.append(snap)
    return times, out
