"""Particle measures, their transport by the broken flow, and Egorov gaps.

A particle measure is a finite weighted sum of Dirac masses in phase
space. The classical side of an Egorov comparison pushes a quadrature of
the initial Wigner function through :func:`flow_map` and pairs the
transported points with the observable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SpecUnsupported
from .flow import PhasePoint, flow_map, flow_map_ensemble
from .phase_space import (MAX_DENSE, husimi, pair_symbol, pair_symbol_streaming,
                          wigner_transform)
from .quantum import Grid, InitialStateSpec, evolve, make_initial_state, min_points


@dataclass
class ParticleMeasure:
    """``sum_i w_i delta_(x_i, xi_i)``; ``x`` and ``xi`` have shape ``(N, d)``.

    Weights must be nonnegative unless ``signed`` is set (quadratures of
    a Wigner function carry negative weights).
    """

    x: np.ndarray
    xi: np.ndarray
    weights: np.ndarray
    signed: bool = False

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if self.x.shape != self.xi.shape or self.x.shape[0] != self.weights.size:
            raise ValueError("inconsistent particle arrays")
        if not self.signed and np.any(self.weights < 0):
            raise ValueError("negative weight in an unsigned particle measure")

    @classmethod
    def from_points(cls, points, weights, signed=False):
        pts = [p if isinstance(p, PhasePoint) else PhasePoint(*p) for p in points]
        return cls(np.array([p.x for p in pts]), np.array([p.xi for p in pts]), weights, signed)

    @property
    def n(self):
        return self.weights.size

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def total_mass(self):
        return float(self.weights.sum())

    @property
    def points(self):
        return [(PhasePoint(self.x[i], self.xi[i]), float(self.weights[i])) for i in range(self.n)]

    def pair(self, a):
        """``<a, mu> = sum_i w_i a(x_i, xi_i)``."""
        if self.n == 0:
            return 0.0
        return float(np.sum(self.weights * a(self.x, self.xi)))


def initial_measure(spec, n_particles=1, box=None):
    """Limit Wigner measure of an initial state, discretized by particles.

    Coherent states give one unit particle at ``(q, p)``. WKB states
    ``A exp(iS/eps)`` give a midpoint rule on the Lagrangian graph
    ``xi = grad S(x)`` over the state's box, weights ``|A|^2`` times the
    cell volume (``n_particles`` is rounded to a power ``m^d``).
    """
    if n_particles < 1:
        raise ValueError("n_particles must be at least 1")
    if spec.kind == "coherent":
        return ParticleMeasure(spec.q[None, :], spec.p[None, :], [1.0])
    if spec.kind != "wkb":
        raise SpecUnsupported(f"no limit measure for initial state kind {spec.kind!r}")
    box = spec.box if box is None else np.asarray(box, float)
    if box is None:
        raise SpecUnsupported("WKB initial measure needs a bounding box for the amplitude")
    box = np.asarray(box, float).reshape(-1, 2)
    d = box.shape[0]
    m = max(1, int(round(n_particles ** (1.0 / d))))
    axes = [lo + (hi - lo) * (np.arange(m) + 0.5) / m for lo, hi in box]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    cell = float(np.prod((box[:, 1] - box[:, 0]) / m))
    weights = np.abs(spec.amplitude(mesh)) ** 2 * cell
    return ParticleMeasure(mesh, spec.phase.gradient(mesh), weights)


def pushforward(pot, mu, t, tol=1e-12):
    """Transport each particle by ``Phi^t``; weights are left unchanged.

    A :class:`NonGenericCrossing` carries the offending particle's index.
    """
    if t == 0:
        return ParticleMeasure(mu.x.copy(), mu.xi.copy(), mu.weights.copy(), mu.signed)
    xs, xis = flow_map_ensemble(pot, mu.x, mu.xi, t, tol=tol)
    return ParticleMeasure(xs, xis, mu.weights.copy(), mu.signed)


def weak_star_distance(mu_a, mu_b, symbols):
    """``max_a |<a, mu_a> - <a, mu_b>|`` over a nonempty symbol list."""
    if not symbols:
        raise ValueError("need at least one test symbol")
    return max(abs(mu_a.pair(a) - mu_b.pair(a)) for a in symbols)


def poisson_bracket_pairing(pot, mu, a):
    """``<xi . grad_x a - grad V . grad_xi a, mu>`` for a catalog symbol ``a``."""
    d = mu.dim
    out = np.zeros(mu.n)
    grad_v = pot.grad_V(mu.x)
    for i in range(d):
        e = [0] * d
        e[i] = 1
        out += mu.xi[:, i] * a.d_x(e)(mu.x, mu.xi)
        out -= grad_v[:, i] * a.d_xi(e)(mu.x, mu.xi)
    return float(np.sum(mu.weights * out))


def transport_residual(pot, mu0, a, t, h=1e-3, tol=1e-12):
    """Centred difference of ``<a, mu_t>`` in time minus the Poisson-bracket pairing."""
    plus = pushforward(pot, mu0, t + h, tol).pair(a)
    minus = pushforward(pot, mu0, t - h, tol).pair(a)
    mu_t = pushforward(pot, mu0, t, tol)
    return (plus - minus) / (2 * h) - poisson_bracket_pairing(pot, mu_t, a)


# --------------------------------------------------------------------------
# finite-eps realizations of the initial Wigner function

def wigner_quadrature(psi, stride=None, prune=1e-12):
    """Signed particle quadrature of ``W(psi)`` on a sub-lattice of the Wigner grid.

    ``stride`` is the sub-sampling step (grid points per axis, same for x and
    xi); by default about ``sqrt(eps)/3`` in physical units. Particles whose
    weight is below ``prune`` times the largest are dropped.
    """
    field = wigner_transform(psi)
    d = field.dim
    if stride is None:
        target = math.sqrt(psi.eps) / 3
        sx = max(1, int(target / field.dx.max()))
        sp = max(1, int(target / field.dxi.max()))
    else:
        sx = sp = int(stride)
    sl = tuple([slice(None, None, sx)] * d + [slice(None, None, sp)] * d)
    sub = field.values[sl]
    w = sub * field.cell * sx ** d * sp ** d
    keep = np.abs(w) > prune * np.abs(w).max()
    grids = np.meshgrid(*[ax[::sx] for ax in field.x_axes], *[ax[::sp] for ax in field.xi_axes],
                        indexing="ij")
    pts = np.stack(grids, axis=-1)[keep]
    return ParticleMeasure(pts[:, :d], pts[:, d:], w[keep], signed=True)


def particle_rng(seed, index):
    """Counter-based stream for particle ``index``: Philox keyed by ``(seed, index)``."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def husimi_sample(psi, n_samples, seed=0, importance=True):
    """Stratified samples from the Husimi density of ``psi``.

    Sample ``i`` takes its stratum ``[(i)/N, (i+1)/N)`` of the cell CDF and
    its jitter from :func:`particle_rng`. With ``importance`` the weights are
    ``W/H`` (so pairings estimate the Wigner pairing without the Husimi
    smoothing bias); otherwise every sample carries ``mass/N``.
    """
    W = wigner_transform(psi)
    H = husimi(W)
    d = W.dim
    dens = np.clip(H.values, 0.0, None).ravel()
    cdf = np.cumsum(dens)
    mass_h = cdf[-1]
    cdf /= mass_h
    steps = np.concatenate([W.dx, W.dxi])
    lows = [ax[0] for ax in list(W.x_axes) + list(W.xi_axes)]
    shape = W.values.shape
    pts = np.empty((n_samples, 2 * d))
    cells = np.empty(n_samples, dtype=np.int64)
    for i in range(n_samples):
        u = particle_rng(seed, i).random(1 + 2 * d)
        c = int(np.searchsorted(cdf, (i + u[0]) / n_samples, side="right"))
        c = min(c, dens.size - 1)
        cells[i] = c
        idx = np.unravel_index(c, shape)
        pts[i] = [lows[k] + (idx[k] + u[1 + k] - 0.5) * steps[k] for k in range(2 * d)]
    total = mass_h * W.cell
    if importance:
        ratio = W.values.ravel()[cells] / dens[cells]
        weights = ratio * total / n_samples
        return ParticleMeasure(pts[:, :d], pts[:, d:], weights, signed=True)
    return ParticleMeasure(pts[:, :d], pts[:, d:], np.full(n_samples, total / n_samples))


# --------------------------------------------------------------------------
# Egorov comparison

@dataclass
class EgorovRow:
    eps: float
    symbol: str
    quantum: float
    classical: float

    @property
    def gap(self):
        return abs(self.quantum - self.classical)


@dataclass
class EgorovResult:
    rows: list
    gaps: dict
    slope: float | None
    slope_reliable: bool

    def table(self):
        return [(e, self.gaps[e]) for e in sorted(self.gaps, reverse=True)]


def auto_grid(pot, spec, eps, t, pad=0.3, safety=1.5, symbols=()):
    """Periodic grid covering the enlarged working box and the momenta seen on ``[0, t]``.

    The momentum window also covers the xi-envelopes of ``symbols`` so their
    pairings are not clipped.
    """
    box = np.asarray(pot.box, float)
    width = box[:, 1] - box[:, 0]
    lo = box[:, 0] - pad / 2 * width
    hi = box[:, 1] + pad / 2 * width
    if spec.kind == "coherent":
        _, traj = flow_map(pot, PhasePoint(spec.q, spec.p), t)
        ts = np.linspace(traj.t_start, traj.t_end, 64) if t > 0 else [0.0]
        xi_peak = max(np.abs(traj(tt)[pot.dim:]).max() for tt in ts)
    else:
        xi_peak = float(np.abs(spec.phase.gradient(np.asarray(box).mean(axis=1))).max()) + 1.0
    xi_reach = xi_peak + 6 * math.sqrt(eps / 2)
    for a in symbols:
        for h in a.xi_factors:
            if math.isfinite(h.width):
                xi_reach = max(xi_reach, (abs(h.center) + 6.5 * h.width) / safety)
    axes = []
    for i in range(pot.dim):
        n = min_points(hi[i] - lo[i], xi_reach, eps, safety)
        n = max(n, 2 ** math.ceil(math.log2((hi[i] - lo[i]) / (math.sqrt(eps) / 4))))
        axes.append((lo[i], hi[i], n))
    return Grid(tuple(axes), eps)


def _fit_slope(gaps):
    eps = np.array(sorted(gaps))
    D = np.array([gaps[e] for e in eps])
    if eps.size < 2 or np.any(D <= 0):
        return None
    return float(np.polyfit(np.log(eps), np.log(D), 1)[0])


def egorov_gap(pot, spec, symbols, t, eps_list, grid_for=None, realization="wigner",
               n_samples=10_000, seed=0, tol=1e-12):
    """Compare quantum and transported-classical pairings at time ``t``.

    For each eps the state is evolved to ``t`` and paired with every symbol;
    the classical side pushes a particle realization of ``W(psi_0)`` through
    the broken flow and pairs the result. ``D(eps)`` is the largest gap over
    the symbols and the slope is a least-squares fit of ``log D`` against
    ``log eps`` (flagged reliable only with three or more points).
    """
    rows = []
    gaps = {}
    for eps in eps_list:
        grid = grid_for(eps) if grid_for is not None else auto_grid(pot, spec, eps, t, symbols=symbols)
        psi0 = make_initial_state(spec, grid)
        _, snaps = evolve(pot, psi0, t)
        psi_t = snaps[-1]
        if int(np.prod(grid.shape)) ** 2 <= MAX_DENSE:
            field = wigner_transform(psi_t)
            q_vals = [pair_symbol(a, field) for a in symbols]
        else:
            q_vals = list(pair_symbol_streaming(symbols, psi_t))
        if realization == "wigner":
            mu0 = wigner_quadrature(psi0)
        elif realization == "husimi":
            mu0 = husimi_sample(psi0, n_samples, seed=seed)
        else:
            raise ValueError(f"unknown realization {realization!r}")
        mu_t = pushforward(pot, mu0, t, tol)
        c_vals = [mu_t.pair(a) for a in symbols]
        for a, q, c in zip(symbols, q_vals, c_vals):
            rows.append(EgorovRow(eps, a.label, q, c))
        gaps[eps] = max(abs(q - c) for q, c in zip(q_vals, c_vals))
    return EgorovResult(rows, gaps, _fit_slope(gaps), len(gaps) >= 3)


def check_exclusion(pot, symbols, r_excl=None, n=201, rel_tol=1e-8):
    """Labels of symbols not vanishing on the tube around the non-generic set.

    The tube is ``{|g(x)| < r_excl} x {|dg(x) xi| < 2 sstar_tol}``, sampled on
    the plane ``xi = 0`` (the only momenta in it for the flat families used
    here), with ``r_excl`` defaulting to ``0.05`` times the box diameter.
    """
    if r_excl is None:
        r_excl = 0.05 * pot.box_diameter
    axes = [np.linspace(lo, hi, n) for lo, hi in pot.box]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, pot.dim)
    mesh = mesh[pot.g_norm(mesh) < r_excl]
    bad = []
    for a in symbols:
        vals = np.abs(a(mesh, np.zeros_like(mesh)))
        if vals.size and vals.max() > rel_tol * abs(a.amp):
            bad.append(a.label)
    return bad
