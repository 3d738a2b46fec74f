"""Conical potentials ``V(x) = w(x) |g(x)| + V0(x)`` with exact derivatives.

The coefficient fields ``w``, ``V0`` and the components of ``g`` are
multivariate polynomials, so every derivative needed by the dynamics is
available in closed form.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping

import numpy as np

from .errors import NonGenericPoint, OnSingularSet, OutOfBox

RANK_TOL = 1e-6


class Polynomial:
    """Multivariate polynomial ``sum_k c_k prod_i x_i**e_ki`` on R^d.

    Parameters
    ----------
    dim : int
        Number of variables.
    terms : mapping
        Exponent tuple -> coefficient. Zero coefficients are dropped.
    """

    def __init__(self, dim: int, terms: Mapping[tuple, float] | None = None):
        self.dim = int(dim)
        clean = {}
        for exps, coef in (terms or {}).items():
            exps = tuple(int(e) for e in exps)
            if len(exps) != self.dim or min(exps, default=0) < 0:
                raise ValueError(f"bad exponent tuple {exps} for dim {dim}")
            if coef != 0.0:
                clean[exps] = clean.get(exps, 0.0) + float(coef)
        self.terms = clean

    @classmethod
    def constant(cls, dim, value):
        return cls(dim, {(0,) * dim: value})

    @classmethod
    def coordinate(cls, dim, axis, scale=1.0):
        exps = [0] * dim
        exps[axis] = 1
        return cls(dim, {tuple(exps): scale})

    @classmethod
    def linear(cls, coefs, offset=0.0):
        dim = len(coefs)
        terms = {(0,) * dim: offset}
        for i, c in enumerate(coefs):
            e = [0] * dim
            e[i] = 1
            terms[tuple(e)] = c
        return cls(dim, terms)

    @classmethod
    def from_spec(cls, spec, dim):
        """Build from a config field: a number, ``{"constant": c}``,
        ``{"linear": [...], "offset": b}`` or ``{"poly": [[coef, [e1..ed]], ...]}``."""
        if isinstance(spec, (int, float)):
            return cls.constant(dim, spec)
        if not isinstance(spec, Mapping):
            raise ValueError(f"cannot build a polynomial from {spec!r}")
        if "constant" in spec:
            return cls.constant(dim, spec["constant"])
        if "linear" in spec:
            coefs = spec["linear"]
            if len(coefs) != dim:
                raise ValueError(f"linear form needs {dim} coefficients, got {len(coefs)}")
            return cls.linear(coefs, spec.get("offset", 0.0))
        if "poly" in spec:
            terms = {}
            for coef, exps in spec["poly"]:
                key = tuple(exps)
                terms[key] = terms.get(key, 0.0) + coef
            return cls(dim, terms)
        raise ValueError(f"unknown field specification {spec!r}")

    def to_spec(self):
        return {"poly": [[c, list(e)] for e, c in sorted(self.terms.items())]}

    @property
    def degree(self):
        return max((sum(e) for e in self.terms), default=0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for exps, coef in self.terms.items():
            term = np.full(x.shape[:-1], coef)
            for i, e in enumerate(exps):
                if e:
                    term = term * x[..., i] ** e
            out = out + term
        return out

    def derivative(self, axis):
        terms = {}
        for exps, coef in self.terms.items():
            e = exps[axis]
            if e == 0:
                continue
            new = list(exps)
            new[axis] = e - 1
            terms[tuple(new)] = terms.get(tuple(new), 0.0) + coef * e
        return Polynomial(self.dim, terms)

    @cached_property
    def _grad_polys(self):
        return [self.derivative(i) for i in range(self.dim)]

    @cached_property
    def _hess_polys(self):
        return [[gi.derivative(j) for j in range(self.dim)] for gi in self._grad_polys]

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([p(x) for p in self._grad_polys], axis=-1)

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        rows = [np.stack([p(x) for p in row], axis=-1) for row in self._hess_polys]
        return np.stack(rows, axis=-2)

    def __repr__(self):
        return f"Polynomial(dim={self.dim}, terms={self.terms})"


def _as_point(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dim:
        raise ValueError(f"expected a {dim}-vector, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class ConicalPotential:
    """``V(x) = w(x)|g(x)| + V0(x)`` on a rectangular working box.

    ``box`` has shape ``(dim, 2)``. ``xi_scale`` is the typical momentum
    size that sets the S* tolerance.
    """

    dim: int
    codim: int
    w: Polynomial
    V0: Polynomial
    g: tuple
    box: np.ndarray
    xi_scale: float = 1.0
    hit_tol: float = 1e-7
    name: str = ""

    def __post_init__(self):
        if not 1 <= self.codim <= self.dim:
            raise ValueError(f"codimension must satisfy 1 <= p <= d, got p={self.codim}, d={self.dim}")
        if len(self.g) != self.codim:
            raise ValueError("g must have codim components")
        box = np.asarray(self.box, dtype=float).reshape(self.dim, 2)
        if np.any(box[:, 1] <= box[:, 0]):
            raise ValueError("empty working box")
        object.__setattr__(self, "box", box)
        for f in (self.w, self.V0, *self.g):
            if f.dim != self.dim:
                raise ValueError("field dimension mismatch")

    @property
    def is_smooth(self):
        """True when the singular weight ``w`` is identically zero."""
        return not self.w.terms

    # tolerances -----------------------------------------------------------
    @property
    def box_diameter(self):
        return float(np.linalg.norm(self.box[:, 1] - self.box[:, 0]))

    @property
    def g_zero_tol(self):
        return 1e-12 * self.box_diameter

    @property
    def sstar_tol(self):
        return 1e-8 * self.xi_scale

    # raw fields -----------------------------------------------------------
    def in_box(self, x):
        x = _as_point(x, self.dim)
        return np.all((x >= self.box[:, 0]) & (x <= self.box[:, 1]), axis=-1)

    def _check_box(self, x):
        if not np.all(self.in_box(x)):
            raise OutOfBox(f"point {np.asarray(x).tolist()} outside working box {self.box.tolist()}")

    def g_val(self, x):
        x = _as_point(x, self.dim)
        return np.stack([gi(x) for gi in self.g], axis=-1)

    def dg(self, x):
        """Jacobian of g, shape ``(..., p, d)``."""
        x = _as_point(x, self.dim)
        return np.stack([gi.gradient(x) for gi in self.g], axis=-2)

    def d2g(self, x):
        """Second derivatives of g, shape ``(..., p, d, d)``."""
        x = _as_point(x, self.dim)
        return np.stack([gi.hessian(x) for gi in self.g], axis=-3)

    def g_norm(self, x):
        return np.linalg.norm(self.g_val(x), axis=-1)

    # operations -----------------------------------------------------------
    def eval_V(self, x, check_box=True):
        x = _as_point(x, self.dim)
        if check_box:
            self._check_box(x)
        return self.w(x) * self.g_norm(x) + self.V0(x)

    def grad_raw(self, x):
        """Gradient of V using ``g/|g|``, with a zero direction where ``g = 0``.

        No tolerance checks; used inside integrators that never sit exactly on S.
        """
        x = _as_point(x, self.dim)
        gv = self.g_val(x)
        gn = np.linalg.norm(gv, axis=-1)
        safe = np.where(gn > 0, gn, 1.0)
        n = gv / safe[..., None]
        dg = self.dg(x)
        tdg_n = np.einsum("...pd,...p->...d", dg, n)
        return self.V0.gradient(x) + gn[..., None] * self.w.gradient(x) + self.w(x)[..., None] * tdg_n

    def grad_V(self, x):
        """``grad V0 + |g| grad w + w dg^T g/|g|``; raises on S."""
        x = _as_point(x, self.dim)
        if not self.is_smooth and np.any(self.g_norm(x) <= self.g_zero_tol):
            raise OnSingularSet(f"grad V undefined on S at x={x.tolist()}; use one_sided_force")
        return self.grad_raw(x)

    def branch_grad(self, x, sigma):
        """Gradient of the smooth extension ``sigma*w*g + V0`` (codimension one only).

        It agrees with ``grad V`` on the side where ``sign g = sigma`` and is
        smooth across S, which lets an integrator run up to S exactly.
        """
        if self.codim != 1:
            raise ValueError("smooth branch extension exists only for codimension one")
        x = _as_point(x, self.dim)
        g = self.g[0](x)
        return (self.V0.gradient(x)
                + sigma * (g[..., None] * self.w.gradient(x) + self.w(x)[..., None] * self.g[0].gradient(x)))

    def omega0(self, x, xi):
        """Unit vector ``dg(x)xi / |dg(x)xi|``; raises off S*."""
        x = _as_point(x, self.dim)
        v = self.dg(x) @ np.asarray(xi, dtype=float)
        nv = np.linalg.norm(v)
        if nv <= self.sstar_tol:
            raise NonGenericPoint(f"|dg(x) xi| = {nv:.3e} <= sstar_tol at x={x.tolist()}, xi={list(xi)}")
        return v / nv

    def one_sided_force(self, x, xi, side):
        """Limit of ``-grad V`` along the broken trajectory through ``(x, xi)`` in S*.

        ``side=+1`` is the outgoing limit ``t -> 0+``, ``side=-1`` the incoming one.
        """
        if side not in (1, -1):
            raise ValueError("side must be +1 or -1")
        x = _as_point(x, self.dim)
        if self.g_norm(x) > self.g_zero_tol:
            raise ValueError(f"point {x.tolist()} is not on S")
        om = self.omega0(x, xi)
        return -self.V0.gradient(x) - side * self.w(x) * (self.dg(x).T @ om)

    def hessian_V(self, x):
        x = _as_point(x, self.dim)
        gv = self.g_val(x)
        gn = float(np.linalg.norm(gv))
        if self.is_smooth:
            return self.V0.hessian(x)
        if gn <= self.g_zero_tol:
            raise OnSingularSet(f"Hessian undefined on S at x={x.tolist()}")
        n = gv / gn
        dg = self.dg(x)
        wv = float(self.w(x))
        gw = self.w.gradient(x)
        tdg_n = dg.T @ n
        cross = np.outer(gw, tdg_n)
        proj = dg.T @ dg - np.outer(tdg_n, tdg_n)
        return (self.V0.hessian(x)
                + gn * self.w.hessian(x)
                + cross + cross.T
                + wv * np.einsum("pij,p->ij", self.d2g(x), n)
                + (wv / gn) * proj)

    def singular_hessian_B1(self, x, xi):
        """Coefficient of ``1/t`` in ``d2V(x_t)`` along the outgoing branch from ``(x, xi)``."""
        x = _as_point(x, self.dim)
        if self.g_norm(x) > self.g_zero_tol:
            raise ValueError(f"point {x.tolist()} is not on S")
        dg = self.dg(x)
        v = dg @ np.asarray(xi, dtype=float)
        nv = np.linalg.norm(v)
        if nv <= self.sstar_tol:
            raise NonGenericPoint(f"|dg(x) xi| = {nv:.3e} <= sstar_tol")
        om = v / nv
        tdg_om = dg.T @ om
        return (float(self.w(x)) / nv) * (dg.T @ dg - np.outer(tdg_om, tdg_om))

    # load-time checks ------------------------------------------------------
    def lattice(self, n_per_axis=9):
        axes = [np.linspace(lo, hi, n_per_axis) for lo, hi in self.box]
        return np.array(list(itertools.product(*axes)))

    def check_rank(self, n_per_axis=9, rank_tol=RANK_TOL):
        """Smallest singular value of dg over a box lattice; raises if below ``rank_tol``."""
        pts = self.lattice(n_per_axis)
        smin = np.linalg.svd(self.dg(pts), compute_uv=False)[..., -1]
        worst = float(smin.min())
        if worst <= rank_tol:
            raise ValueError(f"dg is rank deficient on the working box (min singular value {worst:.3e})")
        return worst

    def check_positive_weight(self, n_per_axis=9):
        wmin = float(self.w(self.lattice(n_per_axis)).min())
        if wmin <= 0:
            raise ValueError(f"w must be positive on the working box when crossings are simulated (min {wmin:.3e})")
        return wmin

    def to_spec(self):
        spec = {
            "dim": self.dim,
            "codim": self.codim,
            "w": self.w.to_spec(),
            "V0": self.V0.to_spec(),
            "g": [gi.to_spec() for gi in self.g],
            "box": self.box.tolist(),
        }
        if self.xi_scale != 1.0:
            spec["xi_scale"] = self.xi_scale
        return spec


def potential_from_spec(spec):
    """Build a :class:`ConicalPotential` from the JSON potential block."""
    dim = int(spec["dim"])
    codim = int(spec.get("codim", 1))
    w = Polynomial.from_spec(spec.get("w", 1.0), dim)
    V0 = Polynomial.from_spec(spec.get("V0", 0.0), dim)
    gspec = spec.get("g", "coordinates")
    if gspec == "coordinates":
        g = tuple(Polynomial.coordinate(dim, i) for i in range(codim))
    else:
        if len(gspec) != codim:
            raise ValueError(f"g has {len(gspec)} components but codim is {codim}")
        g = tuple(Polynomial.from_spec(s, dim) for s in gspec)
    box = spec.get("box", [[-5.0, 5.0]] * dim)
    return ConicalPotential(dim, codim, w, V0, g, np.asarray(box, dtype=float),
                            xi_scale=float(spec.get("xi_scale", 1.0)),
                            name=spec.get("name", ""))


def cone(dim=1, codim=1, weight=1.0, V0=None, box=None, xi_scale=1.0):
    """Convenience constructor for ``weight*|(x_1..x_p)| + V0`` with canonical g.

    ``V0`` may be a :class:`Polynomial`, a number or a config field spec.
    """
    if V0 is None:
        V0 = 0.0
    if not isinstance(V0, Polynomial):
        V0 = Polynomial.from_spec(V0, dim)
    if box is None:
        box = [[-5.0, 5.0]] * dim
    g = tuple(Polynomial.coordinate(dim, i) for i in range(codim))
    return ConicalPotential(dim, codim, Polynomial.constant(dim, weight), V0, g,
                            np.asarray(box, dtype=float), xi_scale=xi_scale)


def smooth(V0, dim=1, box=None):
    """A potential with ``w = 0`` (no singular part)."""
    return cone(dim=dim, codim=1, weight=0.0, V0=V0, box=box)


def harmonic(dim=1, box=None):
    terms = {}
    for i in range(dim):
        e = [0] * dim
        e[i] = 2
        terms[tuple(e)] = 0.5
    return smooth(Polynomial(dim, terms), dim=dim, box=box)


def free(dim=1, box=None):
    return smooth(0.0, dim=dim, box=box)
