"""Catalog of phase-space test symbols with closed-form derivatives.

Every catalog symbol is separable,

    a(x, xi) = amp * prod_i f_i(x_i) * prod_i h_i(xi_i),

with each one-dimensional factor of the form ``P(u - c) exp(-(u - c)^2 / 2 s^2)``
(``s = inf`` meaning no Gaussian envelope). Derivatives and products stay
inside this family, so ``M(a)`` is computed from exact derivatives.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.polynomial import Polynomial as P1

ENVELOPE_REACH = 12.0


@dataclass(frozen=True)
class Factor:
    """``poly(u - center) * exp(-(u - center)^2 / (2 width^2))``."""

    poly: P1
    center: float = 0.0
    width: float = math.inf

    def __call__(self, u):
        v = np.asarray(u, dtype=float) - self.center
        out = self.poly(v)
        if math.isfinite(self.width):
            out = out * np.exp(-0.5 * (v / self.width) ** 2)
        return out

    @property
    def bounded(self):
        return math.isfinite(self.width) or self.poly.degree() == 0

    def derivative(self, order=1):
        f = self
        for _ in range(order):
            dp = f.poly.deriv()
            if math.isfinite(f.width):
                dp = dp - f.poly * P1([0.0, 1.0 / f.width ** 2])
            f = Factor(_trim(dp), f.center, f.width)
        return f

    def recenter(self, c):
        shifted = self.poly(P1([c - self.center, 1.0]))
        return Factor(_trim(shifted), c, self.width)

    def __mul__(self, other):
        if not math.isfinite(self.width) and not math.isfinite(other.width):
            c = self.center
            return Factor(_trim(self.poly * other.recenter(c).poly), c, math.inf)
        if not math.isfinite(self.width):
            return other * self
        if not math.isfinite(other.width):
            c = self.center
            return Factor(_trim(self.poly * other.recenter(c).poly), c, self.width)
        a1, a2 = self.width ** -2, other.width ** -2
        w = (a1 + a2) ** -0.5
        c = (self.center * a1 + other.center * a2) / (a1 + a2)
        k = math.exp(-0.5 * (self.center - other.center) ** 2 / (self.width ** 2 + other.width ** 2))
        poly = self.recenter(c).poly * other.recenter(c).poly * k
        return Factor(_trim(poly), c, w)

    def extent(self):
        """Interval carrying essentially all of ``|factor|``, or None if unbounded."""
        if not math.isfinite(self.width):
            return None
        deg = self.poly.degree()
        r = self.width * (ENVELOPE_REACH + math.sqrt(2 * max(deg, 0)))
        return self.center - r, self.center + r


def _trim(p):
    coef = np.trim_zeros(np.asarray(p.coef, dtype=float), "b")
    return P1(coef if coef.size else [0.0])


ONE = P1([1.0])


@dataclass(frozen=True)
class SymbolSpec:
    amp: float
    x_factors: tuple
    xi_factors: tuple
    kind: str = "custom"
    label: str = ""

    @property
    def dim(self):
        return len(self.x_factors)

    def __call__(self, x, xi):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        out = self.amp
        for i, f in enumerate(self.x_factors):
            out = out * f(x[..., i])
        for i, h in enumerate(self.xi_factors):
            out = out * h(xi[..., i])
        return out

    def x_profile(self, axes):
        """Per-axis factor values on 1D coordinate arrays (amplitude excluded)."""
        return [f(np.asarray(ax)) for f, ax in zip(self.x_factors, axes)]

    def xi_profile(self, axes):
        return [h(np.asarray(ax)) for h, ax in zip(self.xi_factors, axes)]

    def d_xi(self, alpha):
        hs = tuple(h.derivative(a) for h, a in zip(self.xi_factors, alpha))
        return replace(self, xi_factors=hs, label=f"{self.label}_dxi{tuple(alpha)}")

    def d_x(self, alpha):
        fs = tuple(f.derivative(a) for f, a in zip(self.x_factors, alpha))
        return replace(self, x_factors=fs, label=f"{self.label}_dx{tuple(alpha)}")

    def scaled(self, c):
        return replace(self, amp=self.amp * c)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scaled(float(other))
        return product(self, other)

    __rmul__ = __mul__

    @property
    def bounded(self):
        return all(f.bounded for f in self.x_factors + self.xi_factors)

    def clipped_fraction(self, x_window, xi_window):
        """Fraction of the mass of ``|a|`` lying outside the given windows.

        Windows are lists of ``(lo, hi)`` per axis. Factors without an envelope
        are treated as filling the window.
        """
        keep = 1.0
        for f, (lo, hi) in zip(self.x_factors + self.xi_factors, list(x_window) + list(xi_window)):
            ext = f.extent()
            if ext is None:
                continue
            u = np.linspace(ext[0], ext[1], 4001)
            vals = np.abs(f(u))
            total = np.trapezoid(vals, u)
            if total == 0:
                continue
            mask = (u >= lo) & (u <= hi)
            if not mask.any():
                keep = 0.0
                break
            frac_in = np.trapezoid(np.where(mask, vals, 0.0), u) / total
            keep *= min(1.0, frac_in)
        return 1.0 - keep

    def to_dict(self):
        def fac(f):
            return {"poly": list(map(float, f.poly.coef)), "center": f.center,
                    "width": None if not math.isfinite(f.width) else f.width}
        return {"kind": self.kind, "label": self.label, "amp": self.amp,
                "x": [fac(f) for f in self.x_factors], "xi": [fac(h) for h in self.xi_factors]}


def _flat(dim):
    return tuple(Factor(ONE) for _ in range(dim))


def constant(dim, value=1.0, label="const"):
    return SymbolSpec(float(value), _flat(dim), _flat(dim), "constant", label)


def coordinate(dim, which, axis, label=None):
    """The linear symbol ``x_axis`` (``which="x"``) or ``xi_axis`` (``which="xi"``)."""
    lin = Factor(P1([0.0, 1.0]))
    fs = list(_flat(dim))
    hs = list(_flat(dim))
    if which == "x":
        fs[axis] = lin
    elif which == "xi":
        hs[axis] = lin
    else:
        raise ValueError("which must be 'x' or 'xi'")
    return SymbolSpec(1.0, tuple(fs), tuple(hs), "coordinate", label or f"{which}{axis}")


def gaussian(center_x, center_xi, width_x=1.0, width_xi=1.0, amp=1.0, label="gauss"):
    """Phase-space Gaussian bump ``amp * exp(-|x-q|^2/2sx^2 - |xi-p|^2/2sxi^2)``."""
    cx = np.atleast_1d(np.asarray(center_x, float))
    cp = np.atleast_1d(np.asarray(center_xi, float))
    sx = np.broadcast_to(np.asarray(width_x, float), cx.shape)
    sp = np.broadcast_to(np.asarray(width_xi, float), cp.shape)
    fs = tuple(Factor(ONE, float(c), float(s)) for c, s in zip(cx, sx))
    hs = tuple(Factor(ONE, float(c), float(s)) for c, s in zip(cp, sp))
    return SymbolSpec(float(amp), fs, hs, "gaussian", label)


def monomial_cutoff(center_x, center_xi, powers_x, powers_xi, width_x=1.0, width_xi=1.0,
                    amp=1.0, label="mono"):
    """``amp * (x-q)^alpha (xi-p)^beta`` times a Gaussian cutoff around ``(q, p)``."""
    base = gaussian(center_x, center_xi, width_x, width_xi, amp)
    fs = tuple(Factor(P1([0.0] * int(k) + [1.0]), f.center, f.width) for f, k in zip(base.x_factors, powers_x))
    hs = tuple(Factor(P1([0.0] * int(k) + [1.0]), h.center, h.width) for h, k in zip(base.xi_factors, powers_xi))
    return SymbolSpec(base.amp, fs, hs, "monomial_cutoff", label)


def product(a, b, label=None):
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    fs = tuple(f * g for f, g in zip(a.x_factors, b.x_factors))
    hs = tuple(f * g for f, g in zip(a.xi_factors, b.xi_factors))
    return SymbolSpec(a.amp * b.amp, fs, hs, "product", label or f"{a.label}*{b.label}")


def symbol_from_spec(spec, dim):
    """Build a catalog symbol from a JSON block ``{"kind": ..., ...}``."""
    kind = spec["kind"]
    label = spec.get("id", spec.get("label", kind))
    if kind == "constant":
        return constant(dim, spec.get("value", 1.0), label=label)
    if kind == "coordinate":
        return coordinate(dim, spec["which"], spec["axis"], label=label)
    if kind == "gaussian":
        return gaussian(spec["center_x"], spec["center_xi"], spec.get("width_x", 1.0),
                        spec.get("width_xi", 1.0), spec.get("amp", 1.0), label=label)
    if kind == "monomial_cutoff":
        return monomial_cutoff(spec["center_x"], spec["center_xi"], spec["powers_x"], spec["powers_xi"],
                               spec.get("width_x", 1.0), spec.get("width_xi", 1.0),
                               spec.get("amp", 1.0), label=label)
    if kind == "product":
        a, b = (symbol_from_spec(s, dim) for s in spec["factors"])
        return product(a, b, label=label)
    raise ValueError(f"unknown symbol kind {kind!r}")


def _lattice_axis(f, window, n):
    ext = f.extent()
    lo, hi = ext if ext is not None else window
    return np.union1d(np.linspace(lo, hi, n), [f.center])


def symbol_norm_M(a, xi_window=(-5.0, 5.0), x_window=(-5.0, 5.0), n=801):
    """``max_{|alpha| <= d+1} sup |d_xi^alpha a| (1 + |xi|)^(d+1)`` on a sampling lattice.

    The lattice covers each factor's envelope, or the given window for
    factors without one.
    """
    d = a.dim
    x_sup = abs(a.amp)
    for f in a.x_factors:
        x_sup *= float(np.max(np.abs(f(_lattice_axis(f, x_window, n)))))
    if x_sup == 0.0:
        return 0.0
    n_xi = n if d == 1 else max(121, int(round(n ** (1.0 / d) * 4)))
    axes = [_lattice_axis(h, xi_window, n_xi) for h in a.xi_factors]
    mesh = np.meshgrid(*axes, indexing="ij")
    weight = (1.0 + np.sqrt(sum(m * m for m in mesh))) ** (d + 1)
    best = 0.0
    for order in range(d + 2):
        for alpha in itertools.product(range(order + 1), repeat=d):
            if sum(alpha) != order:
                continue
            vals = np.ones_like(weight)
            for i, (h, k) in enumerate(zip(a.xi_factors, alpha)):
                shape = [1] * d
                shape[i] = -1
                vals = vals * h.derivative(k)(axes[i]).reshape(shape)
            best = max(best, float(np.max(np.abs(vals) * weight)))
    return x_sup * best
