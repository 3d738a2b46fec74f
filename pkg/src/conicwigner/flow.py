"""Broken Hamiltonian flow through conical singularities.

Away from S the flow is the ordinary Hamiltonian flow of
``|xi|^2/2 + V(x)``, integrated with the Dormand-Prince 5(4) pair and its
quartic dense output. When a trajectory reaches S at a point of S*, the
outgoing branch is started from the desingularized system (see
:func:`launch_from_singularity`) and smooth integration resumes on the far
side.

Codimension-one potentials are integrated with the smooth extension
``sigma*w*g + V0`` of the branch the segment lives on, so the event
``g(x_t) = 0`` is located on a smooth dense output. For codimension
``p >= 2`` a crossing is declared when a local minimum of ``|g(x_t)|``
falls below ``hit_tol``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.integrate import RK45, OdeSolution
from scipy.optimize import brentq

from .errors import (
    LaunchWindowTooLarge,
    NonGenericCrossing,
    NonGenericPoint,
    NumericalFailure,
    OutOfBox,
    StepSizeUnderflow,
)

DEFAULT_TOL = 1e-12
LAUNCH_NODES = 24
LAUNCH_HALVINGS = 8


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float)).copy()
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float)).copy()
        if x.shape != xi.shape or x.ndim != 1:
            raise ValueError("x and xi must be vectors of equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xi))):
            raise ValueError("phase point has non-finite components")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)

    @classmethod
    def from_array(cls, y):
        y = np.asarray(y, dtype=float)
        d = y.size // 2
        return cls(y[:d], y[d:])

    @property
    def dim(self):
        return self.x.size

    def as_array(self):
        return np.concatenate([self.x, self.xi])

    def reflected(self):
        return PhasePoint(self.x, -self.xi)


@dataclass(frozen=True)
class CrossingEvent:
    t_cross: float
    point: PhasePoint
    omega0: np.ndarray | None = None
    generic: bool = True
    dg_xi_norm: float = float("nan")

    def to_dict(self):
        return {
            "t_cross": self.t_cross,
            "x": self.point.x.tolist(),
            "xi": self.point.xi.tolist(),
            "omega0": None if self.omega0 is None else np.asarray(self.omega0).tolist(),
            "generic": self.generic,
            "dg_xi_norm": self.dg_xi_norm,
        }


class Segment:
    """A smooth piece of trajectory on ``[t0, t1]`` with dense output."""

    def __init__(self, t0, t1, interpolant, kind="smooth", y0=None, y1=None):
        self.t0 = float(t0)
        self.t1 = float(t1)
        self._interp = interpolant
        self.kind = kind
        self.y0 = None if y0 is None else np.asarray(y0, dtype=float)
        self.y1 = None if y1 is None else np.asarray(y1, dtype=float)

    def __call__(self, t):
        t = float(t)
        if self.y0 is not None and t == self.t0:
            return self.y0.copy()
        if self.y1 is not None and t == self.t1:
            return self.y1.copy()
        return np.asarray(self._interp(t), dtype=float)

    def __repr__(self):
        return f"Segment({self.kind}, [{self.t0:.6g}, {self.t1:.6g}])"


@dataclass
class BrokenTrajectory:
    segments: list = field(default_factory=list)
    crossings: list = field(default_factory=list)
    tau: float | None = None
    min_g: float = float("inf")
    near_singular: bool = False
    reflected: bool = False

    @property
    def t_start(self):
        t = self.segments[0].t0
        return -t if self.reflected else t

    @property
    def t_end(self):
        t = self.segments[-1].t1
        return -t if self.reflected else t

    def _forward(self, t):
        for seg in self.segments:
            if seg.t0 <= t <= seg.t1:
                return seg(t)
        lo, hi = self.segments[0].t0, self.segments[-1].t1
        if np.isclose(t, lo, rtol=0, atol=1e-14):
            return self.segments[0](lo)
        if np.isclose(t, hi, rtol=0, atol=1e-14):
            return self.segments[-1](hi)
        raise ValueError(f"time {t} outside trajectory range [{lo}, {hi}]")

    def __call__(self, t):
        """State ``(x, xi)`` as a flat array at time ``t``."""
        if not self.reflected:
            return self._forward(t)
        y = self._forward(-t)
        d = y.size // 2
        y[d:] = -y[d:]
        return y

    def sample(self, times):
        return np.array([self(t) for t in times])


def hamiltonian(pot, x, xi):
    xi = np.asarray(xi, dtype=float)
    return 0.5 * np.sum(xi * xi, axis=-1) + pot.eval_V(x, check_box=False)


def hamiltonian_rhs(pot, p):
    """Hamiltonian vector field ``(xi, -grad V(x))`` off S."""
    return p.xi.copy(), -pot.grad_V(p.x)


def _project_to_S(pot, x, iters=3):
    for _ in range(iters):
        gv = pot.g_val(x)
        if np.linalg.norm(gv) <= 1e-3 * pot.g_zero_tol:
            break
        dg = pot.dg(x)
        x = x - dg.T @ np.linalg.solve(dg @ dg.T, gv)
    return x


def _sign_quantity(pot, y):
    """``(dg(x) xi) . g(x)``: negative on incoming branches, positive on outgoing ones."""
    d = pot.dim
    x, xi = y[:d], y[d:]
    return float(pot.g_val(x) @ (pot.dg(x) @ xi))


def integrate_smooth(pot, p0, t_span, tol=DEFAULT_TOL, max_steps=200000, n_probe=4):
    """Integrate the smooth Hamiltonian field from ``p0`` until ``t_span[1]`` or S.

    Returns ``(segment, event)`` where ``event`` is a :class:`CrossingEvent`
    (not yet classified) if the trajectory reached S, else ``None``.
    Also returns nothing else; the minimum of ``|g|`` seen is stored on the
    segment as ``segment.min_g``.
    """
    t0, t1 = map(float, t_span)
    if t1 < t0:
        raise ValueError("integrate_smooth runs forward in time; reflect momenta for backward flow")
    d = pot.dim
    y0 = p0.as_array()
    x0 = y0[:d]
    if not pot.in_box(x0):
        raise OutOfBox(f"start point {x0.tolist()} outside working box")
    g0 = pot.g_val(x0)
    smooth = pot.is_smooth
    if not smooth and np.linalg.norm(g0) <= pot.g_zero_tol:
        raise ValueError("integrate_smooth needs a start point off S")
    if t1 == t0:
        seg = Segment(t0, t1, lambda t: y0.copy(), y0=y0, y1=y0)
        seg.min_g = float(np.linalg.norm(g0))
        return seg, None

    if smooth:
        sigma = None

        def fun(t, y):
            return np.concatenate([y[d:], -pot.grad_raw(y[:d])])
    elif pot.codim == 1:
        sigma = 1.0 if g0[0] > 0 else -1.0

        def fun(t, y):
            return np.concatenate([y[d:], -pot.branch_grad(y[:d], sigma)])
    else:
        sigma = None

        def fun(t, y):
            return np.concatenate([y[d:], -pot.grad_raw(y[:d])])

    lo, hi = pot.box[:, 0], pot.box[:, 1]

    def box_margin(y):
        x = y[:d]
        return float(np.min(np.minimum(x - lo, hi - x)))

    def g_first(y):
        return float(pot.g[0](y[:d]))

    solver = RK45(fun, t0, y0, t1, rtol=tol, atol=tol)
    ts = [t0]
    interps = []
    min_g = float(np.linalg.norm(g0))
    event = None
    t_end, y_end = t1, None
    for _ in range(max_steps):
        if solver.status != "running":
            break
        t_prev, y_prev = solver.t, solver.y.copy()
        msg = solver.step()
        if solver.status == "failed":
            raise StepSizeUnderflow(f"RK45 failed at t={solver.t:.16g}: {msg}")
        dense = solver.dense_output()
        t_new = solver.t
        probe_t = np.linspace(t_prev, t_new, n_probe + 2)
        probe_y = [y_prev] + [dense(tt) for tt in probe_t[1:-1]] + [solver.y.copy()]
        found = None  # (time, kind)

        # leaving the box
        margins = [box_margin(y) for y in probe_y]
        for k in range(len(probe_t) - 1):
            if margins[k] >= 0 > margins[k + 1]:
                tb = brentq(lambda tt: box_margin(dense(tt)), probe_t[k], probe_t[k + 1], xtol=1e-15)
                found = (tb, "box")
                break
        # sign change of g (codimension one)
        if sigma is not None:
            gs = [g_first(y) for y in probe_y]
            for k in range(len(probe_t) - 1):
                if gs[k] == 0.0 or gs[k] * gs[k + 1] < 0:
                    if gs[k] == 0.0:
                        tc = probe_t[k]
                    else:
                        tc = brentq(lambda tt: g_first(dense(tt)), probe_t[k], probe_t[k + 1],
                                    xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)
                    if found is None or tc < found[0]:
                        found = (tc, "cross")
                    break
        # local minimum of |g| (s goes from - to +)
        ss = [0.0] * len(probe_y) if smooth else [_sign_quantity(pot, y) for y in probe_y]
        for k in range(len(probe_t) - 1):
            if ss[k] < 0 <= ss[k + 1]:
                tm = brentq(lambda tt: _sign_quantity(pot, dense(tt)), probe_t[k], probe_t[k + 1],
                            xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=200)
                gmin = float(pot.g_norm(dense(tm)[:d]))
                min_g = min(min_g, gmin)
                if gmin < pot.hit_tol and (found is None or tm < found[0]):
                    found = (tm, "cross")
                    break
        for y in probe_y:
            min_g = min(min_g, float(pot.g_norm(y[:d])))

        if found is not None:
            tf, kind = found
            yf = dense(tf)
            interps.append(dense)
            ts.append(tf)
            if kind == "box":
                raise OutOfBox(f"trajectory left the working box at t={tf:.12g}, x={yf[:d].tolist()}")
            xc = _project_to_S(pot, yf[:d].copy())
            yf = np.concatenate([xc, yf[d:]])
            event = CrossingEvent(tf, PhasePoint(xc, yf[d:]))
            t_end, y_end = tf, yf
            break
        interps.append(dense)
        ts.append(t_new)
        if solver.status == "finished":
            y_end = solver.y.copy()
            break
    else:
        raise StepSizeUnderflow(f"exceeded {max_steps} steps before t={t1}")

    sol = OdeSolution(np.array(ts), interps)
    seg = Segment(t0, t_end, sol, kind="smooth", y0=y0, y1=y_end)
    seg.min_g = min_g
    return seg, event


def classify_crossing(pot, ev, before=None):
    """Decide genericity of a crossing and attach ``omega0``.

    ``before`` is an optional state array shortly before the crossing used to
    check the incoming sign ``(dg xi).g < 0``. Raises
    :class:`NonGenericCrossing` off S*.
    """
    x, xi = ev.point.x, ev.point.xi
    v = pot.dg(x) @ xi
    nv = float(np.linalg.norm(v))
    if nv <= pot.sstar_tol:
        raise NonGenericCrossing(
            f"trajectory reaches S outside S* at t={ev.t_cross:.12g}, x={x.tolist()}, xi={xi.tolist()} "
            f"(|dg xi|={nv:.3e}); the continuation is not unique",
            event=CrossingEvent(ev.t_cross, ev.point, None, False, nv),
        )
    if before is not None and _sign_quantity(pot, before) >= 0:
        raise NumericalFailure(f"incoming sign criterion violated before crossing at t={ev.t_cross:.12g}")
    return CrossingEvent(ev.t_cross, ev.point, v / nv, True, nv)


@lru_cache(maxsize=8)
def _cheb_operators(n):
    """Lobatto nodes on [-1, 1], cumulative integration matrix from -1, coefficient map."""
    u = -np.cos(np.pi * np.arange(n + 1) / n)
    vander = C.chebvander(u, n)
    to_coef = np.linalg.inv(vander)
    integ = C.chebval(u, C.chebint(to_coef, lbnd=-1)).T
    return u, integ, to_coef


def _launch_once(pot, x0, xi0, side, tau, n_nodes, max_iter, iter_tol):
    u, integ, to_coef = _cheb_operators(n_nodes)
    s = 0.5 * tau * (u + 1.0)
    Q = 0.5 * tau * integ
    dg0 = pot.dg(x0)
    c = dg0 @ xi0
    cn = np.linalg.norm(c)
    ball = 0.5 * cn
    m = u.size
    X = np.tile(x0, (m, 1))
    Xi = np.tile(xi0, (m, 1))
    Y = np.zeros((m, pot.codim))
    scale = 1.0 + np.abs(x0).max() + np.abs(xi0).max()
    for it in range(max_iter):
        dgX = pot.dg(X)
        G = np.einsum("kpd,kd->kp", dgX, Xi) - c
        QG = Q @ G
        Ynew = np.zeros_like(Y)
        Ynew[1:] = QG[1:] / s[1:, None]
        if not np.all(np.isfinite(Ynew)) or np.max(np.linalg.norm(Ynew, axis=1)) >= ball:
            raise LaunchWindowTooLarge(f"y left the contraction ball (tau={tau:.3e})")
        cy = c + Ynew
        cyn = np.linalg.norm(cy, axis=1)
        F = (-pot.V0.gradient(X)
             - (s * cyn)[:, None] * pot.w.gradient(X)
             - side * pot.w(X)[:, None] * np.einsum("kpd,kp->kd", dgX, cy / cyn[:, None]))
        Xnew = x0 + side * (Q @ Xi)
        Xinew = xi0 + side * (Q @ F)
        delta = max(np.abs(Xnew - X).max(), np.abs(Xinew - Xi).max(), np.abs(Ynew - Y).max() if it else 0.0)
        X, Xi, Y = Xnew, Xinew, Ynew
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Xi))):
            raise LaunchWindowTooLarge(f"fixed-point iteration diverged (tau={tau:.3e})")
        if it > 0 and delta <= iter_tol * scale:
            break
    else:
        raise LaunchWindowTooLarge(f"fixed-point iteration did not converge in {max_iter} sweeps (tau={tau:.3e})")
    return s, X, Xi, Y, to_coef


def launch_from_singularity(pot, p0, side=1, tau_launch=None, n_nodes=LAUNCH_NODES,
                            max_iter=200, iter_tol=1e-15, t_offset=0.0):
    """Branch of the broken flow leaving (``side=+1``) or entering (``side=-1``) S* at ``p0``.

    With ``y_t = g(x_t)/t - dg(x0) xi0`` the system becomes regular at
    ``t = 0``; it is solved by Picard iteration of its integral form on
    Chebyshev-Lobatto nodes over ``|t| <= tau_launch``. If ``y`` leaves the
    ball ``|y| < |dg(x0) xi0|/2`` the window is halved, up to eight times.

    Returns a :class:`Segment` over ``[t_offset, t_offset + tau]`` for
    ``side=+1`` and ``[t_offset - tau, t_offset]`` for ``side=-1``.
    """
    if side not in (1, -1):
        raise ValueError("side must be +1 or -1")
    x0, xi0 = p0.x, p0.xi
    if pot.g_norm(x0) > pot.g_zero_tol:
        raise ValueError(f"launch point {x0.tolist()} is not on S")
    pot.omega0(x0, xi0)  # raises NonGenericPoint off S*
    if tau_launch is None:
        tau_launch = default_launch_window(pot, p0)
    tau = float(tau_launch)
    if tau == 0.0:
        y = p0.as_array()
        return Segment(t_offset, t_offset, lambda t: y.copy(), kind="launch", y0=y, y1=y)
    last = None
    for _ in range(LAUNCH_HALVINGS + 1):
        try:
            s, X, Xi, Y, to_coef = _launch_once(pot, x0, xi0, side, tau, n_nodes, max_iter, iter_tol)
            break
        except LaunchWindowTooLarge as exc:
            last = exc
            tau *= 0.5
    else:
        raise LaunchWindowTooLarge(f"{last}; gave up after {LAUNCH_HALVINGS} halvings")

    coef = to_coef @ np.hstack([X, Xi])

    def interp(t, coef=coef, tau=tau):
        sl = side * (t - t_offset)
        return C.chebval(2.0 * sl / tau - 1.0, coef)

    y0 = p0.as_array()
    y_far = np.concatenate([X[-1], Xi[-1]])
    if side == 1:
        seg = Segment(t_offset, t_offset + tau, interp, kind="launch", y0=y0, y1=y_far)
    else:
        seg = Segment(t_offset - tau, t_offset, interp, kind="launch", y0=y_far, y1=y0)
    seg.tau = tau
    seg.y_aux = Y
    return seg


def default_launch_window(pot, p):
    """``1e-3`` times the characteristic time ``|xi|/|force|`` at a point of S*."""
    force = pot.one_sided_force(p.x, p.xi, 1)
    fn = float(np.linalg.norm(force))
    xn = float(np.linalg.norm(p.xi))
    if fn == 0.0 or xn == 0.0:
        return 1e-3
    return 1e-3 * xn / fn


def _forward_flow(pot, p0, t, tol, tau_launch, max_crossings):
    traj = BrokenTrajectory()
    time = 0.0
    current = p0
    d = pot.dim
    if not pot.is_smooth and pot.g_norm(p0.x) <= pot.g_zero_tol:
        ev = classify_crossing(pot, CrossingEvent(0.0, p0))
        traj.crossings.append(ev)
        traj.tau = 0.0
        traj.min_g = 0.0
        if t == 0.0:
            y = p0.as_array()
            traj.segments.append(Segment(0.0, 0.0, lambda s: y.copy(), y0=y, y1=y))
            return p0, traj
        seg = launch_from_singularity(pot, p0, 1, _window(pot, p0, tau_launch, t), t_offset=0.0)
        traj.segments.append(seg)
        time = seg.t1
        current = PhasePoint.from_array(seg(seg.t1))
    for _ in range(max_crossings + 1):
        if time >= t:
            break
        seg, ev = integrate_smooth(pot, current, (time, t), tol=tol)
        traj.segments.append(seg)
        traj.min_g = min(traj.min_g, seg.min_g)
        if ev is None:
            time = t
            current = PhasePoint.from_array(seg(seg.t1))
            break
        before = seg(max(seg.t0, ev.t_cross - 1e-6 * max(1.0, abs(ev.t_cross))))
        ev = classify_crossing(pot, ev, before=before if seg.t1 - seg.t0 > 2e-6 else None)
        traj.crossings.append(ev)
        if traj.tau is None:
            traj.tau = ev.t_cross
        if ev.t_cross >= t:
            current = ev.point
            time = t
            break
        window = _window(pot, ev.point, tau_launch, t - ev.t_cross)
        lseg = launch_from_singularity(pot, ev.point, 1, window, t_offset=ev.t_cross)
        traj.segments.append(lseg)
        time = lseg.t1
        current = PhasePoint.from_array(lseg(lseg.t1))
    else:
        raise NumericalFailure(f"more than {max_crossings} crossings")
    hit = pot.hit_tol
    traj.near_singular = pot.codim >= 2 and hit <= traj.min_g <= 100 * hit
    if not pot.in_box(current.x):
        raise OutOfBox(f"trajectory left the working box (x={current.x.tolist()})")
    return current, traj


def _window(pot, p, tau_launch, remaining):
    tau = default_launch_window(pot, p) if tau_launch is None else float(tau_launch)
    return min(tau, remaining)


def flow_map(pot, p0, t, tol=DEFAULT_TOL, tau_launch=None, max_crossings=1000):
    """Evaluate the broken flow ``Phi^t(p0)``.

    Negative times use the reversibility ``Phi^{-t} = R Phi^t R`` with
    ``R(x, xi) = (x, -xi)``.

    Returns
    -------
    (PhasePoint, BrokenTrajectory)
    """
    if not isinstance(p0, PhasePoint):
        p0 = PhasePoint.from_array(p0)
    t = float(t)
    if t >= 0:
        return _forward_flow(pot, p0, t, tol, tau_launch, max_crossings)
    end, traj = _forward_flow(pot, p0.reflected(), -t, tol, tau_launch, max_crossings)
    traj.reflected = True
    traj.crossings = [
        CrossingEvent(-ev.t_cross, ev.point.reflected(),
                      None if ev.omega0 is None else -ev.omega0, ev.generic, ev.dg_xi_norm)
        for ev in traj.crossings
    ]
    if traj.tau is not None:
        traj.tau = -traj.tau
    return end.reflected(), traj


def variational_jacobian(pot, p0, t, h=1e-4, **flow_kw):
    """Central finite-difference Jacobian of ``Phi^t`` at ``p0``, shape ``(2d, 2d)``.

    Columns are ordered ``(d/dx_1 .. d/dx_d, d/dxi_1 .. d/dxi_d)``.
    """
    if not isinstance(p0, PhasePoint):
        p0 = PhasePoint.from_array(p0)
    y0 = p0.as_array()
    n = y0.size
    J = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        plus, _ = flow_map(pot, PhasePoint.from_array(y0 + e), t, **flow_kw)
        minus, _ = flow_map(pot, PhasePoint.from_array(y0 - e), t, **flow_kw)
        J[:, k] = (plus.as_array() - minus.as_array()) / (2 * h)
    return J


def flow_map_ensemble(pot, x, xi, t, tol=DEFAULT_TOL, n_probe=4):
    """``Phi^t`` for many starting points at once, shape ``(N, d)`` in and out.

    Smooth and codimension-one potentials are integrated as one stacked
    system; each particle carries the sign of the branch it lives on and is
    switched to the outgoing branch when ``g`` changes sign along it. The
    whole ensemble is rolled back to the earliest crossing in a step (on
    the dense output) and restarted there, so every crossing is resolved
    as in :func:`flow_map`. Particles starting on S, grazing S, or living
    in codimension ``p >= 2`` are handed to :func:`flow_map`.

    A :class:`NonGenericCrossing` carries the index of the offending
    particle in ``particle_index``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    t = float(t)
    if t < 0:
        ex, exi = flow_map_ensemble(pot, x, -xi, -t, tol, n_probe)
        return ex, -exi
    n_all, d = x.shape
    out_x, out_xi = x.copy(), xi.copy()
    if t == 0 or n_all == 0:
        return out_x, out_xi

    def scalar(i):
        try:
            end, _ = flow_map(pot, PhasePoint(x[i], xi[i]), t, tol=tol)
        except NonGenericCrossing as exc:
            exc.particle_index = int(i)
            raise
        out_x[i], out_xi[i] = end.x, end.xi

    smooth = pot.is_smooth
    if not smooth and pot.codim != 1:
        for i in range(n_all):
            scalar(i)
        return out_x, out_xi

    outside = ~pot.in_box(x)
    if np.any(outside):
        raise OutOfBox(f"start point {x[np.argmax(outside)].tolist()} outside working box")
    if smooth:
        batch = np.arange(n_all)
        sigma = np.ones(n_all)
    else:
        g0 = pot.g[0](x)
        on_s = np.abs(g0) <= pot.g_zero_tol
        for i in np.flatnonzero(on_s):
            scalar(i)
        batch = np.flatnonzero(~on_s)
        sigma = np.sign(g0[batch])
    lo, hi = pot.box[:, 0], pot.box[:, 1]
    g_fn = pot.g[0]
    Y = np.concatenate([x[batch], xi[batch]], axis=1)
    t_now = 0.0

    def fun(_, flat, sig):
        y = flat.reshape(-1, 2 * d)
        if smooth:
            force = -pot.grad_raw(y[:, :d])
        else:
            force = -pot.branch_grad(y[:, :d], sig[:, None])
        return np.concatenate([y[:, d:], force], axis=1).ravel()

    def s_quantity(y):
        return g_fn(y[:, :d]) * np.einsum("nd,nd->n", g_fn.gradient(y[:, :d]), y[:, d:])

    while t_now < t and batch.size:
        sig = sigma.copy()
        solver = RK45(lambda tt, f: fun(tt, f, sig), t_now, Y.ravel(), t, rtol=tol, atol=tol)
        restart = False
        while solver.status == "running":
            t_prev, y_prev = solver.t, solver.y.reshape(-1, 2 * d).copy()
            msg = solver.step()
            if solver.status == "failed":
                raise StepSizeUnderflow(f"RK45 failed at t={solver.t:.16g}: {msg}")
            dense = solver.dense_output()
            probe_t = np.linspace(t_prev, solver.t, n_probe + 2)
            probes = [y_prev] + [dense(tt).reshape(-1, 2 * d) for tt in probe_t[1:-1]]
            probes.append(solver.y.reshape(-1, 2 * d))
            for yk in probes[1:]:
                bad = np.any((yk[:, :d] < lo) | (yk[:, :d] > hi), axis=1)
                if np.any(bad):
                    i = batch[np.argmax(bad)]
                    raise OutOfBox(f"particle {i} left the working box")
            if smooth:
                continue
            gs = np.array([g_fn(yk[:, :d]) for yk in probes])
            ss = np.array([s_quantity(yk) for yk in probes])
            events = {}
            graze = []
            change = gs[:-1] * gs[1:] < 0
            # a particle just placed on S starts with |g| at round-off level
            change[0] &= np.abs(gs[0]) > pot.g_zero_tol
            ups = (ss[:-1] < 0) & (ss[1:] >= 0)
            ups[0] &= np.abs(gs[0]) > pot.g_zero_tol
            for j in np.flatnonzero(change.any(axis=0)):
                k = int(np.argmax(change[:, j]))

                def gj(tt, j=j):
                    return float(g_fn(dense(tt).reshape(-1, 2 * d)[j, :d]))
                events[j] = brentq(gj, probe_t[k], probe_t[k + 1], xtol=1e-16,
                                   rtol=4 * np.finfo(float).eps, maxiter=200)
            for j in np.flatnonzero(ups.any(axis=0) & ~change.any(axis=0)):
                for k in np.flatnonzero(ups[:, j]):
                    def sj(tt, j=j):
                        return float(s_quantity(dense(tt).reshape(-1, 2 * d)[j:j + 1])[0])
                    tm = brentq(sj, probe_t[k], probe_t[k + 1], xtol=1e-16,
                                rtol=4 * np.finfo(float).eps, maxiter=200)
                    if abs(float(g_fn(dense(tm).reshape(-1, 2 * d)[j, :d]))) < pot.hit_tol:
                        graze.append(j)
                        break
            if graze:
                for j in graze:
                    scalar(batch[j])
                keep = np.setdiff1d(np.arange(batch.size), graze)
                batch, sigma = batch[keep], sigma[keep]
                Y = y_prev[keep]
                t_now = t_prev
                restart = True
                break
            if events:
                t_star = min(events.values())
                Y = dense(t_star).reshape(-1, 2 * d).copy()
                for j, tj in events.items():
                    if tj > t_star + 1e-14 * max(1.0, t_star):
                        continue
                    xc = Y[j, :d]
                    for _ in range(3):
                        gv = float(g_fn(xc))
                        if abs(gv) <= 1e-3 * pot.g_zero_tol:
                            break
                        grad = g_fn.gradient(xc)
                        xc = xc - gv * grad / (grad @ grad)
                    Y[j, :d] = xc
                    speed = float(g_fn.gradient(xc) @ Y[j, d:])
                    if abs(speed) <= pot.sstar_tol:
                        exc = NonGenericCrossing(
                            f"|dg xi| = {abs(speed):.3e} <= sstar_tol at t={tj:.12g}")
                        exc.particle_index = int(batch[j])
                        raise exc
                    sigma[j] = np.sign(speed)
                t_now = t_star
                restart = True
                break
        if not restart:
            Y = solver.y.reshape(-1, 2 * d)
            t_now = t
    out_x[batch], out_xi[batch] = Y[:, :d], Y[:, d:]
    return out_x, out_xi
