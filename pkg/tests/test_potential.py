import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conicwigner.errors import NonGenericPoint, OnSingularSet, OutOfBox
from conicwigner.potential import ConicalPotential, Polynomial, cone, potential_from_spec

X1, X2 = sp.symbols("x1 x2")


def _sympy_poly(poly):
    syms = (X1, X2)[: poly.dim]
    expr = 0
    for exps, c in poly.terms.items():
        term = c
        for s, e in zip(syms, exps):
            term = term * s ** e
        expr = expr + term
    return expr


def tilted_cone():
    """2D conical potential with non-constant weight and curved S."""
    w = Polynomial(2, {(0, 0): 1.5, (1, 0): 0.2, (0, 2): 0.1})
    V0 = Polynomial(2, {(2, 0): 0.5, (1, 1): -0.3, (0, 3): 0.05})
    g = (Polynomial(2, {(1, 0): 1.0, (0, 2): 0.25, (0, 0): -0.1}),)
    return ConicalPotential(2, 1, w, V0, g, np.array([[-2.0, 2.0], [-2.0, 2.0]]))


def _sympy_V(pot):
    gs = [_sympy_poly(gi) for gi in pot.g]
    return _sympy_poly(pot.w) * sp.sqrt(sum(gi ** 2 for gi in gs)) + _sympy_poly(pot.V0)


def test_eval_examples():
    pot = cone(1, box=[[-3, 3]])
    assert pot.eval_V(np.array([0.0])) == 0.0
    assert pot.eval_V(np.array([-2.0])) == 2.0
    assert pot.eval_V(np.array([1.5])) == 1.5
    with pytest.raises(OutOfBox):
        pot.eval_V(np.array([3.5]))


def test_grad_examples():
    assert cone(1).grad_V(np.array([-1.0])).tolist() == [-1.0]
    assert cone(2, 1, box=[[-9, 9]] * 2).grad_V(np.array([-1.0, 7.0])).tolist() == [-1.0, 0.0]
    pot = cone(1, V0={"poly": [[0.5, [2]]]})
    assert pot.grad_V(np.array([2.0]))[0] == pytest.approx(3.0)
    with pytest.raises(OnSingularSet):
        cone(1).grad_V(np.array([0.0]))


def test_one_sided_force_examples():
    pot = cone(1)
    assert pot.one_sided_force(np.array([0.0]), np.array([1.0]), 1).tolist() == [-1.0]
    assert pot.one_sided_force(np.array([0.0]), np.array([1.0]), -1).tolist() == [1.0]
    pot2 = cone(2, 1)
    f = pot2.one_sided_force(np.zeros(2), np.array([np.sqrt(3), 0.5]), 1)
    np.testing.assert_allclose(f, [-1.0, 0.0])
    with pytest.raises(NonGenericPoint):
        pot.one_sided_force(np.array([0.0]), np.array([0.0]), 1)


def test_hessian_examples():
    harm = cone(1, weight=0.0, V0={"poly": [[0.5, [2]]]})
    assert harm.hessian_V(np.array([0.0]))[0, 0] == pytest.approx(1.0)
    assert cone(1).hessian_V(np.array([0.5]))[0, 0] == 0.0
    quartic = cone(1, V0={"poly": [[1.0, [4]]]})
    assert quartic.hessian_V(np.array([1.0]))[0, 0] == pytest.approx(12.0)


def test_B1_examples():
    assert cone(1).singular_hessian_B1(np.array([0.0]), np.array([1.0]))[0, 0] == 0.0
    np.testing.assert_allclose(cone(2, 1).singular_hessian_B1(np.zeros(2), np.array([1.0, 0.0])), 0.0)
    np.testing.assert_allclose(cone(2, 2).singular_hessian_B1(np.zeros(2), np.array([1.0, 0.0])),
                               np.diag([0.0, 1.0]))


def test_B1_symbolic_projection():
    # w/|v| (dg^T dg - dg^T w w^T dg) with v = dg xi, w = v/|v|, checked with sympy
    pot = cone(2, 2)
    xi = np.array([0.6, -0.8])
    dg = sp.eye(2)
    v = dg * sp.Matrix(xi)
    om = v / v.norm()
    expect = (dg.T * dg - dg.T * om * om.T * dg) / v.norm()
    np.testing.assert_allclose(pot.singular_hessian_B1(np.zeros(2), xi),
                               np.array(expect.evalf(), dtype=float), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.8, 1.8), st.floats(-1.8, 1.8))
def test_gradient_and_hessian_match_sympy(a, b):
    pot = tilted_cone()
    x = np.array([a, b])
    if pot.g_norm(x) < 1e-3:
        return
    V = _sympy_V(pot)
    sub = {X1: a, X2: b}
    grad = [float(sp.diff(V, s).evalf(subs=sub)) for s in (X1, X2)]
    hess = [[float(sp.diff(V, s, t).evalf(subs=sub)) for t in (X1, X2)] for s in (X1, X2)]
    np.testing.assert_allclose(pot.grad_V(x), grad, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(pot.hessian_V(x), hess, rtol=1e-8, atol=1e-8)
    assert float(pot.eval_V(x)) == pytest.approx(float(V.evalf(subs=sub)), rel=1e-12, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.9, 1.9), st.floats(-1.9, 1.9))
def test_continuity_bound(a, b):
    pot = tilted_cone()
    x = np.array([a, b])
    wmax = float(np.max(np.abs(pot.w(pot.lattice(21)))))
    assert abs(pot.eval_V(x) - pot.V0(x)) <= wmax * pot.g_norm(x) + 1e-14


def test_gradient_finite_differences():
    pot = tilted_cone()
    x = np.array([0.7, -0.4])
    h = 1e-5
    fd = [(pot.eval_V(x + h * e) - pot.eval_V(x - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(pot.grad_V(x), fd, atol=1e-8)
    fdh = np.array([(pot.grad_V(x + h * e) - pot.grad_V(x - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(pot.hessian_V(x), fdh, atol=1e-6)


def test_one_sided_limit_of_gradient():
    pot = tilted_cone()
    # a point of S and an outgoing direction
    x0 = np.array([0.1 - 0.25 * 0.3 ** 2, 0.3])
    xi = np.array([1.0, 0.2])
    force = pot.one_sided_force(x0, xi, 1)
    errs = [np.linalg.norm(-pot.grad_V(x0 + s * xi) - force) for s in (1e-3, 1e-4, 1e-5)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-4


def test_tolerances_and_load_checks():
    pot = cone(2, 1, box=[[-1, 1], [-2, 2]])
    assert pot.g_zero_tol == pytest.approx(1e-12 * np.hypot(2, 4))
    assert pot.sstar_tol == 1e-8
    assert pot.check_rank() > 1e-6
    degenerate = ConicalPotential(1, 1, Polynomial.constant(1, 1.0), Polynomial.constant(1, 0.0),
                                  (Polynomial(1, {(2,): 1.0}),), np.array([[-1.0, 1.0]]))
    with pytest.raises(ValueError, match="rank"):
        degenerate.check_rank()
    with pytest.raises(ValueError, match="positive"):
        cone(1, weight=-1.0).check_positive_weight()


def test_spec_round_trip():
    pot = tilted_cone()
    again = potential_from_spec(pot.to_spec())
    x = np.array([[0.3, 0.2], [-1.0, 1.5]])
    np.testing.assert_allclose(again.eval_V(x), pot.eval_V(x))
    assert potential_from_spec({"dim": 1, "box": [[-1, 1]]}).eval_V(np.array([-0.5])) == 0.5
