import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conicwigner.errors import NonGenericCrossing, NonGenericPoint, OnSingularSet, OutOfBox
from conicwigner.flow import (CrossingEvent, PhasePoint, classify_crossing, flow_map, flow_map_ensemble, hamiltonian,
                              hamiltonian_rhs, integrate_smooth, launch_from_singularity,
                              variational_jacobian)
from conicwigner.potential import cone, free, harmonic

SQ3 = math.sqrt(3.0)
T_CROSS = SQ3 - 1.0


def broken_parabola(t):
    """V=|x| from (-1, 1): incoming parabola, then the mirrored outgoing one."""
    if t <= T_CROSS:
        return -1.0 + t + 0.5 * t * t, 1.0 + t
    s = t - T_CROSS
    return SQ3 * s - 0.5 * s * s, SQ3 - s


def test_phase_point_validation():
    with pytest.raises(ValueError):
        PhasePoint([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        PhasePoint([np.nan], [1.0])
    p = PhasePoint([1.0], [2.0])
    assert p.reflected().xi.tolist() == [-2.0]
    assert PhasePoint.from_array(p.as_array()).as_array().tolist() == [1.0, 2.0]


def test_hamiltonian_rhs_examples(abs_x, free1, harmonic1):
    dx, dxi = hamiltonian_rhs(free1, PhasePoint([3.0], [2.0]))
    assert (dx[0], dxi[0]) == (2.0, 0.0)
    dx, dxi = hamiltonian_rhs(abs_x, PhasePoint([-1.0], [1.0]))
    assert (dx[0], dxi[0]) == (1.0, 1.0)
    dx, dxi = hamiltonian_rhs(harmonic1, PhasePoint([1.0], [0.0]))
    assert (dx[0], dxi[0]) == (0.0, -1.0)
    with pytest.raises(OnSingularSet):
        hamiltonian_rhs(abs_x, PhasePoint([0.0], [1.0]))


def test_integrate_smooth_examples(free1, abs_x):
    seg, ev = integrate_smooth(free1, PhasePoint([0.0], [1.0]), (0.0, 2.0))
    assert ev is None
    np.testing.assert_allclose(seg(2.0), [2.0, 1.0], atol=1e-12)
    seg, ev = integrate_smooth(abs_x, PhasePoint([-1.0], [1.0]), (0.0, 2.0))
    assert ev.t_cross == pytest.approx(T_CROSS, abs=1e-12)
    assert ev.point.xi[0] == pytest.approx(SQ3, abs=1e-12)
    assert abs(ev.point.x[0]) <= abs_x.g_zero_tol


def test_harmonic_period():
    pot = harmonic(box=[[-3.0, 3.0]])
    seg, ev = integrate_smooth(pot, PhasePoint([1.0], [0.0]), (0.0, 2 * np.pi))
    assert ev is None
    np.testing.assert_allclose(seg(2 * np.pi), [1.0, 0.0], atol=1e-8)
    # through x = 0, which lies on the (empty) singular set of a smooth potential
    end, traj = flow_map(pot, PhasePoint([1.0], [0.0]), np.pi)
    np.testing.assert_allclose(end.as_array(), [-1.0, 0.0], atol=1e-9)
    assert traj.crossings == []


def test_box_exit(free1):
    with pytest.raises(OutOfBox):
        flow_map(free1, PhasePoint([3.5], [1.0]), 2.0)


def test_classify_crossing_examples(abs_x, abs_x1_2d):
    _, traj = flow_map(abs_x, PhasePoint([-1.0], [1.0]), 1.0)
    ev = traj.crossings[0]
    assert ev.generic and ev.omega0.tolist() == [1.0]
    _, traj = flow_map(abs_x1_2d, PhasePoint([-1.0, 0.0], [1.0, 0.5]), 1.0)
    ev = traj.crossings[0]
    assert ev.generic and ev.omega0 == pytest.approx([1.0])
    assert ev.point.xi == pytest.approx([SQ3, 0.5], abs=1e-10)
    anti = cone(1, weight=-1.0, box=[[-4, 4]])
    with pytest.raises(NonGenericCrossing):
        classify_crossing(anti, CrossingEvent(0.0, PhasePoint([0.0], [0.0])))


def test_launch_examples(abs_x):
    p0 = PhasePoint([0.0], [1.0])
    seg = launch_from_singularity(abs_x, p0, 1, tau_launch=0.1)
    np.testing.assert_allclose(seg(0.1), [0.1 - 0.005, 0.9], atol=1e-13)
    seg = launch_from_singularity(abs_x, p0, -1, tau_launch=0.1)
    np.testing.assert_allclose(seg(-0.1), [-0.1 + 0.005, 0.9], atol=1e-13)
    seg = launch_from_singularity(abs_x, p0, 1, tau_launch=0.0)
    assert seg(0.0).tolist() == [0.0, 1.0]
    with pytest.raises(NonGenericPoint):
        launch_from_singularity(abs_x, PhasePoint([0.0], [0.0]), 1, tau_launch=0.1)


def test_launch_2d_codim2_matches_closed_form(abs_x_2d):
    # |x| in the plane from the origin along xi = (1, 0): x_t = (t - t^2/2, 0)
    seg = launch_from_singularity(abs_x_2d, PhasePoint([0.0, 0.0], [1.0, 0.0]), 1, tau_launch=0.05)
    np.testing.assert_allclose(seg(0.05), [0.05 - 0.00125, 0.0, 0.95, 0.0], atol=1e-13)


@pytest.mark.parametrize("t", [0.3, T_CROSS, 1.2, T_CROSS + 1.0, 2.5])
def test_flow_matches_piecewise_parabola(abs_x, t):
    end, _ = flow_map(abs_x, PhasePoint([-1.0], [1.0]), t)
    np.testing.assert_allclose([end.x[0], end.xi[0]], broken_parabola(t), atol=1e-9)


def test_flow_examples(free1, abs_x1_2d):
    end, _ = flow_map(free1, PhasePoint([0.5], [-0.7]), 2.0)
    np.testing.assert_allclose(end.as_array(), [0.5 - 1.4, -0.7], atol=1e-12)
    end, _ = flow_map(abs_x1_2d, PhasePoint([-1.0, 0.0], [1.0, 0.5]), T_CROSS)
    np.testing.assert_allclose(end.as_array(), [0.0, 0.5 * T_CROSS, SQ3, 0.5], atol=1e-9)


def test_start_on_S_launches(abs_x):
    end, traj = flow_map(abs_x, PhasePoint([0.0], [SQ3]), 1.0)
    np.testing.assert_allclose([end.x[0], end.xi[0]], broken_parabola(T_CROSS + 1.0), atol=1e-9)
    assert traj.tau == 0.0


def test_negative_time_and_tau(abs_x):
    start = PhasePoint([SQ3 - 0.5], [SQ3 - 1.0])
    end, traj = flow_map(abs_x, start, -(T_CROSS + 1.0))
    np.testing.assert_allclose(end.as_array(), [-1.0, 1.0], atol=1e-9)
    assert traj.tau == pytest.approx(-1.0, abs=1e-9)
    assert traj(-1.0) == pytest.approx([0.0, SQ3], abs=1e-9)


def test_energy_and_sign_criterion(abs_x1_2d):
    p0 = PhasePoint([-1.0, 0.3], [1.0, 0.2])
    _, traj = flow_map(abs_x1_2d, p0, 3.0)
    ys = traj.sample(np.linspace(0, 3, 301))
    H = hamiltonian(abs_x1_2d, ys[:, :2], ys[:, 2:])
    assert np.max(np.abs(H - H[0])) <= 1e-6 * 3
    tc = traj.crossings[0].t_cross
    for dt in (1e-3, 1e-2, 0.1):
        before, after = traj(tc - dt), traj(tc + dt)
        assert before[0] * before[2] < 0 < after[0] * after[2]


def test_crossing_limit_of_g_over_t(abs_x):
    _, traj = flow_map(abs_x, PhasePoint([-1.0], [1.0]), 2.0)
    tc = traj.crossings[0].t_cross
    for s in (1e-4, -1e-4):
        assert traj(tc + s)[0] / s == pytest.approx(SQ3, rel=1e-3)


def test_segments_abut_continuously(abs_x1_2d):
    _, traj = flow_map(abs_x1_2d, PhasePoint([-1.0, 0.3], [1.0, 0.2]), 3.0)
    for a, b in zip(traj.segments, traj.segments[1:]):
        assert a.t1 == pytest.approx(b.t0, abs=1e-15)
        np.testing.assert_allclose(a(a.t1), b(b.t0), atol=1e-12)


def test_codim_two_near_miss_integrates_smoothly(abs_x_2d):
    end, traj = flow_map(abs_x_2d, PhasePoint([-1.0, 0.2], [1.0, 0.0]), 2.0)
    assert traj.crossings == []
    ys = traj.sample(np.linspace(0, 2.0, 201))
    H = hamiltonian(abs_x_2d, ys[:, :2], ys[:, 2:])
    assert np.max(np.abs(H - H[0])) <= 1e-6


def test_codim_two_head_on_crossing(abs_x_2d):
    # radial motion through the tip of the 2D cone follows the 1D parabolas
    end, traj = flow_map(abs_x_2d, PhasePoint([-1.0, 0.0], [1.0, 0.0]), T_CROSS + 1.0)
    assert len(traj.crossings) == 1
    np.testing.assert_allclose(end.as_array(), [SQ3 - 0.5, 0.0, SQ3 - 1.0, 0.0], atol=1e-8)


def test_non_generic_guard():
    with pytest.raises(NonGenericCrossing):
        flow_map(cone(1, weight=-1.0, box=[[-4, 4]]), PhasePoint([0.0], [0.0]), 1.0)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.5, -0.5), st.floats(0.6, 1.5), st.floats(0.2, 2.0))
def test_reversibility_across_crossing(x0, xi0, t):
    pot = cone(1, box=[[-5.0, 5.0]])
    p0 = PhasePoint([x0], [xi0])
    end, _ = flow_map(pot, p0, t)
    back, _ = flow_map(pot, end, -t)
    np.testing.assert_allclose(back.as_array(), p0.as_array(), atol=1e-7)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.5, -0.5), st.floats(0.6, 1.5), st.floats(0.1, 1.0), st.floats(0.1, 1.0))
def test_group_property(x0, xi0, s, t):
    pot = cone(1, box=[[-5.0, 5.0]])
    p0 = PhasePoint([x0], [xi0])
    mid, _ = flow_map(pot, p0, s)
    two, _ = flow_map(pot, mid, t)
    one, _ = flow_map(pot, p0, s + t)
    np.testing.assert_allclose(two.as_array(), one.as_array(), atol=1e-8)


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.5, -0.5), st.floats(-0.5, 0.5), st.floats(0.5, 1.5), st.floats(-0.5, 0.5))
def test_energy_conserved_2d(a, b, c, e):
    pot = cone(2, 1, weight=1.0, V0={"poly": [[0.5, [0, 2]]]}, box=[[-5.0, 5.0]] * 2)
    _, traj = flow_map(pot, PhasePoint([a, b], [c, e]), 2.0)
    ys = traj.sample(np.linspace(0, 2.0, 101))
    H = hamiltonian(pot, ys[:, :2], ys[:, 2:])
    assert np.max(np.abs(H - H[0])) <= 2e-6


def test_jacobian_examples(free1):
    J = variational_jacobian(free1, PhasePoint([0.2], [0.3]), 1.0, h=1e-3)
    np.testing.assert_allclose(J, [[1.0, 1.0], [0.0, 1.0]], atol=1e-9)
    J = variational_jacobian(harmonic(box=[[-4, 4]]), PhasePoint([0.5], [0.2]), np.pi / 2, h=1e-4)
    np.testing.assert_allclose(J, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-7)


def test_liouville_across_crossing(abs_x):
    for h in (1e-3, 1e-4):
        for t in (T_CROSS - 0.1, T_CROSS + 0.1, 2.0):
            J = variational_jacobian(abs_x, PhasePoint([-1.0], [1.0]), t, h=h)
            assert abs(np.linalg.det(J) - 1.0) <= 1e-4


def test_ensemble_matches_scalar_flow():
    rng = np.random.default_rng(3)
    for pot, t in [(harmonic(box=[[-4, 4]]), 1.0), (cone(1, box=[[-4, 4]]), SQ3 - 0.5),
                   (cone(2, 1, box=[[-4, 4]] * 2), 1.5)]:
        d = pot.dim
        X = rng.normal(-1.0, 0.1, (40, d))
        XI = rng.normal(1.0, 0.1, (40, d))
        ex, exi = flow_map_ensemble(pot, X, XI, t)
        for i in range(0, 40, 7):
            end, _ = flow_map(pot, PhasePoint(X[i], XI[i]), t)
            np.testing.assert_allclose(ex[i], end.x, atol=1e-10)
            np.testing.assert_allclose(exi[i], end.xi, atol=1e-10)
        bx, bxi = flow_map_ensemble(pot, ex, exi, -t)
        np.testing.assert_allclose(bx, X, atol=1e-9)


def test_ensemble_reports_particle_index():
    pot = cone(1, weight=-1.0, box=[[-4, 4]])
    X = np.array([[-1.0], [0.0], [1.0]])
    XI = np.array([[0.0], [0.0], [0.1]])
    with pytest.raises(NonGenericCrossing) as info:
        flow_map_ensemble(pot, X, XI, 0.5)
    assert info.value.particle_index == 1
