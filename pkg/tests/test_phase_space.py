import numpy as np
import pytest

from conicwigner import phase_space as P
from conicwigner import symbols as S
from conicwigner.errors import SupportClipped, UnderResolved
from conicwigner.quantum import Grid, InitialStateSpec, WavefunctionGrid, coherent_values, make_initial_state

EPS = 1 / 64


def grid1(n=512, lo=-3.0, hi=3.0, eps=EPS):
    return Grid(((lo, hi, n),), eps)


def coherent(q, p, grid):
    return make_initial_state(InitialStateSpec.coherent(q, p), grid)


def two_gaussian(grid):
    a = coherent([-0.8], [0.5], grid).values
    b = coherent([0.9], [-0.4], grid).values
    return WavefunctionGrid(grid, a + b).normalized()


def direct_wigner(f, x, xi, eps, v_max=512.0, n_v=400001):
    """The defining v-integral by dense trapezoid quadrature."""
    v = np.linspace(-v_max, v_max, n_v)
    integrand = np.exp(1j * xi * v) * f(x - eps * v / 2) * np.conj(f(x + eps * v / 2))
    return float(np.trapezoid(integrand, v).real / (2 * np.pi))


def test_coherent_wigner_is_gaussian():
    grid = grid1()
    q, p = 0.2, 0.7
    W = P.wigner_transform(coherent([q], [p], grid))
    X, XI = np.meshgrid(W.x_axes[0], W.xi_axes[0], indexing="ij")
    exact = np.exp(-((X - q) ** 2 + (XI - p) ** 2) / EPS) / (np.pi * EPS)
    np.testing.assert_allclose(W.values, exact, atol=1e-10 * exact.max())
    assert W.mass() == pytest.approx(1.0, abs=1e-12)
    i, j = np.unravel_index(np.argmax(W.values), W.values.shape)
    assert abs(W.x_axes[0][i] - q) <= W.dx[0] and abs(W.xi_axes[0][j] - p) <= W.dxi[0]


def test_two_gaussian_wigner_matches_defining_integral():
    grid = grid1()
    psi = two_gaussian(grid)
    norm = np.sqrt(np.sum(np.abs(coherent([-0.8], [0.5], grid).values
                                 + coherent([0.9], [-0.4], grid).values) ** 2) * grid.cell)

    def f(x):
        pts = np.asarray(x, float)[..., None]
        return (coherent_values(pts, np.array([-0.8]), np.array([0.5]), EPS)
                + coherent_values(pts, np.array([0.9]), np.array([-0.4]), EPS)) / norm

    W = P.wigner_transform(psi)
    # midway between the packets the interference term oscillates in xi
    for i, j in [(258, 240), (258, 280), (192, 260), (320, 220)]:
        x, xi = W.x_axes[0][i], W.xi_axes[0][j]
        assert W.values[i, j] == pytest.approx(direct_wigner(f, x, xi, EPS), abs=1e-9)
    mid = np.argmin(np.abs(W.x_axes[0] - 0.05))
    assert W.values[mid].min() < -1.0  # interference fringes are negative somewhere
    assert W.mass() == pytest.approx(1.0, abs=1e-12)


def test_marginals():
    for psi in (coherent([0.3], [-0.5], grid1()), two_gaussian(grid1())):
        W = P.wigner_transform(psi)
        mx, mxi = P.cross_check_marginals(psi, W)
        assert mx <= 1e-8 and mxi <= 1e-8


def test_husimi_of_coherent_doubles_variance():
    grid = grid1()
    q, p = -0.3, 0.4
    H = P.husimi(P.wigner_transform(coherent([q], [p], grid)))
    X, XI = np.meshgrid(H.x_axes[0], H.xi_axes[0], indexing="ij")
    exact = np.exp(-((X - q) ** 2 + (XI - p) ** 2) / (2 * EPS)) / (2 * np.pi * EPS)
    np.testing.assert_allclose(H.values, exact, atol=1e-9 * exact.max())
    assert H.mass() == pytest.approx(1.0, abs=1e-8)


def test_husimi_positive_for_superposition():
    W = P.wigner_transform(two_gaussian(grid1()))
    H = P.husimi(W)
    assert W.values.min() < -1.0
    assert H.values.min() >= -1e-12
    assert H.mass() == pytest.approx(W.mass(), abs=1e-8)


def test_pairing_examples():
    grid = grid1()
    q, p = 0.2, 0.7
    W = P.wigner_transform(coherent([q], [p], grid))
    assert P.pair_symbol(S.constant(1), W) == pytest.approx(1.0, abs=1e-6)
    sx, sxi = 0.3, 0.2
    bump = S.gaussian([q], [p], sx, sxi)
    overlap = 1 / np.sqrt((1 + EPS / (2 * sx ** 2)) * (1 + EPS / (2 * sxi ** 2)))
    assert P.pair_symbol(bump, W) == pytest.approx(overlap, rel=1e-10)
    far = S.gaussian([-2.0], [-2.0], 0.2, 0.2)
    assert abs(P.pair_symbol(far, W)) <= 1e-8


def test_clipped_symbol_rejected():
    W = P.wigner_transform(coherent([0.0], [0.0], grid1()))
    with pytest.raises(SupportClipped):
        P.pair_symbol(S.gaussian([2.9], [0.0], 0.3, 0.3), W)


def test_under_resolved_state_rejected():
    grid = grid1(n=128)
    x = grid.coords(0)
    psi = WavefunctionGrid(grid, np.exp(1j * 0.95 * x / EPS) * np.exp(-x ** 2)).normalized()
    with pytest.raises(UnderResolved):
        P.wigner_transform(psi)


def test_weyl_examples():
    grid = grid1()
    psi = coherent([0.2], [0.6], grid)
    np.testing.assert_allclose(P.apply_weyl(S.constant(1), psi).values, psi.values, atol=1e-13)
    x = grid.coords(0)
    np.testing.assert_allclose(P.apply_weyl(S.coordinate(1, "x", 0), psi).values, x * psi.values, atol=1e-12)
    k = grid.wavenumbers(0)
    deriv = np.fft.ifft(1j * k * np.fft.fft(psi.values))
    np.testing.assert_allclose(P.apply_weyl(S.coordinate(1, "xi", 0), psi).values,
                               -1j * EPS * deriv, atol=1e-12)


def catalog():
    return [S.gaussian([0.0], [0.5], 0.5, 0.4),
            S.gaussian([0.3], [0.0], 0.2, 0.8, amp=2.0),
            S.gaussian([0.0], [0.0], 0.5, 0.7),
            S.monomial_cutoff([0.0], [0.5], [1], [1], 0.5, 0.5),
            S.monomial_cutoff([0.2], [0.2], [0], [2], 0.4, 0.3),
            S.monomial_cutoff([0.5], [0.0], [1], [0], 0.45, 0.6),
            S.monomial_cutoff([0.0], [0.0], [0], [1], 0.45, 0.6),
            S.product(S.gaussian([0.0], [0.4], 0.6, 0.6), S.gaussian([0.1], [0.6], 0.5, 0.5))]


def test_pairing_identity_catalog():
    grid = grid1()
    for psi in (coherent([0.1], [0.5], grid), two_gaussian(grid)):
        W = P.wigner_transform(psi)
        for a in catalog():
            lhs = P.pair_symbol(a, W)
            rhs = P.weyl_expectation(a, psi)
            assert lhs == pytest.approx(rhs, rel=1e-6, abs=1e-14)


def test_operator_bound_consistency():
    # operator norm probed from below by a lattice of coherent states
    grid = grid1()
    states = [coherent([q], [p], grid) for q in np.linspace(-1, 1, 5) for p in np.linspace(-1.5, 1.5, 5)]
    ratios = [max(np.sqrt(P.apply_weyl(a, psi).norm2()) for psi in states) / S.symbol_norm_M(a)
              for a in catalog()]
    assert max(ratios) <= 10 * np.median(ratios)


def test_streaming_equals_dense():
    grid = grid1()
    psi = two_gaussian(grid)
    W = P.wigner_transform(psi)
    syms = catalog()
    dense = [P.pair_symbol(a, W) for a in syms]
    stream = P.pair_symbol_streaming(syms, psi)
    np.testing.assert_allclose(stream, dense, rtol=1e-12, atol=1e-15)
    blocks = list(P.iter_wigner_blocks(psi, rows_per_block=37))
    np.testing.assert_allclose(np.concatenate([b for _, b in blocks]), W.values, atol=1e-14)


def test_two_dimensional_layer():
    grid = Grid(((-2.0, 2.0, 64), (-2.0, 2.0, 64)), 1 / 16)
    psi = coherent([0.2, -0.1], [0.5, 0.3], grid)
    W = P.wigner_transform(psi)
    assert W.mass() == pytest.approx(1.0, abs=1e-10)
    assert max(P.cross_check_marginals(psi, W)) <= 1e-8
    a = S.gaussian([0.1, 0.0], [0.5, 0.2], 0.35, 0.5)
    assert P.pair_symbol(a, W) == pytest.approx(P.weyl_expectation(a, psi), rel=1e-6)
    assert P.pair_symbol_streaming([a], psi)[0] == pytest.approx(P.pair_symbol(a, W), rel=1e-12)


def test_refine_interpolates_band_limited_data():
    n = 32
    x = 2 * np.pi * np.arange(n) / n
    f = np.cos(3 * x) + 0.5j * np.sin(5 * x)
    fine = P.refine(f)
    xf = 2 * np.pi * np.arange(2 * n) / (2 * n)
    np.testing.assert_allclose(fine, np.cos(3 * xf) + 0.5j * np.sin(5 * xf), atol=1e-13)
