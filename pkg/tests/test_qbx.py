import numpy as np
import pytest

from stokesqbx import harmonics as hm
from stokesqbx.geometry import SpheroidShape, build_grid
from stokesqbx.kernels import double_layer_direct
from stokesqbx.qbx import (ExpansionSet, QbxParams, QbxSelectionError, calibration_density, dipole_coeffs,
                           dipole_eval, expansion_centers, near_eval, pv_on_surface, pv_row, qbx_rows,
                           reference_double_layer, select_params, stresslet_coeffs, stresslet_densities,
                           stresslet_qbx_eval)


@pytest.fixture(scope="module")
def grid():
    return build_grid(SpheroidShape(1.0, 1.0), 16)


@pytest.fixture(scope="module")
def params16(grid):
    return QbxParams.from_ratio(grid, 2, 16, 4)


@pytest.fixture(scope="module")
def selected(grid):
    return select_params(grid, 1e-6)


def test_params_invariants(grid):
    P = QbxParams.from_ratio(grid, 2, 10, 3)
    assert P.d_eps == pytest.approx(2 * P.r)
    with pytest.raises(ValueError):
        QbxParams(r=0.1, p=4, kappa=2, d_eps=0.5)
    with pytest.raises(ValueError):
        QbxParams(r=0.1, p=0, kappa=2)


def test_expansion_centers(grid):
    c = expansion_centers(grid, 0.2, 1)
    d = c - grid.nodes
    assert np.allclose(np.linalg.norm(d, axis=1), 0.2, atol=1e-13)
    assert np.allclose(np.cross(d, grid.normals), 0, atol=1e-13)


def test_dipole_coeffs_zero_and_point_source(rng):
    y = rng.standard_normal((20, 3))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    w = rng.uniform(0.5, 1, 20)
    assert np.all(dipole_coeffs(y, w, np.zeros((20, 3)), np.zeros(3), 8) == 0)
    # point dipole at distance 1, target at distance 0.25 from the center
    yd, rho = np.array([[0.0, 0.6, 0.8]]), np.array([[0.3, -0.5, 0.7]])
    z = dipole_coeffs(yd, np.ones(1), rho, np.zeros(3), 16)
    for x in 0.25 * np.array([[0.6, 0.8, 0.0], [0.0, 0.6, 0.8], [0.0, -0.6, -0.8]]):
        r = x - yd[0]
        direct = rho[0] @ r / np.linalg.norm(r) ** 3
        assert abs(dipole_eval(z, x) - direct) < 1e-9
    # the full expansion is real: s^T z + conj part pairs to a real value only
    s, _ = hm.regular_eval_vectors(x, 16)
    assert abs(np.imag(np.vdot(s, z) + np.dot(s, np.conj(z)))) < 1e-13 * abs(direct)


def test_dipole_eval_trivial():
    z = np.zeros(hm.n_coeffs(4), dtype=complex)
    assert dipole_eval(z, np.array([0.1, 0.2, 0.3])) == 0
    z[0] = 2.0 + 1j
    assert dipole_eval(z, np.zeros(3)) == pytest.approx(hm.Y00 * 2.0)


def test_stresslet_densities():
    d = stresslet_densities([0, 0, 1.0], [0, 0, 1.0], [0, 0, 1.0])
    assert np.allclose(d[2], [0, 0, 2]) and np.allclose(d[0], 0) and np.allclose(d[1], 0)
    assert np.allclose(d[3], [0, 0, 2])
    d = stresslet_densities([1.0, 0, 0], [0, 0, 1.0], [0, 0, 1.0])
    assert np.allclose(d[0], [0, 0, 1]) and np.allclose(d[2], [1, 0, 0]) and np.allclose(d[3], [1, 0, 0])


def test_stresslet_densities_bilinear(rng):
    q1, q2, n, y = rng.standard_normal((4, 3))
    a = 1.7
    assert np.allclose(stresslet_densities(q1 + a * q2, n, y),
                       stresslet_densities(q1, n, y) + a * stresslet_densities(q2, n, y))


def test_qbx_eval_zero_and_linear(grid, params16, rng):
    c = grid.nodes[5] + params16.r * grid.normals[5]
    zero = ExpansionSet(np.zeros((4, hm.n_coeffs(params16.p)), dtype=complex))
    assert np.all(stresslet_qbx_eval(zero, c + 0.01, c) == 0)
    Q1, Q2 = rng.standard_normal((2, 3 * grid.N))
    x = grid.nodes[5] + 0.5 * params16.r * grid.normals[5]
    u = lambda Q: stresslet_qbx_eval(stresslet_coeffs(grid, Q, c, params16), x, c)
    assert np.allclose(u(Q1 + 2 * Q2), u(Q1) + 2 * u(Q2), atol=1e-12)


def test_qbx_matches_oracle():
    # mid-field target on the center's normal, beyond the center
    g = build_grid(SpheroidShape(1.0, 1.0), 32)
    P = QbxParams.from_ratio(g, 3, 16, 4)
    qfn = calibration_density(g.shape)
    Q = qfn(g.nodes).T.reshape(-1)
    i = 3 * g.n_theta + 5
    c = g.nodes[i] + P.r * g.normals[i]
    x = g.nodes[i] + 1.5 * P.r * g.normals[i]
    got = stresslet_qbx_eval(stresslet_coeffs(g, Q, c, P), x, c)
    ref = reference_double_layer(g.shape, qfn, x[None])[0]
    assert np.abs(got - ref).max() < 1e-9 * 4 * np.pi * np.abs(Q).max()
    rows = qbx_rows(g, P, c, x)[0]
    assert np.allclose(rows @ Q, got, atol=1e-12)


def test_constant_density_identities(grid, selected):
    q = np.array([0.3, -1.0, 0.5])
    tol = 1e-6 * 4 * np.pi
    Q = np.repeat(q, grid.N)
    i = 21
    n = grid.normals[i]
    cp, cm = grid.nodes[i] + selected.r * n, grid.nodes[i] - selected.r * n
    zp, zm = stresslet_coeffs(grid, Q, cp, selected), stresslet_coeffs(grid, Q, cm, selected)
    x = grid.nodes[i]
    pv = pv_on_surface(zp, zm, x, cp, cm)
    assert np.allclose(pv, 4 * np.pi * q, atol=tol)
    assert np.allclose(pv_on_surface(zm, zp, x, cm, cp), pv, atol=1e-13)
    ext = stresslet_qbx_eval(zp, x + 0.3 * selected.r * n, cp)
    assert np.abs(ext).max() < tol
    # exterior limit at the node is -4 pi q + PV
    assert np.allclose(stresslet_qbx_eval(zp, x, cp), -4 * np.pi * q + pv, atol=tol)
    # interior side: 8 pi q from interior centers and from dense quadrature far inside
    inner = stresslet_qbx_eval(zm, x - 0.3 * selected.r * n, cm)
    assert np.allclose(inner, 8 * np.pi * q, atol=tol)
    far_in = double_layer_direct(np.array([[0.1, -0.2, 0.15]]), grid.nodes, grid.normals, grid.weights,
                                 np.tile(q, (grid.N, 1)))[0]
    assert np.allclose(far_in, 8 * np.pi * q, atol=tol)


def test_pv_row_matches_coefficients(grid, params16, rng):
    Q = rng.standard_normal(3 * grid.N)
    i = 9
    n = grid.normals[i]
    cp, cm = grid.nodes[i] + params16.r * n, grid.nodes[i] - params16.r * n
    ref = pv_on_surface(stresslet_coeffs(grid, Q, cp, params16), stresslet_coeffs(grid, Q, cm, params16),
                        grid.nodes[i], cp, cm)
    assert np.allclose(pv_row(grid, params16, i) @ Q, ref, atol=1e-11)


def test_near_eval_dispatch(grid, params16, rng):
    q = rng.standard_normal((grid.N, 3))
    far = grid.nodes[3] * (1 + 10 * grid.h)
    assert np.array_equal(near_eval(grid, params16, q, far[None]),
                          double_layer_direct(far[None], grid.nodes, grid.normals, grid.weights, q))
    with pytest.raises(ValueError):
        near_eval(grid, params16, q, np.zeros((1, 3)))


def test_near_eval_at_node_is_exterior_limit(grid, selected):
    # smooth density so the jump relation is resolved by the expansions
    X = grid.nodes
    Q = np.concatenate([X[:, 1] * X[:, 2], 1 + X[:, 0] ** 2, X[:, 0] - X[:, 2]])
    i = 40
    u = near_eval(grid, selected, Q, grid.nodes[i][None])[0]
    c = grid.nodes[i] + selected.r * grid.normals[i]
    assert np.allclose(u, qbx_rows(grid, selected, c, grid.nodes[i])[0] @ Q, atol=1e-12)
    lim = -4 * np.pi * Q.reshape(3, -1)[:, i] + pv_row(grid, selected, i) @ Q
    assert np.allclose(u, lim, atol=1e-5 * 4 * np.pi * np.abs(Q).max())


def test_near_eval_close_target_vs_oracle(grid, selected):
    qfn = calibration_density(grid.shape)
    q = qfn(grid.nodes)
    x = grid.nodes[[4, 50, 100]] + grid.h / 10 * grid.normals[[4, 50, 100]]
    x = x * 1.0 + 0.3 * grid.h * np.cross(grid.normals[[4, 50, 100]], [0, 0, 1])
    x = x / np.linalg.norm(x, axis=1, keepdims=True) * (1 + grid.h / 10)
    got = near_eval(grid, selected, q, x)
    ref = reference_double_layer(grid.shape, qfn, x)
    assert np.abs(got - ref).max() <= 1e-6 * 4 * np.pi * np.abs(q).max()


def test_select_params_monotone(grid, selected):
    loose = select_params(grid, 1e-2)
    assert loose.p < selected.p
    assert loose.d_eps <= selected.d_eps
    assert selected.r == pytest.approx(selected.d_eps / 2)


def test_select_params_unreachable():
    g = build_grid(SpheroidShape(1.0, 1.0), 8)
    with pytest.raises(QbxSelectionError) as e:
        select_params(g, 1e-12)
    assert e.value.floor > 1e-12
    with pytest.raises(ValueError):
        select_params(g, 1e-1)
