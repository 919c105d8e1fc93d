import numpy as np
import pytest

from stokesqbx.geometry import (ParticlePlacement, SpheroidShape, build_grid, place_particle,
                                rotation_matrix, surface_frame, upsample)


def test_surface_frame_equator_and_pole():
    shp = SpheroidShape(1.0, 2.0)
    y, n, W = surface_frame(np.array([np.pi / 2]), np.array([0.0]), shp)
    assert np.allclose(y[0], [1, 0, 0]) and np.allclose(n[0], [1, 0, 0])
    assert W[0] == pytest.approx(2.0)
    y, n, W = surface_frame(np.array([0.0]), np.array([1.3]), shp)
    assert np.allclose(y[0], [0, 0, 2]) and W[0] == 0
    assert np.allclose(n[0], [0, 0, 1])


def test_area_element_matches_cross_product():
    shp = SpheroidShape(0.7, 1.9)
    th, ph, e = 0.83, 2.1, 1e-6

    def pt(t, p):
        return surface_frame(np.array([t]), np.array([p]), shp)[0][0]

    dt = (pt(th + e, ph) - pt(th - e, ph)) / (2 * e)
    dp = (pt(th, ph + e) - pt(th, ph - e)) / (2 * e)
    W = surface_frame(np.array([th]), np.array([ph]), shp)[2][0]
    assert W == pytest.approx(np.linalg.norm(np.cross(dt, dp)), rel=1e-9)


@pytest.mark.parametrize("a,c,nt,nphi", [(1, 2, 60, 30), (2, 1, 20, 40), (1, 1, 16, 16), (1, 1.5, 10, 6)])
def test_aspect_rule(a, c, nt, nphi):
    g = build_grid(SpheroidShape(a, c), nt)
    assert g.n_phi == nphi and g.N == nt * nphi
    assert g.h == pytest.approx(2 * np.pi * a / nphi, rel=0, abs=0)


def test_grid_invariants(sphere16):
    g = sphere16
    assert g.weights.sum() == pytest.approx(4 * np.pi, rel=1e-12)
    assert np.allclose(np.linalg.norm(g.normals, axis=1), 1, atol=1e-14)
    assert np.all(np.einsum("ni,ni->n", g.normals, g.nodes) > 0)
    nt = g.n_theta
    # theta-fastest ordering: node i + n_theta is node i rotated by dphi
    R = rotation_matrix([0, 0, 1], 2 * np.pi / g.n_phi)
    assert np.allclose(g.nodes[nt:2 * nt], g.nodes[:nt] @ R.T, atol=1e-14)
    # mirror: node i and n_theta - 1 - i have opposite z
    assert np.allclose(g.nodes[:nt, 2], -g.nodes[nt - 1::-1, 2], atol=1e-14)


def test_spheroid_area():
    a, c = 1.0, 2.0
    e = np.sqrt(1 - a**2 / c**2)
    area = 2 * np.pi * a**2 * (1 + c / (a * e) * np.arcsin(e))
    g = build_grid(SpheroidShape(a, c), 32)
    assert g.weights.sum() == pytest.approx(area, rel=1e-12)


def test_spectral_quadrature():
    exact = None
    errs = []
    for nt in (8, 16, 32):
        g = build_grid(SpheroidShape(1, 1), nt)
        val = g.weights @ np.exp(g.nodes[:, 0])
        errs.append(val)
    exact = 4 * np.pi * np.sinh(1.0)
    e = [abs(v - exact) for v in errs]
    assert e[1] < max(1e-4 * e[0], 1e-13) and e[2] < 1e-12


def test_reject_small_grid():
    with pytest.raises(ValueError):
        build_grid(SpheroidShape(1, 1), 2)
    with pytest.raises(ValueError):
        SpheroidShape(-1, 1)


def test_upsample(rng):
    g = build_grid(SpheroidShape(1, 1), 32)
    v = rng.standard_normal(g.N)
    assert np.array_equal(upsample(g, v, 1), v)
    assert np.allclose(upsample(g, np.ones(g.N), 4), 1, atol=1e-13)
    th = np.arccos(np.clip(g.nodes[:, 2], -1, 1))
    ph = np.arctan2(g.nodes[:, 1], g.nodes[:, 0])
    f = lambda t, p: np.cos(2 * p) * np.sin(t)
    fine = g.fine(3)
    tf = np.arccos(np.clip(fine.nodes[:, 2], -1, 1))
    pf = np.arctan2(fine.nodes[:, 1], fine.nodes[:, 0])
    assert np.abs(upsample(g, f(th, ph), 3) - f(tf, pf)).max() < 1e-10
    with pytest.raises(ValueError):
        upsample(g, np.ones(g.N + 1), 2)


def test_upsample_band_limited():
    # theta interpolation is polynomial in theta, so degree in cos(theta) is kept to n_theta / 4
    g = build_grid(SpheroidShape(1, 2), 32)
    fine = g.fine(2)

    def f(x, deg, m):
        return (np.polynomial.legendre.legval(x[:, 2] / 2, [0] * deg + [1])
                * np.cos(m * np.arctan2(x[:, 1], x[:, 0])))

    for deg, m in ((8, 3), (4, 2), (0, 7)):
        assert np.abs(upsample(g, f(g.nodes, deg, m), 2) - f(fine.nodes, deg, m)).max() < 1e-10


def test_place_particle(sphere16):
    g = sphere16
    x, n = place_particle(g, ParticlePlacement(np.zeros(3)))
    assert np.array_equal(x, g.nodes) and np.array_equal(n, g.normals)
    R = rotation_matrix([0, 0, 1], np.pi / 2)
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0])
    x, n = place_particle(g, ParticlePlacement(np.array([1.0, 2, 3]), R))
    assert np.allclose(x, g.nodes @ R.T + [1, 2, 3])
    assert np.allclose(n, g.normals @ R.T)
    x, _ = place_particle(g, ParticlePlacement(np.array([1.0, 2, 3])))
    assert np.allclose(x - g.nodes, [1, 2, 3])


def test_placement_rejects_improper_rotation():
    with pytest.raises(ValueError):
        ParticlePlacement(np.zeros(3), np.diag([1.0, 1, -1]))


def test_distance_and_contains():
    shp = SpheroidShape(1.0, 2.0)
    x = np.array([[2.0, 0, 0], [0, 0, 3], [0.5, 0, 0]])
    assert np.allclose(shp.distance(x)[:2], [1, 1])
    assert list(shp.contains(x)) == [False, False, True]


@pytest.mark.parametrize("a, c", [(1.0, 2.0), (1.5, 0.6), (1.0, 1.0)])
def test_distance_inside_matches_dense_sampling(a, c):
    # includes the center and points on the evolute segment of the axes
    shp = SpheroidShape(a, c)
    th = np.linspace(0, np.pi, 4001)
    ring = np.stack([a * np.sin(th), c * np.cos(th)], axis=1)
    pts = np.array([[0, 0, 0], [0, 0, 0.3 * c], [0.2 * a, 0, 0], [0.1, 0.05, -0.2 * c], [0.5 * a, 0, 0.5 * c]])
    rho = np.hypot(pts[:, 0], pts[:, 1])
    dense = np.min(np.hypot(ring[:, 0] - rho[:, None], ring[:, 1] - np.abs(pts[:, 2])[:, None]), axis=1)
    with np.errstate(all="raise"):
        got = shp.distance(pts)
    assert np.allclose(got, dense, atol=1e-6)
