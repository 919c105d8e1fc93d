"""Spheroid surfaces, the Gauss-Legendre x trapezoidal product grid and
spectral upsampling of grid data.

A spheroid has equatorial semi-axis ``a`` and polar semi-axis ``c``. The
surface is parametrized as

    y(theta, phi) = (a sin(theta) cos(phi), a sin(theta) sin(phi), c cos(theta))

and integrals are approximated with Gauss-Legendre nodes in theta and the
trapezoidal rule in phi. Grid points are ordered theta-fastest, so node
``i + j * n_theta`` sits at (theta_i, phi_j).
"""

from dataclasses import dataclass, field
from functools import lru_cache
import hashlib

import numpy as np
from numpy.polynomial.legendre import leggauss


@dataclass(frozen=True)
class SpheroidShape:
    """Axisymmetric spheroid with semi-axes ``a`` (equator) and ``c`` (pole)."""

    a: float
    c: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.c)):
            raise ValueError("semi-axes must be finite")
        if self.a <= 0 or self.c <= 0:
            raise ValueError(f"semi-axes must be positive, got a={self.a}, c={self.c}")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "c", float(self.c))

    @property
    def kind(self):
        if self.a < self.c:
            return "prolate"
        if self.a > self.c:
            return "oblate"
        return "sphere"

    @property
    def min_curvature_radius(self):
        """Smallest principal radius of curvature, min(a^2/c, c^2/a)."""
        return min(self.a**2 / self.c, self.c**2 / self.a)

    @property
    def area(self):
        """Closed-form surface area."""
        a, c = self.a, self.c
        if a == c:
            return 4 * np.pi * a * a
        if c < a:
            e = np.sqrt(1 - c * c / (a * a))
            return 2 * np.pi * a * a * (1 + (1 - e * e) / e * np.arctanh(e))
        e = np.sqrt(1 - a * a / (c * c))
        return 2 * np.pi * a * a * (1 + c / (a * e) * np.arcsin(e))

    def contains(self, x):
        """True where the (body-frame) points ``x`` lie strictly inside.

        Points within roundoff of the surface (quadrature nodes) count as outside.
        """
        x = np.asarray(x, dtype=float)
        rho2 = x[..., 0] ** 2 + x[..., 1] ** 2
        return rho2 / self.a**2 + x[..., 2] ** 2 / self.c**2 < 1.0 - 1e-12

    def distance(self, x):
        """Euclidean distance from body-frame points ``x`` to the surface."""
        x = np.asarray(x, dtype=float)
        rho = np.hypot(x[..., 0], x[..., 1])
        z = np.abs(x[..., 2])
        return _ellipse_distance(rho, z, self.a, self.c)

    def foot_angles(self, x):
        """Surface angles (theta, phi) of the closest surface point to ``x``."""
        x = np.asarray(x, dtype=float)
        rho = np.hypot(x[..., 0], x[..., 1])
        pu, pv = _ellipse_closest(rho, np.abs(x[..., 2]), self.a, self.c)
        theta = np.arctan2(pu / self.a, pv / self.c)
        theta = np.where(x[..., 2] < 0, np.pi - theta, theta)
        phi = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * np.pi)
        return theta, phi


def _ellipse_distance(u, v, a, c, iters=80):
    pu, pv = _ellipse_closest(u, v, a, c, iters)
    shape = np.broadcast(np.asarray(u), np.asarray(v)).shape
    u = np.broadcast_to(np.asarray(u, dtype=float), shape).ravel()
    v = np.broadcast_to(np.asarray(v, dtype=float), shape).ravel()
    return np.hypot(u - pu, v - pv).reshape(shape)


def _ellipse_closest(u, v, a, c, iters=80):
    # Closest point (pu, pv) (flattened) to (u, v), u, v >= 0, on the ellipse
    # u^2/a^2 + v^2/c^2 = 1.
    # Closest point satisfies u* = a^2 u / (t + a^2), v* = c^2 v / (t + c^2)
    # for the unique root t > -min(a^2, c^2) of g(t) = u*^2/a^2 + v*^2/c^2 - 1.
    # The root is bracketed and found by bisection, which is robust everywhere
    # including the axis and the focal segment.
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    shape = np.broadcast(u, v).shape
    u = np.broadcast_to(u, shape).ravel()
    v = np.broadcast_to(v, shape).ravel()
    m = min(a, c) ** 2
    lo = np.full(u.shape, -m)
    hi = np.hypot(a * u, c * v) + 1e-300

    def g(t):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (a * u / (t + a * a)) ** 2 + (c * v / (t + c * c)) ** 2
        return np.where(np.isfinite(s), s, np.inf) - 1.0

    # g is decreasing on (-m, inf); g(hi) <= 0.
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos = g(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    t = 0.5 * (lo + hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        pu = a * a * u / (t + a * a)
        pv = c * c * v / (t + c * c)
    # On the evolute segment of the shorter axis the root sits at t = -m and
    # the nearest points form a ring: the coordinate along the long axis
    # follows from t = -m, the other from the ellipse equation.
    fix = ~(np.isfinite(pu) & np.isfinite(pv)) | (np.abs(t + m) < 1e-12 * m)
    if a < c:
        pv = np.where(fix, np.clip(c * c * v / (c * c - a * a), -c, c), pv)
        pu = np.where(fix, a * np.sqrt(np.clip(1 - (pv / c) ** 2, 0, None)), pu)
    elif a > c:
        pu = np.where(fix, np.clip(a * a * u / (a * a - c * c), -a, a), pu)
        pv = np.where(fix, c * np.sqrt(np.clip(1 - (pu / a) ** 2, 0, None)), pv)
    else:
        pu = np.where(fix, a, pu)
        pv = np.where(fix, 0.0, pv)
    return pu, pv


def surface_frame(theta, phi, shape):
    """Point, outward unit normal and area element at (theta, phi).

    Works elementwise on arrays. At the poles ``W`` is 0 and the normal is
    the polar axis.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    a, c = shape.a, shape.c
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    st, ct, sp, cp = np.broadcast_arrays(st, ct, sp, cp)
    point = np.stack([a * st * cp, a * st * sp, c * ct], axis=-1)
    # gradient of x^2/a^2 + y^2/a^2 + z^2/c^2, scaled by a c
    nrm = np.stack([c * st * cp, c * st * sp, a * ct], axis=-1)
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
    W = a * np.abs(st) * np.sqrt(c * c * st * st + a * a * ct * ct)
    return point, nrm, W


def aspect_n_phi(shape, n_theta):
    """Azimuthal node count from the aspect rule n_phi / n_theta = a / c."""
    n = 2 * int(np.floor(0.5 * n_theta * shape.a / shape.c + 0.5))
    return max(n, 2)


@dataclass(frozen=True, eq=False)
class SpheroidGrid:
    """Product quadrature grid on one reference spheroid (body frame)."""

    shape: SpheroidShape
    n_theta: int
    n_phi: int
    theta_nodes: np.ndarray
    theta_weights: np.ndarray
    phi_nodes: np.ndarray
    nodes: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    _fine: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def N(self):
        return self.n_theta * self.n_phi

    @property
    def h(self):
        return 2 * np.pi * self.shape.a / self.n_phi

    @property
    def dphi(self):
        return 2 * np.pi / self.n_phi

    @property
    def area(self):
        return float(self.weights.sum())

    def fingerprint(self):
        s = repr((self.shape.a, self.shape.c, self.n_theta, self.n_phi))
        return hashlib.sha256(s.encode()).hexdigest()[:32]

    def fine(self, kappa):
        """The kappa-times refined grid on the same shape (cached)."""
        kappa = int(kappa)
        if kappa < 1:
            raise ValueError("kappa must be >= 1")
        if kappa == 1:
            return self
        g = self._fine.get(kappa)
        if g is None:
            g = build_grid(self.shape, kappa * self.n_theta, kappa * self.n_phi)
            self._fine[kappa] = g
        return g

    def grid_values(self, values):
        """Reshape per-node data to (n_phi, n_theta, ...)."""
        values = np.asarray(values)
        return values.reshape((self.n_phi, self.n_theta) + values.shape[1:])


def build_grid(shape, n_theta, n_phi=None):
    """Build the product grid; ``n_phi`` defaults to the aspect rule."""
    if int(n_theta) != n_theta or n_theta < 4:
        raise ValueError(f"n_theta must be an integer >= 4, got {n_theta}")
    if n_theta % 2:
        raise ValueError(f"n_theta must be even, got {n_theta}")
    n_theta = int(n_theta)
    if n_phi is None:
        n_phi = aspect_n_phi(shape, n_theta)
    if int(n_phi) != n_phi or n_phi < 2 or n_phi % 2:
        raise ValueError(f"n_phi must be a positive even integer, got {n_phi}")
    n_phi = int(n_phi)
    x, w = leggauss(n_theta)
    # Gauss-Legendre mapped linearly onto [0, pi]; theta ascends from the north pole
    theta = 0.5 * np.pi * (x + 1.0)
    lam = 0.5 * np.pi * w
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    T, P = np.meshgrid(theta, phi)  # shape (n_phi, n_theta)
    pts, nrm, W = surface_frame(T.ravel(), P.ravel(), shape)
    wts = (W.reshape(n_phi, n_theta) * lam[None, :] * (2 * np.pi / n_phi)).ravel()
    for arr in (theta, lam, phi, pts, nrm, wts):
        arr.setflags(write=False)
    return SpheroidGrid(shape, n_theta, n_phi, theta, lam, phi, pts, nrm, wts)


@dataclass(frozen=True)
class ParticlePlacement:
    """Rigid placement of the reference body: x -> orientation @ x + center."""

    center: np.ndarray
    orientation: np.ndarray = None

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3).copy()
        O = np.eye(3) if self.orientation is None else np.asarray(self.orientation, dtype=float).copy()
        if O.shape != (3, 3):
            raise ValueError("orientation must be 3x3")
        if np.abs(O.T @ O - np.eye(3)).max() > 1e-12:
            raise ValueError("orientation is not orthogonal")
        if np.linalg.det(O) < 0:
            raise ValueError("orientation must be a proper rotation (det = +1)")
        c.setflags(write=False)
        O.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "orientation", O)

    def to_body(self, x):
        return (np.asarray(x, dtype=float) - self.center) @ self.orientation

    def to_world(self, x):
        return np.asarray(x, dtype=float) @ self.orientation.T + self.center


def place_particle(grid, placement):
    """World-frame nodes and normals of a placed particle."""
    O = placement.orientation
    return grid.nodes @ O.T + placement.center, grid.normals @ O.T


def rotation_matrix(axis, angle):
    """Proper rotation by ``angle`` about ``axis`` (Rodrigues)."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


# -- interpolation ----------------------------------------------------------

@lru_cache(maxsize=32)
def theta_interp_matrix(n_theta, kappa):
    """(kappa n_theta, n_theta) barycentric Lagrange matrix on GL nodes."""
    # nodes in the reference variable x in [-1, 1]; theta is affine in x
    xs, lam = leggauss(n_theta)
    xf, _ = leggauss(kappa * n_theta)
    bw = (-1.0) ** np.arange(n_theta) * np.sqrt((1 - xs**2) * lam)
    diff = xf[:, None] - xs[None, :]
    exact = np.abs(diff) < 1e-15
    with np.errstate(divide="ignore"):
        C = bw[None, :] / diff
    C[exact.any(axis=1)] = 0.0
    C[exact] = 1.0
    C /= C.sum(axis=1, keepdims=True)
    C.setflags(write=False)
    return C


@lru_cache(maxsize=32)
def phi_interp_matrix(n_phi, kappa):
    """(kappa n_phi, n_phi) trigonometric interpolation matrix.

    Band-limited interpolant of uniform samples; for even ``n_phi`` the
    Nyquist mode is split evenly between +-n_phi/2 so the result is real.
    """
    m = n_phi // 2
    k = np.arange(-m, m + 1)
    c = np.ones(len(k))
    if n_phi % 2 == 0:
        c[0] = c[-1] = 0.5
    else:
        c = c[1:-1]
        k = k[1:-1]
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    phif = 2 * np.pi * np.arange(kappa * n_phi) / (kappa * n_phi)
    d = phif[:, None] - phi[None, :]
    U = (c[None, None, :] * np.cos(k[None, None, :] * d[:, :, None])).sum(axis=2) / n_phi
    U.setflags(write=False)
    return U


def upsample(grid, values, kappa):
    """Interpolate per-node data to the kappa-refined grid.

    ``values`` has leading dimension N (per-node scalars or vectors) or is a
    flat component-stacked vector of length 3N, in which case the result is
    component-stacked too.
    """
    kappa = int(kappa)
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    v = np.asarray(values)
    N = grid.N
    stacked = v.ndim == 1 and v.shape[0] == 3 * N
    if stacked:
        v = v.reshape(3, N).T
    elif v.shape[0] != N:
        raise ValueError(f"expected {N} or {3 * N} values, got {v.shape[0]}")
    if kappa == 1:
        out = np.array(v, copy=True)
    else:
        Ut = theta_interp_matrix(grid.n_theta, kappa)
        Up = phi_interp_matrix(grid.n_phi, kappa)
        g = v.reshape((grid.n_phi, grid.n_theta, -1))
        f = np.einsum("ai,ijc,bj->abc", Up, g, Ut, optimize=True)
        out = f.reshape((kappa * kappa * N,) + v.shape[1:])
    if stacked:
        out = out.T.ravel()
    return out


def downsample_adjoint(grid, fine_values, kappa):
    """Apply the transpose of the upsampling map along the node axis.

    ``fine_values`` has shape (..., kappa^2 N); returns (..., N). This turns a
    row acting on fine-grid densities into a row acting on coarse densities.
    """
    kappa = int(kappa)
    fv = np.asarray(fine_values)
    if kappa == 1:
        return fv
    Ut = theta_interp_matrix(grid.n_theta, kappa)
    Up = phi_interp_matrix(grid.n_phi, kappa)
    lead = fv.shape[:-1]
    g = fv.reshape((-1, kappa * grid.n_phi, kappa * grid.n_theta))
    c = np.einsum("tab,ai,bj->tij", g, Up, Ut, optimize=True)
    return c.reshape(lead + (grid.N,))
