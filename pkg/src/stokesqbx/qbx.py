"""Quadrature by expansion for the Laplace dipole and Stokes double layer.

The double layer u_i = sum_n w_n T_ijk(x - y_n) q_j n_k is written as four
Laplace dipole potentials with densities

    rho^j = q_j n + n_j q   (j = 1, 2, 3),   rho^4 = (y.q) n + (y.n) q,

each expanded about a center c in spherical harmonics,

    z_lm = 4 pi / (2l + 1) sum_n w_n rho(y_n) . grad[r^{-(l+1)} Y_l^m](y_n - c),

and recombined as u_a = sum_j <x_j g_a - delta_aj s, z^j> - <g_a, z^4>. All
coordinates (x, y) are taken relative to the center. Coefficients are
formed on a kappa-times upsampled grid where the geometry is analytic and
only the density is interpolated.
"""

from dataclasses import dataclass
import hashlib

import numpy as np

from . import harmonics as hm
from .geometry import downsample_adjoint, upsample


@dataclass(frozen=True)
class QbxParams:
    """Expansion radius r, order p, upsampling kappa and near distance d_eps."""

    r: float
    p: int
    kappa: int
    d_eps: float = None

    def __post_init__(self):
        d_eps = 2.0 * self.r if self.d_eps is None else float(self.d_eps)
        object.__setattr__(self, "d_eps", d_eps)
        if not self.r > 0:
            raise ValueError("expansion radius must be positive")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError("order p must be an integer >= 1")
        if int(self.kappa) != self.kappa or self.kappa < 1:
            raise ValueError("kappa must be an integer >= 1")
        if abs(d_eps - 2 * self.r) > 1e-12 * d_eps:
            raise ValueError("QBX parameters require r = d_eps / 2")
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "kappa", int(self.kappa))
        object.__setattr__(self, "r", float(self.r))

    @classmethod
    def from_ratio(cls, grid, r_over_h, p, kappa):
        return cls(r=r_over_h * grid.h, p=p, kappa=kappa)

    def fingerprint(self):
        s = repr((self.r, self.p, self.kappa))
        return hashlib.sha256(s.encode()).hexdigest()[:32]


@dataclass(frozen=True)
class ExpansionCenter:
    center: np.ndarray
    anchor: np.ndarray
    side: int


@dataclass(frozen=True)
class ExpansionSet:
    """Coefficients z^1..z^4 (rows of ``z``) for one center, m >= 0 only."""

    z: np.ndarray

    @property
    def p(self):
        n = self.z.shape[1]
        return int(round((np.sqrt(8 * n + 1) - 3) / 2))


def expansion_centers(grid, r, side=1):
    """Centers x_i + side * r * n_i for every node (body frame)."""
    return grid.nodes + side * r * grid.normals


def expansion_center(grid, i, r, side=1):
    x = grid.nodes[i]
    return ExpansionCenter(x + side * r * grid.normals[i], x.copy(), int(side))


# -- Laplace dipole ----------------------------------------------------------

def _dipole_kernel(y_rel, weights, p):
    # scaled gradients 4 pi/(2l+1) w_n grad I_lm(y_n - c), shape (3, N_p, n)
    d2 = np.einsum("ni,ni->n", y_rel, y_rel)
    if np.any(d2 == 0):
        raise ValueError("expansion center coincides with a quadrature node")
    _, G = hm.irregular_solid_and_grad(p, y_rel)
    l, _ = hm.lm_arrays(p)
    G *= (4 * np.pi / (2 * l + 1))[None, :, None] * weights[None, None, :]
    return G


def dipole_coeffs(nodes, weights, density, center, p, chunk=20000):
    """Local expansion coefficients of the dipole potential sum w rho . grad(1/|x - y|)."""
    nodes = np.asarray(nodes, dtype=float)
    density = np.asarray(density, dtype=float)
    z = np.zeros(hm.n_coeffs(p), dtype=complex)
    for s in range(0, len(nodes), chunk):
        G = _dipole_kernel(nodes[s:s + chunk] - center, weights[s:s + chunk], p)
        z += np.einsum("dkn,nd->k", G, density[s:s + chunk])
    return z


def dipole_eval(z, x_rel):
    s, _ = hm.regular_eval_vectors(x_rel, ExpansionSet(np.atleast_2d(z)).p)
    return hm.pair(s, z)


# -- Stokes double layer -----------------------------------------------------

def stresslet_densities(q, n, y):
    """The four dipole densities; inputs broadcast over leading axes."""
    q = np.asarray(q, dtype=float)
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    q, n, y = np.broadcast_arrays(q, n, y)
    out = np.empty(q.shape[:-1] + (4, 3))
    out[..., :3, :] = q[..., :, None] * n[..., None, :] + n[..., :, None] * q[..., None, :]
    yq = np.einsum("...i,...i->...", y, q)
    yn = np.einsum("...i,...i->...", y, n)
    out[..., 3, :] = yq[..., None] * n + yn[..., None] * q
    return out


def eval_weights(x_rel, p):
    """Evaluation vectors W with shape (..., 3, 4, N_p).

    u_a = sum_j <W[a, j], z^j>, with W[a, j] = x_j g_a - delta_aj s for
    j < 3 and W[a, 3] = -g_a.
    """
    x_rel = np.asarray(x_rel, dtype=float)
    s, g = hm.regular_eval_vectors(x_rel, p)
    # move coefficient axis last
    s = np.moveaxis(s, 0, -1)
    g = np.moveaxis(g, (0, 1), (-2, -1))  # (..., 3, N_p)
    W = np.empty(x_rel.shape[:-1] + (3, 4, s.shape[-1]), dtype=complex)
    W[..., :, :3, :] = x_rel[..., None, :, None] * g[..., :, None, :]
    for a in range(3):
        W[..., a, a, :] -= s
    W[..., :, 3, :] = -g
    return W


def stresslet_coeffs(grid, Q, center, params):
    """ExpansionSet for a coarse density ``Q`` (3N stacked or (N, 3)) at ``center``."""
    Q = np.asarray(Q, dtype=float)
    q = Q.reshape(3, grid.N).T if Q.ndim == 1 else Q
    fine = grid.fine(params.kappa)
    qf = upsample(grid, q, params.kappa)
    y = fine.nodes - center
    rho = stresslet_densities(qf, fine.normals, y) * fine.weights[:, None, None]  # (nf, 4, 3)
    if np.any(np.einsum("ni,ni->n", y, y) == 0):
        raise ValueError("expansion center coincides with a quadrature node")
    p = params.p
    Y = np.zeros((3, hm.n_coeffs(p + 1), 4), dtype=complex)
    chunk = 20000
    for s in range(0, fine.N, chunk):
        I = hm.irregular_solid(p + 1, y[s:s + chunk])
        R = rho[s:s + chunk].reshape(-1, 12)
        S = (I @ R.astype(complex)).reshape(-1, 4, 3)
        Y += S.transpose(2, 0, 1)
    l, _ = hm.lm_arrays(p)
    z = hm.irregular_grad_apply(Y, p).T * (4 * np.pi / (2 * l + 1))
    return ExpansionSet(z)


def stresslet_qbx_eval(zset, x, center):
    x_rel = np.asarray(x, dtype=float) - center
    W = eval_weights(x_rel, zset.p)
    return 2.0 * np.real(np.einsum("...ajk,jk->...a", np.conj(W), zset.z))


def pv_on_surface(zplus, zminus, x, cplus, cminus):
    """Principal value as the mean of the two one-sided limits."""
    return 0.5 * (stresslet_qbx_eval(zplus, x, cplus) + stresslet_qbx_eval(zminus, x, cminus))


# -- linear maps ---------------------------------------------------------------

def _fine_columns(grid, kappa, max_points):
    # slices of whole fine azimuthal columns, for chunked adjoint upsampling
    fine = grid.fine(kappa)
    ncol = max(1, min(fine.n_phi, max_points // fine.n_theta))
    for a0 in range(0, fine.n_phi, ncol):
        a1 = min(fine.n_phi, a0 + ncol)
        yield a0, a1, slice(a0 * fine.n_theta, a1 * fine.n_theta)


def _adjoint_accumulate(grid, kappa, out, fine_rows, a0, a1):
    # out[..., N] += (fine rows on columns a0:a1) mapped back by the upsampling transpose
    if kappa == 1:
        out[..., a0 * grid.n_theta:a1 * grid.n_theta] += fine_rows
        return
    from .geometry import phi_interp_matrix, theta_interp_matrix
    Ut = theta_interp_matrix(grid.n_theta, kappa)
    Up = phi_interp_matrix(grid.n_phi, kappa)[a0:a1]
    lead = fine_rows.shape[:-1]
    f = fine_rows.reshape((-1, a1 - a0, kappa * grid.n_theta))
    c = np.einsum("tab,bj->taj", f, Ut)
    c = np.einsum("taj,ai->tij", c, Up)
    out += c.reshape(lead + (grid.N,))


def _fine_geometry(grid, kappa, center, sl):
    fine = grid.fine(kappa)
    return fine.nodes[sl] - center, fine.normals[sl], fine.weights[sl]


def coefficient_maps(grid, params, center, max_points=8192):
    """Coarse density -> coefficient maps M with shape (4, N_p, 3N), complex.

    z^j = M[j] @ Q for Q stacked component-wise.
    """
    Np = hm.n_coeffs(params.p)
    out = np.zeros((4, Np, 3, grid.N), dtype=complex)
    for a0, a1, sl in _fine_columns(grid, params.kappa, max_points):
        y, n, w = _fine_geometry(grid, params.kappa, center, sl)
        G = _dipole_kernel(y, w, params.p)  # (3, Np, nc)
        Gn = np.einsum("dkn,nd->kn", G, n)
        yn = np.einsum("nd,nd->n", y, n)
        M = np.empty((4, Np, 3, G.shape[2]), dtype=complex)
        for j in range(3):
            M[j] = n[:, j][None, None, :] * G.transpose(1, 0, 2)
            M[j, :, j, :] += Gn
        M[3] = y.T[None, :, :] * Gn[:, None, :] + yn[None, None, :] * G.transpose(1, 0, 2)
        _adjoint_accumulate(grid, params.kappa, out, M, a0, a1)
    return out.reshape(4, Np, 3 * grid.N)


def qbx_rows(grid, params, center, targets, max_points=None):
    """Rows mapping a coarse density to the QBX velocity at ``targets``.

    All quantities in the body frame of ``grid``; returns (T, 3, 3N) real.
    Every target is evaluated through the single expansion at ``center``.
    """
    x_rel = np.atleast_2d(np.asarray(targets, dtype=float)) - center
    T = len(x_rel)
    p = params.p
    l, _ = hm.lm_arrays(p)
    Wc = np.conj(eval_weights(x_rel, p)) * (4 * np.pi / (2 * l + 1))
    # gradient folded into the weights: rows only need I_lm up to degree p + 1
    V = hm.irregular_grad_contract(Wc.reshape(T * 12, -1), p).reshape(3 * T * 12, -1)
    # Re(V I) as one real product
    V = np.concatenate([V.real, -V.imag], axis=1)
    if max_points is None:
        max_points = max(512, int(2e6 // (T * 36 + hm.n_coeffs(p + 1))))
    out = np.zeros((T, 3, 3, grid.N))
    for a0, a1, sl in _fine_columns(grid, params.kappa, max_points):
        y, n, w = _fine_geometry(grid, params.kappa, center, sl)
        if np.any(np.einsum("ni,ni->n", y, y) == 0):
            raise ValueError("expansion center coincides with a quadrature node")
        I = hm.irregular_solid(p + 1, y)
        nc = len(w)
        G = (V @ np.concatenate([I.real, I.imag])).reshape(3, T, 3, 4, nc) * w  # G[d] = row weights against grad_d
        A = np.einsum("dtajn,nd->tajn", G, n)
        yn = np.einsum("nd,nd->n", y, n)
        K = A[:, :, :3, :] + np.einsum("nj,etajn->taen", n, G[:, :, :, :3])
        K += y.T[None, None, :, :] * A[:, :, 3:4, :] + yn * G[:, :, :, 3].transpose(1, 2, 0, 3)
        _adjoint_accumulate(grid, params.kappa, out, 2.0 * K, a0, a1)
    return out.reshape(T, 3, 3 * grid.N)


def pv_row(grid, params, i):
    """Two-sided principal-value row (3, 3N) at node ``i``."""
    x = grid.nodes[i]
    cp = x + params.r * grid.normals[i]
    cm = x - params.r * grid.normals[i]
    return 0.5 * (qbx_rows(grid, params, cp, x)[0] + qbx_rows(grid, params, cm, x)[0])


def nearest_centers(grid, r, targets, chunk=4_000_000):
    """Index of the closest exterior center for each body-frame target.

    Ties resolve to the lowest node index.
    """
    c = expansion_centers(grid, r, 1)
    x = np.atleast_2d(targets)
    idx = np.empty(len(x), dtype=int)
    step = max(1, chunk // grid.N)
    for s in range(0, len(x), step):
        d2 = ((x[s:s + step, None, :] - c[None]) ** 2).sum(-1)
        idx[s:s + step] = np.argmin(d2, axis=1)
    return idx


def near_eval(grid, params, density, targets):
    """Velocity of the double layer of one body at body-frame ``targets``.

    Targets closer than d_eps to the surface use the nearest exterior
    expansion; the rest use direct quadrature on the coarse grid.
    """
    from .kernels import double_layer_direct

    x = np.atleast_2d(np.asarray(targets, dtype=float))
    Q = np.asarray(density, dtype=float)
    q = Q.reshape(3, grid.N).T if Q.ndim == 1 else Q
    if np.any(grid.shape.contains(x)):
        raise ValueError("target inside the particle")
    dist = grid.shape.distance(x)
    near = dist < params.d_eps
    out = np.empty((len(x), 3))
    if np.any(~near):
        out[~near] = double_layer_direct(x[~near], grid.nodes, grid.normals, grid.weights, q)
    if np.any(near):
        xn = x[near]
        idx = nearest_centers(grid, params.r, xn)
        centers = expansion_centers(grid, params.r, 1)
        Qs = q.T.reshape(-1)
        res = np.empty((len(idx), 3))
        for k in np.unique(idx):
            sel = np.nonzero(idx == k)[0]
            for s in range(0, len(sel), 32):
                part = sel[s:s + 32]
                res[part] = qbx_rows(grid, params, centers[k], xn[part]) @ Qs
        out[near] = res
    return out


# -- reference quadrature and parameter selection --------------------------------

def _graded_panels(lo, hi, s, h0, n):
    # Gauss-Legendre panels on [lo, hi], geometrically refined toward s
    br = {lo, hi, min(max(s, lo), hi)}
    for sign in (-1.0, 1.0):
        k = 0
        while True:
            t = s + sign * h0 * 2.0**k
            if not lo < t < hi:
                break
            br.add(t)
            k += 1
    br = np.array(sorted(br))
    x, w = np.polynomial.legendre.leggauss(n)
    a, b = br[:-1, None], br[1:, None]
    return (0.5 * (b - a) * (x + 1) + a).ravel(), (0.5 * (b - a) * w).ravel()


def reference_double_layer(shape, density_fn, targets, n_gl=16, h_min=1e-12):
    """Independent high-accuracy double layer of an analytic density.

    Tensor Gauss-Legendre panels in (theta, phi), graded geometrically
    toward the closest surface point of each target, so the quadrature
    resolves the near-singularity at any distance. For targets on the
    surface the principal value is returned, computed as
    D[q - q(x)](x) + 4 pi q(x) so that the integrand stays bounded.
    ``density_fn`` maps (P, 3) body points to (P, 3) densities.
    """
    from .geometry import surface_frame
    from .kernels import double_layer_sum

    x = np.atleast_2d(np.asarray(targets, dtype=float))
    th0, ph0 = shape.foot_angles(x)
    d = shape.distance(x)
    L = max(shape.a, shape.c)
    on = d <= 1e-13 * L
    out = np.empty((len(x), 3))
    for k in range(len(x)):
        dk = max(d[k], h_min * L)
        h_t = dk / (2 * L)
        h_p = dk / (2 * shape.a * max(np.sin(th0[k]), 1e-12))
        t, wt = _graded_panels(0.0, np.pi, th0[k], h_t, n_gl)
        p, wp = _graded_panels(ph0[k] - np.pi, ph0[k] + np.pi, ph0[k], min(h_p, np.pi), n_gl)
        T, P = np.meshgrid(t, p, indexing="ij")
        y, nrm, W = surface_frame(T.ravel(), P.ravel(), shape)
        w = W * np.outer(wt, wp).ravel()
        q = density_fn(y)
        if on[k]:
            q0 = density_fn(x[k:k + 1])[0]
            out[k] = double_layer_sum(x[k:k + 1], y, nrm, w, q - q0)[0] + 4 * np.pi * q0
        else:
            out[k] = double_layer_sum(x[k:k + 1], y, nrm, w, q)[0]
    return out


def calibration_density(shape):
    """Smooth analytic test density used for parameter calibration."""
    L = max(shape.a, shape.c)

    def q(y):
        y = np.asarray(y) / L
        return np.stack([1 + 0.5 * y[:, 1], 0.5 - 0.3 * y[:, 2] * y[:, 0], np.cos(y[:, 2]) - 0.25], axis=1)
    return q


class QbxSelectionError(ValueError):
    """The requested tolerance is not attainable; ``floor`` is the best error seen."""

    def __init__(self, message, floor):
        super().__init__(message)
        self.floor = floor


def _anchors(grid, n_lat=4, offsets=((0.5, 0.5), (0.25, 0.25))):
    # off-node surface points at a few latitudes of the northern half, at
    # fractional positions inside grid cells
    from .geometry import surface_frame

    half = grid.n_theta // 2
    it = np.unique(np.linspace(0, half - 2, n_lat).round().astype(int))
    th, ph = [], []
    for ft, fp in offsets:
        th.append((1 - ft) * grid.theta_nodes[it] + ft * grid.theta_nodes[it + 1])
        ph.append(np.full(len(it), fp * grid.dphi))
    th, ph = np.concatenate(th), np.concatenate(ph)
    return th, ph, surface_frame(th, ph, grid.shape)


def _direct_error(grid, qfn, x, scale):
    from .kernels import double_layer_sum

    ref = reference_double_layer(grid.shape, qfn, x)
    val = double_layer_sum(x, grid.nodes, grid.normals, grid.weights, qfn(grid.nodes))
    return np.abs(val - ref).max(axis=1) / scale


def calibrate_d_eps(grid, epsilon, multiples=(0.25, 0.5, 0.75, 1, 1.5, 2, 2.5, 3, 4, 5, 6, 8, 10, 12, 16)):
    """Smallest distance beyond which direct quadrature is within ``epsilon``.

    The error of direct quadrature of a smooth density is measured along
    normal rays from mid-cell anchors against the graded reference, relative
    to 4 pi max|q|.
    """
    qfn = calibration_density(grid.shape)
    scale = 4 * np.pi * np.abs(qfn(grid.nodes)).max()
    _, _, (y, n, _) = _anchors(grid)
    d = np.asarray(multiples, dtype=float) * grid.h
    x = (y[:, None, :] + d[None, :, None] * n[:, None, :]).reshape(-1, 3)
    err = _direct_error(grid, qfn, x, scale).reshape(len(y), len(d)).max(axis=0)
    ok = err < epsilon
    if not ok[-1]:
        raise QbxSelectionError(f"direct quadrature error {err[-1]:.2e} at {multiples[-1]} h exceeds {epsilon:.1e}",
                                float(err[-1]))
    k = len(d) - 1
    while k > 0 and ok[k - 1]:
        k -= 1
    return float(d[k])


def _probe_set(grid, d_eps, r):
    # (targets, list of (center, weight) per target): near targets through
    # their nearest exterior center, and two-sided principal values at nodes
    _, _, (y, n, _) = _anchors(grid)
    d = np.array([0.01 * grid.h, 0.1 * grid.h, 0.5 * d_eps, 0.95 * d_eps])
    x = (y[:, None, :] + d[None, :, None] * n[:, None, :]).reshape(-1, 3)
    ext = expansion_centers(grid, r, 1)
    plan = [[(ext[k], 1.0)] for k in nearest_centers(grid, r, x)]
    half = grid.n_theta // 2
    nodes = np.unique(np.linspace(0, half - 1, 4).round().astype(int))
    for i in nodes:
        c = grid.nodes[i]
        plan.append([(c + r * grid.normals[i], 0.5), (c - r * grid.normals[i], 0.5)])
    return np.concatenate([x, grid.nodes[nodes]]), plan


def _qbx_errors(grid, r, kappa, p_max, qfn, x, plan, ref, scale):
    # errors for every p <= p_max at one kappa, from order p_max coefficients
    Q = qfn(grid.nodes).T.reshape(-1)
    params = QbxParams(r=r, p=p_max, kappa=kappa)
    l, _ = hm.lm_arrays(p_max)
    cache = {}
    err = np.zeros(p_max + 1)
    for t in range(len(x)):
        u = np.zeros((p_max + 1, 3))
        for c, wc in plan[t]:
            key = tuple(np.round(c, 15))
            if key not in cache:
                cache[key] = stresslet_coeffs(grid, Q, c, params).z
            w = eval_weights(x[t] - c, p_max)  # (3, 4, Np)
            terms = 2.0 * np.real(np.conj(w) * cache[key][None]).sum(axis=1)  # (3, Np)
            partial = np.zeros((p_max + 1, 3))
            np.add.at(partial, l, terms.T)
            u += wc * np.cumsum(partial, axis=0)
        err = np.maximum(err, np.abs(u - ref[t]).max(axis=1) / scale)
    return err


SAFETY = 0.25


def select_params(grid, epsilon, kappa_max=8, p_max=40, d_eps=None):
    """QBX parameters for a target relative accuracy ``epsilon``.

    d_eps is calibrated (unless given), r = d_eps / 2, p is the smallest
    order reaching epsilon at kappa_max on near targets along anchor rays,
    then kappa is the smallest upsampling factor keeping the error below
    epsilon at that p. Errors are relative to 4 pi max|q| for a smooth test
    density, and must stay below SAFETY * epsilon since the probe set only
    samples the surface. Raises QbxSelectionError with the attainable floor
    otherwise.
    """
    if not (1e-12 <= epsilon <= 1e-2):
        raise ValueError("epsilon must lie in [1e-12, 1e-2]")
    if d_eps is None:
        d_eps = calibrate_d_eps(grid, epsilon)
    r = 0.5 * d_eps
    if r >= grid.shape.min_curvature_radius:
        raise QbxSelectionError(f"tolerance {epsilon:.1e} needs d_eps = {d_eps:.3g}, which puts interior "
                                f"centers past the smallest radius of curvature; refine the grid", np.inf)
    qfn = calibration_density(grid.shape)
    scale = 4 * np.pi * np.abs(qfn(grid.nodes)).max()
    x, plan = _probe_set(grid, d_eps, r)
    ref = reference_double_layer(grid.shape, qfn, x)
    err = _qbx_errors(grid, r, kappa_max, p_max, qfn, x, plan, ref, scale)
    goal = SAFETY * epsilon
    good = np.nonzero(err[1:] < goal)[0]
    if len(good) == 0:
        floor = float(err[1:].min())
        raise QbxSelectionError(f"tolerance {epsilon:.1e} not attainable on this grid; "
                                f"best QBX error {floor:.2e} at kappa={kappa_max}", floor)
    p = int(good[0]) + 1
    kappa = kappa_max
    for k in range(1, kappa_max):
        if _qbx_errors(grid, r, k, p, qfn, x, plan, ref, scale)[p] < goal:
            kappa = k
            break
    return QbxParams(r=r, p=p, kappa=kappa, d_eps=d_eps)
