"""Completed double layer boundary integral equation for rigid particles.

For particles beta = 1..M the density q solves, at every surface node,

    -4 pi q + sum_a (D^a[q] + V^a) + u_bg = U^beta + Omega^beta x (x - x_c^beta)

with V^a = (1/8 pi mu)(S f^a + R t^a) the completion flow at the particle
center. In the resistance problem (U, Omega) are given and f = int q dS,
t = int q x (y - x_c) dS. In the mobility problem (f, t) are given and
(U, Omega) are replaced by the functionals

    V(q) = -(4 pi / S) int q dS,   Omega(q) = -4 pi J^{-1} int (y - x_c) x q dS,

with J = int (|y'|^2 I - y' y') dS, whose eigenvectors are the orthogonal
axes omega^(n) and whose eigenvalues are A_n = int |omega x y'|^2 dS.

Densities are stored particle-major and component-stacked per particle:
(q_x(y_1..y_N), q_y(...), q_z(...)) in the world frame.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from . import precompute as pc
from .geometry import ParticlePlacement, place_particle
from .kernels import double_layer_sum, rotlet, stokeslet, stresslet_rows
from .qbx import QbxParams, near_eval


class ConvergenceError(RuntimeError):
    """GMRES did not reach the tolerance; carries the residual history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


@dataclass(frozen=True)
class Resistance:
    """Prescribed rigid body motion, arrays of shape (M, 3)."""

    U: np.ndarray
    Omega: np.ndarray


@dataclass(frozen=True)
class Mobility:
    """Prescribed force and torque exerted by each particle on the fluid, (M, 3)."""

    forces: np.ndarray
    torques: np.ndarray


@dataclass
class SystemState:
    grid: object
    placements: list
    params: QbxParams
    mode: object
    mu: float = 1.0
    box: object = None
    ewald: object = None
    u_bg: Optional[Callable] = None

    def __post_init__(self):
        self.placements = [p if isinstance(p, ParticlePlacement) else ParticlePlacement(*p)
                           for p in self.placements]
        M = len(self.placements)
        if M < 1:
            raise ValueError("at least one particle is required")
        if not self.mu > 0:
            raise ValueError("viscosity must be positive")
        if isinstance(self.mode, Resistance):
            a, b = _as_m3(self.mode.U, M), _as_m3(self.mode.Omega, M)
            self.mode = Resistance(a, b)
        elif isinstance(self.mode, Mobility):
            a, b = _as_m3(self.mode.forces, M), _as_m3(self.mode.torques, M)
            self.mode = Mobility(a, b)
        else:
            raise TypeError("mode must be Resistance or Mobility")
        if (self.box is None) != (self.ewald is None):
            raise ValueError("a periodic box needs Ewald parameters and vice versa")

    @property
    def M(self):
        return len(self.placements)

    @property
    def periodic(self):
        return self.box is not None

    def world_nodes(self):
        """Node coordinates (M, N, 3), normals (M, N, 3) in the world frame."""
        X, Nn = [], []
        for pl in self.placements:
            x, n = place_particle(self.grid, pl)
            X.append(x)
            Nn.append(n)
        return np.array(X), np.array(Nn)


@dataclass
class DensitySolution:
    Q: np.ndarray
    residuals: list
    iterations: int
    forces: np.ndarray
    torques: np.ndarray
    U: np.ndarray
    Omega: np.ndarray
    extras: dict = field(default_factory=dict)


def _as_m3(v, M):
    v = np.asarray(v, dtype=float)
    v = np.broadcast_to(v, (M, 3)) if v.shape == (3,) else v
    if v.shape != (M, 3):
        raise ValueError(f"expected {M} 3-vectors, got shape {v.shape}")
    return np.array(v)


# -- pointwise functionals -----------------------------------------------------

def completion_flow(x, x_c, f, t, mu=1.0):
    """(1/(8 pi mu)) (S(x - x_c) f + R(x - x_c) t), for one or many x."""
    r = np.asarray(x, dtype=float) - np.asarray(x_c, dtype=float)
    if np.any(np.linalg.norm(np.atleast_2d(r), axis=-1) == 0):
        raise ValueError("completion flow evaluated at the particle center")
    u = np.einsum("...ij,j->...i", stokeslet(r), np.asarray(f, dtype=float))
    u = u + np.einsum("...ij,j->...i", rotlet(r), np.asarray(t, dtype=float))
    return u / (8 * np.pi * mu)


def _rel_nodes(grid, placement):
    x, _ = place_particle(grid, placement)
    return x - placement.center, grid.weights


def force_torque_map(grid, placement):
    """(6, 3N) map from a stacked density to (f, t)."""
    y, w = _rel_nodes(grid, placement)
    N = grid.N
    F = np.zeros((6, 3, N))
    for i in range(3):
        F[i, i] = w
    # t = q x y' : t_i = eps_ijk q_j y'_k
    eps = _levi_civita()
    F[3:] = np.einsum("ijk,nk,n->ijn", eps, y, w)
    return F.reshape(6, 3 * N)


def _levi_civita():
    e = np.zeros((3, 3, 3))
    e[0, 1, 2] = e[1, 2, 0] = e[2, 0, 1] = 1
    e[0, 2, 1] = e[2, 1, 0] = e[1, 0, 2] = -1
    return e


def force_torque(grid, placement, Q):
    """f = int q dS and t = int q x (y - x_c) dS by grid quadrature."""
    ft = force_torque_map(grid, placement) @ np.asarray(Q, dtype=float)
    return ft[:3], ft[3:]


def rotation_basis(grid, placement):
    """Orthogonal axes omega^(n) (rows) and A_n = int |omega x y'|^2 dS."""
    y, w = _rel_nodes(grid, placement)
    J = np.einsum("n,n->", w, np.einsum("ni,ni->n", y, y)) * np.eye(3) - np.einsum("n,ni,nj->ij", w, y, y)
    A, omega = np.linalg.eigh(J)
    if A.min() <= 1e-14 * A.max():
        raise ValueError("degenerate rotational moment; surface is not proper")
    return omega.T, A


def rigid_body_map(grid, placement):
    """(6, 3N) map from a stacked density to (V(q), Omega(q))."""
    y, w = _rel_nodes(grid, placement)
    N = grid.N
    S = w.sum()
    H = np.zeros((6, 3, N))
    for i in range(3):
        H[i, i] = -4 * np.pi / S * w
    omega, A = rotation_basis(grid, placement)
    Jinv = omega.T @ np.diag(1.0 / A) @ omega
    # L = int y' x q : L_i = eps_ijk y'_j q_k
    L = np.einsum("ijk,nj,n->ikn", _levi_civita(), y, w)
    H[3:] = -4 * np.pi * np.einsum("ab,bkn->akn", Jinv, L)
    return H.reshape(6, 3 * N)


def rigid_body_motion(grid, placement, Q):
    """(V, Omega) functionals of the density."""
    v = rigid_body_map(grid, placement) @ np.asarray(Q, dtype=float)
    return v[:3], v[3:]


def rigid_motion_field(grid, placement):
    """(3N, 6) map from (U, Omega) to U + Omega x (x - x_c) at the nodes."""
    y, _ = _rel_nodes(grid, placement)
    N = grid.N
    B = np.zeros((3, N, 6))
    for i in range(3):
        B[i, :, i] = 1.0
    # (Omega x y)_i = eps_ijk Omega_j y_k
    B[:, :, 3:] = np.einsum("ijk,nk->inj", _levi_civita(), y)
    return B.reshape(3 * N, 6)


# -- free-space double layer ---------------------------------------------------

def rotate_stacked(O, v):
    """Apply a 3x3 rotation to a stacked (3N,) vector field."""
    return (O @ np.asarray(v).reshape(3, -1)).reshape(-1)


def cell_mean_velocity(system, Q):
    """Mean over the periodic cell of the velocity field, particles moving rigidly.

    The Ewald sums drop the k = 0 mode, so the represented field u has zero
    cell mean including the particle interiors. Inside a particle u is
    divergence free and its interior trace is the rigid motion plus 8 pi q,
    so replacing u there by the rigid motion shifts the mean by

        -(8 pi / V) sum_a int (y - x_c) (q . n) dS.

    A background flow is not included.
    """
    if not system.periodic:
        raise ValueError("the cell mean is defined for periodic systems only")
    g = system.grid
    q = np.asarray(Q, dtype=float).reshape(system.M, 3, g.N)
    X, Nn = system.world_nodes()
    out = np.zeros(3)
    for a, pl in enumerate(system.placements):
        qn = np.einsum("in,ni->n", q[a], Nn[a])
        out += (g.weights * qn) @ (X[a] - pl.center)
    return -8 * np.pi / system.box.volume * out


class FreeSpaceDoubleLayer:
    """Double layer of M identical particles in unbounded fluid.

    Self interaction by the precomputed maps, far field by direct
    quadrature over all pairs of distinct particles, and dense QBX
    corrections for nodes within d_eps of another particle.
    """

    route_far = "direct"

    def __init__(self, grid, placements, params, maps):
        self.grid, self.params, self.maps = grid, params, maps
        self.placements = list(placements)
        X, Nn = [], []
        for pl in self.placements:
            x, n = place_particle(grid, pl)
            X.append(x)
            Nn.append(n)
        self.X, self.normals = np.array(X), np.array(Nn)
        self.near = self._near_corrections()

    @property
    def M(self):
        return len(self.placements)

    def _near_corrections(self):
        g, par = self.grid, self.params
        out = []
        for b in range(self.M):
            for a in range(self.M):
                if a == b:
                    continue
                pl = self.placements[a]
                yb = pl.to_body(self.X[b])
                if np.any(g.shape.contains(yb)):
                    raise ValueError(f"particles {a} and {b} overlap")
                idx = np.nonzero(g.shape.distance(yb) < par.d_eps)[0]
                if len(idx) == 0:
                    continue
                rows = pc.rows_to_world(pc.canonical_rows(self.maps, yb[idx]), pl.orientation)
                rows -= stresslet_rows(self.X[b][idx], self.X[a], self.normals[a], g.weights).reshape(len(idx), 3, -1)
                out.append((b, idx, a, rows))
        return out

    def apply(self, Q):
        """Double layer at all nodes, principal value on each own surface; (M, 3N)."""
        Q = np.asarray(Q, dtype=float).reshape(self.M, -1)
        N = self.grid.N
        out = np.empty_like(Q)
        for b, pl in enumerate(self.placements):
            O = pl.orientation
            out[b] = rotate_stacked(O, pc.apply_self_interaction(self.maps, rotate_stacked(O.T, Q[b])))
        if self.M > 1:
            q = Q.reshape(self.M, 3, N).transpose(0, 2, 1)
            for b in range(self.M):
                others = [a for a in range(self.M) if a != b]
                u = double_layer_sum(self.X[b], self.X[others].reshape(-1, 3), self.normals[others].reshape(-1, 3),
                                     np.tile(self.grid.weights, len(others)), q[others].reshape(-1, 3))
                out[b] += u.T.reshape(-1)
        for b, idx, a, rows in self.near:
            u = rows @ Q[a]  # (T, 3)
            ob = out[b].reshape(3, N)
            ob[:, idx] += u.T
        return out

    def completion(self, f, t, mu, targets=None):
        """Completion flows of all particles at the nodes (M, 3N) or at targets (T, 3)."""
        pts = self.X.reshape(-1, 3) if targets is None else np.atleast_2d(targets)
        u = np.zeros((len(pts), 3))
        for a, pl in enumerate(self.placements):
            u += completion_flow(pts, pl.center, f[a], t[a], mu)
        if targets is None:
            return u.reshape(self.M, self.grid.N, 3).transpose(0, 2, 1).reshape(self.M, -1)
        return u

    def evaluate(self, Q, targets):
        """Double layer at off-surface targets: (u (T, 3), route (T,)).

        Targets inside a particle get NaN velocity and route 'inside'.
        """
        g, par = self.grid, self.params
        x = np.atleast_2d(np.asarray(targets, dtype=float))
        Q = np.asarray(Q, dtype=float).reshape(self.M, -1)
        u = np.zeros((len(x), 3))
        route = np.full(len(x), self.route_far, dtype=object)
        inside = np.zeros(len(x), dtype=bool)
        body = []
        for pl in self.placements:
            y = pl.to_body(x)
            inside |= g.shape.contains(y)
            body.append(y)
        for a, pl in enumerate(self.placements):
            y = body[a]
            near = ~inside & (g.shape.distance(y) < par.d_eps)
            far = ~inside & ~near
            q = Q[a].reshape(3, -1).T
            if np.any(far):
                u[far] += double_layer_sum(x[far], self.X[a], self.normals[a], g.weights, q)
            if np.any(near):
                qb = (pl.orientation.T @ Q[a].reshape(3, -1))
                u[near] += near_eval(g, par, qb.T, y[near]) @ pl.orientation.T
                route[near] = "qbx"
        u[inside] = np.nan
        route[inside] = "inside"
        return u, route


# -- the linear system -----------------------------------------------------------

def make_double_layer(system, maps):
    if system.periodic:
        from .ewald import PeriodicDoubleLayer
        return PeriodicDoubleLayer(system.grid, system.placements, system.params, maps,
                                   system.box, system.ewald)
    return FreeSpaceDoubleLayer(system.grid, system.placements, system.params, maps)


class BIEOperator:
    """Matvec and right-hand side of the completed BIE for one system."""

    def __init__(self, system, maps, dl=None):
        self.system = system
        self.maps = maps
        self.dl = make_double_layer(system, maps) if dl is None else dl
        g = system.grid
        self.F = np.array([force_torque_map(g, pl) for pl in system.placements])
        if isinstance(system.mode, Mobility):
            self.H = np.array([rigid_body_map(g, pl) for pl in system.placements])
            self.B = np.array([rigid_motion_field(g, pl) for pl in system.placements])

    @property
    def n(self):
        return self.system.M * 3 * self.system.grid.N

    def matvec(self, Q):
        s = self.system
        q = np.asarray(Q, dtype=float).reshape(s.M, -1)
        out = -4 * np.pi * q + self.dl.apply(q)
        if isinstance(s.mode, Resistance):
            ft = np.einsum("aij,aj->ai", self.F, q)
            out += self.dl.completion(ft[:, :3], ft[:, 3:], s.mu)
        else:
            vw = np.einsum("aij,aj->ai", self.H, q)
            out -= np.einsum("aij,aj->ai", self.B, vw)
        return out.reshape(-1)

    def background(self):
        s = self.system
        if s.u_bg is None:
            return np.zeros((s.M, 3 * s.grid.N))
        pts = self.dl.X.reshape(-1, 3)
        u = np.asarray(s.u_bg(pts), dtype=float).reshape(len(pts), 3)
        return u.reshape(s.M, s.grid.N, 3).transpose(0, 2, 1).reshape(s.M, -1)

    def rhs(self):
        s = self.system
        if isinstance(s.mode, Resistance):
            b = np.array([rigid_motion_field(s.grid, pl) @ np.concatenate([U, W])
                          for pl, U, W in zip(s.placements, s.mode.U, s.mode.Omega)])
        else:
            b = -self.dl.completion(s.mode.forces, s.mode.torques, s.mu)
        return (b - self.background()).reshape(-1)

    def outputs(self, Q):
        """(forces, torques, U, Omega) implied by a density."""
        s = self.system
        q = np.asarray(Q, dtype=float).reshape(s.M, -1)
        if isinstance(s.mode, Resistance):
            ft = np.einsum("aij,aj->ai", self.F, q)
            return ft[:, :3], ft[:, 3:], s.mode.U.copy(), s.mode.Omega.copy()
        vw = np.einsum("aij,aj->ai", self.H, q)
        return s.mode.forces.copy(), s.mode.torques.copy(), vw[:, :3], vw[:, 3:]


# -- preconditioner ------------------------------------------------------------

def self_matrix(maps):
    """Dense principal-value self interaction (3N, 3N) in the body frame."""
    N = maps.grid.N
    R = np.empty((3, N, 3 * N))
    for i in range(N):
        R[:, i] = pc.reconstruct_R(maps, i)
    return R.reshape(3 * N, 3 * N)


class BlockPreconditioner:
    """Inverse of the single-particle operator, applied per particle through its rotation.

    The closure rank-6 term of the current mode is included in the block,
    so the preconditioner is mode specific.
    """

    def __init__(self, system, maps):
        g = system.grid
        N = g.N
        ident = ParticlePlacement(np.zeros(3), np.eye(3))
        A = self_matrix(maps)
        A[np.diag_indices(3 * N)] -= 4 * np.pi
        if isinstance(system.mode, Resistance):
            y, _ = _rel_nodes(g, ident)
            G = np.zeros((N, 3, 6))
            G[:, :, :3] = stokeslet(y)
            G[:, :, 3:] = rotlet(y)
            G = G.transpose(1, 0, 2).reshape(3 * N, 6) / (8 * np.pi * system.mu)
            A += G @ force_torque_map(g, ident)
        else:
            A -= rigid_motion_field(g, ident) @ rigid_body_map(g, ident)
        self.lu = sla.lu_factor(A, overwrite_a=True, check_finite=False)
        if np.min(np.abs(np.diag(self.lu[0]))) == 0:
            raise np.linalg.LinAlgError("singular single-particle block")
        self.orientations = [pl.orientation for pl in system.placements]
        self.n_block = 3 * N

    @property
    def storage_bytes(self):
        return self.lu[0].nbytes

    def apply(self, v):
        v = np.asarray(v, dtype=float).reshape(len(self.orientations), -1)
        out = np.empty_like(v)
        for a, O in enumerate(self.orientations):
            out[a] = rotate_stacked(O, sla.lu_solve(self.lu, rotate_stacked(O.T, v[a]), check_finite=False))
        return out.reshape(-1)


def build_preconditioner(system, maps):
    return BlockPreconditioner(system, maps)


# -- GMRES -----------------------------------------------------------------------

def gmres(matvec, b, tol=1e-8, maxiter=200, precond=None):
    """Unrestarted GMRES with right preconditioning.

    Modified Gram-Schmidt with one reorthogonalization pass. Returns
    (x, history, converged) where history holds relative residual norms,
    starting at 1.
    """
    b = np.asarray(b, dtype=float)
    beta = np.linalg.norm(b)
    if beta == 0:
        return np.zeros_like(b), [0.0], True
    P = (lambda v: v) if precond is None else precond
    n = len(b)
    V = np.zeros((maxiter + 1, n))
    H = np.zeros((maxiter + 1, maxiter))
    cs, sn = np.zeros(maxiter), np.zeros(maxiter)
    g = np.zeros(maxiter + 1)
    g[0] = beta
    V[0] = b / beta
    history = [1.0]
    k = 0
    converged = False
    for k in range(maxiter):
        w = matvec(P(V[k]))
        for _ in range(2):
            for j in range(k + 1):
                h = V[j] @ w
                H[j, k] += h
                w -= h * V[j]
        H[k + 1, k] = np.linalg.norm(w)
        breakdown = H[k + 1, k] <= 1e-14 * beta
        if not breakdown:
            V[k + 1] = w / H[k + 1, k]
        for j in range(k):
            a, c = H[j, k], H[j + 1, k]
            H[j, k] = cs[j] * a + sn[j] * c
            H[j + 1, k] = -sn[j] * a + cs[j] * c
        d = np.hypot(H[k, k], H[k + 1, k])
        cs[k], sn[k] = H[k, k] / d, H[k + 1, k] / d
        H[k, k], H[k + 1, k] = d, 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        history.append(abs(g[k + 1]) / beta)
        if history[-1] <= tol or breakdown:
            converged = history[-1] <= tol or breakdown
            break
    m = k + 1
    y = sla.solve_triangular(H[:m, :m], g[:m])
    return P(V[:m].T @ y), history, converged


# -- driver ------------------------------------------------------------------------

def default_maps(system):
    return pc.build_blocks(system.grid, system.params, with_M=False)


def solve(system, tol=1e-8, maps=None, maxiter=200, precondition=True, operator=None):
    """Solve the BIE; returns a DensitySolution.

    Raises ConvergenceError with the residual history when GMRES does not
    reach ``tol`` within ``maxiter`` iterations.
    """
    if not (1e-12 <= tol <= 1e-4):
        raise ValueError("tolerance must lie in [1e-12, 1e-4]")
    maps = default_maps(system) if maps is None else maps
    op = BIEOperator(system, maps) if operator is None else operator
    b = op.rhs()
    P = build_preconditioner(system, maps).apply if precondition else None
    Q, hist, ok = gmres(op.matvec, b, tol, maxiter, P)
    if not ok:
        raise ConvergenceError(f"GMRES did not converge in {maxiter} iterations "
                               f"(relative residual {hist[-1]:.3e})", hist)
    f, t, U, W = op.outputs(Q)
    return DensitySolution(Q=Q, residuals=hist, iterations=len(hist) - 1,
                           forces=f, torques=t, U=U, Omega=W)


def evaluate_field(system, solution, targets, maps=None, operator=None):
    """Velocity u = sum D[q] + completion flows + u_bg at targets; (u, route)."""
    if operator is None:
        maps = default_maps(system) if maps is None else maps
        operator = BIEOperator(system, maps)
    dl = operator.dl
    x = np.atleast_2d(np.asarray(targets, dtype=float))
    u, route = dl.evaluate(solution.Q, x)
    ok = route != "inside"
    if np.any(ok):
        u[ok] += dl.completion(solution.forces, solution.torques, system.mu, targets=x[ok])
        if system.u_bg is not None:
            u[ok] += np.asarray(system.u_bg(x[ok]), dtype=float).reshape(-1, 3)
    return u, route
