"""Ewald summation of the double layer and completion flows in a periodic box.

Each periodic kernel sum is split into a real-space part that decays like
exp(-xi^2 r^2), summed over neighbors within r_c, and a smooth part summed
over Fourier modes k = 2 pi (n1/L1, n2/L2, n3/L3), 0 < |n|_inf <= K, with

    f(x) = 1/V sum_{k != 0} f_hat(k) exp(i k.x).

The k = 0 mode is dropped (zero mean velocity gauge). Fourier coefficients
of the smooth parts, with a = k^2 / (4 xi^2):

    stresslet  -16 pi i / k^4 (1 + a + 2 a^2) e^{-a} (k k k - k^2/2 (delta k)_sym)
    stokeslet  8 pi (1 + a) e^{-a} (k^2 delta - k k) / k^4
    rotlet     -4 pi i eps_ijk k_k e^{-a} / k^2

They are validated by invariance of the total under changes of xi.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import precompute as pc
from .kernels import EwaldSplitParams, stokeslet_real, rotlet_real, stresslet_coeffs


@dataclass(frozen=True)
class PeriodicBox:
    L: tuple

    def __post_init__(self):
        L = np.broadcast_to(np.asarray(self.L, dtype=float), (3,)).copy()
        if np.any(~np.isfinite(L)) or np.any(L <= 0):
            raise ValueError("box lengths must be positive")
        L.setflags(write=False)
        object.__setattr__(self, "L", L)

    @property
    def volume(self):
        return float(np.prod(self.L))

    def wrap(self, x):
        return np.mod(x, self.L)

    def min_image(self, r):
        return r - self.L * np.round(r / self.L)

    def shift(self, p):
        return np.asarray(p) * self.L


# -- Fourier space -------------------------------------------------------------

def fourier_modes(K):
    """Half of the nonzero integer modes with |n|_inf <= K (one of each +-n pair)."""
    r = np.arange(-K, K + 1)
    n = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    keep = (n[:, 0] > 0) | ((n[:, 0] == 0) & ((n[:, 1] > 0) | ((n[:, 1] == 0) & (n[:, 2] > 0))))
    return n[keep]


class _Phases:
    # separable exp(-i k.y) = e1[n1] e2[n2] e3[n3] for points y
    def __init__(self, box, K, pts):
        pts = np.atleast_2d(pts)
        self.K = K
        ang = 2 * np.pi * pts / box.L  # (P, 3)
        m = np.arange(-K, K + 1)
        self.e = np.exp(-1j * m[None, :, None] * ang.T[:, None, :])  # (3, 2K+1, P)

    def block(self, n):
        K = self.K
        return self.e[0, n[:, 0] + K] * self.e[1, n[:, 1] + K] * self.e[2, n[:, 2] + K]


def _fourier_apply(box, K, src, amp, tgt, coef_fn, chunk=2048):
    """(2/V) Re sum_k coef_fn(k, S(k)) exp(i k.x) with S(k) = sum_p amp_p exp(-i k.y_p)."""
    n_all = fourier_modes(K)
    ps = _Phases(box, K, src)
    pt = _Phases(box, K, tgt)
    out = np.zeros((len(np.atleast_2d(tgt)), 3))
    amp = amp.reshape(len(amp), -1)
    for s in range(0, len(n_all), chunk):
        n = n_all[s:s + chunk]
        k = 2 * np.pi * n / box.L
        S = ps.block(n) @ amp  # (nk, m)
        c = coef_fn(k, S)  # (nk, 3)
        out += (np.conj(pt.block(n)).T @ c).real
    return out * (2.0 / box.volume)


def _stresslet_hat(xi):
    def coef(k, S):
        S = S.reshape(-1, 3, 3)  # S[:, j, l] = sum w q_j n_l e^{-ik.y}
        k2 = np.einsum("ki,ki->k", k, k)
        a = k2 / (4 * xi * xi)
        H = -16j * np.pi / k2**2 * (1 + a + 2 * a * a) * np.exp(-a)
        kSk = np.einsum("kj,kjl,kl->k", k, S, k)
        Sk = np.einsum("kjl,kl->kj", S, k)  # sum q (k.n)
        kS = np.einsum("kj,kjl->kl", k, S)  # sum n (k.q)
        tr = np.einsum("kjj->k", S)  # sum q.n
        v = k * kSk[:, None] - 0.5 * k2[:, None] * (Sk + kS + k * tr[:, None])
        return H[:, None] * v
    return coef


def _stokeslet_hat(xi):
    def coef(k, S):
        k2 = np.einsum("ki,ki->k", k, k)
        a = k2 / (4 * xi * xi)
        H = 8 * np.pi * (1 + a) * np.exp(-a) / k2**2
        kf = np.einsum("ki,ki->k", k, S)
        return H[:, None] * (k2[:, None] * S - k * kf[:, None])
    return coef


def _rotlet_hat(xi):
    def coef(k, S):
        k2 = np.einsum("ki,ki->k", k, k)
        H = -4j * np.pi * np.exp(-k2 / (4 * xi * xi)) / k2
        return H[:, None] * np.cross(S, k)
    return coef


def fourier_space_sum(nodes, weights, normals, density, xi, K, box, targets):
    """Smooth-part double layer sum over Fourier modes, k = 0 excluded."""
    if K < 1:
        raise ValueError("K must be >= 1")
    q = np.asarray(density, dtype=float)
    amp = (weights[:, None, None] * q[:, :, None] * normals[:, None, :]).reshape(-1, 9)
    return _fourier_apply(box, K, nodes, amp, targets, _stresslet_hat(xi))


# -- real space ----------------------------------------------------------------

def real_space_pairs(targets, sources, r_c, box):
    """Minimum-image pairs with |x - y| <= r_c: (target idx, source idx, r)."""
    if r_c > 0.5 * box.L.min() * (1 + 1e-12):
        raise ValueError(f"r_c = {r_c} exceeds half the smallest box length")
    x = np.atleast_2d(targets)
    y = np.atleast_2d(sources)
    # periodic tree needs coordinates in [0, L)
    tx = cKDTree(np.mod(x, box.L) % box.L, boxsize=box.L)
    ty = cKDTree(np.mod(y, box.L) % box.L, boxsize=box.L)
    sdm = tx.sparse_distance_matrix(ty, r_c, output_type="ndarray")
    i = sdm["i"].astype(np.int64)
    j = sdm["j"].astype(np.int64)
    order = np.lexsort((j, i))
    i, j = i[order], j[order]
    r = box.min_image(x[i] - y[j])
    return i, j, r


def stresslet_real_values(r, normals, weights, xi):
    """Per-pair 3x3 blocks w (alpha (r.n) r r^T + beta ((r.n) I + r n^T + n r^T))."""
    d = np.sqrt(np.einsum("pi,pi->p", r, r))
    alpha, beta = stresslet_coeffs(d, "real", xi)
    rn = np.einsum("pi,pi->p", r, normals)
    V = (alpha * rn * weights)[:, None, None] * r[:, :, None] * r[:, None, :]
    b = beta * weights
    V += (b * rn)[:, None, None] * np.eye(3)
    V += b[:, None, None] * (r[:, :, None] * normals[:, None, :] + normals[:, :, None] * r[:, None, :])
    return V


def real_space_sum(targets, nodes, normals, weights, density, xi, r_c, box):
    """Real-space double layer sum over minimum-image neighbors within r_c.

    Coincident pairs (the singular self-pair) are excluded.
    """
    i, j, r = real_space_pairs(targets, nodes, r_c, box)
    keep = np.einsum("pi,pi->p", r, r) > 0
    i, j, r = i[keep], j[keep], r[keep]
    V = stresslet_real_values(r, normals[j], weights[j], xi)
    contrib = np.einsum("pab,pb->pa", V, np.asarray(density)[j])
    out = np.zeros((len(np.atleast_2d(targets)), 3))
    np.add.at(out, i, contrib)
    return out


# -- completion flows ------------------------------------------------------------

def periodic_completion_flow(centers, forces, torques, xi, r_c, K, box, targets, mu=1.0):
    """Periodic stokeslet + rotlet fields (1/(8 pi mu))(S f + R t) at targets."""
    centers = np.atleast_2d(centers)
    f = np.atleast_2d(np.asarray(forces, dtype=float))
    t = np.atleast_2d(np.asarray(torques, dtype=float))
    x = np.atleast_2d(targets)
    out = np.zeros((len(x), 3))
    i, j, r = real_space_pairs(x, centers, r_c, box)
    if len(i):
        if np.any(np.einsum("pi,pi->p", r, r) == 0):
            raise ValueError("completion flow evaluated at a particle center")
        u = np.einsum("pab,pb->pa", stokeslet_real(r, xi), f[j])
        u += np.einsum("pab,pb->pa", rotlet_real(r, xi), t[j])
        np.add.at(out, i, u)
    out += _fourier_apply(box, K, centers, f, x, _stokeslet_hat(xi))
    out += _fourier_apply(box, K, centers, t, x, _rotlet_hat(xi))
    return out / (8 * np.pi * mu)


# -- parameter selection ------------------------------------------------------------

def _real_tail(s):
    # dimensionless size of T^R relative to the bare stresslet at xi r = s
    alpha, beta = stresslet_coeffs(np.array(1.0), "real", s)
    return float((abs(alpha) + 3 * abs(beta)) / 6)


def _fourier_tail(a):
    return (1 + a + 2 * a * a) * np.exp(-a)


def _solve_decreasing(f, target, lo, hi):
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if f(mid) > target:
            lo = mid
        else:
            hi = mid
    return hi


def _probe(box, n, seed=12345):
    rng = np.random.default_rng(seed)
    src = rng.uniform(0, 1, (n, 3)) * box.L
    tgt = rng.uniform(0, 1, (n, 3)) * box.L
    q = rng.standard_normal((n, 3))
    nv = rng.standard_normal((n, 3))
    nv /= np.linalg.norm(nv, axis=1, keepdims=True)
    w = rng.uniform(0.5, 1.0, n) * box.volume / n
    return src, tgt, q, nv, w


def select_ewald_params(box, n_sources, tolerance, h=None, xi=None):
    """Choose (xi, r_c, K) for a target relative accuracy.

    r_c is where the real-space kernel has decayed to tolerance/10 of the
    bare stresslet, K where the Fourier coefficients have decayed likewise.
    Without an explicit ``xi`` the smallest xi whose r_c fits in half the
    box is used (it minimizes the Fourier work, and the real-space work is
    bounded by the box). K is then confirmed empirically: raising it must
    change a probe sum by less than tolerance/10.

    ``h`` is accepted for diagnostics; xi h above about 0.8 means the smooth
    part is under-resolved on the grid.
    """
    if tolerance < 1e-12:
        raise ValueError("tolerance must be >= 1e-12")
    goal = tolerance / 10
    s_star = _solve_decreasing(_real_tail, goal, 0.5, 12.0)
    half = 0.5 * box.L.min()
    if xi is None:
        xi = s_star / half
    r_c = s_star / xi
    if r_c > half * (1 + 1e-12):
        raise ValueError(f"xi = {xi} needs r_c = {r_c} > L/2 = {half}")
    r_c = min(r_c, half)
    a_star = _solve_decreasing(_fourier_tail, goal, 0.0, 200.0)
    k_max = 2 * xi * np.sqrt(a_star)
    K = max(1, int(np.ceil(k_max * box.L.max() / (2 * np.pi))))
    src, tgt, q, nv, w = _probe(box, 16)
    prev = fourier_space_sum(src, w, nv, q, xi, K, box, tgt)
    scale = max(np.abs(prev).max(), 1e-300)
    while True:
        nxt = fourier_space_sum(src, w, nv, q, xi, K + 1, box, tgt)
        if np.abs(nxt - prev).max() < goal * scale:
            break
        K += 1
        prev = nxt
    return EwaldSplitParams(xi=float(xi), r_c=float(r_c), K=int(K))


# -- periodic double layer of a particle system ---------------------------------

_IMAGES = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=float)


class PeriodicDoubleLayer:
    """Ewald-summed double layer of M identical particles in a periodic box.

    The double layer of particle a seen from x is split as

        D = sum_tau int T^R(x - y - tau) + sum_tau int T^F(x - y - tau).

    The second sum is the Fourier-mode sum over all nodes. For a (target,
    particle, image) triple closer than d_eps the real-space part of that
    image is computed as the QBX value of the full double layer minus direct
    quadrature of T^F over the image; on the particle's own surface the
    principal value from the precomputed maps plays this role. All other
    triples use direct quadrature of T^R within r_c (minimum image).
    """

    route_far = "periodic"

    def __init__(self, grid, placements, params, maps, box, ewald):
        from .geometry import place_particle
        from .kernels import stresslet_rows

        self.grid, self.params, self.maps, self.box, self.ewald = grid, params, maps, box, ewald
        self.placements = list(placements)
        if ewald.r_c > 0.5 * box.L.min() * (1 + 1e-12):
            raise ValueError("r_c exceeds half the smallest box length")
        X, Nn = zip(*(place_particle(grid, pl) for pl in self.placements))
        self.X, self.normals = np.array(X), np.array(Nn)
        M, N = self.M, grid.N
        self.centers = np.array([pl.center for pl in self.placements])
        K = stresslet_rows(grid.nodes, grid.nodes, grid.normals, grid.weights, "smooth", ewald.xi)
        self.self_smooth = K.transpose(1, 0, 2, 3).reshape(3 * N, 3 * N)
        self._w_all = np.tile(grid.weights, M)
        self._phases = _Phases(box, ewald.K, self.X.reshape(-1, 3))
        self.near = []
        keys = set()
        for b in range(M):
            for entry in self._near_triples(self.X[b], own=b):
                t_idx, a, img, rows = entry
                self.near.append((b, t_idx, a, rows))
                keys.update((b * N + t, a, img) for t in t_idx)
        self.real = self._real_matrix(self.X.reshape(-1, 3), keys, exclude_own=True)

    @property
    def M(self):
        return len(self.placements)

    # -- helpers --------------------------------------------------------------

    def _candidates(self, x, a):
        # images of particle a within reach of targets x: (target idx, image key, body coords)
        g = self.grid
        reach = max(g.shape.a, g.shape.c) + self.params.d_eps
        v0 = self.box.min_image(x - self.centers[a])
        out = []
        for s in _IMAGES:
            v = v0 + s * self.box.L
            close = np.nonzero(np.linalg.norm(v, axis=1) < reach)[0]
            if len(close) == 0:
                continue
            tau = x[close] - self.centers[a] - v[close]
            img = np.round(tau / self.box.L).astype(int)
            body = v[close] @ self.placements[a].orientation
            out.append((close, img, body))
        return out

    def _near_triples(self, x, own=None, rows=True):
        """Near (target, particle, image) triples for world targets ``x``.

        Yields (target indices, particle, image key, correction rows) with one
        entry per distinct (particle, image); the own particle's zero image is
        skipped. With ``rows=False`` the rows entry is the body coordinates.
        """
        from .kernels import stresslet_rows

        g, par = self.grid, self.params
        for a in range(self.M):
            pl = self.placements[a]
            for close, img, body in self._candidates(x, a):
                if own == a:
                    other = np.any(img != 0, axis=1)
                    close, img, body = close[other], img[other], body[other]
                if np.any(g.shape.contains(body)):
                    if own is None:
                        raise ValueError("target inside a particle")
                    raise ValueError(f"particles {own} and {a} overlap")
                sel = g.shape.distance(body) < par.d_eps
                for key in {tuple(k) for k in img[sel]}:
                    m = sel & np.all(img == key, axis=1)
                    t_idx = close[m]
                    if not rows:
                        yield t_idx, a, key, body[m]
                        continue
                    shift = np.asarray(key) * self.box.L
                    R = pc.rows_to_world(pc.canonical_rows(self.maps, body[m]), pl.orientation)
                    R -= stresslet_rows(x[t_idx], self.X[a] + shift, self.normals[a], g.weights,
                                        "smooth", self.ewald.xi).reshape(len(t_idx), 3, -1)
                    yield t_idx, a, key, R

    def _real_matrix(self, targets, near_keys, exclude_own):
        """Sparse T^R interactions from all nodes to ``targets`` within r_c."""
        from scipy.sparse import csr_matrix

        N, M = self.grid.N, self.M
        T = len(np.atleast_2d(targets))
        i, j, r = real_space_pairs(targets, self.X.reshape(-1, 3), self.ewald.r_c, self.box)
        src = self.X.reshape(-1, 3)
        img = np.round((targets[i] - src[j] - r) / self.box.L).astype(int)
        pj = j // N
        keep = np.einsum("pi,pi->p", r, r) > 0
        if exclude_own:
            keep &= ~((i // N == pj) & np.all(img == 0, axis=1))
        if near_keys:
            near = np.array([(t, a) + tuple(k) for t, a, k in near_keys], dtype=np.int64)
            keep &= ~np.isin(_key_code(i, pj, img, M), _key_code(near[:, 0], near[:, 1], near[:, 2:], M))
        i, j, r, pj = i[keep], j[keep], r[keep], pj[keep]
        V = stresslet_real_values(r, self.normals.reshape(-1, 3)[j], self._w_all[j], self.ewald.xi)
        tn = j % N
        rows = i[:, None] * 3 + np.arange(3)[None, :]  # target-major (T, 3) layout
        cols = pj[:, None] * 3 * N + np.arange(3)[None, :] * N + tn[:, None]
        R = np.broadcast_to(rows[:, :, None], V.shape).ravel()
        C = np.broadcast_to(cols[:, None, :], V.shape).ravel()
        return csr_matrix((V.ravel(), (R, C)), shape=(3 * T, 3 * N * M))

    def _fourier(self, Q, tgt_phases):
        q = np.asarray(Q, dtype=float).reshape(self.M, 3, -1).transpose(0, 2, 1).reshape(-1, 3)
        nrm = self.normals.reshape(-1, 3)
        amp = (self._w_all[:, None, None] * q[:, :, None] * nrm[:, None, :]).reshape(-1, 9)
        return _phase_apply(self.box, self.ewald.K, self._phases, amp, tgt_phases, _stresslet_hat(self.ewald.xi))

    # -- interface --------------------------------------------------------------

    def apply(self, Q):
        """Periodic double layer at all nodes, principal value on own surfaces; (M, 3N)."""
        Q = np.asarray(Q, dtype=float).reshape(self.M, -1)
        N = self.grid.N
        out = np.empty_like(Q)
        for b, pl in enumerate(self.placements):
            O = pl.orientation
            qb = (O.T @ Q[b].reshape(3, N)).reshape(-1)
            ub = pc.apply_self_interaction(self.maps, qb) - self.self_smooth @ qb
            out[b] = (O @ ub.reshape(3, N)).reshape(-1)
        u = (self.real @ Q.reshape(-1)).reshape(self.M, N, 3)
        u += self._fourier(Q, self._phases).reshape(self.M, N, 3)
        out += u.transpose(0, 2, 1).reshape(self.M, -1)
        for b, idx, a, rows in self.near:
            ob = out[b].reshape(3, N)
            ob[:, idx] += (rows @ Q[a]).T
        return out

    def completion(self, f, t, mu, targets=None):
        pts = self.X.reshape(-1, 3) if targets is None else np.atleast_2d(targets)
        e = self.ewald
        u = periodic_completion_flow(self.centers, f, t, e.xi, e.r_c, e.K, self.box, pts, mu)
        if targets is None:
            return u.reshape(self.M, self.grid.N, 3).transpose(0, 2, 1).reshape(self.M, -1)
        return u

    def evaluate(self, Q, targets):
        """Periodic double layer at off-surface targets: (u (T, 3), route (T,))."""
        from .kernels import double_layer_direct
        from .qbx import near_eval

        g = self.grid
        x = np.atleast_2d(np.asarray(targets, dtype=float))
        Q = np.asarray(Q, dtype=float).reshape(self.M, -1)
        route = np.full(len(x), self.route_far, dtype=object)
        inside = np.zeros(len(x), dtype=bool)
        for a in range(self.M):
            for close, _, body in self._candidates(x, a):
                inside[close[g.shape.contains(body)]] = True
        ok = np.nonzero(~inside)[0]
        xo = x[ok]
        u = np.full((len(x), 3), np.nan)
        keys = set()
        uo = np.zeros((len(xo), 3))
        for t_idx, a, key, body in self._near_triples(xo, rows=False):
            pl = self.placements[a]
            qb = (pl.orientation.T @ Q[a].reshape(3, -1)).T
            uo[t_idx] += near_eval(g, self.params, qb, body) @ pl.orientation.T
            shift = np.asarray(key) * self.box.L
            q = Q[a].reshape(3, -1).T
            uo[t_idx] -= double_layer_direct(xo[t_idx], self.X[a] + shift, self.normals[a], g.weights, q,
                                             part="smooth", xi=self.ewald.xi)
            keys.update((t, a, key) for t in t_idx)
            route[ok[t_idx]] = "qbx"
        R = self._real_matrix(xo, keys, exclude_own=False)
        uo += (R @ Q.reshape(-1)).reshape(-1, 3)
        uo += self._fourier(Q, _Phases(self.box, self.ewald.K, xo))
        u[ok] = uo
        route[inside] = "inside"
        return u, route


def _key_code(t, a, img, M):
    # integer code of (target, particle, image) keys; image offsets assumed |k| < 512
    k = np.asarray(img, dtype=np.int64) + 512
    return ((np.asarray(t, dtype=np.int64) * M + a) * 1024 + k[:, 0]) * 1024 ** 2 + k[:, 1] * 1024 + k[:, 2]


def _phase_apply(box, K, ps, amp, pt, coef_fn, chunk=2048):
    # (2/V) Re sum_k coef_fn(k, S(k)) exp(i k.x) with precomputed phases
    n_all = fourier_modes(K)
    P = pt.e.shape[2]
    out = np.zeros((P, 3))
    for s in range(0, len(n_all), chunk):
        n = n_all[s:s + chunk]
        k = 2 * np.pi * n / box.L
        S = ps.block(n) @ amp
        c = coef_fn(k, S)
        out += (np.conj(pt.block(n)).T @ c).real
    return out * (2.0 / box.volume)
