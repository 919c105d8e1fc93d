"""Symmetry-compressed QBX operators for one reference spheroid.

Only the first n_theta/2 latitudes (on the phi = 0 meridian) are computed:

    R_i    : 3 x 3N map from the density to the principal-value velocity at node i
    M_i^j  : N_p x 3N maps from the density to the exterior coefficients z^j

Every other node follows from the equator mirror and the azimuthal rotation
of the grid. With T_x the half-turn about the x axis, F the mirror node
permutation, P the cyclic shift by one meridian and T_z(b) rotation about the
polar axis,

    R_i = T_x R_{n_theta - i + 1} (T_x (x) F)
    R_{i + a n_theta} = T_z(a dphi) R_i (T_z(-dphi) (x) P)^a

and the coefficient maps pick up parity factors (-1)^{l+m} and phases
e^{i m a dphi}. Indices in code are zero based.
"""

from dataclasses import dataclass
import hashlib
import io
import struct

import numpy as np

from . import harmonics as hm
from .qbx import coefficient_maps, eval_weights, expansion_centers, nearest_centers, pv_row, qbx_rows

CACHE_MAGIC = b"SQBXMAPS"
CACHE_VERSION = 1
DEFAULT_MEMORY_LIMIT = 3 * 2**30


class CacheError(Exception):
    pass


class CacheChecksumError(CacheError):
    pass


class CacheFingerprintError(CacheError):
    pass


class CacheVersionError(CacheError):
    pass


def rot_z(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


T_X = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True, eq=False)
class SymmetryOps:
    """Permutations and diagonal factors of the grid symmetry group."""

    n_theta: int
    n_phi: int
    p: int

    @property
    def N(self):
        return self.n_theta * self.n_phi

    @property
    def dphi(self):
        return 2 * np.pi / self.n_phi

    def shift(self, alpha=1):
        """Index array of P^alpha: (P^alpha Q)[n] = Q[shift[n]]."""
        return (np.arange(self.N) + alpha * self.n_theta) % self.N

    @property
    def mirror(self):
        """Index array of F: node (i, j) takes the value at (n_theta-1-i, -j)."""
        i = np.arange(self.n_theta)
        j = np.arange(self.n_phi)
        src = (self.n_theta - 1 - i)[None, :] + self.n_theta * ((-j) % self.n_phi)[:, None]
        return src.ravel()

    def phase(self, alpha=1):
        _, m = hm.lm_arrays(self.p)
        return np.exp(1j * m * alpha * self.dphi)

    @property
    def parity(self):
        l, m = hm.lm_arrays(self.p)
        return (-1.0) ** (l + m)

    def split(self, node):
        """Node index -> (latitude index, meridian index)."""
        return node % self.n_theta, node // self.n_theta


def compose_right(row, A, perm):
    """row @ (A (x) Perm) for rows acting on stacked densities of length 3N."""
    lead = row.shape[:-1]
    N = len(perm)
    r = row.reshape(lead + (3, N))
    out = np.empty_like(r)
    out[..., perm] = np.einsum("...an,ab->...bn", r, A)
    return out.reshape(lead + (3 * N,))


def apply_left(A, row):
    """A @ row for rows shaped (3, 3N)."""
    return A @ row


@dataclass(frozen=True, eq=False)
class PrecomputedMaps:
    grid: object
    params: object
    R: np.ndarray
    M: np.ndarray = None

    @property
    def sym(self):
        return SymmetryOps(self.grid.n_theta, self.grid.n_phi, self.params.p)

    def storage_bytes(self):
        return self.R.nbytes + (0 if self.M is None else self.M.nbytes)


def predicted_bytes(grid, params, with_M=True):
    half = grid.n_theta // 2
    nR = half * 3 * 3 * grid.N * 8
    nM = half * 4 * hm.n_coeffs(params.p) * 3 * grid.N * 16 if with_M else 0
    return nR + nM


def check_radius(grid, params):
    """Interior centers are only valid while r stays below every radius of curvature."""
    rho = grid.shape.min_curvature_radius
    if params.r >= rho:
        raise ValueError(f"expansion radius {params.r:.4g} must be below the smallest radius of "
                         f"curvature {rho:.4g}; refine the grid or lower r/h")


def build_blocks(grid, params, with_M=True, memory_limit=DEFAULT_MEMORY_LIMIT):
    """Precompute R_i (and optionally M_i^j) for the first n_theta/2 nodes."""
    check_radius(grid, params)
    need = predicted_bytes(grid, params, with_M)
    if need > memory_limit:
        raise MemoryError(f"precomputed maps need {need} bytes, limit is {memory_limit}")
    half = grid.n_theta // 2
    R = np.empty((half, 3, 3 * grid.N))
    for i in range(half):
        R[i] = pv_row(grid, params, i)
    M = None
    if with_M:
        M = np.empty((half, 4, hm.n_coeffs(params.p), 3 * grid.N), dtype=complex)
        c = expansion_centers(grid, params.r, 1)
        for i in range(half):
            M[i] = coefficient_maps(grid, params, c[i])
    R.setflags(write=False)
    if M is not None:
        M.setflags(write=False)
    return PrecomputedMaps(grid, params, R, M)


def reconstruct_R(maps, i):
    sym = maps.sym
    it, alpha = sym.split(int(i))
    half = sym.n_theta // 2
    if it < half:
        row = np.array(maps.R[it])
    else:
        row = compose_right(T_X @ maps.R[sym.n_theta - 1 - it], T_X, sym.mirror)
    if alpha:
        b = alpha * sym.dphi
        row = compose_right(rot_z(b) @ row, rot_z(-b), sym.shift(alpha))
    return row


_MIRROR_SIGN = np.array([1.0, -1.0, -1.0, 1.0])


def _canonical_M(maps, it, j):
    sym = maps.sym
    half = sym.n_theta // 2
    if it < half:
        return np.array(maps.M[it, j])
    base = np.conj(maps.M[sym.n_theta - 1 - it, j])
    base *= (_MIRROR_SIGN[j] * sym.parity)[:, None]
    return compose_right(base, T_X, sym.mirror)


def reconstruct_M(maps, i, j):
    """Coefficient map for center ``i`` and component ``j`` (0..3)."""
    if maps.M is None:
        raise ValueError("coefficient maps were not stored")
    sym = maps.sym
    it, alpha = sym.split(int(i))
    if alpha == 0:
        return _canonical_M(maps, it, j)
    b = alpha * sym.dphi
    if j < 2:
        m1 = _canonical_M(maps, it, 0)
        m2 = _canonical_M(maps, it, 1)
        base = np.cos(b) * m1 - np.sin(b) * m2 if j == 0 else np.sin(b) * m1 + np.cos(b) * m2
    else:
        base = _canonical_M(maps, it, j)
    base = base * sym.phase(alpha)[:, None]
    return compose_right(base, rot_z(-b), sym.shift(alpha))


def apply_self_interaction(maps, Q):
    """Principal value of the double layer at all nodes, for stacked ``Q``."""
    sym = maps.sym
    N, nt, nph = sym.N, sym.n_theta, sym.n_phi
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (3 * N,):
        raise ValueError(f"density must have length {3 * N}")
    half = nt // 2
    q = Q.reshape(3, N)
    beta = sym.dphi * np.arange(nph)
    c, s = np.cos(beta), np.sin(beta)
    # rotated copies Q_a = (T_z(-a dphi) (x) P^a) Q, as (3, n_phi, N)
    idx = (np.arange(N)[None, :] + nt * np.arange(nph)[:, None]) % N
    qa = q[:, idx]
    Y = np.empty((3, nph, N))
    Y[0] = c[:, None] * qa[0] + s[:, None] * qa[1]
    Y[1] = -s[:, None] * qa[0] + c[:, None] * qa[1]
    Y[2] = qa[2]
    # mirrored copies (T_x (x) F) Q_a
    mir = sym.mirror
    Ym = Y[:, :, mir] * np.array([1.0, -1.0, -1.0])[:, None, None]
    stack = np.concatenate([Y, Ym], axis=1).transpose(0, 2, 1).reshape(3 * N, 2 * nph)
    U = (maps.R.reshape(3 * half, 3 * N) @ stack).reshape(half, 3, 2 * nph)
    north = U[:, :, :nph]  # (half, 3, nph)
    south = U[:, :, nph:] * np.array([1.0, -1.0, -1.0])[None, :, None]
    out = np.empty((3, nph, nt))
    for part, rows in ((north, np.arange(half)), (south, nt - 1 - np.arange(half))):
        ux = c[None, :] * part[:, 0] - s[None, :] * part[:, 1]
        uy = s[None, :] * part[:, 0] + c[None, :] * part[:, 1]
        out[0][:, rows] = ux.T
        out[1][:, rows] = uy.T
        out[2][:, rows] = part[:, 2].T
    return out.reshape(3 * N)


def canonical_rows(maps, targets):
    """QBX rows (T, 3, 3N) at body-frame targets via their nearest exterior center.

    Each target is rotated (and mirrored) into the frame of one of the stored
    centers, evaluated there, and the row is mapped back.
    """
    grid, params = maps.grid, maps.params
    sym = maps.sym
    x = np.atleast_2d(np.asarray(targets, dtype=float))
    k = nearest_centers(grid, params.r, x)
    it, alpha = sym.split(k)
    half = sym.n_theta // 2
    mirrored = it >= half
    ic = np.where(mirrored, sym.n_theta - 1 - it, it)
    b = alpha * sym.dphi
    cb, sb = np.cos(b), np.sin(b)
    xc = np.stack([cb * x[:, 0] + sb * x[:, 1], -sb * x[:, 0] + cb * x[:, 1], x[:, 2]], axis=1)
    xc[mirrored] *= np.array([1.0, -1.0, -1.0])
    centers = expansion_centers(grid, params.r, 1)
    rows = np.empty((len(x), 3, 3 * grid.N))
    for c in np.unique(ic):
        sel = np.nonzero(ic == c)[0]
        if maps.M is not None:
            W = np.conj(eval_weights(xc[sel] - centers[c], params.p))  # (t, 3, 4, Np)
            rows[sel] = 2.0 * np.real(np.einsum("tajk,jkn->tan", W, maps.M[c]))
        else:
            for s0 in range(0, len(sel), 32):
                part = sel[s0:s0 + 32]
                rows[part] = qbx_rows(grid, params, centers[c], xc[part])
    mir = sym.mirror
    for t in range(len(x)):
        row = rows[t]
        if mirrored[t]:
            row = compose_right(T_X @ row, T_X, mir)
        if alpha[t]:
            row = compose_right(rot_z(b[t]) @ row, rot_z(-b[t]), sym.shift(alpha[t]))
        rows[t] = row
    return rows


# -- disk cache ----------------------------------------------------------------

def _header(maps):
    g = maps.grid
    has_M = maps.M is not None
    return (CACHE_MAGIC + struct.pack("<I", CACHE_VERSION)
            + g.fingerprint().encode() + maps.params.fingerprint().encode()
            + struct.pack("<IIII", g.n_theta, g.n_phi, hm.n_coeffs(maps.params.p), int(has_M)))


def cache_save(maps, path):
    buf = io.BytesIO()
    buf.write(_header(maps))
    buf.write(np.ascontiguousarray(maps.R, dtype="<f8").tobytes())
    if maps.M is not None:
        buf.write(np.ascontiguousarray(maps.M, dtype="<c16").tobytes())
    data = buf.getvalue()
    with open(path, "wb") as f:
        f.write(data)
        f.write(hashlib.sha256(data).digest())


def cache_load(path, grid, params):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 32 + len(CACHE_MAGIC) + 4:
        raise CacheChecksumError("cache file truncated")
    data, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(data).digest() != digest:
        raise CacheChecksumError("cache checksum mismatch (corrupt or truncated file)")
    if data[:8] != CACHE_MAGIC:
        raise CacheVersionError("not a precomputed-map cache file")
    (version,) = struct.unpack("<I", data[8:12])
    if version != CACHE_VERSION:
        raise CacheVersionError(f"cache format version {version}, expected {CACHE_VERSION}")
    gfp = data[12:44].decode()
    pfp = data[44:76].decode()
    if gfp != grid.fingerprint() or pfp != params.fingerprint():
        raise CacheFingerprintError("cache was built for a different grid or QBX parameters")
    nt, nph, Np, has_M = struct.unpack("<IIII", data[76:92])
    N = nt * nph
    off = 92
    nR = (nt // 2) * 3 * 3 * N
    R = np.frombuffer(data, dtype="<f8", count=nR, offset=off).reshape(nt // 2, 3, 3 * N).astype(float)
    off += nR * 8
    M = None
    if has_M:
        nM = (nt // 2) * 4 * Np * 3 * N
        M = np.frombuffer(data, dtype="<c16", count=nM, offset=off).reshape(nt // 2, 4, Np, 3 * N).astype(complex)
        M.setflags(write=False)
    R.setflags(write=False)
    return PrecomputedMaps(grid, params, R, M)


def rows_to_world(rows, O):
    """Conjugate body-frame rows (T, 3, 3N) by a particle orientation ``O``.

    The result maps a world-frame stacked density to world-frame velocities.
    """
    T = rows.shape[0]
    N = rows.shape[-1] // 3
    B = rows.reshape(T, 3, 3, N)
    return np.einsum("ab,tbcn,jc->tajn", O, B, O, optimize=True).reshape(T, 3, 3 * N)
