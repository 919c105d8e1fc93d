"""Free-space Stokes kernels and their Ewald splits.

Conventions (r = x - y):

    S_ij = delta_ij / r + r_i r_j / r^3          stokeslet
    T_ijk = -6 r_i r_j r_k / r^5                 stresslet
    R_ij = eps_ijk r_k / r^3                     rotlet

The stresslet is split as T = T^R + T^F with the exponentially decaying
real-space part

    T^R_jlm = A(r) r_j r_l r_m + B(r) (delta_jl r_m + delta_lm r_j + delta_mj r_l)

and the smooth remainder T^F. Every stresslet-like kernel used here has this
two-coefficient radial structure, so contractions against (q, n) are written
once in terms of (alpha, beta).
"""

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import erfc

SQRT_PI = np.sqrt(np.pi)

# sqrt(pi)/xi^5 * C(s) as a series in s = xi r, C = -6/r^5 - A(r)
_SMOOTH_SERIES = np.array([
    -96 / 5, 128 / 7, -80 / 9, 32 / 11, -28 / 39, 32 / 225, -2 / 85, 4 / 1197,
])
_SERIES_CUTOFF = 0.2


@dataclass(frozen=True)
class EwaldSplitParams:
    """Ewald parameter xi, real-space cutoff r_c and Fourier index bound K."""

    xi: float
    r_c: float
    K: int

    def __post_init__(self):
        if not (self.xi > 0 and self.r_c > 0):
            raise ValueError("xi and r_c must be positive")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be an integer >= 1")
        object.__setattr__(self, "K", int(self.K))


def _norm(r):
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != 3:
        raise ValueError("separation vectors must have 3 components")
    return r, np.sqrt(np.einsum("...i,...i->...", r, r))


def _require_nonzero(d):
    if np.any(d == 0):
        raise ValueError("kernel evaluated at r = 0")


def stokeslet(r):
    r, d = _norm(r)
    _require_nonzero(d)
    d = d[..., None, None]
    return np.eye(3) / d + r[..., :, None] * r[..., None, :] / d**3


def stresslet(r):
    r, d = _norm(r)
    _require_nonzero(d)
    return -6 * np.einsum("...i,...j,...k->...ijk", r, r, r) / d[..., None, None, None] ** 5


def rotlet(r):
    r, d = _norm(r)
    _require_nonzero(d)
    out = np.zeros(r.shape[:-1] + (3, 3))
    out[..., 0, 1] = r[..., 2]
    out[..., 1, 2] = r[..., 0]
    out[..., 2, 0] = r[..., 1]
    out -= np.swapaxes(out, -1, -2)
    return out / d[..., None, None] ** 3


def stresslet_coeffs(d, part="full", xi=0.0):
    """Radial coefficients (alpha, beta) of a stresslet-like kernel.

    The kernel is alpha r_i r_j r_k + beta (delta r)_sym. ``part`` is
    'full' (T), 'real' (T^R) or 'smooth' (T^F). For 'smooth' the value at
    d = 0 is the finite limit.
    """
    d = np.asarray(d, dtype=float)
    if part == "full" or (part == "real" and xi == 0):
        with np.errstate(divide="ignore"):
            return -6.0 / d**5, np.zeros_like(d)
    if xi <= 0:
        if part == "smooth":
            return np.zeros_like(d), np.zeros_like(d)
        raise ValueError("xi must be >= 0")
    s = xi * d
    s2 = s * s
    e = np.exp(-s2)
    beta = 8 * xi**3 / SQRT_PI * (2 - s2) * e
    if part == "real":
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = -2 / d**4 * (3 * erfc(s) / d + 2 * xi / SQRT_PI * (3 + 2 * s2 - 4 * s2 * s2) * e)
        return alpha, beta
    if part != "smooth":
        raise ValueError(f"unknown kernel part {part!r}")
    small = s < _SERIES_CUTOFF
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = (-6 * (1 - erfc(s)) / d**5
                 + 4 * xi / SQRT_PI * (3 + 2 * s2 - 4 * s2 * s2) * e / d**4)
    if np.any(small):
        ser = np.polynomial.polynomial.polyval(s2, _SMOOTH_SERIES) * xi**5 / SQRT_PI
        alpha = np.where(small, ser, alpha)
    return alpha, -beta


def _assemble_stresslet(r, alpha, beta):
    out = alpha[..., None, None, None] * np.einsum("...i,...j,...k->...ijk", r, r, r)
    I = np.eye(3)
    sym = (np.einsum("ij,...k->...ijk", I, r) + np.einsum("jk,...i->...ijk", I, r)
           + np.einsum("ki,...j->...ijk", I, r))
    return out + beta[..., None, None, None] * sym


def stresslet_real(r, xi):
    """Real-space part T^R of the Ewald-split stresslet."""
    r, d = _norm(r)
    _require_nonzero(d)
    if xi < 0:
        raise ValueError("xi must be >= 0")
    alpha, beta = stresslet_coeffs(d, "real", xi)
    return _assemble_stresslet(r, alpha, beta)


def stresslet_smooth(r, xi):
    """Smooth part T^F = T - T^R; finite (zero) at r = 0."""
    r, d = _norm(r)
    if xi <= 0:
        raise ValueError("xi must be > 0")
    alpha, beta = stresslet_coeffs(d, "smooth", xi)
    return _assemble_stresslet(r, alpha, beta)


# -- Ewald-split stokeslet and rotlet (real-space parts) ---------------------

def stokeslet_real(r, xi):
    """Real-space part of the Hasimoto split of the stokeslet."""
    r, d = _norm(r)
    _require_nonzero(d)
    s = xi * d
    g = 2 * xi / SQRT_PI * np.exp(-s * s)
    a = erfc(s) / d - g
    b = erfc(s) / d**3 + g / d**2
    return a[..., None, None] * np.eye(3) + b[..., None, None] * r[..., :, None] * r[..., None, :]


def rotlet_real(r, xi):
    """Real-space part of the Ewald-split rotlet."""
    r, d = _norm(r)
    _require_nonzero(d)
    s = xi * d
    f = erfc(s) / d**3 + 2 * xi / SQRT_PI * np.exp(-s * s) / d**2
    return rotlet(r) * (f * d**3)[..., None, None]


# -- contractions used by quadrature ----------------------------------------

def stresslet_rows(targets, nodes, normals, weights, part="full", xi=0.0):
    """Quadrature rows of the double layer.

    Returns K with shape (T, 3, 3, N) such that the velocity at target t is
    u_i = sum_{j,n} K[t, i, j, n] q_j(y_n), i.e. w_n T_ijk(x_t - y_n) n_k.
    """
    x = np.atleast_2d(np.asarray(targets, dtype=float))
    r = x[:, None, :] - nodes[None, :, :]
    d = np.sqrt(np.einsum("tni,tni->tn", r, r))
    if part != "smooth":
        _require_nonzero(d)
    alpha, beta = stresslet_coeffs(d, part, xi)
    rn = np.einsum("tni,ni->tn", r, normals)
    a = alpha * rn * weights
    b = beta * weights
    K = a[:, None, None, :] * np.einsum("tni,tnj->tijn", r, r)
    K += (b * rn)[:, None, None, :] * np.eye(3)[None, :, :, None]
    K += b[:, None, None, :] * (np.einsum("tni,nj->tijn", r, normals) + np.einsum("ni,tnj->tijn", normals, r))
    return K


def double_layer_direct(targets, nodes, normals, weights, density, part="full", xi=0.0, chunk=2_000_000):
    """Direct quadrature of the double layer sum_n w_n T(x - y_n) : q_n n_n.

    ``density`` has shape (N, 3). Returns (T, 3).
    """
    x = np.atleast_2d(np.asarray(targets, dtype=float))
    q = np.asarray(density, dtype=float)
    wn = normals * weights[:, None]
    out = np.empty((len(x), 3))
    step = max(1, chunk // max(1, len(nodes)))
    for s in range(0, len(x), step):
        r = x[s:s + step, None, :] - nodes[None, :, :]
        d = np.sqrt(np.einsum("tni,tni->tn", r, r))
        if part != "smooth":
            _require_nonzero(d)
        alpha, beta = stresslet_coeffs(d, part, xi)
        rn = np.einsum("tni,ni->tn", r, wn)
        rq = np.einsum("tni,ni->tn", r, q)
        qn = np.einsum("ni,ni->n", q, wn)
        out[s:s + step] = np.einsum("tn,tni->ti", alpha * rn * rq + beta * qn, r)
        out[s:s + step] += np.einsum("tn,ni->ti", beta * rn, q) + np.einsum("tn,ni->ti", beta * rq, wn)
    return out


@njit(cache=True)
def _dl_sum(x, y, wn, q, out):
    for t in range(x.shape[0]):
        u0 = 0.0
        u1 = 0.0
        u2 = 0.0
        for n in range(y.shape[0]):
            r0 = x[t, 0] - y[n, 0]
            r1 = x[t, 1] - y[n, 1]
            r2 = x[t, 2] - y[n, 2]
            d2 = r0 * r0 + r1 * r1 + r2 * r2
            rn = r0 * wn[n, 0] + r1 * wn[n, 1] + r2 * wn[n, 2]
            rq = r0 * q[n, 0] + r1 * q[n, 1] + r2 * q[n, 2]
            c = -6.0 * rn * rq / (d2 * d2 * np.sqrt(d2))
            u0 += c * r0
            u1 += c * r1
            u2 += c * r2
        out[t, 0] += u0
        out[t, 1] += u1
        out[t, 2] += u2


def double_layer_sum(targets, nodes, normals, weights, density):
    """Compiled direct quadrature of the full double layer, (T, 3).

    Same result as ``double_layer_direct`` with part='full'; no check for
    coincident points, callers guarantee targets are off the source nodes.
    """
    x = np.ascontiguousarray(np.atleast_2d(targets), dtype=float)
    y = np.ascontiguousarray(nodes, dtype=float)
    wn = np.ascontiguousarray(normals * np.asarray(weights)[:, None], dtype=float)
    q = np.ascontiguousarray(density, dtype=float)
    out = np.zeros((len(x), 3))
    _dl_sum(x, y, wn, q, out)
    return out
