"""Spherical harmonics and solid harmonics used by the Laplace local expansion.

Harmonics are orthonormal on the unit sphere with the Condon-Shortley phase,
and Y_l^{-m} = conj(Y_l^m). Coefficient vectors store only 0 <= m <= l,
flattened l-major with m ascending: (0,0), (1,0), (1,1), (2,0), ...

Regular solid harmonics r^l Y_l^m and irregular ones r^{-(l+1)} Y_l^m are
generated by Cartesian recurrences, which stay finite on the polar axis.
Gradients use the ladder relations

    (d/dx + i d/dy), (d/dx - i d/dy), d/dz

which map degree l to l -+ 1 with closed-form coefficients.
"""

from functools import lru_cache

import numpy as np

Y00 = 0.5 / np.sqrt(np.pi)


def n_coeffs(p):
    """Number of stored coefficients, (p^2 + 3p + 2)/2."""
    return (p + 1) * (p + 2) // 2


def lm_index(l, m):
    return l * (l + 1) // 2 + m


@lru_cache(maxsize=64)
def lm_arrays(p):
    """(l, m) arrays in flat storage order."""
    l = np.concatenate([np.full(k + 1, k) for k in range(p + 1)])
    m = np.concatenate([np.arange(k + 1) for k in range(p + 1)])
    l.setflags(write=False)
    m.setflags(write=False)
    return l, m


def _check_lm(l, m):
    if int(l) != l or int(m) != m or l < 0 or abs(m) > l:
        raise ValueError(f"invalid harmonic index (l, m) = ({l}, {m})")


def legendre_normalized(p, x):
    """Normalized associated Legendre values.

    Returns P with shape (n_coeffs(p),) + x.shape such that
    Y_l^m(theta, phi) = P[lm] * exp(i m phi) for x = cos(theta), m >= 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.sqrt(np.clip(1 - x * x, 0, None))
    P = np.zeros((n_coeffs(p),) + x.shape)
    P[0] = Y00
    for m in range(p + 1):
        k = lm_index(m, m)
        if m > 0:
            P[k] = -np.sqrt((2 * m + 1) / (2 * m)) * y * P[lm_index(m - 1, m - 1)]
        if m < p:
            P[lm_index(m + 1, m)] = np.sqrt(2 * m + 3) * x * P[k]
        for l in range(m + 2, p + 1):
            a = np.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            P[lm_index(l, m)] = a * (x * P[lm_index(l - 1, m)] - b * P[lm_index(l - 2, m)])
    return P


def sph_harm(l, m, theta, phi):
    """Orthonormal Y_l^m(theta, phi), any sign of m."""
    _check_lm(l, m)
    P = legendre_normalized(l, np.cos(theta))[lm_index(l, abs(m))]
    val = P * np.exp(1j * abs(m) * np.asarray(phi))
    return np.conj(val) if m < 0 else val


def cart_to_sph(x):
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    theta = np.arccos(np.clip(np.divide(x[..., 2], r, out=np.ones_like(r), where=r > 0), -1, 1))
    phi = np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * np.pi)
    return r, theta, phi


def sph_to_cart(r, theta, phi):
    st = np.sin(theta)
    return np.stack([r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)], axis=-1)


# -- solid harmonics ---------------------------------------------------------

def regular_solid(p, pts):
    """r^l Y_l^m at points ``pts`` (..., 3); returns (n_coeffs(p), ...)."""
    pts = np.asarray(pts, dtype=float)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    r2 = x * x + y * y + z * z
    w = x + 1j * y
    R = np.zeros((n_coeffs(p),) + x.shape, dtype=complex)
    R[0] = Y00
    for m in range(p + 1):
        k = lm_index(m, m)
        if m > 0:
            R[k] = -np.sqrt((2 * m + 1) / (2 * m)) * w * R[lm_index(m - 1, m - 1)]
        if m < p:
            R[lm_index(m + 1, m)] = np.sqrt(2 * m + 3) * z * R[k]
        for l in range(m + 2, p + 1):
            a = np.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            R[lm_index(l, m)] = a * (z * R[lm_index(l - 1, m)] - b * r2 * R[lm_index(l - 2, m)])
    return R


def irregular_solid(p, pts):
    """r^{-(l+1)} Y_l^m at points ``pts`` (..., 3), all nonzero."""
    pts = np.asarray(pts, dtype=float)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    r2 = x * x + y * y + z * z
    if np.any(r2 == 0):
        raise ValueError("irregular harmonics evaluated at the expansion center")
    ir2 = 1.0 / r2
    wz = z * ir2
    w = (x + 1j * y) * ir2
    I = np.zeros((n_coeffs(p),) + x.shape, dtype=complex)
    I[0] = Y00 * np.sqrt(ir2)
    for m in range(p + 1):
        k = lm_index(m, m)
        if m > 0:
            I[k] = -np.sqrt((2 * m + 1) / (2 * m)) * w * I[lm_index(m - 1, m - 1)]
        if m < p:
            I[lm_index(m + 1, m)] = np.sqrt(2 * m + 3) * wz * I[k]
        for l in range(m + 2, p + 1):
            a = np.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            I[lm_index(l, m)] = a * (wz * I[lm_index(l - 1, m)] - b * ir2 * I[lm_index(l - 2, m)])
    return I


@lru_cache(maxsize=64)
def _ladder(p, kind):
    # index maps and coefficients for d/dz, D+ = d/dx + i d/dy, D- = d/dx - i d/dy
    l, m = lm_arrays(p)
    lf, mf = l.astype(float), m.astype(float)
    if kind == "irregular":
        # target degree l + 1 (tables must extend to p + 1)
        f = (2 * lf + 1) / (2 * lf + 3)
        iz = lm_index(l + 1, m)
        cz = -np.sqrt(f * (lf + 1 - mf) * (lf + 1 + mf))
        ip = lm_index(l + 1, m + 1)
        cp = np.sqrt(f * (lf + mf + 1) * (lf + mf + 2))
        im = lm_index(l + 1, np.abs(m - 1))
        cm = np.sqrt(f * (lf - mf + 1) * (lf - mf + 2))
        cm = np.where(m >= 1, -cm, cm)
    else:
        # target degree l - 1; terms whose target order is out of range vanish
        with np.errstate(invalid="ignore", divide="ignore"):
            f = np.where(l > 0, (2 * lf + 1) / (2 * lf - 1), 0.0)
        ok = l > 0
        iz = np.where(ok & (m <= l - 1), lm_index(np.maximum(l - 1, 0), np.minimum(m, np.maximum(l - 1, 0))), 0)
        cz = np.where(ok & (m <= l - 1), np.sqrt(np.clip(f * (lf - mf) * (lf + mf), 0, None)), 0.0)
        okp = ok & (m + 1 <= l - 1)
        ip = np.where(okp, lm_index(np.maximum(l - 1, 0), np.minimum(m + 1, np.maximum(l - 1, 0))), 0)
        cp = np.where(okp, np.sqrt(np.clip(f * (lf - mf) * (lf - mf - 1), 0, None)), 0.0)
        tm = np.abs(m - 1)
        okm = ok & (tm <= l - 1)
        im = np.where(okm, lm_index(np.maximum(l - 1, 0), np.minimum(tm, np.maximum(l - 1, 0))), 0)
        cm = np.where(okm, np.sqrt(np.clip(f * (lf + mf) * (lf + mf - 1), 0, None)), 0.0)
        cm = np.where(m >= 1, -cm, cm)
    conj_m = m == 0
    out = tuple(np.asarray(v) for v in (iz, cz, ip, cp, im, cm, conj_m))
    for v in out:
        v.setflags(write=False)
    return out


def _gradient(table, p, kind):
    iz, cz, ip, cp, im, cm, conj_m = _ladder(p, kind)
    ext = (slice(None),) + (None,) * (table.ndim - 1)
    dz = cz[ext] * table[iz]
    dp = cp[ext] * table[ip]
    tm = table[im]
    tm[conj_m] = np.conj(tm[conj_m])
    dm = cm[ext] * tm
    gx = 0.5 * (dp + dm)
    gy = -0.5j * (dp - dm)
    return np.stack([gx, gy, dz])


def irregular_solid_and_grad(p, pts):
    """Irregular harmonics up to degree p and their gradients.

    Returns (I, G) with I of shape (n_coeffs(p), ...) and G of shape
    (3, n_coeffs(p), ...), the Cartesian gradient with respect to the point.
    """
    I = irregular_solid(p + 1, pts)
    G = _gradient(I, p, "irregular")
    return I[: n_coeffs(p)], G


@lru_cache(maxsize=32)
def _irregular_grad_transpose(p):
    # A, B with Re(c . G_d) = Re((c A_d + conj(c) B_d) . I), I to degree p + 1
    iz, cz, ip, cp, im, cm, conj_m = _ladder(p, "irregular")
    n, nq = n_coeffs(p), n_coeffs(p + 1)
    A = np.zeros((3, n, nq), dtype=complex)
    B = np.zeros((3, n, nq), dtype=complex)
    k = np.arange(n)
    A[2, k, iz] += cz
    A[0, k, ip] += 0.5 * cp
    A[1, k, ip] += -0.5j * cp
    plain = ~conj_m
    A[0, k[plain], im[plain]] += 0.5 * cm[plain]
    A[1, k[plain], im[plain]] += 0.5j * cm[plain]
    B[0, k[conj_m], im[conj_m]] += 0.5 * cm[conj_m]
    B[1, k[conj_m], im[conj_m]] += np.conj(0.5j * cm[conj_m])
    A.setflags(write=False)
    B.setflags(write=False)
    return A, B


def irregular_grad_contract(c, p):
    """Fold coefficient weights into the irregular gradient.

    For weights ``c`` (..., n_coeffs(p)) returns V (3, ..., n_coeffs(p + 1))
    with Re(sum_lm c_lm d_i I_lm(y)) = Re(sum_k V_ik I_k(y)) for every y,
    where I runs to degree p + 1. Only the real part is preserved.
    """
    A, B = _irregular_grad_transpose(p)
    c = np.asarray(c, dtype=complex)
    cc = np.conj(c)
    return np.stack([c @ A[d] + cc @ B[d] for d in range(3)])


def irregular_grad_apply(Y, p):
    """Gradient sums from harmonic sums for real source weights.

    For Y (3, n_coeffs(p + 1), ...) with Y[d] = sum_n I(y_n) rho_d(y_n) and
    real rho, returns sum_n sum_d rho_d(y_n) grad_d I_lm(y_n) for l <= p.
    """
    A, B = _irregular_grad_transpose(p)
    Y = np.asarray(Y)
    return np.einsum("dkq,dq...->k...", A, Y) + np.einsum("dkq,dq...->k...", np.conj(B), np.conj(Y))


def irregular_solid_grad(l, m, y_rel):
    """Gradient of r^{-(l+1)} Y_l^m at ``y_rel`` for a single (l, m), any sign of m."""
    _check_lm(l, m)
    y_rel = np.asarray(y_rel, dtype=float)
    if np.linalg.norm(y_rel) == 0:
        raise ValueError("y_rel must be nonzero")
    _, G = irregular_solid_and_grad(l, y_rel)
    g = G[:, lm_index(l, abs(m))]
    return np.conj(g) if m < 0 else g


def regular_eval_vectors(x_rel, p):
    """Evaluation vectors (s, g) for the stored half of a local expansion.

    s_lm = r^l Y_l^m(x_rel), halved for m = 0, and g = grad s with shape
    (3, N_p). A real potential is recovered as <s, z> = 2 Re(conj(s) . z).
    Accepts a batch of points (..., 3); the coefficient axis comes first.
    """
    x_rel = np.asarray(x_rel, dtype=float)
    R = regular_solid(p, x_rel)
    G = _gradient(R, p, "regular")
    _, m = lm_arrays(p)
    half = np.where(m == 0, 0.5, 1.0)
    ext = (slice(None),) + (None,) * (R.ndim - 1)
    return R * half[ext], G * half[ext]


def pair(s, z):
    """The real pairing <s, z> = conj(s)^T z + s^T conj(z)."""
    return 2.0 * np.real(np.vdot(s, z))
