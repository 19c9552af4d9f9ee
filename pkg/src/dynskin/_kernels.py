"""Hot inner loops: skinning, its adjoint, unskinning, oscillator integration.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
fallback.  Set ``DYNSKIN_DISABLE_NUMBA=1`` to force the numpy path (also
used automatically when numba is not importable).  Both paths are kept
numerically equivalent and are cross-checked in the test suite.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def _flag_disabled() -> bool:
    return os.environ.get("DYNSKIN_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")


USE_NUMBA = HAVE_NUMBA and not _flag_disabled()


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def skin_np(weights, transforms, rest):
    """v'_i = sum_k W[i,k] (A_k[:, :3] v_i + A_k[:, 3])."""
    blended = np.einsum("ik,kab->iab", weights, transforms)
    return np.einsum("iab,ib->ia", blended[:, :, :3], rest) + blended[:, :, 3]


def skin_grad_np(weights, transforms, rest, grad_out):
    """Adjoint of :func:`skin_np` w.r.t. rest vertices and the K 3x4 transforms."""
    blended = np.einsum("ik,kab->iab", weights, transforms)
    grad_rest = np.einsum("iab,ia->ib", blended[:, :, :3], grad_out)
    homog = np.concatenate([rest, np.ones((rest.shape[0], 1))], axis=1)
    grad_t = np.einsum("ik,ia,ib->kab", weights, grad_out, homog)
    return grad_rest, grad_t


def unskin_np(weights, transforms, posed):
    """Invert the per-vertex blended transform; also return per-vertex determinants."""
    blended = np.einsum("ik,kab->iab", weights, transforms)
    M = blended[:, :, :3]
    det = np.linalg.det(M)
    safe = np.abs(det) >= 1e-300
    rhs = (posed - blended[:, :, 3])[..., None]
    out = np.full(posed.shape, np.nan)
    if safe.any():
        out[safe] = np.linalg.solve(M[safe], rhs[safe])[..., 0]
    return out, det


def integrate_oscillators_np(forcing, stiffness, damping, mass, h, q0, u0):
    """Symplectic Euler for q'' = -k q - c q' - m a(t), one scalar per vertex.

    Row t of the output holds the state *before* the t-th update, so row 0
    equals ``q0``.
    """
    T, N = forcing.shape
    out = np.empty((T, N))
    q = q0.astype(np.float64).copy()
    u = u0.astype(np.float64).copy()
    for t in range(T):
        out[t] = q
        u = u + h * (-stiffness * q - damping * u - mass * forcing[t])
        q = q + h * u
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def skin_nb(weights, transforms, rest):
        N, K = weights.shape
        out = np.zeros((N, 3))
        for i in range(N):
            x, y, z = rest[i, 0], rest[i, 1], rest[i, 2]
            for k in range(K):
                w = weights[i, k]
                if w == 0.0:
                    continue
                for a in range(3):
                    out[i, a] += w * (
                        transforms[k, a, 0] * x
                        + transforms[k, a, 1] * y
                        + transforms[k, a, 2] * z
                        + transforms[k, a, 3]
                    )
        return out

    @njit(cache=True)
    def skin_grad_nb(weights, transforms, rest, grad_out):
        N, K = weights.shape
        grad_rest = np.zeros((N, 3))
        grad_t = np.zeros((K, 3, 4))
        for i in range(N):
            for k in range(K):
                w = weights[i, k]
                if w == 0.0:
                    continue
                for a in range(3):
                    g = w * grad_out[i, a]
                    for b in range(3):
                        grad_rest[i, b] += g * transforms[k, a, b]
                        grad_t[k, a, b] += g * rest[i, b]
                    grad_t[k, a, 3] += g
        return grad_rest, grad_t

    @njit(cache=True)
    def unskin_nb(weights, transforms, posed):
        N, K = weights.shape
        out = np.empty((N, 3))
        det = np.empty(N)
        M = np.empty((3, 4))
        for i in range(N):
            M[:, :] = 0.0
            for k in range(K):
                w = weights[i, k]
                if w == 0.0:
                    continue
                for a in range(3):
                    for b in range(4):
                        M[a, b] += w * transforms[k, a, b]
            # explicit 3x3 inverse via cofactors
            c00 = M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1]
            c01 = M[1, 2] * M[2, 0] - M[1, 0] * M[2, 2]
            c02 = M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]
            d = M[0, 0] * c00 + M[0, 1] * c01 + M[0, 2] * c02
            det[i] = d
            if abs(d) < 1e-300:
                out[i, 0] = np.nan
                out[i, 1] = np.nan
                out[i, 2] = np.nan
                continue
            c10 = M[0, 2] * M[2, 1] - M[0, 1] * M[2, 2]
            c11 = M[0, 0] * M[2, 2] - M[0, 2] * M[2, 0]
            c12 = M[0, 1] * M[2, 0] - M[0, 0] * M[2, 1]
            c20 = M[0, 1] * M[1, 2] - M[0, 2] * M[1, 1]
            c21 = M[0, 2] * M[1, 0] - M[0, 0] * M[1, 2]
            c22 = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
            rx = posed[i, 0] - M[0, 3]
            ry = posed[i, 1] - M[1, 3]
            rz = posed[i, 2] - M[2, 3]
            out[i, 0] = (c00 * rx + c10 * ry + c20 * rz) / d
            out[i, 1] = (c01 * rx + c11 * ry + c21 * rz) / d
            out[i, 2] = (c02 * rx + c12 * ry + c22 * rz) / d
        return out, det

    @njit(cache=True)
    def integrate_oscillators_nb(forcing, stiffness, damping, mass, h, q0, u0):
        T, N = forcing.shape
        out = np.empty((T, N))
        for i in range(N):
            q = q0[i]
            u = u0[i]
            k = stiffness[i]
            c = damping[i]
            m = mass[i]
            for t in range(T):
                out[t, i] = q
                u = u + h * (-k * q - c * u - m * forcing[t, i])
                q = q + h * u
        return out


def _as64(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def skin(weights, transforms, rest):
    w, t, r = _as64(weights, transforms, rest)
    return skin_nb(w, t, r) if USE_NUMBA else skin_np(w, t, r)


def skin_grad(weights, transforms, rest, grad_out):
    args = _as64(weights, transforms, rest, grad_out)
    return skin_grad_nb(*args) if USE_NUMBA else skin_grad_np(*args)


def unskin(weights, transforms, posed):
    args = _as64(weights, transforms, posed)
    return unskin_nb(*args) if USE_NUMBA else unskin_np(*args)


def integrate_oscillators(forcing, stiffness, damping, mass, h, q0, u0):
    f, k, c, m, a, b = _as64(forcing, stiffness, damping, mass, q0, u0)
    if USE_NUMBA:
        return integrate_oscillators_nb(f, k, c, m, float(h), a, b)
    return integrate_oscillators_np(f, k, c, m, float(h), a, b)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# registration objective (numba only; the numpy reference lives in
# registration.py and is the path taken when numba is disabled)
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _rodrigues_jac_nb(r, R, dR):
        x, y, z = r[0], r[1], r[2]
        th2 = x * x + y * y + z * z
        if th2 < 1e-6:
            t4 = th2 * th2
            a = 1.0 - th2 / 6.0 + t4 / 120.0
            b = 0.5 - th2 / 24.0 + t4 / 720.0
            da = -1.0 / 3.0 + th2 / 30.0 - t4 / 840.0
            db = -1.0 / 12.0 + th2 / 180.0 - t4 / 6720.0
        else:
            t = np.sqrt(th2)
            s = np.sin(t)
            c = np.cos(t)
            a = s / t
            b = (1.0 - c) / th2
            da = (c - a) / th2
            db = (a - 2.0 * b) / th2
        Km = np.zeros((3, 3))
        Km[0, 1] = -z
        Km[0, 2] = y
        Km[1, 0] = z
        Km[1, 2] = -x
        Km[2, 0] = -y
        Km[2, 1] = x
        K2 = Km @ Km
        for i in range(3):
            for j in range(3):
                R[i, j] = a * Km[i, j] + b * K2[i, j]
            R[i, i] += 1.0
        E = np.zeros((3, 3))
        for c_ in range(3):
            E[:, :] = 0.0
            if c_ == 0:
                E[1, 2] = -1.0
                E[2, 1] = 1.0
            elif c_ == 1:
                E[0, 2] = 1.0
                E[2, 0] = -1.0
            else:
                E[0, 1] = -1.0
                E[1, 0] = 1.0
            EK = E @ Km + Km @ E
            rc = r[c_]
            for i in range(3):
                for j in range(3):
                    dR[c_, i, j] = rc * (da * Km[i, j] + db * K2[i, j]) + a * E[i, j] + b * EK[i, j]

    @njit(cache=True)
    def alignment_nb(template, shape_mean, shape_dirs, joint_reg, parents, weights, pose_dirs,
                     beta, theta, target, need_grad):
        N = template.shape[0]
        K = parents.shape[0]
        B = beta.shape[0]
        rest = template.copy()
        flat_shape = shape_mean + shape_dirs @ beta
        for i in range(N):
            for a in range(3):
                rest[i, a] += flat_shape[3 * i + a]
        joints = joint_reg @ rest
        R_loc = np.empty((K, 3, 3))
        dR_loc = np.empty((K, 3, 3, 3))
        for k in range(K):
            _rodrigues_jac_nb(theta[3 + 3 * k: 6 + 3 * k], R_loc[k], dR_loc[k])
        Rw = np.empty((K, 3, 3))
        tw = np.empty((K, 3))
        for k in range(K):
            p = parents[k]
            if p < 0:
                Rw[k] = R_loc[k]
                for a in range(3):
                    tw[k, a] = joints[k, a] + theta[a]
            else:
                Rw[k] = Rw[p] @ R_loc[k]
                for a in range(3):
                    acc = tw[p, a]
                    for b in range(3):
                        acc += Rw[p, a, b] * (joints[k, b] - joints[p, b])
                    tw[k, a] = acc
        A = np.empty((K, 3, 4))
        for k in range(K):
            for a in range(3):
                acc = tw[k, a]
                for b in range(3):
                    A[k, a, b] = Rw[k, a, b]
                    acc -= Rw[k, a, b] * joints[k, b]
                A[k, a, 3] = acc
        feats = np.empty(9 * K)
        for k in range(K):
            for a in range(3):
                for b in range(3):
                    feats[9 * k + 3 * a + b] = R_loc[k, a, b] - (1.0 if a == b else 0.0)
        pb = pose_dirs @ feats
        verts = rest.copy()
        for i in range(N):
            for a in range(3):
                verts[i, a] += pb[3 * i + a]
        posed = skin_nb(weights, A, verts)
        resid = posed - target
        E = 0.0
        for i in range(N):
            for a in range(3):
                E += resid[i, a] * resid[i, a]
        g_beta = np.zeros(B)
        g_theta = np.zeros(3 * K + 3)
        if not need_grad:
            return E, g_beta, g_theta
        g_verts, g_A = skin_grad_nb(weights, A, verts, 2.0 * resid)
        g_vflat = g_verts.reshape(3 * N)
        g_feat = pose_dirs.T @ g_vflat
        g_Rloc = g_feat.reshape(K, 3, 3).copy()
        g_Rw = np.empty((K, 3, 3))
        g_tw = np.empty((K, 3))
        g_J = np.zeros((K, 3))
        for k in range(K):
            for a in range(3):
                g_tw[k, a] = g_A[k, a, 3]
                for b in range(3):
                    g_Rw[k, a, b] = g_A[k, a, b] - g_A[k, a, 3] * joints[k, b]
            for b in range(3):
                acc = 0.0
                for a in range(3):
                    acc -= Rw[k, a, b] * g_A[k, a, 3]
                g_J[k, b] = acc
        for k in range(K - 1, -1, -1):
            p = parents[k]
            if p < 0:
                g_Rloc[k] += g_Rw[k]
                for a in range(3):
                    g_theta[a] += g_tw[k, a]
                    g_J[k, a] += g_tw[k, a]
            else:
                g_Rloc[k] += Rw[p].T @ g_Rw[k]
                g_Rw[p] += g_Rw[k] @ R_loc[k].T
                for a in range(3):
                    for b in range(3):
                        g_Rw[p, a, b] += g_tw[k, a] * (joints[k, b] - joints[p, b])
                    g_tw[p, a] += g_tw[k, a]
                for b in range(3):
                    d = 0.0
                    for a in range(3):
                        d += Rw[p, a, b] * g_tw[k, a]
                    g_J[k, b] += d
                    g_J[p, b] -= d
        for k in range(K):
            for c in range(3):
                acc = 0.0
                for a in range(3):
                    for b in range(3):
                        acc += g_Rloc[k, a, b] * dR_loc[k, c, a, b]
                g_theta[3 + 3 * k + c] = acc
        g_rest = g_verts + joint_reg.T @ g_J
        g_beta = shape_dirs.T @ g_rest.reshape(3 * N)
        return E, g_beta, g_theta
