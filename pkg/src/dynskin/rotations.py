"""Axis-angle, rotation matrix and quaternion conversions."""

from __future__ import annotations

import numpy as np

# below this angle the closed-form coefficients lose precision; use Taylor series
_SMALL_ANGLE = 1e-3


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _coeffs(theta2: float) -> tuple[float, float, float, float]:
    """a = sin(t)/t, b = (1-cos t)/t^2 and their derivatives divided by t."""
    if theta2 < _SMALL_ANGLE**2:
        t2, t4 = theta2, theta2 * theta2
        a = 1.0 - t2 / 6.0 + t4 / 120.0
        b = 0.5 - t2 / 24.0 + t4 / 720.0
        da = -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0
        db = -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0
        return a, b, da, db
    t = np.sqrt(theta2)
    s, c = np.sin(t), np.cos(t)
    a = s / t
    b = (1.0 - c) / theta2
    da = (c - a) / theta2
    db = (a - 2.0 * b) / theta2
    return a, b, da, db


def rodrigues(r: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (angle = norm, axis = direction)."""
    r = np.asarray(r, dtype=np.float64)
    a, b, _, _ = _coeffs(float(r @ r))
    K = skew(r)
    return np.eye(3) + a * K + b * (K @ K)


def rodrigues_batch(rs: np.ndarray) -> np.ndarray:
    """(..., 3) axis-angle -> (..., 3, 3) matrices."""
    rs = np.asarray(rs, dtype=np.float64)
    flat = rs.reshape(-1, 3)
    out = np.empty((flat.shape[0], 3, 3))
    for j, r in enumerate(flat):
        out[j] = rodrigues(r)
    return out.reshape(rs.shape[:-1] + (3, 3))


def rodrigues_jacobian(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return R and dR/dr_i stacked as a (3, 3, 3) array indexed [i, row, col]."""
    r = np.asarray(r, dtype=np.float64)
    a, b, da, db = _coeffs(float(r @ r))
    K = skew(r)
    K2 = K @ K
    R = np.eye(3) + a * K + b * K2
    dR = np.empty((3, 3, 3))
    for i in range(3):
        E = np.zeros(3)
        E[i] = 1.0
        Ei = skew(E)
        dR[i] = r[i] * (da * K + db * K2) + a * Ei + b * (Ei @ K + K @ Ei)
    return R, dR


def axis_angle_to_quat(r: np.ndarray) -> np.ndarray:
    """(..., 3) -> (..., 4) unit quaternions, scalar first."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(t/2)/t, series near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(theta < _SMALL_ANGLE, 0.5 - theta**2 / 48.0, np.sin(half) / theta)
    return np.concatenate([np.cos(half), k * r], axis=-1)


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., :1]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(s < 1e-12, 2.0 / np.maximum(w, 1e-300), angle / s)
    return k * v


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pw, px, py, pz = np.moveaxis(np.asarray(p, dtype=np.float64), -1, 0)
    qw, qx, qy, qz = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues via the rotation's quaternion (robust near pi)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_to_axis_angle(np.array(q))


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    d = float(q0 @ q1)
    if d < 0.0:
        q1, d = -q1, -d
    if d > 1.0 - 1e-12:
        q = q0 + u * (q1 - q0)
        return q / np.linalg.norm(q)
    omega = np.arccos(min(d, 1.0))
    so = np.sin(omega)
    return (np.sin((1.0 - u) * omega) * q0 + np.sin(u * omega) * q1) / so
