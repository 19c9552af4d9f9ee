"""Motion preprocessing: frame-rate conversion, up-axis change, length histogram."""

from __future__ import annotations

import numpy as np

from .rotations import axis_angle_to_quat, quat_multiply, quat_to_axis_angle, quat_to_matrix
from .synthetic import PoseSequence

_AXES = {"x": np.array([1.0, 0.0, 0.0]), "y": np.array([0.0, 1.0, 0.0]), "z": np.array([0.0, 0.0, 1.0])}


def _slerp_batch(q0: np.ndarray, q1: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise shortest-arc slerp of (..., 4) quaternions with weights u (...)."""
    d = np.sum(q0 * q1, axis=-1)
    q1 = np.where((d < 0)[..., None], -q1, q1)
    d = np.abs(d)
    u = np.broadcast_to(u, d.shape)
    omega = np.arccos(np.clip(d, -1.0, 1.0))
    so = np.sin(omega)
    near = so < 1e-9
    safe = np.where(near, 1.0, so)
    w0 = np.where(near, 1.0 - u, np.sin((1.0 - u) * omega) / safe)
    w1 = np.where(near, u, np.sin(u * omega) / safe)
    q = w0[..., None] * q0 + w1[..., None] * q1
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def resample_sequence(seq: PoseSequence, to_fps: float = 60.0, from_fps: float | None = None) -> PoseSequence:
    """Resample to ``to_fps``: linear root translation, slerp on joint rotations.

    Output frames sit at times ``i / to_fps`` that fall inside the source
    time span, so the first frame is preserved.
    """
    src = float(seq.fps if from_fps is None else from_fps)
    if src <= 0 or to_fps <= 0:
        raise ValueError("frame rates must be positive")
    poses = np.asarray(seq.poses, dtype=np.float64)
    T = poses.shape[0]
    if src == to_fps or T == 1:
        return PoseSequence(poses.copy(), float(to_fps), seq.motion_id)
    duration = (T - 1) / src
    n_out = int(np.floor(duration * to_fps + 1e-9)) + 1
    pos = np.arange(n_out) * (src / to_fps)
    i0 = np.minimum(np.floor(pos + 1e-9).astype(np.int64), T - 1)
    i1 = np.minimum(i0 + 1, T - 1)
    u = np.clip(pos - i0, 0.0, 1.0)
    out = np.empty((n_out, poses.shape[1]))
    out[:, :3] = (1 - u)[:, None] * poses[i0, :3] + u[:, None] * poses[i1, :3]
    rot = poses[:, 3:].reshape(T, -1, 3)
    q = axis_angle_to_quat(rot)
    qi = _slerp_batch(q[i0], q[i1], u[:, None])
    out[:, 3:] = quat_to_axis_angle(qi).reshape(n_out, -1)
    return PoseSequence(out, float(to_fps), seq.motion_id)


def up_axis_rotation(from_up: str = "z", to_up: str = "y") -> np.ndarray:
    """Quaternion of the 90-degree turn that carries ``from_up`` onto ``to_up``."""
    if from_up not in _AXES or to_up not in _AXES:
        raise ValueError("axes must be one of x, y, z")
    if from_up == to_up:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = np.cross(_AXES[from_up], _AXES[to_up])
    return axis_angle_to_quat(axis * (np.pi / 2))


def reorient_root(seq: PoseSequence, from_up: str = "z", to_up: str = "y") -> PoseSequence:
    """Pre-rotate the root rotation and translation; joint-local rotations are untouched.

    For z-up to y-up this is a -90 degree turn about x.
    """
    q = up_axis_rotation(from_up, to_up)
    poses = np.asarray(seq.poses, dtype=np.float64).copy()
    C = quat_to_matrix(q)
    poses[:, :3] = poses[:, :3] @ C.T
    root = axis_angle_to_quat(poses[:, 3:6])
    poses[:, 3:6] = quat_to_axis_angle(quat_multiply(np.broadcast_to(q, root.shape), root))
    return PoseSequence(poses, seq.fps, seq.motion_id)


def motion_length_histogram(lengths, bucket: int = 50) -> list[tuple[int, int, int]]:
    """``(lo, hi, count)`` for every nonempty bucket ``[lo, hi)`` of frame counts."""
    if bucket < 1:
        raise ValueError("bucket width must be >= 1")
    lengths = np.asarray(list(lengths), dtype=np.int64)
    if lengths.size == 0:
        return []
    keys, counts = np.unique(lengths // bucket, return_counts=True)
    return [(int(k * bucket), int((k + 1) * bucket), int(c)) for k, c in zip(keys, counts)]
