"""Procedural bodies, motions and ground-truth soft-tissue dynamics.

The synthetic body is a set of capsule tubes (torso, head, limbs) rigged to
up to 11 joints.  Soft tissue is one damped oscillator per vertex that
displaces the vertex along its radial direction in rest space, driven by
the axial component of its dominant joint's acceleration.  Radial bulging
of a full ring is orthogonal to rigid motion of that ring, which keeps the
injected offsets recoverable by pose registration.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .body_model import (
    BodyModel,
    PoseBlendBasis,
    ShapeBasis,
    forward_kinematics,
    pose_mesh,
    regress_joints,
    shaped_rest,
)
from .io import load_blocks, save_blocks

JOINT_NAMES = (
    "pelvis", "chest", "l_hip", "r_hip", "l_shoulder", "r_shoulder",
    "neck", "l_knee", "r_knee", "l_elbow", "r_elbow",
)
_PARENTS = (-1, 0, 0, 0, 1, 1, 1, 2, 3, 4, 5)
_JOINT_POS = np.array(
    [
        [0.0, 0.95, 0.0], [0.0, 1.30, 0.0], [0.10, 0.90, 0.0], [-0.10, 0.90, 0.0],
        [0.20, 1.45, 0.0], [-0.20, 1.45, 0.0], [0.0, 1.55, 0.0],
        [0.10, 0.50, 0.0], [-0.10, 0.50, 0.0], [0.45, 1.45, 0.0], [-0.45, 1.45, 0.0],
    ]
)
MAX_JOINTS = len(JOINT_NAMES)


@dataclass(frozen=True)
class _Segment:
    name: str
    joint: int  # canonical joint at the segment start
    end_joint: int  # canonical joint at the far end, -1 for a free end
    end: tuple
    radius: float
    flesh: float  # peak soft-tissue coupling
    freq: float  # natural frequency, Hz


_SEGMENTS = (
    _Segment("belly", 0, 1, (0.0, 1.30, 0.0), 0.15, 1.0, 4.0),
    _Segment("chest", 1, 6, (0.0, 1.55, 0.0), 0.16, 0.8, 5.0),
    _Segment("head", 6, -1, (0.0, 1.78, 0.0), 0.09, 0.0, 8.0),
    _Segment("l_thigh", 2, 7, (0.10, 0.50, 0.0), 0.075, 0.9, 4.5),
    _Segment("r_thigh", 3, 8, (-0.10, 0.50, 0.0), 0.075, 0.9, 4.5),
    _Segment("l_shin", 7, -1, (0.10, 0.08, 0.0), 0.055, 0.4, 6.0),
    _Segment("r_shin", 8, -1, (-0.10, 0.08, 0.0), 0.055, 0.4, 6.0),
    _Segment("l_upperarm", 4, 9, (0.45, 1.45, 0.0), 0.05, 0.7, 5.0),
    _Segment("r_upperarm", 5, 10, (-0.45, 1.45, 0.0), 0.05, 0.7, 5.0),
    _Segment("l_forearm", 9, -1, (0.68, 1.45, 0.0), 0.04, 0.3, 6.5),
    _Segment("r_forearm", 10, -1, (-0.68, 1.45, 0.0), 0.04, 0.3, 6.5),
)

MOTION_KINDS = ("hop", "jumping_jack", "run_in_place", "shake_hips", "still")
DEFAULT_FREQ = {"hop": 2.5, "jumping_jack": 1.5, "run_in_place": 2.0, "shake_hips": 1.5, "still": 0.0}


class SimulationDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SoftnessCoupling:
    """softness(beta) = base * exp(gain * beta[beta_index]).

    Mass coupling of vertex i is ``softness * flesh_i``; stiffness is set by
    the segment's natural frequency and damping by ``damping_ratio``.
    """

    base: float = 1.0
    gain: float = float(np.log(2.0))
    beta_index: int = 0
    damping_ratio: float = 0.35

    def softness(self, beta) -> float:
        beta = np.asarray(beta, dtype=np.float64)
        if self.base == 0.0:
            return 0.0
        if beta.size <= self.beta_index:
            return float(self.base)
        return float(self.base * np.exp(self.gain * beta[self.beta_index]))

    def beta_for_softness(self, target: float, n_betas: int) -> np.ndarray:
        """A shape vector (zero elsewhere) whose softness equals ``target``."""
        beta = np.zeros(n_betas)
        beta[self.beta_index] = np.log(target / self.base) / self.gain
        return beta


@dataclass(frozen=True)
class SyntheticConfig:
    n_verts: int = 600
    n_joints: int = 6
    n_shape_pcs: int = 4
    seed: int = 0
    fps: float = 60.0
    softness_coupling: SoftnessCoupling = field(default_factory=SoftnessCoupling)
    pose_blend_scale: float = 0.003  # meters of offset per unit rotation-matrix entry

    def validate(self) -> None:
        if self.n_verts < 16:
            raise ValueError("n_verts must be >= 16")
        if not 2 <= self.n_joints <= MAX_JOINTS:
            raise ValueError(f"n_joints must be in [2, {MAX_JOINTS}]")
        if self.n_shape_pcs < 0:
            raise ValueError("n_shape_pcs must be >= 0")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if isinstance(d.get("softness_coupling"), dict):
            d["softness_coupling"] = SoftnessCoupling(**d["softness_coupling"])
        return cls(**d)


@dataclass(frozen=True)
class Tissue:
    """Per-vertex oscillator data of a synthetic body."""

    radial: np.ndarray  # (N, 3) unit radial directions in rest space
    axis: np.ndarray  # (N, 3) unit axis of the vertex's segment
    flesh: np.ndarray  # (N,) coupling profile, zero near joints
    stiffness: np.ndarray  # (N,)
    damping: np.ndarray  # (N,)
    owner: np.ndarray  # (N,) dominant joint
    coupling: SoftnessCoupling


@dataclass
class PoseSequence:
    poses: np.ndarray  # (T, 3K+3)
    fps: float
    motion_id: str = ""

    def __len__(self) -> int:
        return self.poses.shape[0]


@dataclass
class MeshSequence:
    frames: np.ndarray  # (T, N, 3)
    fps: float
    subject_id: str = ""
    motion_id: str = ""

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class OffsetSequence:
    offsets: np.ndarray  # (T, 3N) rest-space offsets
    fps: float
    subject_id: str = ""
    motion_id: str = ""

    def __len__(self) -> int:
        return self.offsets.shape[0]


# ---------------------------------------------------------------------------
# template
# ---------------------------------------------------------------------------


def _owner(canonical: int, n_joints: int) -> int:
    j = canonical
    while j >= n_joints:
        j = _PARENTS[j]
    return j


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    raw = shares / shares.sum() * total
    out = np.floor(raw).astype(int)
    order = np.argsort(-(raw - out), kind="stable")
    out[order[: total - out.sum()]] += 1
    return out


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _frame(axis):
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _build_geometry(n_verts: int):
    """Vertices, faces and per-vertex segment bookkeeping."""
    starts = np.array([_JOINT_POS[s.joint] for s in _SEGMENTS])
    ends = np.array([s.end for s in _SEGMENTS])
    lengths = np.linalg.norm(ends - starts, axis=1)
    radii = np.array([s.radius for s in _SEGMENTS])
    counts = _largest_remainder(n_verts - len(_SEGMENTS), lengths * radii) + 1

    verts, faces, seg_id, axial, radial, first_ring = [], [], [], [], [], []
    for si, (seg, n_s) in enumerate(zip(_SEGMENTS, counts)):
        axis = (ends[si] - starts[si]) / lengths[si]
        u, w = _frame(axis)
        circ = 2 * np.pi * seg.radius
        m = int(np.clip(round(np.sqrt(n_s * circ / lengths[si])), 3, 24))
        m = min(m, n_s)
        rings = int(np.ceil(n_s / m))
        ring_idx = []
        for r in range(rings):
            s = r / (rings - 1) if rings > 1 else 0.0
            cnt = min(m, n_s - r * m)
            # rotate alternate rings by half a step so the tube triangulates evenly
            phase = 0.5 * (r % 2) * 2 * np.pi / m
            idx = []
            for j in range(cnt):
                ang = phase + 2 * np.pi * j / cnt
                d = np.cos(ang) * u + np.sin(ang) * w
                verts.append(starts[si] + s * lengths[si] * axis + seg.radius * d)
                radial.append(d)
                axial.append(s)
                seg_id.append(si)
                idx.append(len(verts) - 1)
            ring_idx.append(idx)
        first_ring.append(ring_idx[0])
        for a, b in zip(ring_idx[:-1], ring_idx[1:]):
            if len(b) == len(a):
                n = len(a)
                for j in range(n):
                    faces.append((a[j], a[(j + 1) % n], b[j]))
                    faces.append((a[(j + 1) % n], b[(j + 1) % n], b[j]))
            else:
                for j in range(len(b) - 1):
                    near = int(round(j * len(a) / len(b))) % len(a)
                    faces.append((a[near], b[j + 1], b[j]))
    return (
        np.array(verts),
        np.array(faces, dtype=np.int64).reshape(-1, 3),
        np.array(seg_id),
        np.array(axial),
        np.array(radial),
        first_ring,
    )


def gen_template(config: SyntheticConfig) -> BodyModel:
    config.validate()
    rng = np.random.Generator(np.random.Philox(config.seed))
    K = config.n_joints
    N = config.n_verts
    template, faces, seg_id, axial, radial, first_ring = _build_geometry(N)

    # blend weights: owner joint, smoothly mixed with the parent near the
    # segment start and with the child owner near the segment end
    W = np.zeros((N, K))
    for i in range(N):
        seg = _SEGMENTS[seg_id[i]]
        own = _owner(seg.joint, K)
        s = axial[i]
        w_parent = 0.0
        if seg.joint < K and _PARENTS[seg.joint] >= 0:
            w_parent = 0.5 * (1.0 - _smoothstep(s / 0.3))
        w_child = 0.0
        child = _owner(seg.end_joint, K) if seg.end_joint >= 0 else own
        if child != own:
            w_child = 0.5 * _smoothstep((s - 0.7) / 0.3)
        W[i, own] += 1.0 - w_parent - w_child
        if w_parent > 0:
            W[i, _PARENTS[seg.joint]] += w_parent
        if w_child > 0:
            W[i, child] += w_child
    W /= W.sum(axis=1, keepdims=True)

    # joint regressor: centroid of the first ring of the segment starting at the joint
    J_map = np.zeros((K, N))
    for si, seg in enumerate(_SEGMENTS):
        if seg.joint < K:
            J_map[seg.joint, first_ring[si]] = 1.0 / len(first_ring[si])
    parents = np.array(_PARENTS[:K], dtype=np.int64)

    # shape space: girth first, then smooth random fields, all projected off
    # the rest-pose rigid tangent space and orthonormalized
    radii = np.array([_SEGMENTS[s].radius for s in seg_id])
    girth = (radial * radii[:, None]).reshape(-1)
    B = config.n_shape_pcs
    joints = J_map @ template
    tangent = _rest_pose_jacobian(template, W, joints, parents)
    Qt, _ = np.linalg.qr(tangent)
    raw = [girth]
    for _ in range(max(B - 1, 0)):
        freq = rng.normal(0.0, 3.0, size=(3, 3))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        raw.append(np.sin(template @ freq + phase).reshape(-1))
    if B > 0:
        X = np.stack(raw[:B], axis=1)
        X = X - Qt @ (Qt.T @ X)
        Q, Rq = np.linalg.qr(X)
        Q = Q * np.sign(np.diag(Rq))[None, :]
        components = Q
    else:
        components = np.zeros((3 * N, 0))
    mean_field = np.sin(template @ rng.normal(0.0, 2.0, size=(3, 3)) + rng.uniform(0, 6.28, 3))
    shape_mean = 0.002 * mean_field.reshape(-1)

    # pose blend: smooth local fields, scaled by the joint's skinning weight
    P = np.zeros((3 * N, 9 * K))
    for k in range(K):
        for e in range(9):
            f = np.sin(template @ rng.normal(0.0, 4.0, size=(3, 3)) + rng.uniform(0, 6.28, 3))
            P[:, 9 * k + e] = config.pose_blend_scale * (W[:, k : k + 1] * f).reshape(-1)

    model = BodyModel(
        template=template,
        faces=faces,
        parents=parents,
        weights=W,
        joint_regressor=J_map,
        shape_basis=ShapeBasis(shape_mean, components),
        pose_basis=PoseBlendBasis(P),
        meta={"generator": "dynskin.synthetic", "config": config.to_dict(),
              "joint_names": list(JOINT_NAMES[:K])},
    )
    model.validate()
    return model


def _rest_pose_jacobian(template, W, joints, parents):
    """d(posed vertices)/d(pose) at the rest pose, (3N, 3K+3)."""
    K = len(parents)
    N = template.shape[0]
    # descendants mask
    desc = np.eye(K, dtype=bool)
    for k in range(K - 1, 0, -1):
        desc[parents[k]] |= desc[k]
    cols = []
    for a in range(3):
        t = np.zeros((N, 3))
        t[:, a] = 1.0
        cols.append(t.reshape(-1))
    for k in range(K):
        infl = W[:, desc[k]].sum(axis=1)
        for a in range(3):
            e = np.zeros(3)
            e[a] = 1.0
            cols.append((infl[:, None] * np.cross(e, template - joints[k])).reshape(-1))
    return np.stack(cols, axis=1)


def tissue_model(model: BodyModel, config: SyntheticConfig) -> Tissue:
    """Per-vertex oscillator parameters, deterministic in the config."""
    _, _, seg_id, axial, radial, _ = _build_geometry(config.n_verts)
    K = config.n_joints
    starts = np.array([_JOINT_POS[s.joint] for s in _SEGMENTS])
    ends = np.array([s.end for s in _SEGMENTS])
    seg_axis = (ends - starts) / np.linalg.norm(ends - starts, axis=1, keepdims=True)
    flesh_peak = np.array([_SEGMENTS[s].flesh for s in seg_id])
    # zero at both segment ends so blended (joint) regions stay rigid
    profile = np.sin(np.pi * axial) ** 2
    omega = 2 * np.pi * np.array([_SEGMENTS[s].freq for s in seg_id])
    zeta = config.softness_coupling.damping_ratio
    return Tissue(
        radial=radial,
        axis=seg_axis[seg_id],
        flesh=flesh_peak * profile,
        stiffness=omega**2,
        damping=2 * zeta * omega,
        owner=np.argmax(model.weights, axis=1),
        coupling=config.softness_coupling,
    )


# ---------------------------------------------------------------------------
# motions
# ---------------------------------------------------------------------------


def gen_motion(kind: str, T: int, fps: float = 60.0, seed: int = 0, n_joints: int = 6,
               freq: float | None = None) -> PoseSequence:
    """Smooth periodic joint curves that start at rest with zero velocity."""
    if kind not in MOTION_KINDS:
        raise ValueError(f"unknown motion kind {kind!r}; expected one of {MOTION_KINDS}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 2 <= n_joints <= MAX_JOINTS:
        raise ValueError(f"n_joints must be in [2, {MAX_JOINTS}]")
    K = n_joints
    poses = np.zeros((T, 3 * K + 3))
    if kind == "still":
        return PoseSequence(poses, fps, kind)

    rng = np.random.Generator(np.random.Philox(seed))
    f = DEFAULT_FREQ[kind] if freq is None else float(freq)
    t = np.arange(T) / fps
    env = _smoothstep(t / 0.3)
    w = 2 * np.pi * f

    def amp(a):
        return a * rng.uniform(0.85, 1.15)

    def rot(joint, axis, curve):
        if joint < K:
            poses[:, 3 + 3 * joint + axis] += curve * env

    def bump(x):
        return 0.5 * (1.0 - np.cos(x))

    if kind == "hop":
        poses[:, 1] = amp(0.06) * bump(w * t) * env
        flex = amp(0.3) * bump(w * t + np.pi)
        rot(7, 0, flex)
        rot(8, 0, flex)
        rot(2, 0, -0.5 * flex)
        rot(3, 0, -0.5 * flex)
        rot(4, 2, amp(0.2) * np.sin(w * t))
        rot(5, 2, -amp(0.2) * np.sin(w * t))
        rot(1, 0, amp(0.05) * np.sin(w * t))
    elif kind == "jumping_jack":
        poses[:, 1] = amp(0.05) * bump(2 * w * t) * env
        arms = amp(0.9) * bump(w * t)
        legs = amp(0.25) * bump(w * t)
        rot(4, 2, arms)
        rot(5, 2, -arms)
        rot(2, 2, legs)
        rot(3, 2, -legs)
    elif kind == "run_in_place":
        poses[:, 1] = amp(0.03) * bump(2 * w * t) * env
        swing = np.sin(w * t)
        rot(2, 0, -amp(0.5) * swing)
        rot(3, 0, amp(0.5) * swing)
        rot(7, 0, amp(0.6) * bump(w * t))
        rot(8, 0, amp(0.6) * bump(w * t + np.pi))
        rot(4, 0, amp(0.4) * swing)
        rot(5, 0, -amp(0.4) * swing)
        rot(1, 1, amp(0.1) * swing)
    elif kind == "shake_hips":
        poses[:, 0] = amp(0.04) * np.sin(w * t) * env
        rot(0, 1, amp(0.25) * np.sin(w * t))
        rot(0, 2, amp(0.1) * np.sin(2 * w * t))
        rot(1, 1, -amp(0.2) * np.sin(w * t))
        rot(4, 2, amp(0.15) * np.sin(2 * w * t))
        rot(5, 2, -amp(0.15) * np.sin(2 * w * t))
    return PoseSequence(poses, fps, kind)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def joint_world_states(model: BodyModel, beta, poses: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World positions (T, K, 3) and rotations (T, K, 3, 3) of every joint."""
    joints = regress_joints(model.joint_regressor, shaped_rest(model, beta))
    T = poses.shape[0]
    pos = np.empty((T, model.n_joints, 3))
    rot = np.empty((T, model.n_joints, 3, 3))
    for t in range(T):
        G = forward_kinematics(model.parents, poses[t], joints)
        pos[t] = G[:, :3, 3]
        rot[t] = G[:, :3, :3]
    return pos, rot


def joint_accelerations(positions: np.ndarray, fps: float) -> np.ndarray:
    """Central second differences; the end frames copy their neighbours."""
    T = positions.shape[0]
    acc = np.zeros_like(positions)
    if T >= 3:
        acc[1:-1] = (positions[2:] - 2 * positions[1:-1] + positions[:-2]) * fps * fps
        acc[0] = acc[1]
        acc[-1] = acc[-2]
    return acc


def simulate_soft_tissue(model: BodyModel, tissue: Tissue, beta, poses: PoseSequence,
                         subject_id: str = "", initial_offset: np.ndarray | None = None
                         ) -> tuple[MeshSequence, OffsetSequence]:
    """Integrate the per-vertex oscillators and skin the result.

    Frame 0 holds the initial state (zero offsets unless ``initial_offset``,
    a per-vertex radial amplitude, is given).
    """
    beta = np.asarray(beta, dtype=np.float64)
    P = poses.poses
    T = P.shape[0]
    N = model.n_verts
    h = 1.0 / poses.fps
    pos, rot = joint_world_states(model, beta, P)
    acc = joint_accelerations(pos, poses.fps)
    # world acceleration of each vertex's owner, expressed in that joint's rest frame
    local = np.einsum("tkba,tkb->tka", rot, acc)
    forcing = np.einsum("tia,ia->ti", local[:, tissue.owner], tissue.axis)
    mass = tissue.coupling.softness(beta) * tissue.flesh
    q0 = np.zeros(N) if initial_offset is None else np.asarray(initial_offset, dtype=np.float64)
    q = _kernels.integrate_oscillators(forcing, tissue.stiffness, tissue.damping, mass, h, q0, np.zeros(N))
    scale = np.ptp(model.template, axis=0).max()
    if not np.all(np.isfinite(q)) or np.abs(q).max() > 10.0 * scale:
        raise SimulationDivergenceError("soft-tissue offsets exceeded 10x the body scale")
    offsets = (q[:, :, None] * tissue.radial[None]).reshape(T, 3 * N)
    frames = np.empty((T, N, 3))
    for t in range(T):
        frames[t] = pose_mesh(model, beta, P[t], offsets[t])
    return (
        MeshSequence(frames, poses.fps, subject_id, poses.motion_id),
        OffsetSequence(offsets, poses.fps, subject_id, poses.motion_id),
    )


def forcing_amplitude(model: BodyModel, tissue: Tissue, beta, poses: PoseSequence) -> np.ndarray:
    """Per-vertex max |axial acceleration| driving each oscillator."""
    pos, rot = joint_world_states(model, beta, poses.poses)
    acc = joint_accelerations(pos, poses.fps)
    local = np.einsum("tkba,tkb->tka", rot, acc)
    forcing = np.einsum("tia,ia->ti", local[:, tissue.owner], tissue.axis)
    return np.abs(forcing).max(axis=0)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_mesh_sequence(seq: MeshSequence, path) -> Path:
    T, N, _ = seq.frames.shape
    meta = {"format": "dynskin.mesh_sequence/1", "n_frames": T, "n_verts": N, "fps": seq.fps,
            "subject_id": seq.subject_id, "motion_id": seq.motion_id}
    return save_blocks(path, meta, {"frames": seq.frames}, dtype="f4")


def load_mesh_sequence(path) -> MeshSequence:
    meta, arr = load_blocks(path)
    return MeshSequence(arr["frames"].astype(np.float64), meta["fps"], meta["subject_id"], meta["motion_id"])


def save_offset_sequence(seq: OffsetSequence, path) -> Path:
    T, D = seq.offsets.shape
    meta = {"format": "dynskin.offset_sequence/1", "n_frames": T, "n_verts": D // 3, "fps": seq.fps,
            "subject_id": seq.subject_id, "motion_id": seq.motion_id}
    return save_blocks(path, meta, {"offsets": seq.offsets}, dtype="f4")


def load_offset_sequence(path) -> OffsetSequence:
    meta, arr = load_blocks(path)
    return OffsetSequence(arr["offsets"].astype(np.float64), meta["fps"], meta["subject_id"], meta["motion_id"])


def save_pose_sequence(seq: PoseSequence, path) -> Path:
    T, D = seq.poses.shape
    meta = {"format": "dynskin.pose_sequence/1", "n_frames": T, "pose_dim": D, "fps": seq.fps,
            "motion_id": seq.motion_id}
    return save_blocks(path, meta, {"poses": seq.poses}, dtype="f8")


def load_pose_sequence(path) -> PoseSequence:
    p = Path(path)
    if p.suffix == ".npz":
        return load_amass_npz(p)
    meta, arr = load_blocks(path)
    return PoseSequence(arr["poses"], meta["fps"], meta.get("motion_id", ""))


def load_amass_npz(path, n_joints: int | None = None) -> PoseSequence:
    """Read an AMASS-style ``.npz`` (``trans``, ``poses``, ``mocap_framerate``)."""
    data = np.load(path)
    trans = np.asarray(data["trans"], dtype=np.float64)
    rot = np.asarray(data["poses"], dtype=np.float64)
    if n_joints is not None:
        rot = rot[:, : 3 * n_joints]
    fps = float(data["mocap_framerate"]) if "mocap_framerate" in data else 60.0
    return PoseSequence(np.concatenate([trans, rot], axis=1), fps, Path(path).stem)


def sequence_hash(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
