"""SMPL-style body model with an additive dynamic blend shape.

Layout conventions used throughout the package:

* A pose vector has ``3K + 3`` entries: root translation first, then one
  axis-angle 3-vector per joint (joint 0 is the root).
* Pose-blend features are the ``9K`` entries of the per-joint local rotation
  matrices, flattened row-major joint by joint, minus their rest values.
* Skinning transforms are expressed relative to the rest pose, so the zero
  pose is an exact fixed point of skinning.
* Joints are stored in topological order (``parents[k] < k``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .io import load_blocks, save_blocks
from .rotations import rodrigues

# vertices whose blended skinning matrix has |det| below this cannot be unposed
SINGULAR_DET = 1e-9
MAX_INFLUENCES = 4


class DimensionError(ValueError):
    pass


class SingularSkinningError(ValueError):
    """Blended skinning matrix is (near) singular for at least one vertex."""

    def __init__(self, vertices, dets):
        self.vertices = np.asarray(vertices)
        self.dets = np.asarray(dets)
        super().__init__(
            f"{len(self.vertices)} vertices have singular blended transforms "
            f"(min |det| = {np.min(np.abs(self.dets)):.3e})"
        )


@dataclass(frozen=True)
class ShapeBasis:
    mean: np.ndarray  # (3N,)
    components: np.ndarray  # (3N, B)

    @property
    def n_coeffs(self) -> int:
        return self.components.shape[1]


@dataclass(frozen=True)
class PoseBlendBasis:
    components: np.ndarray  # (3N, 9K)


@dataclass(frozen=True)
class DynamicBasisPCA:
    mean: np.ndarray  # (3N,)
    components: np.ndarray  # (3N, L)
    explained_variance: np.ndarray | None = None

    @property
    def n_coeffs(self) -> int:
        return self.components.shape[1]


@dataclass(frozen=True)
class BodyModel:
    """Template, skeleton, skinning weights, joint regressor and blend bases."""

    template: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int
    parents: np.ndarray  # (K,) int, -1 for the root
    weights: np.ndarray  # (N, K)
    joint_regressor: np.ndarray  # (K, N)
    shape_basis: ShapeBasis
    pose_basis: PoseBlendBasis
    meta: dict = field(default_factory=dict)

    @property
    def n_verts(self) -> int:
        return self.template.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def n_betas(self) -> int:
        return self.shape_basis.n_coeffs

    @property
    def pose_dim(self) -> int:
        return 3 * self.n_joints + 3

    @property
    def rest_joints(self) -> np.ndarray:
        return self.joint_regressor @ self.template

    def zero_pose(self) -> np.ndarray:
        return np.zeros(self.pose_dim)

    def validate(self) -> None:
        N, K = self.n_verts, self.n_joints
        if N < 4:
            raise DimensionError("template needs at least 4 vertices")
        if not np.all(np.isfinite(self.template)):
            raise DimensionError("template has non-finite coordinates")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= N):
            raise DimensionError("face index out of range")
        if K < 1 or self.parents[0] != -1:
            raise DimensionError("joint 0 must be the root")
        if np.any(self.parents[1:] < 0) or np.any(self.parents[1:] >= np.arange(1, K)):
            raise DimensionError("parents must satisfy 0 <= parents[k] < k")
        if self.weights.shape != (N, K) or np.any(self.weights < 0):
            raise DimensionError("weights must be a nonnegative (N, K) matrix")
        if np.max(np.abs(self.weights.sum(axis=1) - 1.0)) > 1e-9:
            raise DimensionError("weight rows must sum to 1")
        if np.max(np.count_nonzero(self.weights, axis=1)) > MAX_INFLUENCES:
            raise DimensionError(f"at most {MAX_INFLUENCES} influences per vertex")
        if self.joint_regressor.shape != (K, N) or np.any(self.joint_regressor < 0):
            raise DimensionError("joint regressor must be a nonnegative (K, N) matrix")
        if np.max(np.abs(self.joint_regressor.sum(axis=1) - 1.0)) > 1e-9:
            raise DimensionError("joint regressor rows must sum to 1")
        if self.shape_basis.mean.shape != (3 * N,) or self.shape_basis.components.shape[0] != 3 * N:
            raise DimensionError("shape basis has wrong vertex dimension")
        if self.pose_basis.components.shape != (3 * N, 9 * K):
            raise DimensionError("pose blend basis must be (3N, 9K)")


def _check_len(x, n, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (n,):
        raise DimensionError(f"{what}: expected length {n}, got shape {x.shape}")
    return x


def split_pose(pose: np.ndarray, n_joints: int) -> tuple[np.ndarray, np.ndarray]:
    pose = _check_len(pose, 3 * n_joints + 3, "pose")
    return pose[:3], pose[3:].reshape(n_joints, 3)


def shape_blend(basis: ShapeBasis, beta) -> np.ndarray:
    beta = _check_len(beta, basis.n_coeffs, "beta")
    return basis.mean + basis.components @ beta


def local_rotations(pose, n_joints: int) -> np.ndarray:
    _, rot = split_pose(pose, n_joints)
    return np.stack([rodrigues(r) for r in rot])


def pose_features(pose, n_joints: int) -> np.ndarray:
    """The 9K entries R_n(theta) - R_n(theta*) in row-major, joint-major order."""
    R = local_rotations(pose, n_joints)
    return (R - np.eye(3)).reshape(-1)


def pose_blend(basis: PoseBlendBasis, pose) -> np.ndarray:
    K = basis.components.shape[1] // 9
    return basis.components @ pose_features(pose, K)


def dynamic_blend_pca(basis: DynamicBasisPCA, delta) -> np.ndarray:
    delta = _check_len(delta, basis.n_coeffs, "delta")
    return basis.mean + basis.components @ delta


def shaped_rest(model: BodyModel, beta) -> np.ndarray:
    """T + M_S(beta) as (N, 3); joints are regressed from this."""
    return model.template + shape_blend(model.shape_basis, beta).reshape(-1, 3)


def assemble_rest_mesh(model: BodyModel, beta, pose, dyn_offset=None) -> np.ndarray:
    """T + M_S(beta) + M_P(pose) [+ dynamic offset] as a flat 3N vector."""
    out = model.template.reshape(-1) + shape_blend(model.shape_basis, beta)
    out = out + pose_blend(model.pose_basis, _check_len(pose, model.pose_dim, "pose"))
    if dyn_offset is not None:
        out = out + _check_len(dyn_offset, 3 * model.n_verts, "dyn_offset")
    return out


def regress_joints(joint_regressor: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    return joint_regressor @ vertices


def forward_kinematics(parents, pose, joints) -> np.ndarray:
    """World transforms (K, 4, 4): G_k = G_parent @ [R_k | J_k - J_parent]."""
    parents = np.asarray(parents)
    K = len(parents)
    trans, _ = split_pose(pose, K)
    R = local_rotations(pose, K)
    G = np.zeros((K, 4, 4))
    G[:, 3, 3] = 1.0
    for k in range(K):
        p = parents[k]
        local = np.eye(4)
        local[:3, :3] = R[k]
        if p < 0:
            local[:3, 3] = joints[k] + trans
            G[k] = local
        else:
            local[:3, 3] = joints[k] - joints[p]
            G[k] = G[p] @ local
    return G


def skinning_transforms(world: np.ndarray, joints: np.ndarray) -> np.ndarray:
    """Rest-relative 3x4 transforms A_k = G_k @ [I | -J_k]."""
    A = world[:, :3, :].copy()
    A[:, :, 3] -= np.einsum("kab,kb->ka", world[:, :3, :3], joints)
    return A


def model_transforms(model: BodyModel, beta, pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(shaped rest vertices, joints, rest-relative skinning transforms)."""
    rest = shaped_rest(model, beta)
    joints = regress_joints(model.joint_regressor, rest)
    world = forward_kinematics(model.parents, pose, joints)
    return rest, joints, skinning_transforms(world, joints)


def pose_mesh(model: BodyModel, beta, pose, dyn_offset=None) -> np.ndarray:
    """Posed (N, 3) vertices."""
    _, _, A = model_transforms(model, beta, pose)
    verts = assemble_rest_mesh(model, beta, pose, dyn_offset).reshape(-1, 3)
    return _kernels.skin(model.weights, A, verts)


def unpose_mesh(model: BodyModel, posed_vertices, beta, pose) -> np.ndarray:
    """Apply the inverse of each vertex's blended transform."""
    posed = np.asarray(posed_vertices, dtype=np.float64)
    if posed.shape != (model.n_verts, 3):
        raise DimensionError(f"posed vertices must be ({model.n_verts}, 3)")
    _, _, A = model_transforms(model, beta, pose)
    rest, det = _kernels.unskin(model.weights, A, posed)
    bad = np.flatnonzero(np.abs(det) < SINGULAR_DET)
    if bad.size:
        raise SingularSkinningError(bad, det[bad])
    return rest


def extract_dynamic_offset(model: BodyModel, observed_mesh, beta, pose) -> np.ndarray:
    """Unposed observation minus the static rest-pose model, as a 3N vector."""
    unposed = unpose_mesh(model, observed_mesh, beta, pose).reshape(-1)
    return unposed - assemble_rest_mesh(model, beta, pose)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_bundle(model: BodyModel, path) -> Path:
    meta = {
        "format": "dynskin.body_model/1",
        "n_verts": model.n_verts,
        "n_joints": model.n_joints,
        "n_betas": model.n_betas,
        "parents": [int(p) for p in model.parents],
        "faces": np.asarray(model.faces, dtype=np.int64).tolist(),
        "meta": model.meta,
    }
    arrays = {
        "template": model.template,
        "weights": model.weights,
        "joint_regressor": model.joint_regressor,
        "shape_mean": model.shape_basis.mean,
        "shape_components": model.shape_basis.components,
        "pose_components": model.pose_basis.components,
    }
    return save_blocks(path, meta, arrays, dtype="f8")


def load_bundle(path) -> BodyModel:
    meta, arr = load_blocks(path)
    faces = np.array(meta["faces"], dtype=np.int64).reshape(-1, 3)
    model = BodyModel(
        template=arr["template"],
        faces=faces,
        parents=np.array(meta["parents"], dtype=np.int64),
        weights=arr["weights"],
        joint_regressor=arr["joint_regressor"],
        shape_basis=ShapeBasis(arr["shape_mean"], arr["shape_components"].reshape(3 * meta["n_verts"], -1)),
        pose_basis=PoseBlendBasis(arr["pose_components"]),
        meta=meta.get("meta", {}),
    )
    model.validate()
    return model
