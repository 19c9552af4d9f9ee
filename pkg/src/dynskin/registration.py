"""Per-frame model registration and dynamic-offset extraction.

The alignment objective is the squared residual ``E = sum_i |v_i - s_i|^2``
between the skinned static model and a target mesh.  Its gradient with
respect to shape and pose is computed analytically by reverse-mode chain
rule through skinning, forward kinematics, Rodrigues and the blend bases.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .body_model import BodyModel, extract_dynamic_offset
from .io import atomic_write_text, dump_json, load_blocks, save_blocks
from .rotations import rodrigues_jacobian
from .synthetic import MeshSequence

log = logging.getLogger(__name__)


class OptimizationFailure(RuntimeError):
    pass


class NonConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class OptimizerSettings:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    max_iters: int = 2000
    convergence_tol: float = 1e-6  # on the gradient norm
    restart_on_increase: bool = True  # False gives plain heavy-ball SGD
    shape_max_iters: int = 20000
    extrapolate_warm_start: bool = True  # start frame t at 2*theta_{t-1} - theta_{t-2}

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class FitResult:
    beta: np.ndarray
    poses: np.ndarray  # (T, 3K+3)
    offsets: np.ndarray  # (T, 3N)
    residuals: np.ndarray  # (T,) meters, |model - target|_2
    iterations: np.ndarray  # (T,)
    converged: np.ndarray  # (T,) bool
    subject_id: str = ""
    motion_id: str = ""

    def __len__(self) -> int:
        return self.poses.shape[0]


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def alignment_objective(model: BodyModel, beta, theta, target, need_grad: bool = True):
    """Return ``E`` and, if requested, ``(dE/dbeta, dE/dtheta)``."""
    if not _kernels.USE_NUMBA:
        return _alignment_objective_np(model, beta, theta, target, need_grad)
    sb = model.shape_basis
    E, gb, gt = _kernels.alignment_nb(
        model.template, sb.mean, sb.components, model.joint_regressor, model.parents, model.weights,
        model.pose_basis.components, np.asarray(beta, dtype=np.float64), np.asarray(theta, dtype=np.float64),
        np.asarray(target, dtype=np.float64), need_grad,
    )
    return (E, gb, gt) if need_grad else E


def _alignment_objective_np(model: BodyModel, beta, theta, target, need_grad: bool = True):
    beta = np.asarray(beta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    K = model.n_joints
    parents = model.parents

    rest = model.template + (model.shape_basis.mean + model.shape_basis.components @ beta).reshape(-1, 3)
    joints = model.joint_regressor @ rest
    rot = theta[3:].reshape(K, 3)
    R_loc = np.empty((K, 3, 3))
    dR_loc = np.empty((K, 3, 3, 3))
    for k in range(K):
        R_loc[k], dR_loc[k] = rodrigues_jacobian(rot[k])

    Rw = np.empty((K, 3, 3))
    tw = np.empty((K, 3))
    for k in range(K):
        p = parents[k]
        if p < 0:
            Rw[k] = R_loc[k]
            tw[k] = joints[k] + theta[:3]
        else:
            Rw[k] = Rw[p] @ R_loc[k]
            tw[k] = Rw[p] @ (joints[k] - joints[p]) + tw[p]
    A = np.concatenate([Rw, (tw - np.einsum("kab,kb->ka", Rw, joints))[:, :, None]], axis=2)

    feats = (R_loc - np.eye(3)).reshape(-1)
    verts = rest + (model.pose_basis.components @ feats).reshape(-1, 3)
    posed = _kernels.skin(model.weights, A, verts)
    resid = posed - target
    E = float(np.sum(resid * resid))
    if not need_grad:
        return E

    g_verts, g_A = _kernels.skin_grad(model.weights, A, verts, 2.0 * resid)
    g_Rloc = (model.pose_basis.components.T @ g_verts.reshape(-1)).reshape(K, 3, 3)
    g_t_col = g_A[:, :, 3]
    g_Rw = g_A[:, :, :3] - np.einsum("ka,kb->kab", g_t_col, joints)
    g_tw = g_t_col.copy()
    g_J = -np.einsum("kab,ka->kb", Rw, g_t_col)
    g_trans = np.zeros(3)
    for k in range(K - 1, -1, -1):
        p = parents[k]
        if p < 0:
            g_Rloc[k] += g_Rw[k]
            g_trans += g_tw[k]
            g_J[k] += g_tw[k]
        else:
            g_Rloc[k] += Rw[p].T @ g_Rw[k]
            g_Rw[p] += g_Rw[k] @ R_loc[k].T + np.outer(g_tw[k], joints[k] - joints[p])
            g_tw[p] += g_tw[k]
            d = Rw[p].T @ g_tw[k]
            g_J[k] += d
            g_J[p] -= d
    g_rot = np.einsum("kab,kiab->ki", g_Rloc, dR_loc)
    g_rest = g_verts + model.joint_regressor.T @ g_J
    g_beta = model.shape_basis.components.T @ g_rest.reshape(-1)
    return E, g_beta, np.concatenate([g_trans, g_rot.reshape(-1)])


def alignment_gradient(model: BodyModel, beta, theta, target) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the squared residual w.r.t. (beta, theta)."""
    _, gb, gt = alignment_objective(model, beta, theta, target)
    return gb, gt


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# SGD with momentum
# ---------------------------------------------------------------------------


@dataclass
class _Trace:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def _heavy_ball(fun, x0, settings: OptimizerSettings, max_iters: int, record: bool = False) -> _Trace:
    """Minimize ``fun(x) -> (value, grad)`` with v <- mu v + g; x <- x - lr v.

    With ``restart_on_increase`` a step that raises the objective is
    rejected, the velocity is zeroed and a plain gradient step is tried; if
    that also fails to decrease the objective the run stops.
    """
    lr, mu = settings.learning_rate, settings.momentum
    x = np.array(x0, dtype=np.float64)
    E, g = fun(x)
    if not np.isfinite(E) or not np.all(np.isfinite(g)):
        raise OptimizationFailure("non-finite objective or gradient at the initial point")
    v = np.zeros_like(x)
    history = [E] if record else []
    it = 0
    converged = False
    while True:
        if np.linalg.norm(g) < settings.convergence_tol:
            converged = True
            break
        if it >= max_iters:
            break
        it += 1
        v = mu * v + g
        x_new = x - lr * v
        E_new, g_new = fun(x_new)
        if settings.restart_on_increase and not E_new <= E:
            v = g.copy()
            x_new = x - lr * g
            E_new, g_new = fun(x_new)
            if not E_new <= E:
                if not (np.isfinite(E_new) and np.all(np.isfinite(g_new))):
                    raise OptimizationFailure("non-finite objective or gradient")
                break
        if not np.isfinite(E_new) or not np.all(np.isfinite(g_new)):
            raise OptimizationFailure("non-finite objective or gradient")
        x, E, g = x_new, E_new, g_new
        if record:
            history.append(E)
    return _Trace(x, E, it, converged, history)


def fit_shape_and_first_pose(model: BodyModel, S1, settings: OptimizerSettings = OptimizerSettings(),
                             beta_init=None, theta_init=None):
    """Jointly fit (beta, theta_1) to the first frame.

    Returns ``(beta, theta, residual, iterations, converged)``; a
    :class:`NonConvergenceWarning` is issued if the iteration cap is hit.
    """
    S1 = np.asarray(S1, dtype=np.float64)
    if S1.shape != (model.n_verts, 3):
        raise ValueError(f"target must be ({model.n_verts}, 3)")
    B = model.n_betas
    x0 = np.concatenate([
        np.zeros(B) if beta_init is None else np.asarray(beta_init, dtype=np.float64),
        np.zeros(model.pose_dim) if theta_init is None else np.asarray(theta_init, dtype=np.float64),
    ])

    def fun(x):
        E, gb, gt = alignment_objective(model, x[:B], x[B:], S1)
        return E, np.concatenate([gb, gt])

    tr = _heavy_ball(fun, x0, settings, settings.shape_max_iters)
    if not tr.converged:
        warnings.warn(f"shape fit stopped after {tr.iterations} iterations", NonConvergenceWarning, stacklevel=2)
    return tr.x[:B], tr.x[B:], float(np.sqrt(tr.value)), tr.iterations, tr.converged


def fit_pose(model: BodyModel, beta, S_t, theta_init, settings: OptimizerSettings = OptimizerSettings()):
    """Fit theta_t with beta frozen, warm-started from ``theta_init``.

    Returns ``(theta, residual, iterations, converged)``.
    """
    beta = np.asarray(beta, dtype=np.float64)
    S_t = np.asarray(S_t, dtype=np.float64)

    def fun(x):
        E, _, gt = alignment_objective(model, beta, x, S_t)
        return E, gt

    tr = _heavy_ball(fun, theta_init, settings, settings.max_iters)
    if not tr.converged:
        warnings.warn(f"pose fit stopped after {tr.iterations} iterations", NonConvergenceWarning, stacklevel=2)
    return tr.x, float(np.sqrt(tr.value)), tr.iterations, tr.converged


def fit_sequence(model: BodyModel, seq: MeshSequence, settings: OptimizerSettings = OptimizerSettings()) -> FitResult:
    """Shape + first pose on frame 1, then warm-started pose fits and Eq.-5 offsets."""
    T = len(seq)
    D = model.pose_dim
    poses = np.zeros((T, D))
    offsets = np.zeros((T, 3 * model.n_verts))
    residuals = np.zeros(T)
    iters = np.zeros(T, dtype=np.int64)
    conv = np.zeros(T, dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        beta, theta, res, it, ok = fit_shape_and_first_pose(model, seq.frames[0], settings)
        poses[0], residuals[0], iters[0], conv[0] = theta, res, it, ok
        for t in range(1, T):
            init = theta
            if settings.extrapolate_warm_start and t >= 2:
                init = 2.0 * poses[t - 1] - poses[t - 2]
            theta, res, it, ok = fit_pose(model, beta, seq.frames[t], init, settings)
            poses[t], residuals[t], iters[t], conv[t] = theta, res, it, ok
    for t in range(T):
        offsets[t] = extract_dynamic_offset(model, seq.frames[t], beta, poses[t])
    if not conv.all():
        log.warning("%s/%s: %d of %d frames hit the iteration cap", seq.subject_id, seq.motion_id,
                    int((~conv).sum()), T)
    return FitResult(beta, poses, offsets, residuals, iters, conv, seq.subject_id, seq.motion_id)


def build_training_pairs(model: BodyModel, sequences: Sequence[MeshSequence],
                         settings: OptimizerSettings = OptimizerSettings()) -> tuple[list[FitResult], dict]:
    """Fit every sequence; failures are recorded in the manifest and skipped."""
    results, entries = [], []
    for seq in sequences:
        entry = {"subject_id": seq.subject_id, "motion_id": seq.motion_id, "n_frames": len(seq)}
        try:
            if seq.frames.shape[1:] != (model.n_verts, 3):
                raise ValueError("sequence topology does not match the model")
            r = fit_sequence(model, seq, settings)
        except (OptimizationFailure, ValueError) as exc:
            entry.update(status="failed", error=str(exc))
            log.error("fit failed for %s/%s: %s", seq.subject_id, seq.motion_id, exc)
        else:
            entry.update(
                status="ok",
                beta=r.beta.tolist(),
                mean_residual=float(r.residuals.mean()),
                max_residual=float(r.residuals.max()),
                residuals=r.residuals.tolist(),
                iterations=int(r.iterations.sum()),
                converged_frames=int(r.converged.sum()),
            )
            results.append(r)
        entries.append(entry)
    return results, {"sequences": entries, "settings": asdict(settings)}


def training_pairs(results: Sequence[FitResult]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Flat motion-major list of (theta_t, Delta_t)."""
    return [(r.poses[t], r.offsets[t]) for r in results for t in range(len(r))]


# ---------------------------------------------------------------------------
# pair store
# ---------------------------------------------------------------------------


def save_pair_store(results: Sequence[FitResult], manifest: dict, path) -> Path:
    """One row per frame: theta_t (3K+3) followed by Delta_t (3N), motion-major."""
    path = Path(path)
    rows, index, start = [], [], 0
    for r in results:
        rows.append(np.concatenate([r.poses, r.offsets], axis=1))
        index.append({
            "subject_id": r.subject_id, "motion_id": r.motion_id, "start": start, "n_frames": len(r),
            "beta": r.beta.tolist(),
        })
        start += len(r)
    pose_dim = results[0].poses.shape[1] if results else 0
    n3 = results[0].offsets.shape[1] if results else 0
    table = np.concatenate(rows, axis=0) if rows else np.zeros((0, 0))
    meta = {"format": "dynskin.pair_store/1", "pose_dim": pose_dim, "offset_dim": n3, "index": index,
            "manifest": manifest}
    extra = {"pairs": table}
    if results:
        extra["residuals"] = np.concatenate([r.residuals for r in results])
    return save_blocks(path / "pairs", meta, extra, dtype="f4")


def load_pair_store(path) -> list[FitResult]:
    meta, arr = load_blocks(Path(path) / "pairs")
    D = meta["pose_dim"]
    out = []
    table = arr["pairs"].astype(np.float64)
    res = arr.get("residuals", np.zeros(len(table))).astype(np.float64)
    for e in meta["index"]:
        rows = table[e["start"] : e["start"] + e["n_frames"]]
        T = len(rows)
        out.append(FitResult(np.array(e["beta"]), rows[:, :D], rows[:, D:], res[e["start"] : e["start"] + T],
                             np.zeros(T, dtype=np.int64), np.ones(T, dtype=bool), e["subject_id"], e["motion_id"]))
    return out


def write_manifest(manifest: dict, path) -> None:
    atomic_write_text(path, dump_json(manifest))
