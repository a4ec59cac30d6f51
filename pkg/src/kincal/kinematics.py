"""Forward kinematics of the elastic tree and the torque-equilibrium solve.

All functions are pure and accept either a single configuration ``q`` of
shape (J,) or a batch of shape (N, J); batch evaluation is what keeps the
calibration loop fast. Convention: classic DH, revolute joints, with the
joint angle added to theta:

    T_parent_k = rot_z(theta + q_k) @ trans_z(d) @ trans_x(a) @ rot_x(alpha)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DhParams, MarkerMount, RobotModel

EQUILIBRIUM_TOL = 1e-10
EQUILIBRIUM_MAX_ITER = 100


class EquilibriumError(RuntimeError):
    """Fixed-point iteration did not converge (over-compliant model)."""


def _as_rho_array(rho, njoints: int) -> np.ndarray:
    if isinstance(rho, np.ndarray):
        arr = np.asarray(rho, dtype=float)
    else:
        arr = np.array([r.as_array() if isinstance(r, DhParams) else np.asarray(r, dtype=float) for r in rho])
    if arr.shape[-2:] != (njoints, 4):
        raise ValueError(f"rho must have shape (..., {njoints}, 4), got {arr.shape}")
    return arr


def dh_transforms(q: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Per-joint local transforms, shape (..., J, 4, 4)."""
    d, theta, a, alpha = rho[..., 0], rho[..., 1] + q, rho[..., 2], rho[..., 3]
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    out = np.zeros(theta.shape + (4, 4))
    out[..., 0, 0] = ct
    out[..., 0, 1] = -st * ca
    out[..., 0, 2] = st * sa
    out[..., 0, 3] = a * ct
    out[..., 1, 0] = st
    out[..., 1, 1] = ct * ca
    out[..., 1, 2] = -ct * sa
    out[..., 1, 3] = a * st
    out[..., 2, 1] = sa
    out[..., 2, 2] = ca
    out[..., 2, 3] = d
    out[..., 3, 3] = 1.0
    return out


def frames_array(q: np.ndarray, rho: np.ndarray, parents: np.ndarray) -> np.ndarray:
    """World transforms T_0_k for every joint, composed in topological order."""
    local = dh_transforms(q, rho)
    frames = np.empty_like(local)
    for k in range(parents.shape[0]):
        p = parents[k]
        if p < 0:
            frames[..., k, :, :] = local[..., k, :, :]
        else:
            frames[..., k, :, :] = frames[..., p, :, :] @ local[..., k, :, :]
    return frames


@dataclass(frozen=True, eq=False)
class FrameSet:
    """World pose of every joint frame for one configuration."""

    frames: np.ndarray  # (J, 4, 4)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        rot = frames[:, :3, :3]
        err = np.abs(rot @ rot.transpose(0, 2, 1) - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation not orthonormal within 1e-9 (max deviation {err:.2e})")
        det = np.linalg.det(rot)
        if np.abs(det - 1.0).max() > 1e-9:
            raise ValueError("rotation determinant deviates from +1")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def transform(self, k: int) -> np.ndarray:
        return self.frames[k]


def _check_q(q, model: RobotModel) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != model.njoints:
        raise ValueError(f"q has {q.shape[-1]} entries, model has {model.njoints} joints")
    return q


def forward_kinematics(q, rho, model: RobotModel) -> FrameSet:
    """Frames of all joints for one configuration with explicit DH values."""
    q = _check_q(q, model)
    if q.ndim != 1:
        raise ValueError("forward_kinematics takes a single configuration; use frames_array for batches")
    rho = _as_rho_array(rho, model.njoints)
    return FrameSet(frames_array(q, rho, model.parents))


def marker_world(frames, mount: MarkerMount) -> np.ndarray:
    """World position of a mounted marker point; world-fixed for joint -1."""
    arr = frames.frames if isinstance(frames, FrameSet) else np.asarray(frames)
    if mount.joint < 0:
        return np.array(mount.point)
    t = arr[..., mount.joint, :, :]
    return t[..., :3, :3] @ mount.point + t[..., :3, 3]


def gravity_torques_array(q: np.ndarray, rho: np.ndarray, model: RobotModel, frames: np.ndarray | None = None) -> np.ndarray:
    """Scalar gravity torque about each joint's axis, shape (..., J).

    tau_k is the moment, about joint k's rotation axis (the parent frame's
    z-axis), of the gravity forces of all links in k's subtree. Equals
    -d(potential energy)/dq_k.
    """
    if frames is None:
        frames = frames_array(q, rho, model.parents)
    batch = frames.shape[:-3]
    n = model.njoints
    rot = frames[..., :3, :3]
    pos = frames[..., :3, 3]
    coms_w = np.einsum("...kij,kj->...ki", rot, model.coms) + pos

    # joint k's axis line passes through the parent frame origin along its z
    eye = np.broadcast_to(np.eye(4), batch + (1, 4, 4))
    ext = np.concatenate([eye, frames], axis=-3)  # parent -1 maps to index 0
    parent_frames = ext[..., model.parents + 1, :, :]
    axes = parent_frames[..., :3, 2]
    origins = parent_frames[..., :3, 3]

    g = model.gravity
    # weighted COM sums over each subtree; c x (m g) = (m c) x g
    wsum = np.einsum("km,...mi->...ki", model.subtree * model.masses, coms_w)
    msum = model.subtree @ model.masses
    moment = np.cross(wsum, np.broadcast_to(g, wsum.shape)) - np.cross(origins, msum[:, None] * g)
    return np.einsum("...ki,...ki->...k", axes, moment)


def gravity_torques(q, rho, model: RobotModel) -> np.ndarray:
    """Per-joint gravity torques (Nm) for one configuration."""
    q = _check_q(q, model)
    rho = _as_rho_array(rho, model.njoints)
    return gravity_torques_array(q, rho, model)


def elastic_dh(rho0: np.ndarray, elasticity: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Linear torque-to-DH perturbation: rho = rho0 + C * tau (per joint)."""
    rho0 = np.asarray(rho0, dtype=float)
    return rho0 + np.asarray(elasticity, dtype=float) * np.asarray(tau, dtype=float)[..., None]


def nominal_rho(q: np.ndarray, model: RobotModel) -> np.ndarray:
    """Nominal DH table, including the configuration-dependent imperfection
    term when the model carries one; shape (..., J, 4)."""
    q = np.asarray(q, dtype=float)
    rho0 = np.broadcast_to(model.dh0, q.shape + (4,)).copy()
    if model.ripple is not None:
        rho0[..., 1] += model.ripple.offsets(q)
    return rho0


def equilibrium_array(q: np.ndarray, model: RobotModel, tol: float = EQUILIBRIUM_TOL, max_iter: int = EQUILIBRIUM_MAX_ITER) -> tuple[np.ndarray, np.ndarray]:
    """Batched torque-equilibrium solve; returns (rho_star, frames).

    Plain fixed-point iteration of rho -> rho0 + C * tau(q, rho) starting
    at rho0. Each batch element is frozen as soon as its own update falls
    below ``tol``, so results are identical to solving it alone.
    """
    rho0 = nominal_rho(q, model)
    compliance = model.compliance
    if not model.elastic:
        return rho0, frames_array(q, rho0, model.parents)

    rho = rho0.copy()
    batch = q.shape[:-1]
    active = np.ones(batch, dtype=bool)
    frames = None
    last_residual = np.inf
    for _ in range(max_iter):
        frames = frames_array(q, rho, model.parents)
        tau = gravity_torques_array(q, rho, model, frames)
        rho_new = rho0 + compliance * tau[..., None]
        delta = np.abs(rho_new - rho).max(axis=(-2, -1))
        if batch:
            rho[active] = rho_new[active]
            active = active & (delta >= tol)
            remaining = active.any()
        else:
            rho = rho_new
            remaining = delta >= tol
        if not remaining:
            return rho, frames_array(q, rho, model.parents)
        last_residual = delta.max() if batch else float(delta)
    raise EquilibriumError(
        f"torque equilibrium did not converge within {max_iter} iterations "
        f"(last max change {last_residual:.3e}); model is over-compliant"
    )


def solve_equilibrium(q, model: RobotModel, tol: float = EQUILIBRIUM_TOL, max_iter: int = EQUILIBRIUM_MAX_ITER) -> tuple[np.ndarray, FrameSet]:
    """Equilibrium DH values rho* and the frames at rho* for one configuration."""
    q = _check_q(q, model)
    if q.ndim != 1:
        raise ValueError("solve_equilibrium takes a single configuration; use equilibrium_array for batches")
    rho, frames = equilibrium_array(q, model, tol=tol, max_iter=max_iter)
    return rho, FrameSet(frames)


def potential_energy(q, rho, model: RobotModel) -> float:
    """Total gravitational potential energy at fixed DH values (J).

    Reference oracle for the torque computation: gravity_torques equals
    -dU/dq at fixed rho.
    """
    frames = frames_array(np.asarray(q, dtype=float), _as_rho_array(rho, model.njoints), model.parents)
    coms_w = np.einsum("...kij,kj->...ki", frames[..., :3, :3], model.coms) + frames[..., :3, 3]
    return float(-np.einsum("...ki,i,k->...", coms_w, model.gravity, model.masses))
