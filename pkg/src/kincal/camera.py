"""Pinhole camera with radial distortion and the virtual-noise covariance.

Projection maps a world point through the camera pose into pixels:

    u = center + focal * D(P(x_cam), xi),   P(x) = (x_x/x_z, x_y/x_z),
    D(p, xi) = p / (1 + xi*|p|^2)

The effective pixel covariance propagates isotropic cartesian noise on the
point through the (distortion-free) projection, which makes the weight of
a pixel error grow with the marker's distance from the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CameraIntrinsics

Z_MIN = 1e-6


class BehindCameraError(ValueError):
    """Point at or behind the image plane (camera-frame z <= Z_MIN)."""


def world_to_camera(x_world: np.ndarray, pose_world_camera: np.ndarray) -> np.ndarray:
    """Transform world points into the camera frame; supports batches."""
    x = np.asarray(x_world, dtype=float)
    t = np.asarray(pose_world_camera, dtype=float)
    rot = t[..., :3, :3]
    trans = t[..., :3, 3]
    return np.einsum("...ji,...j->...i", rot, x - trans)


def project_camera_frame(x_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points to pixels; caller guarantees z > Z_MIN."""
    x = np.asarray(x_cam, dtype=float)
    p = x[..., :2] / x[..., 2:3]
    scale = 1.0 + intr.distortion * np.sum(p * p, axis=-1, keepdims=True)
    return intr.center + intr.focal * (p / scale)


def project(x_world, pose_world_camera, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates of a world point seen by the camera."""
    x_cam = world_to_camera(x_world, pose_world_camera)
    z = x_cam[..., 2]
    if np.any(z <= Z_MIN):
        raise BehindCameraError(f"point at camera-frame z = {np.min(z):.3e} <= {Z_MIN:.0e}")
    return project_camera_frame(x_cam, intr)


def projection_jacobian(x_world, pose_world_camera, intr: CameraIntrinsics) -> np.ndarray:
    """Analytic 2x3 Jacobian of ``project`` w.r.t. the world point."""
    x_cam = world_to_camera(x_world, pose_world_camera)
    z = x_cam[..., 2]
    if np.any(z <= Z_MIN):
        raise BehindCameraError(f"point at camera-frame z = {np.min(z):.3e} <= {Z_MIN:.0e}")

    p = x_cam[..., :2] / x_cam[..., 2:3]
    # d p / d x_cam
    jp = np.zeros(x_cam.shape[:-1] + (2, 3))
    inv_z = 1.0 / z
    jp[..., 0, 0] = inv_z
    jp[..., 1, 1] = inv_z
    jp[..., 0, 2] = -p[..., 0] * inv_z
    jp[..., 1, 2] = -p[..., 1] * inv_z
    # d D / d p for D(p) = p / (1 + xi |p|^2)
    xi = intr.distortion
    s = 1.0 / (1.0 + xi * np.sum(p * p, axis=-1))
    jd = s[..., None, None] * np.eye(2) - (2.0 * xi * s**2)[..., None, None] * (
        p[..., :, None] * p[..., None, :]
    )
    rot = np.asarray(pose_world_camera, dtype=float)[..., :3, :3]
    jac = intr.focal[:, None] * (jd @ jp) @ np.swapaxes(rot, -1, -2)
    return jac


@dataclass(frozen=True, eq=False)
class EffectivePixelCovariance:
    """2x2 pixel covariance combining detector noise and virtual noise."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (2, 2):
            raise ValueError("covariance must be 2x2")
        if abs(m[0, 1] - m[1, 0]) > 1e-12:
            raise ValueError("covariance must be symmetric")
        if not (m[0, 0] > 0 and np.linalg.det(m) > 0):
            raise ValueError("covariance must be positive definite")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


def covariance_camera_frame(x_cam: np.ndarray, intr: CameraIntrinsics, sigma_u: float, sigma_x: float) -> np.ndarray:
    """Effective covariances for camera-frame points, shape (..., 2, 2).

    Distortion-free closed form: the virtual cartesian noise sigma_x is
    mapped through the pinhole Jacobian, so the term shrinks with the
    squared marker depth. Entry (i, j) is scaled by focal_i * focal_j,
    which generalizes the scalar-focal form to anisotropic intrinsics.
    """
    x = np.asarray(x_cam, dtype=float)
    z = x[..., 2]
    px, py = x[..., 0] / z, x[..., 1] / z
    f = intr.focal
    base = np.empty(x.shape[:-1] + (2, 2))
    base[..., 0, 0] = f[0] * f[0] * (1.0 + px * px)
    base[..., 1, 1] = f[1] * f[1] * (1.0 + py * py)
    base[..., 0, 1] = base[..., 1, 0] = f[0] * f[1] * px * py
    cov = (sigma_x**2 / z**2)[..., None, None] * base
    cov[..., 0, 0] += sigma_u**2
    cov[..., 1, 1] += sigma_u**2
    return cov


def effective_covariance(x_world, pose_world_camera, intr: CameraIntrinsics, sigma_u: float, sigma_x: float) -> EffectivePixelCovariance:
    """Per-sample pixel covariance from detector noise plus virtual noise."""
    x_cam = world_to_camera(x_world, pose_world_camera)
    if np.any(x_cam[..., 2] <= Z_MIN):
        raise BehindCameraError(f"point at camera-frame z = {np.min(x_cam[..., 2]):.3e} <= {Z_MIN:.0e}")
    return EffectivePixelCovariance(covariance_camera_frame(x_cam, intr, sigma_u, sigma_x))
