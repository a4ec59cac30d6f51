"""Synthetic ground-truth robots and simulated camera measurements.

This module stands in for a real robot and an external tracking system:
``make_ground_truth`` hides a perturbed copy of the nominal model,
``simulate_measurements`` renders noisy pixel observations of it, and
``cartesian_reference`` provides the true world marker positions used to
score a calibration in cartesian space.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import camera, kinematics
from .model import (
    CameraIntrinsics,
    CameraMount,
    DhParams,
    Joint,
    JointElasticity,
    MarkerMount,
    MeasurementSample,
    ParamEntry,
    ParameterSpec,
    PoseConfig,
    RobotModel,
    Sphere,
    ThetaRipple,
    rotvec_to_matrix,
    matrix_to_rotvec,
)


@dataclass(frozen=True)
class PerturbationSpec:
    """How far the hidden ground truth may drift from the nominal model.

    ``dh_sigma`` is the per-component std dev (d, theta, a, alpha);
    ``elasticity_scale`` draws a uniform multiplier per compliance entry;
    mount and intrinsics sigmas perturb the camera/marker mounts and the
    camera intrinsics. ``ripple`` (amplitude rad, period rad) attaches a
    configuration-dependent theta disturbance that no parameter spec can
    express, creating the imperfect-model regime. Joints listed in
    ``fixed_joints`` are left untouched (the base joint defines the world
    frame and must stay put for cartesian evaluation to be meaningful).
    """

    dh_sigma: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    elasticity_scale: tuple[float, float] = (1.0, 1.0)
    mount_sigma_m: float = 0.0
    mount_sigma_rad: float = 0.0
    intrinsics_sigma_px: float = 0.0
    intrinsics_sigma_xi: float = 0.0
    ripple: tuple[float, float] | None = None
    fixed_joints: tuple[int, ...] = (0,)

    def __post_init__(self):
        if any(s < 0 for s in self.dh_sigma):
            raise ValueError("dh_sigma components must be >= 0")
        lo, hi = self.elasticity_scale
        if lo > hi:
            raise ValueError("elasticity_scale range must be ordered")
        for name in ("mount_sigma_m", "mount_sigma_rad", "intrinsics_sigma_px", "intrinsics_sigma_xi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def make_ground_truth(nominal: RobotModel, pspec: PerturbationSpec, seed: int) -> RobotModel:
    """Perturbed copy of ``nominal`` acting as the hidden real robot.

    Deterministic for a given seed; the same seed draws the same
    perturbation field regardless of the fixed-joint mask.
    """
    rng = np.random.default_rng(seed)
    n = nominal.njoints
    dh_noise = rng.normal(0.0, 1.0, size=(n, 4)) * np.asarray(pspec.dh_sigma)
    lo, hi = pspec.elasticity_scale
    el_scale = rng.uniform(lo, hi, size=(n, 4))

    joints = []
    for k, joint in enumerate(nominal.joints):
        if k in pspec.fixed_joints:
            joints.append(joint)
            continue
        dh = joint.dh.as_array() + dh_noise[k]
        el = joint.elasticity.as_array() * el_scale[k]
        joints.append(
            replace(
                joint,
                dh=DhParams(*dh),
                elasticity=JointElasticity(*el),
            )
        )

    cam = nominal.camera
    if pspec.mount_sigma_m > 0 or pspec.mount_sigma_rad > 0:
        dt = rng.normal(0.0, pspec.mount_sigma_m, size=3)
        dr = rng.normal(0.0, pspec.mount_sigma_rad, size=3)
        rot = rotvec_to_matrix(cam.rotvec) @ rotvec_to_matrix(dr)
        cam = replace(cam, rotvec=matrix_to_rotvec(rot), translation=np.asarray(cam.translation) + dt)

    markers = {}
    for name, mount in nominal.markers.items():
        shift = rng.normal(0.0, pspec.mount_sigma_m, size=3) if pspec.mount_sigma_m > 0 else 0.0
        markers[name] = replace(mount, point=np.asarray(mount.point) + shift)

    intr = nominal.intrinsics
    if pspec.intrinsics_sigma_px > 0 or pspec.intrinsics_sigma_xi > 0:
        intr = replace(
            intr,
            focal=np.asarray(intr.focal) + rng.normal(0.0, pspec.intrinsics_sigma_px, size=2),
            center=np.asarray(intr.center) + rng.normal(0.0, pspec.intrinsics_sigma_px, size=2),
            distortion=intr.distortion + rng.normal(0.0, pspec.intrinsics_sigma_xi),
        )

    ripple = nominal.ripple
    if pspec.ripple is not None:
        amplitude, period = pspec.ripple
        ripple = ThetaRipple(amplitude=amplitude, period=period, phases=rng.uniform(0.0, 2.0 * math.pi, size=n))

    return RobotModel(
        joints=tuple(joints),
        camera=cam,
        intrinsics=intr,
        markers=markers,
        spheres=nominal.spheres,
        gravity=nominal.gravity,
        head_joints=nominal.head_joints,
        ripple=ripple,
    )


def _marker_positions(model: RobotModel, configs: list[PoseConfig]):
    """World marker position and camera pose per configuration."""
    q = np.array([c.q for c in configs])
    _, frames = kinematics.equilibrium_array(q, model)
    pose_cam = frames[:, model.camera.joint] @ model.camera.local_pose()
    n = q.shape[0]
    eye = np.broadcast_to(np.eye(4), (n, 1, 4, 4))
    ext = np.concatenate([eye, frames], axis=1)
    names = model.marker_names()
    index = {name: i for i, name in enumerate(names)}
    joints = np.array([model.markers[name].joint for name in names])
    points = np.array([model.markers[name].point for name in names])
    which = np.array([index[c.marker_id] for c in configs])
    frame_of = ext[np.arange(n), joints[which] + 1]
    x_world = np.einsum("nij,nj->ni", frame_of[:, :3, :3], points[which]) + frame_of[:, :3, 3]
    return x_world, pose_cam


def simulate_measurements(truth: RobotModel, configs: list[PoseConfig], sigma_u_true: float, seed: int) -> list[MeasurementSample]:
    """Render pixel measurements of the markers under the ground truth.

    Configurations whose marker is not measurable on the truth model
    (behind the camera or outside the image) are skipped with a warning.
    Gaussian pixel noise of std ``sigma_u_true`` is added per axis.
    """
    if not configs:
        return []
    for c in configs:
        if c.marker_id not in truth.markers:
            raise ValueError(f"unknown marker {c.marker_id!r}")
    rng = np.random.default_rng(seed)
    x_world, pose_cam = _marker_positions(truth, configs)
    x_cam = camera.world_to_camera(x_world, pose_cam)
    z = x_cam[:, 2]
    valid = z > camera.Z_MIN
    u = np.full((len(configs), 2), np.nan)
    if np.any(valid):
        u[valid] = camera.project_camera_frame(x_cam[valid], truth.intrinsics)
    size = truth.intrinsics.image_size
    valid &= np.all(np.isfinite(u), axis=1) & np.all(u >= 0, axis=1) & np.all(u < size, axis=1)

    samples = []
    skipped = 0
    for i, config in enumerate(configs):
        if not valid[i]:
            skipped += 1
            continue
        noise = rng.normal(0.0, sigma_u_true, size=2) if sigma_u_true > 0 else np.zeros(2)
        samples.append(MeasurementSample(q=config.q, marker_id=config.marker_id, u=u[i] + noise))
    if skipped:
        warnings.warn(f"skipped {skipped} of {len(configs)} configurations (marker not measurable on truth model)", stacklevel=2)
    return samples


def cartesian_reference(truth: RobotModel, configs: list[PoseConfig]) -> np.ndarray:
    """Ground-truth world marker positions, one row per configuration."""
    if not configs:
        return np.zeros((0, 3))
    x_world, _ = _marker_positions(truth, configs)
    return x_world


# ---------------------------------------------------------------------------
# demo humanoid: 3 torso + 2 neck + 2 x 7 arm joints, head camera,
# wrist markers and a world-fixed pole marker

_CAMERA_TILT = math.radians(20.0)


def _camera_rotvec() -> tuple[float, float, float]:
    """Mount rotation: optical z forward and tilted down, image x = -world y."""
    target = np.column_stack(
        [
            [0.0, -1.0, 0.0],
            [-math.sin(_CAMERA_TILT), 0.0, -math.cos(_CAMERA_TILT)],
            [math.cos(_CAMERA_TILT), 0.0, -math.sin(_CAMERA_TILT)],
        ]
    )
    return tuple(matrix_to_rotvec(target))


def _arm_joints(chest: int, start: int, side: float, prefix: str) -> list[Joint]:
    """7-DOF arm (S-R-S arrangement) hanging from the chest frame.

    ``start`` is the index the first arm joint will get in the joint list;
    side +1 is the left arm, -1 the right.
    """
    upper, fore = 0.30, 0.26
    return [
        Joint(  # shoulder pitch about the chest's lateral axis
            parent=chest,
            dh=DhParams(d=side * 0.22, theta=0.0, a=0.0, alpha=-math.pi / 2),
            elasticity=JointElasticity(theta=1.2e-4, d=2.0e-5),
            limits=(-1.1, 0.9),
            mass=2.4,
            com=(0.0, -0.05, side * 0.05),
            name=f"{prefix}_shoulder_pitch",
        ),
        Joint(  # shoulder roll about the forward axis
            parent=start,
            dh=DhParams(d=0.0, theta=math.pi / 2, a=0.0, alpha=-math.pi / 2),
            elasticity=JointElasticity(theta=1.0e-4),
            limits=(-1.0, 1.0),
            mass=2.0,
            com=(0.0, 0.05, -0.08),
            name=f"{prefix}_shoulder_roll",
        ),
        Joint(  # upper-arm roll; d spans the upper arm
            parent=start + 1,
            dh=DhParams(d=upper, theta=0.0, a=0.0, alpha=math.pi / 2),
            elasticity=JointElasticity(theta=0.8e-4),
            limits=(-1.4, 1.4),
            mass=1.8,
            com=(0.0, 0.03, -0.10),
            name=f"{prefix}_upper_roll",
        ),
        Joint(  # elbow
            parent=start + 2,
            dh=DhParams(d=0.0, theta=0.0, a=0.0, alpha=-math.pi / 2),
            elasticity=JointElasticity(theta=1.0e-4, d=1.5e-5),
            limits=(0.2, 1.9),
            mass=1.4,
            com=(0.0, 0.05, -0.06),
            name=f"{prefix}_elbow",
        ),
        Joint(  # forearm roll; d spans the forearm
            parent=start + 3,
            dh=DhParams(d=fore, theta=0.0, a=0.0, alpha=math.pi / 2),
            elasticity=JointElasticity(theta=0.5e-4),
            limits=(-1.4, 1.4),
            mass=0.9,
            com=(0.0, 0.02, -0.08),
            name=f"{prefix}_forearm_roll",
        ),
        Joint(  # wrist pitch
            parent=start + 4,
            dh=DhParams(d=0.0, theta=0.0, a=0.0, alpha=-math.pi / 2),
            elasticity=JointElasticity(theta=0.4e-4),
            limits=(-0.9, 0.9),
            mass=0.5,
            com=(0.0, 0.03, -0.02),
            name=f"{prefix}_wrist_pitch",
        ),
        Joint(  # wrist roll carrying the marker plate
            parent=start + 5,
            dh=DhParams(d=0.09, theta=0.0, a=0.0, alpha=0.0),
            limits=(-1.2, 1.2),
            mass=0.4,
            com=(0.01, 0.0, 0.03),
            name=f"{prefix}_wrist_roll",
        ),
    ]


def demo_humanoid() -> RobotModel:
    """Nominal 19-joint upper-body humanoid used across tests and docs.

    Topology: torso yaw-pitch-pitch, neck tilt-pan with the camera on the
    pan link, two 7-DOF arms from the chest, markers on both wrists and
    on a pole fixed in the world in front of the robot.
    """
    joints = [
        Joint(
            parent=-1,
            dh=DhParams(d=0.20, theta=0.0, a=0.0, alpha=-math.pi / 2),
            limits=(-0.6, 0.6),
            mass=9.0,
            com=(0.0, -0.05, 0.0),
            name="torso_yaw",
        ),
        Joint(
            parent=0,
            dh=DhParams(d=0.0, theta=-math.pi / 2, a=0.24, alpha=0.0),
            elasticity=JointElasticity(theta=2.5e-4),
            limits=(-0.45, 0.45),
            mass=7.0,
            com=(0.12, 0.0, 0.0),
            name="torso_pitch1",
        ),
        Joint(
            parent=1,
            dh=DhParams(d=0.0, theta=0.0, a=0.24, alpha=0.0),
            elasticity=JointElasticity(theta=2.0e-4),
            limits=(-0.45, 0.45),
            mass=6.0,
            com=(0.12, 0.0, 0.0),
            name="torso_pitch2",
        ),
        Joint(  # neck tilt: nods the whole head assembly
            parent=2,
            dh=DhParams(d=0.0, theta=math.pi / 2, a=0.05, alpha=math.pi / 2),
            elasticity=JointElasticity(theta=0.8e-4),
            limits=(-1.0, 1.0),
            mass=1.2,
            com=(0.0, 0.0, 0.08),
            name="neck_tilt",
        ),
        Joint(  # neck pan about the (tilted) vertical; carries the camera
            parent=3,
            dh=DhParams(d=0.17, theta=0.0, a=0.0, alpha=0.0),
            limits=(-1.5, 1.5),
            mass=1.0,
            com=(0.03, 0.0, -0.05),
            name="neck_pan",
        ),
    ]
    joints += _arm_joints(chest=2, start=5, side=+1.0, prefix="left")
    joints += _arm_joints(chest=2, start=12, side=-1.0, prefix="right")

    camera_mount = CameraMount(
        joint=4,
        rotvec=_camera_rotvec(),
        translation=(0.07, 0.0, 0.02),
    )
    intrinsics = CameraIntrinsics(
        focal=(540.0, 540.0),
        center=(320.0, 240.0),
        distortion=0.05,
        image_size=(640.0, 480.0),
    )
    markers = {
        "left_wrist": MarkerMount(joint=11, point=(0.0, 0.0, 0.06), normal=(0.0, 0.0, -1.0)),
        "right_wrist": MarkerMount(joint=18, point=(0.0, 0.0, 0.06), normal=(0.0, 0.0, -1.0)),
        "pole": MarkerMount(joint=-1, point=(0.85, 0.0, 0.35), normal=(-0.81, 0.0, 0.58)),
    }
    spheres = (
        Sphere(joint=0, center=(0.0, -0.1, 0.0), radius=0.11),
        Sphere(joint=1, center=(0.12, 0.0, 0.0), radius=0.11),
        Sphere(joint=2, center=(0.0, 0.0, 0.0), radius=0.11),
        Sphere(joint=4, center=(-0.04, 0.0, 0.0), radius=0.07),
        Sphere(joint=7, center=(0.0, -0.21, 0.0), radius=0.06),
        Sphere(joint=7, center=(0.0, -0.09, 0.0), radius=0.06),
        Sphere(joint=9, center=(0.0, -0.18, 0.0), radius=0.05),
        Sphere(joint=9, center=(0.0, -0.08, 0.0), radius=0.05),
        Sphere(joint=14, center=(0.0, -0.21, 0.0), radius=0.06),
        Sphere(joint=14, center=(0.0, -0.09, 0.0), radius=0.06),
        Sphere(joint=16, center=(0.0, -0.18, 0.0), radius=0.05),
        Sphere(joint=16, center=(0.0, -0.08, 0.0), radius=0.05),
    )
    return RobotModel(
        joints=tuple(joints),
        camera=camera_mount,
        intrinsics=intrinsics,
        markers=markers,
        spheres=spheres,
        gravity=(0.0, 0.0, -9.81),
        head_joints=(3, 4),
    )


_PRIOR_SIGMA = {"d": 0.02, "theta": 0.1, "a": 0.02, "alpha": 0.05}
_ARM_JOINTS = tuple(range(5, 19))


def demo_parameter_spec(identifiable: bool = False, prior_scale: float = 1.0) -> ParameterSpec:
    """Calibration parameter selection for the demo humanoid.

    The full spec frees every DH parameter, joint (theta) elasticities for
    all joints plus lateral (d) elasticities for the arm joints, both
    mounts, and the intrinsics: 129 free parameters. The identifiable
    variant drops entries that trade off exactly against others (base
    joint, the camera joint's DH against the camera mount, terminal wrist
    DH against the marker points, and elasticities whose torque signal
    vanishes), which is what exact-recovery experiments need.

    Prior sigmas default to roughly 10x the expected perturbation scale
    per parameter class; ``prior_scale`` widens (or tightens) all of them,
    e.g. for recovery oracles where the prior should not bias the fit.
    """
    entries: list[ParamEntry] = []

    def add(path, sigma):
        entries.append(ParamEntry(path=path, free=True, prior_sigma=sigma * prior_scale))

    nominal = demo_humanoid()
    elastic_theta = {k for k in range(19) if nominal.joints[k].elasticity.theta != 0.0}
    elastic_d = {k for k in _ARM_JOINTS if nominal.joints[k].elasticity.d != 0.0}

    for k in range(19):
        if identifiable and k in (0, 4, 11, 18):
            continue  # base = world frame; camera/marker carriers are gauge
        for comp in ("d", "theta", "a", "alpha"):
            add(f"joints/{k}/dh/{comp}", _PRIOR_SIGMA[comp])
    for k in range(19):
        if identifiable and k not in elastic_theta:
            continue
        add(f"joints/{k}/elasticity/theta", 2e-3)
    for k in _ARM_JOINTS:
        if identifiable and k not in elastic_d:
            continue
        add(f"joints/{k}/elasticity/d", 5e-4)
    for axis in range(3):
        add(f"camera/rotvec/{axis}", 0.1)
    for axis in range(3):
        add(f"camera/translation/{axis}", 0.05)
    for name in ("left_wrist", "right_wrist", "pole"):
        for axis in range(3):
            add(f"markers/{name}/point/{axis}", 0.05)
    add("intrinsics/focal/0", 30.0)
    add("intrinsics/focal/1", 30.0)
    add("intrinsics/center/0", 30.0)
    add("intrinsics/center/1", 30.0)
    add("intrinsics/distortion", 0.05)
    return ParameterSpec(tuple(entries))


def demo_perturbation(ripple: tuple[float, float] | None = None) -> PerturbationSpec:
    """Perturbation scale that puts the nominal model a few cm off.

    The base joint stays fixed (it defines the world frame) and so do the
    mount-carrier joints (4, 11, 18): their geometry is calibrated through
    the camera and marker mounts, while perturbing them would also move
    link masses, which no mount parameter can express.
    """
    return PerturbationSpec(
        dh_sigma=(0.004, 0.015, 0.004, 0.008),
        elasticity_scale=(0.7, 1.4),
        mount_sigma_m=0.004,
        mount_sigma_rad=0.01,
        intrinsics_sigma_px=3.0,
        intrinsics_sigma_xi=0.01,
        ripple=ripple,
        fixed_joints=(0, 4, 11, 18),
    )
