"""Robot description, calibration parameter packing, and file formats.

All types are immutable after construction and safe to share between
threads. Models are plain containers; the geometry lives in
:mod:`kincal.kinematics` and :mod:`kincal.camera`.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

DH_COMPONENTS = ("d", "theta", "a", "alpha")


class ModelError(ValueError):
    """Raised for invalid robot descriptions, parameter paths, or files."""


def _as_vector(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n,):
        raise ModelError(f"{name}: expected {n} components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name}: components must be finite")
    arr.setflags(write=False)
    return arr


def rotvec_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues formula; rotvec is axis * angle in radians."""
    r = np.asarray(rotvec, dtype=float)
    angle = float(np.linalg.norm(r))
    if angle < 1e-12:
        # second-order series keeps the result orthonormal to machine precision
        k = _skew(r)
        return np.eye(3) + k + 0.5 * (k @ k)
    axis = r / angle
    k = _skew(axis)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def matrix_to_rotvec(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotvec_to_matrix` for proper rotations."""
    rot = np.asarray(rot, dtype=float)
    cos_angle = min(1.0, max(-1.0, (np.trace(rot) - 1.0) / 2.0))
    angle = math.acos(cos_angle)
    if angle < 1e-9:
        return np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]) / 2.0
    if angle > math.pi - 1e-6:
        # near pi the off-diagonal form degenerates; use the symmetric part
        w = np.sqrt(np.maximum(np.diag(rot) - cos_angle, 0.0) / (1.0 - cos_angle))
        w[1] = math.copysign(w[1], rot[0, 1])
        w[2] = math.copysign(w[2], rot[0, 2])
        return angle * w
    axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return axis * (angle / (2.0 * math.sin(angle)))


def _skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass(frozen=True)
class DhParams:
    """Classic Denavit-Hartenberg parameters of one joint (m / rad)."""

    d: float = 0.0
    theta: float = 0.0
    a: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        for name in DH_COMPONENTS:
            if not math.isfinite(getattr(self, name)):
                raise ModelError(f"DhParams.{name} must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.theta, self.a, self.alpha])


@dataclass(frozen=True)
class JointElasticity:
    """Compliance of each DH component to the joint's own torque.

    Units are m/Nm for d and a, rad/Nm for theta and alpha. Zero means
    the component is rigid.
    """

    d: float = 0.0
    theta: float = 0.0
    a: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        for name in DH_COMPONENTS:
            if not math.isfinite(getattr(self, name)):
                raise ModelError(f"JointElasticity.{name} must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.theta, self.a, self.alpha])


@dataclass(frozen=True, eq=False)
class Joint:
    """One revolute joint of the kinematic tree.

    ``parent`` is the index of the parent joint or -1 for the world frame;
    parents must precede children. ``com`` is the center of mass of the
    link carried by this joint, in the joint frame.
    """

    parent: int
    dh: DhParams
    elasticity: JointElasticity = field(default_factory=JointElasticity)
    limits: tuple[float, float] = (-math.pi, math.pi)
    mass: float = 0.0
    com: np.ndarray = (0.0, 0.0, 0.0)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "com", _as_vector(self.com, 3, "Joint.com"))
        lo, hi = float(self.limits[0]), float(self.limits[1])
        if not (lo < hi) and not (lo == hi == 0.0):
            # zero-width limits are allowed to lock a joint
            if lo != hi:
                raise ModelError(f"Joint limits must satisfy q_min < q_max, got {self.limits}")
        if lo > hi:
            raise ModelError(f"Joint limits must satisfy q_min <= q_max, got {self.limits}")
        object.__setattr__(self, "limits", (lo, hi))
        if self.mass < 0:
            raise ModelError("Joint mass must be >= 0")


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """Pinhole intrinsics with one radial distortion coefficient."""

    focal: np.ndarray
    center: np.ndarray
    distortion: float = 0.0
    image_size: np.ndarray = (640.0, 480.0)

    def __post_init__(self):
        object.__setattr__(self, "focal", _as_vector(self.focal, 2, "focal"))
        object.__setattr__(self, "center", _as_vector(self.center, 2, "center"))
        object.__setattr__(self, "image_size", _as_vector(self.image_size, 2, "image_size"))
        if np.any(self.focal <= 0):
            raise ModelError("focal components must be > 0")
        if np.any(self.center < 0) or np.any(self.center >= self.image_size):
            raise ModelError("principal point must lie inside the image")
        if not math.isfinite(self.distortion):
            raise ModelError("distortion must be finite")


@dataclass(frozen=True, eq=False)
class CameraMount:
    """Rigid transform from a joint frame to the camera frame.

    Rotation is stored as a rotation vector so that it packs losslessly
    into the flat parameter vector.
    """

    joint: int
    rotvec: np.ndarray = (0.0, 0.0, 0.0)
    translation: np.ndarray = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotvec", _as_vector(self.rotvec, 3, "CameraMount.rotvec"))
        object.__setattr__(self, "translation", _as_vector(self.translation, 3, "CameraMount.translation"))

    def local_pose(self) -> np.ndarray:
        """4x4 transform T_joint_camera."""
        pose = np.eye(4)
        pose[:3, :3] = rotvec_to_matrix(self.rotvec)
        pose[:3, 3] = self.translation
        return pose


@dataclass(frozen=True, eq=False)
class MarkerMount:
    """A point marker on a joint frame, or on the world frame (joint = -1).

    ``normal`` is the marker's outward direction in the attached frame and
    is only used by pose planning (facing checks).
    """

    joint: int
    point: np.ndarray
    normal: np.ndarray = (0.0, 0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "point", _as_vector(self.point, 3, "MarkerMount.point"))
        normal = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(normal)
        if not norm > 0:
            raise ModelError("MarkerMount.normal must be nonzero")
        normal = normal / norm
        normal.setflags(write=False)
        object.__setattr__(self, "normal", normal)


@dataclass(frozen=True, eq=False)
class Sphere:
    """Collision sphere attached to a joint frame (-1 for world)."""

    joint: int
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vector(self.center, 3, "Sphere.center"))
        if not self.radius > 0:
            raise ModelError("Sphere radius must be > 0")


@dataclass(frozen=True, eq=False)
class ThetaRipple:
    """Periodic, configuration-dependent theta disturbance.

    Models unparameterized kinematic error: each joint's theta is offset
    by ``amplitude * sin(2*pi*q/period + phase)``. Not expressible through
    any ParameterSpec path, which is exactly its purpose in synthetic
    ground-truth robots.
    """

    amplitude: float
    period: float
    phases: np.ndarray

    def __post_init__(self):
        if not self.period > 0:
            raise ModelError("ThetaRipple.period must be > 0")
        phases = np.asarray(self.phases, dtype=float)
        phases.setflags(write=False)
        object.__setattr__(self, "phases", phases)

    def offsets(self, q: np.ndarray) -> np.ndarray:
        return self.amplitude * np.sin(2.0 * np.pi * q / self.period + self.phases)


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Kinematic tree with camera, markers, and collision spheres.

    Derived arrays used by the numeric pipeline (nominal DH table,
    compliance table, masses, subtree masks) are precomputed on
    construction; instances are immutable.
    """

    joints: tuple[Joint, ...]
    camera: CameraMount
    intrinsics: CameraIntrinsics
    markers: dict[str, MarkerMount]
    spheres: tuple[Sphere, ...] = ()
    gravity: np.ndarray = (0.0, 0.0, -9.81)
    head_joints: tuple[int, ...] = ()
    ripple: ThetaRipple | None = None

    def __post_init__(self):
        joints = tuple(self.joints)
        object.__setattr__(self, "joints", joints)
        n = len(joints)
        if n == 0:
            raise ModelError("RobotModel needs at least one joint")
        for k, joint in enumerate(joints):
            if not -1 <= joint.parent < k:
                raise ModelError(f"joints[{k}]: parent {joint.parent} must precede the joint (or be -1)")
        if not 0 <= self.camera.joint < n:
            raise ModelError(f"camera joint {self.camera.joint} out of range")
        object.__setattr__(self, "markers", dict(self.markers))
        if not self.markers:
            raise ModelError("RobotModel needs at least one marker")
        for name, marker in self.markers.items():
            if not -1 <= marker.joint < n:
                raise ModelError(f"marker {name!r}: joint {marker.joint} out of range")
        object.__setattr__(self, "spheres", tuple(self.spheres))
        for i, sphere in enumerate(self.spheres):
            if not -1 <= sphere.joint < n:
                raise ModelError(f"spheres[{i}]: joint {sphere.joint} out of range")
        object.__setattr__(self, "gravity", _as_vector(self.gravity, 3, "gravity"))
        object.__setattr__(self, "head_joints", tuple(int(j) for j in self.head_joints))
        for j in self.head_joints:
            if not 0 <= j < n:
                raise ModelError(f"head joint {j} out of range")
        if self.ripple is not None and self.ripple.phases.shape != (n,):
            raise ModelError("ThetaRipple.phases length must equal joint count")

        dh0 = np.array([j.dh.as_array() for j in joints])
        compliance = np.array([j.elasticity.as_array() for j in joints])
        masses = np.array([j.mass for j in joints])
        coms = np.array([j.com for j in joints])
        parents = np.array([j.parent for j in joints], dtype=int)
        limits = np.array([j.limits for j in joints])
        subtree = np.eye(n, dtype=bool)
        for k in range(n):
            p = parents[k]
            if p >= 0:
                subtree[:, k] |= subtree[:, p]  # ancestors of k contain k
        for arr in (dh0, compliance, masses, coms, parents, limits, subtree):
            arr.setflags(write=False)
        object.__setattr__(self, "dh0", dh0)
        object.__setattr__(self, "compliance", compliance)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "coms", coms)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "limits", limits)
        object.__setattr__(self, "subtree", subtree)

    @property
    def njoints(self) -> int:
        return len(self.joints)

    @property
    def elastic(self) -> bool:
        return bool(np.any(self.compliance != 0.0))

    def marker_names(self) -> list[str]:
        return list(self.markers)


@dataclass(frozen=True)
class ParamEntry:
    """One calibration parameter: a path into the model plus its prior.

    ``prior_sigma`` None marks an explicitly unbounded prior; free entries
    must otherwise carry a positive, finite sigma. ``prior_mean`` None
    defaults to the nominal model value at pack time.
    """

    path: str
    free: bool = True
    prior_mean: float | None = None
    prior_sigma: float | None = None

    def __post_init__(self):
        if self.prior_sigma is not None:
            if not (math.isfinite(self.prior_sigma) and self.prior_sigma > 0):
                raise ModelError(f"{self.path}: prior_sigma must be positive and finite, or None")
        if self.prior_mean is not None and not math.isfinite(self.prior_mean):
            raise ModelError(f"{self.path}: prior_mean must be finite")


@dataclass(frozen=True)
class ParameterSpec:
    """Ordered selection of free calibration parameters with their priors."""

    entries: tuple[ParamEntry, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        for entry in entries:
            if entry.path in seen:
                raise ModelError(f"duplicate parameter path {entry.path!r}")
            seen.add(entry.path)

    @property
    def free_entries(self) -> tuple[ParamEntry, ...]:
        return tuple(e for e in self.entries if e.free)

    @property
    def free_paths(self) -> list[str]:
        return [e.path for e in self.entries if e.free]

    def subset(self, predicate) -> "ParameterSpec":
        """New spec keeping only entries whose path satisfies predicate."""
        return ParameterSpec(tuple(e for e in self.entries if predicate(e.path)))


@dataclass(frozen=True, eq=False)
class MeasurementSample:
    """One observation: joint configuration, marker name, measured pixel."""

    q: np.ndarray
    marker_id: str
    u: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 1 or not np.all(np.isfinite(q)):
            raise ModelError("MeasurementSample.q must be a finite vector")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "u", _as_vector(self.u, 2, "MeasurementSample.u"))


@dataclass(frozen=True, eq=False)
class PoseConfig:
    """A planned measurement configuration: joint angles plus target marker."""

    q: np.ndarray
    marker_id: str

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)


# ---------------------------------------------------------------------------
# parameter paths


def _resolve(model: RobotModel, path: str):
    """Return (kind, handle...) for a parameter path; raises on bad paths."""
    parts = path.split("/")
    try:
        if parts[0] == "joints":
            idx = int(parts[1])
            if not 0 <= idx < model.njoints:
                raise KeyError
            group, comp = parts[2], parts[3]
            if group not in ("dh", "elasticity") or comp not in DH_COMPONENTS:
                raise KeyError
            if len(parts) != 4:
                raise KeyError
            return ("joint", idx, group, comp)
        if parts[0] == "camera":
            field_name = parts[1]
            if field_name not in ("rotvec", "translation") or len(parts) != 3:
                raise KeyError
            axis = int(parts[2])
            if not 0 <= axis < 3:
                raise KeyError
            return ("camera", field_name, axis)
        if parts[0] == "markers":
            name = parts[1]
            if name not in model.markers or parts[2] != "point" or len(parts) != 4:
                raise KeyError
            axis = int(parts[3])
            if not 0 <= axis < 3:
                raise KeyError
            return ("marker", name, axis)
        if parts[0] == "intrinsics":
            field_name = parts[1]
            if field_name == "distortion":
                if len(parts) != 2:
                    raise KeyError
                return ("intrinsics", "distortion", 0)
            if field_name in ("focal", "center") and len(parts) == 3:
                axis = int(parts[2])
                if not 0 <= axis < 2:
                    raise KeyError
                return ("intrinsics", field_name, axis)
            raise KeyError
        raise KeyError
    except (KeyError, IndexError, ValueError):
        raise ModelError(f"invalid parameter path {path!r}") from None


def get_parameter(model: RobotModel, path: str) -> float:
    kind = _resolve(model, path)
    if kind[0] == "joint":
        _, idx, group, comp = kind
        holder = model.joints[idx].dh if group == "dh" else model.joints[idx].elasticity
        return float(getattr(holder, comp))
    if kind[0] == "camera":
        _, field_name, axis = kind
        return float(getattr(model.camera, field_name)[axis])
    if kind[0] == "marker":
        _, name, axis = kind
        return float(model.markers[name].point[axis])
    _, field_name, axis = kind
    if field_name == "distortion":
        return float(model.intrinsics.distortion)
    return float(getattr(model.intrinsics, field_name)[axis])


def pack(model: RobotModel, spec: ParameterSpec) -> np.ndarray:
    """Flatten the free parameters of ``model`` in spec order.

    Values are absolute (not offsets from nominal), so
    ``pack(unpack(theta)) == theta`` exactly.
    """
    return np.array([get_parameter(model, e.path) for e in spec.free_entries])


def unpack(theta: np.ndarray, model: RobotModel, spec: ParameterSpec) -> RobotModel:
    """Copy of ``model`` with the free parameters overwritten by ``theta``."""
    theta = np.asarray(theta, dtype=float)
    free = spec.free_entries
    if theta.shape != (len(free),):
        raise ModelError(f"theta has shape {theta.shape}, spec frees {len(free)} parameters")
    if not np.all(np.isfinite(theta)):
        raise ModelError("theta contains non-finite values")

    joint_updates: dict[int, dict[str, dict[str, float]]] = {}
    camera_updates: dict[str, dict[int, float]] = {}
    marker_updates: dict[str, dict[int, float]] = {}
    intr_updates: dict[str, dict[int, float]] = {}
    for entry, value in zip(free, theta):
        kind = _resolve(model, entry.path)
        value = float(value)
        if kind[0] == "joint":
            _, idx, group, comp = kind
            joint_updates.setdefault(idx, {}).setdefault(group, {})[comp] = value
        elif kind[0] == "camera":
            _, field_name, axis = kind
            camera_updates.setdefault(field_name, {})[axis] = value
        elif kind[0] == "marker":
            _, name, axis = kind
            marker_updates.setdefault(name, {})[axis] = value
        else:
            _, field_name, axis = kind
            intr_updates.setdefault(field_name, {})[axis] = value

    joints = list(model.joints)
    for idx, groups in joint_updates.items():
        joint = joints[idx]
        changes = {}
        if "dh" in groups:
            changes["dh"] = replace(joint.dh, **groups["dh"])
        if "elasticity" in groups:
            changes["elasticity"] = replace(joint.elasticity, **groups["elasticity"])
        joints[idx] = replace(joint, **changes)

    camera = model.camera
    if camera_updates:
        fields = {}
        for field_name, axes in camera_updates.items():
            vec = np.array(getattr(camera, field_name))
            for axis, value in axes.items():
                vec[axis] = value
            fields[field_name] = vec
        camera = replace(camera, **fields)

    markers = dict(model.markers)
    for name, axes in marker_updates.items():
        point = np.array(markers[name].point)
        for axis, value in axes.items():
            point[axis] = value
        markers[name] = replace(markers[name], point=point)

    intrinsics = model.intrinsics
    if intr_updates:
        fields = {}
        for field_name, axes in intr_updates.items():
            if field_name == "distortion":
                fields["distortion"] = axes[0]
            else:
                vec = np.array(getattr(intrinsics, field_name))
                for axis, value in axes.items():
                    vec[axis] = value
                fields[field_name] = vec
        intrinsics = replace(intrinsics, **fields)

    return RobotModel(
        joints=tuple(joints),
        camera=camera,
        intrinsics=intrinsics,
        markers=markers,
        spheres=model.spheres,
        gravity=model.gravity,
        head_joints=model.head_joints,
        ripple=model.ripple,
    )


def prior_vectors(model: RobotModel, spec: ParameterSpec) -> tuple[np.ndarray, np.ndarray]:
    """Prior mean and sigma per free parameter; sigma is inf when unbounded."""
    free = spec.free_entries
    mean = np.array([e.prior_mean if e.prior_mean is not None else get_parameter(model, e.path) for e in free])
    sigma = np.array([e.prior_sigma if e.prior_sigma is not None else np.inf for e in free])
    return mean, sigma


# ---------------------------------------------------------------------------
# serialization


def _dh_to_dict(dh) -> dict:
    return {name: getattr(dh, name) for name in DH_COMPONENTS}


def save_model(model: RobotModel, spec: ParameterSpec | None = None) -> str:
    """Serialize a model (and optionally its parameter spec) to JSON text."""
    doc = {
        "joints": [
            {
                "name": j.name,
                "parent": j.parent,
                "dh": _dh_to_dict(j.dh),
                "elasticity": _dh_to_dict(j.elasticity),
                "limits": [j.limits[0], j.limits[1]],
                "mass": j.mass,
                "com": list(j.com),
            }
            for j in model.joints
        ],
        "camera": {
            "joint": model.camera.joint,
            "rotvec": list(model.camera.rotvec),
            "translation": list(model.camera.translation),
            "intrinsics": {
                "focal": list(model.intrinsics.focal),
                "center": list(model.intrinsics.center),
                "distortion": model.intrinsics.distortion,
                "image_size": list(model.intrinsics.image_size),
            },
        },
        "markers": {
            name: {"joint": m.joint, "point": list(m.point), "normal": list(m.normal)}
            for name, m in model.markers.items()
        },
        "spheres": [{"joint": s.joint, "center": list(s.center), "radius": s.radius} for s in model.spheres],
        "gravity": list(model.gravity),
        "head_joints": list(model.head_joints),
        "imperfection": None
        if model.ripple is None
        else {
            "amplitude": model.ripple.amplitude,
            "period": model.ripple.period,
            "phases": list(model.ripple.phases),
        },
    }
    if spec is not None:
        doc["parameter_spec"] = [
            {"path": e.path, "free": e.free, "prior_mean": e.prior_mean, "prior_sigma": e.prior_sigma}
            for e in spec.entries
        ]
    return json.dumps(doc, indent=2) + "\n"


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ModelError(f"{context}: missing field {key!r}")
    return mapping[key]


def _load_dh(data: dict, context: str, cls):
    values = {}
    for name in DH_COMPONENTS:
        values[name] = float(_require(data, name, context))
    try:
        return cls(**values)
    except ModelError as exc:
        raise ModelError(f"{context}: {exc}") from None


def load_document(text: str) -> tuple[RobotModel, ParameterSpec]:
    """Parse a robot model document; returns the model and its parameter spec."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ModelError("model file must contain a JSON object")

    joints = []
    for i, jd in enumerate(_require(doc, "joints", "model")):
        ctx = f"joints[{i}]"
        try:
            joints.append(
                Joint(
                    parent=int(_require(jd, "parent", ctx)),
                    dh=_load_dh(_require(jd, "dh", ctx), f"{ctx}.dh", DhParams),
                    elasticity=_load_dh(jd.get("elasticity", dict.fromkeys(DH_COMPONENTS, 0.0)), f"{ctx}.elasticity", JointElasticity),
                    limits=tuple(float(v) for v in _require(jd, "limits", ctx)),
                    mass=float(jd.get("mass", 0.0)),
                    com=jd.get("com", (0.0, 0.0, 0.0)),
                    name=str(jd.get("name", "")),
                )
            )
        except ModelError as exc:
            raise ModelError(f"{ctx}: {exc}") from None

    cam = _require(doc, "camera", "model")
    intr = _require(cam, "intrinsics", "camera")
    try:
        camera = CameraMount(
            joint=int(_require(cam, "joint", "camera")),
            rotvec=_require(cam, "rotvec", "camera"),
            translation=_require(cam, "translation", "camera"),
        )
        intrinsics = CameraIntrinsics(
            focal=_require(intr, "focal", "camera.intrinsics"),
            center=_require(intr, "center", "camera.intrinsics"),
            distortion=float(_require(intr, "distortion", "camera.intrinsics")),
            image_size=_require(intr, "image_size", "camera.intrinsics"),
        )
    except ModelError as exc:
        raise ModelError(f"camera: {exc}") from None

    markers = {}
    for name, md in _require(doc, "markers", "model").items():
        ctx = f"markers.{name}"
        try:
            markers[name] = MarkerMount(
                joint=int(_require(md, "joint", ctx)),
                point=_require(md, "point", ctx),
                normal=md.get("normal", (0.0, 0.0, 1.0)),
            )
        except ModelError as exc:
            raise ModelError(f"{ctx}: {exc}") from None

    spheres = []
    for i, sd in enumerate(doc.get("spheres", [])):
        ctx = f"spheres[{i}]"
        try:
            spheres.append(Sphere(joint=int(_require(sd, "joint", ctx)), center=_require(sd, "center", ctx), radius=float(_require(sd, "radius", ctx))))
        except ModelError as exc:
            raise ModelError(f"{ctx}: {exc}") from None

    ripple = None
    rd = doc.get("imperfection")
    if rd is not None:
        ripple = ThetaRipple(
            amplitude=float(_require(rd, "amplitude", "imperfection")),
            period=float(_require(rd, "period", "imperfection")),
            phases=_require(rd, "phases", "imperfection"),
        )

    model = RobotModel(
        joints=tuple(joints),
        camera=camera,
        intrinsics=intrinsics,
        markers=markers,
        spheres=tuple(spheres),
        gravity=doc.get("gravity", (0.0, 0.0, -9.81)),
        head_joints=tuple(doc.get("head_joints", ())),
        ripple=ripple,
    )

    entries = []
    for i, ed in enumerate(doc.get("parameter_spec", [])):
        ctx = f"parameter_spec[{i}]"
        path = str(_require(ed, "path", ctx))
        free = bool(ed.get("free", True))
        if free and "prior_sigma" not in ed:
            raise ModelError(f"{ctx} ({path}): free entries must state prior_sigma (number or null)")
        sigma = ed.get("prior_sigma")
        mean = ed.get("prior_mean")
        try:
            entries.append(
                ParamEntry(
                    path=path,
                    free=free,
                    prior_mean=None if mean is None else float(mean),
                    prior_sigma=None if sigma is None else float(sigma),
                )
            )
        except ModelError as exc:
            raise ModelError(f"{ctx}: {exc}") from None
        _resolve(model, path)  # validate against this model
    spec = ParameterSpec(tuple(entries))
    return model, spec


def load_model(text: str) -> RobotModel:
    """Parse a robot model document, ignoring any parameter spec."""
    return load_document(text)[0]


def save_samples(samples: list[MeasurementSample]) -> str:
    """One JSON object per line: {"q": [...], "marker": ..., "u": [u, v]}."""
    lines = [json.dumps({"q": list(s.q), "marker": s.marker_id, "u": list(s.u)}) for s in samples]
    return "\n".join(lines) + ("\n" if lines else "")


def load_samples(text: str) -> list[MeasurementSample]:
    samples = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            samples.append(MeasurementSample(q=data["q"], marker_id=str(data["marker"]), u=data["u"]))
        except (json.JSONDecodeError, KeyError, TypeError, ModelError) as exc:
            raise ModelError(f"samples line {lineno}: {exc}") from None
    return samples


def save_configs(configs: list[PoseConfig]) -> str:
    """One JSON object per line: {"q": [...], "marker": ...}."""
    lines = [json.dumps({"q": list(c.q), "marker": c.marker_id}) for c in configs]
    return "\n".join(lines) + ("\n" if lines else "")


def load_configs(text: str) -> list[PoseConfig]:
    configs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            configs.append(PoseConfig(q=np.asarray(data["q"], dtype=float), marker_id=str(data["marker"])))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ModelError(f"configs line {lineno}: {exc}") from None
    return configs


def validate_samples(samples: list[MeasurementSample], model: RobotModel) -> None:
    """Hard-check pixel bounds and lengths; warn on joint-limit violations."""
    lo, hi = model.limits[:, 0], model.limits[:, 1]
    size = model.intrinsics.image_size
    outside = 0
    for i, s in enumerate(samples):
        if s.q.shape != (model.njoints,):
            raise ModelError(f"sample {i}: q has length {s.q.shape[0]}, model has {model.njoints} joints")
        if s.marker_id not in model.markers:
            raise ModelError(f"sample {i}: unknown marker {s.marker_id!r}")
        if np.any(s.u < 0) or np.any(s.u >= size):
            raise ModelError(f"sample {i}: pixel {s.u.tolist()} outside image bounds")
        if np.any(s.q < lo - 1e-9) or np.any(s.q > hi + 1e-9):
            outside += 1
    if outside:
        warnings.warn(f"{outside} of {len(samples)} samples lie outside joint limits", stacklevel=2)
