"""MAP calibration: measurement model, whitened residuals, LM solver.

The estimator minimizes

    sum_n (u_n - h(q_n, theta))^T C_n^{-1} (u_n - h(q_n, theta))
        + sum_j ((theta_j - prior_mean_j) / prior_sigma_j)^2

where C_n is the effective pixel covariance of sample n (detector noise
plus depth-dependent virtual noise). Residuals are whitened with the
Cholesky factor of C_n so the solver sees an ordinary least-squares
problem. The Jacobian is built by forward differences over the packed
parameter vector because the measurement function contains the implicit
equilibrium solve; all samples are evaluated in one vectorized pass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import camera, kinematics
from .model import (
    MeasurementSample,
    ModelError,
    ParameterSpec,
    RobotModel,
    pack,
    prior_vectors,
    unpack,
)

COVARIANCE_MODES = ("fixed", "relinearized")


class CalibrationError(RuntimeError):
    """Raised when the calibration problem cannot be evaluated or solved."""


@dataclass
class SolverOptions:
    """Levenberg-Marquardt and noise-model settings.

    ``sigma_x`` = 0 disables virtual noise (plain pixel least squares).
    ``covariance_mode`` "fixed" recomputes the per-sample covariance at the
    start of every outer iteration and holds it fixed within the step
    (iteratively reweighted least squares); "relinearized" re-evaluates it
    at every trial point.
    """

    max_iterations: int = 200
    cost_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    initial_damping: float = 1e-4
    damping_increase: float = 10.0
    damping_decrease: float = 0.3
    covariance_mode: str = "fixed"
    sigma_u: float = 0.2
    sigma_x: float = 0.01
    fd_step: float = 1e-7

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("cost_tolerance", "step_tolerance", "initial_damping"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.covariance_mode not in COVARIANCE_MODES:
            raise ValueError(f"covariance_mode must be one of {COVARIANCE_MODES}")
        if self.sigma_u <= 0:
            raise ValueError("sigma_u must be > 0")
        if self.sigma_x < 0:
            raise ValueError("sigma_x must be >= 0")


@dataclass(frozen=True)
class SampleResidual:
    """Final-fit diagnostics for one sample."""

    marker_id: str
    residual: tuple[float, float]  # measured - predicted, px
    whitened_norm: float
    depth: float  # camera-frame z of the marker, m
    cartesian_error: float | None = None  # vs reference model, m


@dataclass(frozen=True)
class ErrorStats:
    """Aggregate pixel (and optionally cartesian) error statistics."""

    pixel_mean: float
    pixel_max: float
    pixel_rms: float  # per-axis RMS; matches the injected noise sigma
    cartesian_mean: float | None = None
    cartesian_max: float | None = None

    @classmethod
    def from_residuals(cls, per_sample: list[SampleResidual]) -> "ErrorStats":
        norms = np.array([np.hypot(*s.residual) for s in per_sample])
        cart = [s.cartesian_error for s in per_sample]
        has_cart = per_sample and all(c is not None for c in cart)
        return cls(
            pixel_mean=float(norms.mean()),
            pixel_max=float(norms.max()),
            pixel_rms=float(np.sqrt(np.mean(norms**2) / 2.0)),
            cartesian_mean=float(np.mean(cart)) if has_cart else None,
            cartesian_max=float(np.max(cart)) if has_cart else None,
        )


@dataclass
class CalibrationReport:
    """Everything solve_map learned: estimate, fit quality, diagnostics."""

    theta: np.ndarray
    free_paths: list[str]
    per_sample: list[SampleResidual]
    stats: ErrorStats
    cost_trace: list[float]
    termination: str
    n_iterations: int
    jacobian_rank: int
    jtj_condition: float

    @property
    def rank_deficient(self) -> bool:
        return self.jacobian_rank < len(self.theta)


@dataclass
class EvaluationResult:
    """Held-out evaluation: per-sample errors plus aggregates."""

    stats: ErrorStats
    per_sample: list[SampleResidual]
    n_skipped: int = 0


# ---------------------------------------------------------------------------
# vectorized measurement pipeline


class _Pipeline:
    """Caches sample arrays and evaluates all measurements for a packed theta."""

    def __init__(self, samples: list[MeasurementSample], model: RobotModel, spec: ParameterSpec):
        if not samples:
            raise CalibrationError("no samples")
        self.model = model
        self.spec = spec
        self.names = model.marker_names()
        index = {name: i for i, name in enumerate(self.names)}
        for i, s in enumerate(samples):
            if s.marker_id not in index:
                raise CalibrationError(f"sample {i}: unknown marker {s.marker_id!r}")
            if s.q.shape != (model.njoints,):
                raise CalibrationError(f"sample {i}: q length {s.q.shape[0]} != {model.njoints} joints")
        self.q = np.array([s.q for s in samples])
        self.u_meas = np.array([s.u for s in samples])
        self.marker_of = np.array([index[s.marker_id] for s in samples])
        self.marker_ids = [s.marker_id for s in samples]
        self.n = len(samples)

    def predict(self, theta: np.ndarray, strict: bool = True):
        """u_pred (N,2), camera-frame points (N,3), valid mask (N,).

        strict: equilibrium failure or a point behind the camera raises
        CalibrationError naming the sample; otherwise such samples are
        masked out.
        """
        m = unpack(theta, self.model, self.spec)
        try:
            _, frames = kinematics.equilibrium_array(self.q, m)
        except kinematics.EquilibriumError as exc:
            if strict:
                raise CalibrationError(str(exc)) from exc
            return self._predict_per_sample(m)

        pose_cam = frames[:, m.camera.joint] @ m.camera.local_pose()
        points = np.array([m.markers[name].point for name in self.names])
        joints = np.array([m.markers[name].joint for name in self.names])
        eye = np.broadcast_to(np.eye(4), (self.n, 1, 4, 4))
        ext = np.concatenate([eye, frames], axis=1)
        frame_of_sample = ext[np.arange(self.n), joints[self.marker_of] + 1]
        pts = points[self.marker_of]
        x_world = np.einsum("nij,nj->ni", frame_of_sample[:, :3, :3], pts) + frame_of_sample[:, :3, 3]
        x_cam = camera.world_to_camera(x_world, pose_cam)

        valid = x_cam[:, 2] > camera.Z_MIN
        if strict and not np.all(valid):
            idx = int(np.argmin(valid))
            raise CalibrationError(f"sample {idx}: marker at camera-frame z = {x_cam[idx, 2]:.3e} (behind camera)")
        u_pred = np.full((self.n, 2), np.nan)
        if np.any(valid):
            u_pred[valid] = camera.project_camera_frame(x_cam[valid], m.intrinsics)
        bad = valid & ~np.all(np.isfinite(u_pred), axis=1)
        if np.any(bad):
            if strict:
                raise CalibrationError(f"sample {int(np.argmax(bad))}: non-finite predicted pixel")
            valid = valid & ~bad
        return u_pred, x_world, x_cam, pose_cam, valid

    def _predict_per_sample(self, m: RobotModel):
        """Slow path for evaluation when some samples fail the equilibrium solve."""
        u_pred = np.full((self.n, 2), np.nan)
        x_world = np.full((self.n, 3), np.nan)
        x_cam = np.full((self.n, 3), np.nan)
        pose_cam = np.broadcast_to(np.eye(4), (self.n, 4, 4)).copy()
        valid = np.zeros(self.n, dtype=bool)
        for i in range(self.n):
            try:
                _, frames = kinematics.equilibrium_array(self.q[i], m)
            except kinematics.EquilibriumError:
                continue
            pose = frames[m.camera.joint] @ m.camera.local_pose()
            mount = m.markers[self.names[self.marker_of[i]]]
            xw = kinematics.marker_world(frames, mount)
            xc = camera.world_to_camera(xw, pose)
            pose_cam[i] = pose
            x_world[i], x_cam[i] = xw, xc
            if xc[2] > camera.Z_MIN:
                u = camera.project_camera_frame(xc, m.intrinsics)
                if np.all(np.isfinite(u)):
                    u_pred[i] = u
                    valid[i] = True
        return u_pred, x_world, x_cam, pose_cam, valid

    def covariance_factors(self, theta: np.ndarray, opts: SolverOptions):
        """Cholesky factors (l11, l21, l22) of the effective covariances."""
        _, _, x_cam, _, _ = self.predict(theta, strict=True)
        return self._factor(x_cam, opts)

    def _factor(self, x_cam: np.ndarray, opts: SolverOptions):
        cov = camera.covariance_camera_frame(x_cam, self.model.intrinsics, opts.sigma_u, opts.sigma_x)
        l11 = np.sqrt(cov[:, 0, 0])
        l21 = cov[:, 1, 0] / l11
        l22 = np.sqrt(cov[:, 1, 1] - l21**2)
        return l11, l21, l22

    def whitened(self, theta: np.ndarray, opts: SolverOptions, prior, chol=None) -> np.ndarray:
        """Stacked whitened residual vector, length 2N + P_finite."""
        u_pred, _, x_cam, _, _ = self.predict(theta, strict=True)
        if chol is None:
            chol = self._factor(x_cam, opts)
        l11, l21, l22 = chol
        du = self.u_meas - u_pred
        r = np.empty((self.n, 2))
        r[:, 0] = du[:, 0] / l11
        r[:, 1] = (du[:, 1] - l21 * r[:, 0]) / l22
        mean, sigma, finite = prior
        return np.concatenate([r.reshape(-1), (theta[finite] - mean[finite]) / sigma[finite]])

    def fd_jacobian(self, theta: np.ndarray, r0: np.ndarray, opts: SolverOptions, prior, chol) -> np.ndarray:
        """Forward differences over the packed parameters, fixed column order."""
        jac = np.empty((r0.shape[0], theta.shape[0]))
        for j in range(theta.shape[0]):
            h = opts.fd_step * max(1.0, abs(theta[j]))
            th = theta.copy()
            th[j] += h
            jac[:, j] = (self.whitened(th, opts, prior, chol) - r0) / h
        return jac


def _prior_terms(model: RobotModel, spec: ParameterSpec):
    mean, sigma = prior_vectors(model, spec)
    return mean, sigma, np.isfinite(sigma)


def measure(q, marker_id: str, theta: np.ndarray, model: RobotModel, spec: ParameterSpec):
    """Predicted pixel for one sample plus the intermediates for weighting.

    Returns (u_pred, x_world, pose_world_camera).
    """
    m = unpack(np.asarray(theta, dtype=float), model, spec)
    _, frames = kinematics.solve_equilibrium(np.asarray(q, dtype=float), m)
    if marker_id not in m.markers:
        raise CalibrationError(f"unknown marker {marker_id!r}")
    pose = frames.transform(m.camera.joint) @ m.camera.local_pose()
    x_world = kinematics.marker_world(frames, m.markers[marker_id])
    u_pred = camera.project(x_world, pose, m.intrinsics)
    return u_pred, x_world, pose


def residuals(samples, theta, model, spec, opts: SolverOptions | None = None, with_jacobian: bool = False):
    """Whitened residual vector (length 2N + P) at ``theta``.

    The covariance is evaluated at the same ``theta``. With
    ``with_jacobian`` the forward-difference Jacobian is returned as well,
    honoring ``opts.covariance_mode``.
    """
    opts = opts or SolverOptions()
    theta = np.asarray(theta, dtype=float)
    pipe = _Pipeline(samples, model, spec)
    prior = _prior_terms(model, spec)
    if len(spec.free_entries) != theta.shape[0]:
        raise CalibrationError(f"theta length {theta.shape[0]} != {len(spec.free_entries)} free parameters")
    chol = pipe.covariance_factors(theta, opts) if opts.covariance_mode == "fixed" else None
    r = pipe.whitened(theta, opts, prior, chol)
    if not with_jacobian:
        return r
    return r, pipe.fd_jacobian(theta, r, opts, prior, chol)


def solve_map(samples, model, spec, opts: SolverOptions | None = None, reference: RobotModel | None = None) -> CalibrationReport:
    """Levenberg-Marquardt solve of the MAP problem; returns a full report.

    Trial steps that leave the valid domain (marker behind camera,
    equilibrium divergence, model invariant violation) are rejected by
    raising the damping, not treated as fatal.
    """
    opts = opts or SolverOptions()
    if not spec.free_entries:
        raise CalibrationError("parameter spec frees no parameters")
    pipe = _Pipeline(samples, model, spec)
    prior = _prior_terms(model, spec)
    theta = pack(model, spec)

    def evaluate_at(th, chol):
        r = pipe.whitened(th, opts, prior, chol)
        c = float(r @ r)
        if not np.isfinite(c):
            bad = np.where(~np.isfinite(r[: 2 * pipe.n]))[0]
            idx = int(bad[0] // 2) if bad.size else -1
            raise CalibrationError(f"non-finite cost (sample {idx})")
        return r, c

    fixed = opts.covariance_mode == "fixed"
    chol = pipe.covariance_factors(theta, opts) if fixed else None
    r, cost = evaluate_at(theta, chol)
    trace = [cost]
    lam = opts.initial_damping
    termination = "max_iterations"
    iterations = 0
    jac = None

    for _ in range(opts.max_iterations):
        iterations += 1
        if fixed and iterations > 1:
            chol = pipe.covariance_factors(theta, opts)
            r, cost = evaluate_at(theta, chol)
        jac = pipe.fd_jacobian(theta, r, opts, prior, chol)
        scale = np.linalg.norm(jac, axis=0)  # Marquardt column scaling
        floor = 1e-6 * scale.max() if scale.max() > 0 else 1.0
        np.maximum(scale, floor, out=scale)
        n_par = theta.shape[0]
        # damped step from the augmented least-squares system; avoids
        # squaring the condition number like normal equations would
        aug = np.zeros((jac.shape[0] + n_par, n_par))
        aug[: jac.shape[0]] = jac
        rhs = np.zeros(aug.shape[0])
        rhs[: jac.shape[0]] = -r

        accepted = False
        clean_step = True  # accepted without raising the damping this iteration
        step = None
        while lam < 1e15:
            aug[jac.shape[0] :] = np.diag(np.sqrt(lam) * scale)
            step = np.linalg.lstsq(aug, rhs, rcond=None)[0]
            try:
                r_new, cost_new = evaluate_at(theta + step, chol)
            except (camera.BehindCameraError, kinematics.EquilibriumError, ModelError, CalibrationError):
                lam *= opts.damping_increase
                clean_step = False
                continue
            if cost_new <= cost:
                accepted = True
                break
            lam *= opts.damping_increase
            clean_step = False
        if not accepted:
            termination = "stalled"
            break

        assert cost_new <= cost  # accepted steps never increase the cost
        cost_change = cost - cost_new
        theta = theta + step
        r, cost = r_new, cost_new
        trace.append(cost)
        lam = max(lam * opts.damping_decrease, 1e-12)
        if float(np.linalg.norm(step)) < opts.step_tolerance:
            termination = "step_tolerance"
            break
        # a tiny improvement right after a rejected-step streak says nothing
        # about optimality, so only stop on clean steps
        if clean_step and cost_change < opts.cost_tolerance * max(cost, 1.0):
            termination = "cost_tolerance"
            break

    svals = np.linalg.svd(jac, compute_uv=False)
    tol = svals.max() * max(jac.shape) * np.finfo(float).eps if svals.size else 0.0
    rank = int(np.sum(svals > tol))
    condition = float((svals.max() / svals.min()) ** 2) if svals.min() > 0 else float("inf")
    if rank < theta.shape[0]:
        warnings.warn(
            f"Jacobian rank {rank} < {theta.shape[0]} free parameters: "
            "some parameter combinations are unidentifiable",
            stacklevel=2,
        )

    per_sample = _per_sample_stats(pipe, theta, opts, reference)
    return CalibrationReport(
        theta=theta,
        free_paths=spec.free_paths,
        per_sample=per_sample,
        stats=ErrorStats.from_residuals(per_sample),
        cost_trace=trace,
        termination=termination,
        n_iterations=iterations,
        jacobian_rank=rank,
        jtj_condition=condition,
    )


def _reference_positions(pipe: _Pipeline, reference: RobotModel) -> np.ndarray:
    """World marker positions under the reference (ground-truth) model."""
    _, frames = kinematics.equilibrium_array(pipe.q, reference)
    points = np.array([reference.markers[name].point for name in pipe.names])
    joints = np.array([reference.markers[name].joint for name in pipe.names])
    eye = np.broadcast_to(np.eye(4), (pipe.n, 1, 4, 4))
    ext = np.concatenate([eye, frames], axis=1)
    frame_of_sample = ext[np.arange(pipe.n), joints[pipe.marker_of] + 1]
    pts = points[pipe.marker_of]
    return np.einsum("nij,nj->ni", frame_of_sample[:, :3, :3], pts) + frame_of_sample[:, :3, 3]


def _per_sample_stats(pipe: _Pipeline, theta, opts, reference, valid_only: bool = False):
    u_pred, x_world, x_cam, _, valid = pipe.predict(theta, strict=not valid_only)
    l11, l21, l22 = pipe._factor(np.where(valid[:, None], x_cam, [0.0, 0.0, 1.0]), opts)
    du = pipe.u_meas - u_pred
    w1 = du[:, 0] / l11
    w2 = (du[:, 1] - l21 * w1) / l22
    wnorm = np.hypot(w1, w2)
    cart = None
    if reference is not None:
        cart = np.linalg.norm(x_world - _reference_positions(pipe, reference), axis=1)
    out = []
    for i in range(pipe.n):
        if valid_only and not valid[i]:
            continue
        out.append(
            SampleResidual(
                marker_id=pipe.marker_ids[i],
                residual=(float(du[i, 0]), float(du[i, 1])),
                whitened_norm=float(wnorm[i]),
                depth=float(x_cam[i, 2]),
                cartesian_error=None if cart is None else float(cart[i]),
            )
        )
    return out


def evaluate(samples, theta, model, spec, reference: RobotModel | None = None, opts: SolverOptions | None = None) -> EvaluationResult:
    """Pixel (and cartesian, when a reference model is given) errors at theta.

    Invalid samples (behind camera, equilibrium failure) are skipped with
    a warning rather than raised, so an uncalibrated model can be scored.
    """
    opts = opts or SolverOptions()
    theta = np.asarray(theta, dtype=float)
    pipe = _Pipeline(samples, model, spec)
    _, _, _, _, valid = pipe.predict(theta, strict=False)
    n_skipped = int(np.sum(~valid))
    if n_skipped == pipe.n:
        raise CalibrationError("all samples invalid under this model")
    if n_skipped:
        warnings.warn(f"skipped {n_skipped} of {pipe.n} samples (not measurable under this model)", stacklevel=2)
    per_sample = _per_sample_stats(pipe, theta, opts, reference, valid_only=True)
    return EvaluationResult(stats=ErrorStats.from_residuals(per_sample), per_sample=per_sample, n_skipped=n_skipped)


def split_samples(samples, seed: int, ratio: tuple[int, int] = (2, 1)):
    """Deterministic stratified-by-marker split into (train, eval)."""
    if ratio[0] <= 0 or ratio[1] < 0:
        raise ValueError("split ratio parts must be positive")
    rng = np.random.default_rng(seed)
    by_marker: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_marker.setdefault(s.marker_id, []).append(i)
    train_idx, eval_idx = [], []
    for name in sorted(by_marker):
        idx = np.array(by_marker[name])
        perm = rng.permutation(idx.shape[0])
        n_train = idx.shape[0] * ratio[0] // (ratio[0] + ratio[1])
        train_idx.extend(idx[perm[:n_train]])
        eval_idx.extend(idx[perm[n_train:]])
    train_idx.sort()
    eval_idx.sort()
    return [samples[i] for i in train_idx], [samples[i] for i in eval_idx]
