"""Measurement pose selection: rejection sampling, head sweep, tour order.

A configuration is usable for measuring a marker when the marker projects
well inside the image, sits in a workable depth band, faces the camera,
and the camera-to-marker ray clears the robot's sphere model. Rejection
reasons are evaluated in a fixed order (fov, depth, facing, occlusion,
exclusivity) and exactly one primary reason is reported per rejection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import camera, kinematics
from .model import PoseConfig, RobotModel

REASONS = ("fov", "depth", "facing", "occlusion", "exclusivity")

# pixels the head sweep keeps between its corner targets and the fov margin
CORNER_INSET = 20.0
# spheres on the marker's own link closer than this to the marker are not
# treated as occluders (they model the hand carrying the marker)
MARKER_EXCLUSION_RADIUS = 0.12


@dataclass(frozen=True)
class VisibilityConstraints:
    """Thresholds for accepting a measurement configuration."""

    fov_margin: float = 40.0
    facing_min_cos: float = 0.5
    min_depth: float = 0.2
    max_depth: float = 1.5
    occlusion_clearance: float = 0.02
    require_exclusive: bool = True

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if not -1.0 <= self.facing_min_cos <= 1.0:
            raise ValueError("facing_min_cos must be in [-1, 1]")
        if self.fov_margin < 0 or self.occlusion_clearance < 0:
            raise ValueError("margins must be >= 0")


def _segment_sphere_hits(starts, ends, centers, radii) -> np.ndarray:
    """(..., S) bool: does segment start->end pass within radius of center?"""
    seg = ends - starts  # (...,3)
    rel = centers - starts[..., None, :]  # (...,S,3)
    seg_len2 = np.maximum(np.sum(seg * seg, axis=-1, keepdims=True), 1e-30)
    t = np.clip(np.sum(rel * seg[..., None, :], axis=-1) / seg_len2, 0.0, 1.0)
    closest = starts[..., None, :] + t[..., None] * seg[..., None, :]
    dist = np.linalg.norm(centers - closest, axis=-1)
    return dist < radii


class _SceneBatch:
    """Frames and derived geometry for a batch of configurations."""

    def __init__(self, q: np.ndarray, model: RobotModel):
        self.model = model
        self.q = q
        _, self.frames = kinematics.equilibrium_array(q, model)
        self.pose_cam = self.frames[:, model.camera.joint] @ model.camera.local_pose()
        self.cam_pos = self.pose_cam[:, :3, 3]
        n = q.shape[0]
        eye = np.broadcast_to(np.eye(4), (n, 1, 4, 4))
        self.ext = np.concatenate([eye, self.frames], axis=1)

    def marker_world(self, name: str):
        mount = self.model.markers[name]
        frame = self.ext[:, mount.joint + 1]
        pos = np.einsum("nij,j->ni", frame[:, :3, :3], mount.point) + frame[:, :3, 3]
        normal = np.einsum("nij,j->ni", frame[:, :3, :3], mount.normal)
        return pos, normal

    def in_fov(self, pos: np.ndarray, margin: float):
        """(in-view mask, camera-frame depth) for world points (N,3)."""
        intr = self.model.intrinsics
        x_cam = camera.world_to_camera(pos, self.pose_cam)
        z = x_cam[:, 2]
        front = z > camera.Z_MIN
        u = np.full((pos.shape[0], 2), np.nan)
        if np.any(front):
            u[front] = camera.project_camera_frame(x_cam[front], intr)
        inside = front & np.all(u >= margin, axis=1) & np.all(u <= intr.image_size - margin, axis=1)
        return inside, z, u

    def occluded(self, pos: np.ndarray, marker_name: str, clearance: float):
        """Does the camera->marker segment hit any inflated sphere?"""
        model = self.model
        if not model.spheres:
            return np.zeros(pos.shape[0], dtype=bool)
        sphere_joints = np.array([s.joint for s in model.spheres])
        sphere_local = np.array([s.center for s in model.spheres])
        radii = np.array([s.radius for s in model.spheres]) + clearance
        frames = self.ext[:, sphere_joints + 1]
        centers = np.einsum("nsij,sj->nsi", frames[:, :, :3, :3], sphere_local) + frames[:, :, :3, 3]
        hits = _segment_sphere_hits(self.cam_pos, pos, centers, radii)
        # spheres that model the marker's own link right at the marker
        own = sphere_joints == model.markers[marker_name].joint
        if np.any(own):
            near = np.linalg.norm(centers - pos[:, None, :], axis=-1) < (
                np.array([s.radius for s in model.spheres]) + MARKER_EXCLUSION_RADIUS
            )
            hits = hits & ~(own & near)
        return np.any(hits, axis=1)


def check_visibility_batch(q: np.ndarray, marker_id: str, model: RobotModel, constraints: VisibilityConstraints):
    """Vectorized visibility check; returns (accepted (N,), reason list)."""
    q = np.asarray(q, dtype=float)
    if marker_id not in model.markers:
        raise ValueError(f"unknown marker {marker_id!r}")
    scene = _SceneBatch(q, model)
    n = q.shape[0]
    reasons = np.full(n, "", dtype=object)

    pos, normal = scene.marker_world(marker_id)
    in_view, depth, _ = scene.in_fov(pos, constraints.fov_margin)
    reasons[~in_view] = "fov"
    pending = in_view

    depth_ok = (depth >= constraints.min_depth) & (depth <= constraints.max_depth)
    reasons[pending & ~depth_ok] = "depth"
    pending = pending & depth_ok

    to_cam = scene.cam_pos - pos
    to_cam = to_cam / np.maximum(np.linalg.norm(to_cam, axis=1, keepdims=True), 1e-30)
    facing_ok = np.einsum("ni,ni->n", normal, to_cam) >= constraints.facing_min_cos
    reasons[pending & ~facing_ok] = "facing"
    pending = pending & facing_ok

    occ = scene.occluded(pos, marker_id, constraints.occlusion_clearance)
    reasons[pending & occ] = "occlusion"
    pending = pending & ~occ

    if constraints.require_exclusive:
        others_visible = np.zeros(n, dtype=bool)
        for other in model.markers:
            if other == marker_id:
                continue
            opos, _ = scene.marker_world(other)
            # a competing marker counts as visible if it is in the image
            # (no margin) and not occluded; facing and depth are ignored
            oview, _, _ = scene.in_fov(opos, 0.0)
            other_occ = scene.occluded(opos, other, constraints.occlusion_clearance)
            others_visible |= oview & ~other_occ
        reasons[pending & others_visible] = "exclusivity"
        pending = pending & ~others_visible

    reasons[pending] = ""
    return pending, [r if r else None for r in reasons]


def check_visibility(q, marker_id: str, model: RobotModel, constraints: VisibilityConstraints | None = None):
    """Accept/reject one configuration; returns (accepted, reason or None)."""
    constraints = constraints or VisibilityConstraints()
    q = np.asarray(q, dtype=float)
    accepted, reasons = check_visibility_batch(q[None, :], marker_id, model, constraints)
    return bool(accepted[0]), reasons[0]


def sample_configurations(
    model: RobotModel,
    marker_id: str,
    constraints: VisibilityConstraints,
    n_target: int,
    seed: int,
    attempt_cap: int = 10_000_000,
    batch_size: int = 4096,
) -> list[np.ndarray]:
    """Uniform rejection sampling over the joint limits.

    Draws configurations uniformly within the joint limits and keeps those
    passing the visibility check, in draw order, until ``n_target`` are
    found or ``attempt_cap`` draws are spent (partial result + warning).
    Deterministic for a given seed.
    """
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = model.limits[:, 0], model.limits[:, 1]
    accepted: list[np.ndarray] = []
    drawn = 0
    while len(accepted) < n_target and drawn < attempt_cap:
        m = min(batch_size, attempt_cap - drawn)
        q = rng.uniform(lo, hi, size=(m, model.njoints))
        drawn += m
        ok, _ = check_visibility_batch(q, marker_id, model, constraints)
        for idx in np.flatnonzero(ok):
            accepted.append(q[idx])
            if len(accepted) == n_target:
                break
    if len(accepted) < n_target:
        rate = len(accepted) / max(drawn, 1)
        warnings.warn(
            f"rejection sampling found {len(accepted)}/{n_target} configurations "
            f"in {drawn} draws (acceptance rate {rate:.2e})",
            stacklevel=2,
        )
    return accepted


def _marker_pixels(q_batch: np.ndarray, marker_id: str, model: RobotModel):
    """(pixels (M,2), in-front mask) for a batch of configurations."""
    scene = _SceneBatch(q_batch, model)
    pos, _ = scene.marker_world(marker_id)
    x_cam = camera.world_to_camera(pos, scene.pose_cam)
    front = x_cam[:, 2] > camera.Z_MIN
    u = np.full((q_batch.shape[0], 2), np.nan)
    if np.any(front):
        u[front] = camera.project_camera_frame(x_cam[front], model.intrinsics)
    return u, front


def aim_head_batch(
    q_batch: np.ndarray,
    marker_id: str,
    targets: np.ndarray,
    model: RobotModel,
    tol: float = 0.05,
    max_iter: int = 60,
):
    """Newton-aim the head joints of many configurations at once.

    Returns (configurations, success mask); failed rows (target out of
    reach, marker behind camera, head limits) keep their inputs. Each row
    is iterated independently of the batch composition.
    """
    head = list(model.head_joints)
    q_out = np.array(q_batch, dtype=float)
    m = q_out.shape[0]
    if not head or m == 0:
        return q_out, np.zeros(m, dtype=bool)
    targets = np.broadcast_to(np.asarray(targets, dtype=float), (m, 2))
    nh = len(head)
    h = 1e-6
    alive = np.ones(m, dtype=bool)
    done = np.zeros(m, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(alive & ~done)
        if idx.size == 0:
            break
        q_act = q_out[idx]
        # stack the nominal and per-head-joint probe configurations
        stack = np.repeat(q_act[None, :, :], 1 + nh, axis=0)
        for c, j in enumerate(head):
            stack[1 + c, :, j] += h
        u_all, front = _marker_pixels(stack.reshape(-1, q_out.shape[1]), marker_id, model)
        u_all = u_all.reshape(1 + nh, idx.size, 2)
        front = front.reshape(1 + nh, idx.size)
        bad = ~front.all(axis=0)
        err = u_all[0] - targets[idx]
        hit = ~bad & (np.linalg.norm(err, axis=1) < tol)
        done[idx[hit]] = True
        alive[idx[bad]] = False
        move = ~bad & ~hit
        if np.any(move):
            rows = idx[move]
            jac = (u_all[1:, move] - u_all[0, move]) / h  # (nh, M, 2)
            jac = np.moveaxis(jac, 0, 2)  # (M, 2, nh)
            jtj = np.swapaxes(jac, 1, 2) @ jac + 1e-9 * np.eye(nh)
            g = np.einsum("mji,mj->mi", jac, err[move])
            step = np.linalg.solve(jtj, -g[..., None])[..., 0]
            step = np.clip(step, -0.3, 0.3)  # keep Newton in the linear-ish regime
            q_out[np.ix_(rows, head)] += step
    lo = model.limits[head, 0]
    hi = model.limits[head, 1]
    within = np.all(q_out[:, head] >= lo - 1e-12, axis=1) & np.all(q_out[:, head] <= hi + 1e-12, axis=1)
    ok = done & within
    q_out[~ok] = np.asarray(q_batch, dtype=float)[~ok]
    return q_out, ok


def aim_head(
    q: np.ndarray,
    marker_id: str,
    target_px: np.ndarray,
    model: RobotModel,
    tol: float = 0.05,
    max_iter: int = 60,
) -> np.ndarray | None:
    """Re-aim the designated head joints so the marker projects at target_px.

    Damped Newton on the projection with a finite-difference Jacobian over
    the head joints. Returns the new configuration, or None when the
    target is unreachable within joint limits.
    """
    q = np.asarray(q, dtype=float)
    q_new, ok = aim_head_batch(q[None, :], marker_id, np.asarray(target_px, dtype=float)[None, :], model, tol=tol, max_iter=max_iter)
    return q_new[0] if ok[0] else None


def _corner_targets(model: RobotModel, constraints: VisibilityConstraints) -> np.ndarray:
    size = model.intrinsics.image_size
    inset = constraints.fov_margin + CORNER_INSET
    return np.array(
        [
            [inset, inset],
            [size[0] - inset, inset],
            [size[0] - inset, size[1] - inset],
            [inset, size[1] - inset],
        ]
    )


def head_sweep(
    q_base,
    marker_id: str,
    model: RobotModel,
    constraints: VisibilityConstraints | None = None,
) -> list[np.ndarray]:
    """Base configuration plus up to four corner-aimed head variations.

    The head joints are re-aimed to put the marker near each image corner,
    inset by the fov margin plus a safety inset. Corners that cannot be
    reached (head limits) or that fail the visibility check are omitted;
    the base configuration is always returned first.
    """
    constraints = constraints or VisibilityConstraints()
    q_base = np.asarray(q_base, dtype=float)
    out = [q_base]
    if not model.head_joints:
        return out
    lo = model.limits[list(model.head_joints), 0]
    hi = model.limits[list(model.head_joints), 1]
    if np.all(hi - lo <= 0):
        return out
    corners = _corner_targets(model, constraints)
    q_corner, aimed = aim_head_batch(np.repeat(q_base[None, :], 4, axis=0), marker_id, corners, model)
    if np.any(aimed):
        visible, _ = check_visibility_batch(q_corner[aimed], marker_id, model, constraints)
        for q_new in q_corner[aimed][visible]:
            out.append(q_new)
    return out


def plan_marker_poses(
    model: RobotModel,
    marker_id: str,
    constraints: VisibilityConstraints,
    n_base: int,
    seed: int,
    sweep: bool = True,
    require_full_sweep: bool = True,
    attempt_cap: int = 10_000_000,
    batch_size: int = 4096,
) -> list[PoseConfig]:
    """Sample base configurations, center the marker, and sweep the head.

    Accepted raw draws are re-aimed so the marker starts near the image
    center, then the head sweep adds the four corner views. With
    ``require_full_sweep`` only bases delivering all five views count
    (keeps the measurement count per configuration uniform); the flag is
    ignored when the model has no usable head joints.
    """
    if n_base < 1:
        raise ValueError("n_base must be >= 1")
    head = list(model.head_joints)
    head_usable = bool(head) and bool(np.any(model.limits[head, 1] - model.limits[head, 0] > 0))
    require_full = require_full_sweep and sweep and head_usable

    rng = np.random.default_rng(seed)
    lo, hi = model.limits[:, 0], model.limits[:, 1]
    center = model.intrinsics.image_size / 2.0
    corners = _corner_targets(model, constraints)
    configs: list[PoseConfig] = []
    bases_found = 0
    drawn = 0
    while bases_found < n_base and drawn < attempt_cap:
        m = min(batch_size, attempt_cap - drawn)
        q_batch = rng.uniform(lo, hi, size=(m, model.njoints))
        drawn += m
        ok, _ = check_visibility_batch(q_batch, marker_id, model, constraints)
        if not np.any(ok):
            continue
        cand = q_batch[ok]  # draw order preserved

        if head_usable:
            centered, aimed = aim_head_batch(cand, marker_id, np.broadcast_to(center, (cand.shape[0], 2)), model)
            cvis = np.zeros(cand.shape[0], dtype=bool)
            if np.any(aimed):
                cvis[aimed], _ = check_visibility_batch(centered[aimed], marker_id, model, constraints)
            use_centered = aimed & cvis
            bases = np.where(use_centered[:, None], centered, cand)
            usable = use_centered if require_full else np.ones(cand.shape[0], dtype=bool)
        else:
            bases = cand
            usable = np.ones(cand.shape[0], dtype=bool)
        bases = bases[usable]
        if bases.shape[0] == 0:
            continue

        if sweep and head_usable:
            nb = bases.shape[0]
            tiled = np.repeat(bases, 4, axis=0)
            targets = np.tile(corners, (nb, 1))
            q_corner, aimed = aim_head_batch(tiled, marker_id, targets, model)
            good = aimed.copy()
            if np.any(aimed):
                good[aimed], _ = check_visibility_batch(q_corner[aimed], marker_id, model, constraints)
            good = good.reshape(nb, 4)
            q_corner = q_corner.reshape(nb, 4, -1)
            for b in range(nb):
                variants = [bases[b]] + [q_corner[b, c] for c in range(4) if good[b, c]]
                if require_full and len(variants) < 5:
                    continue
                configs.extend(PoseConfig(q=v, marker_id=marker_id) for v in variants)
                bases_found += 1
                if bases_found == n_base:
                    break
        else:
            for b in range(bases.shape[0]):
                configs.append(PoseConfig(q=bases[b], marker_id=marker_id))
                bases_found += 1
                if bases_found == n_base:
                    break
    if bases_found < n_base:
        rate = bases_found / max(drawn, 1)
        warnings.warn(
            f"pose planning found {bases_found}/{n_base} base configurations "
            f"in {drawn} draws (rate {rate:.2e})",
            stacklevel=2,
        )
    return configs


# ---------------------------------------------------------------------------
# tour ordering


def _pairwise_dist(configs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    diff = np.abs(configs[:, None, :] - configs[None, :, :]) * weights
    return diff.max(axis=2)


def _path_length(dist: np.ndarray, order) -> float:
    order = np.asarray(order)
    return float(dist[order[:-1], order[1:]].sum())


def _nearest_neighbor(dist: np.ndarray) -> list[int]:
    n = dist.shape[0]
    unvisited = set(range(1, n))
    order = [0]
    while unvisited:
        last = order[-1]
        nxt = min(unvisited, key=lambda j: (dist[last, j], j))
        order.append(nxt)
        unvisited.remove(nxt)
    return order


def _two_opt(order: list[int], dist: np.ndarray) -> list[int]:
    """Segment reversals on an open path until no improving swap remains."""
    order = list(order)
    n = len(order)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                before = (dist[order[i - 1], order[i]] if i > 0 else 0.0) + (
                    dist[order[j], order[j + 1]] if j + 1 < n else 0.0
                )
                after = (dist[order[i - 1], order[j]] if i > 0 else 0.0) + (
                    dist[order[i], order[j + 1]] if j + 1 < n else 0.0
                )
                if after < before - 1e-15:
                    order[i : j + 1] = reversed(order[i : j + 1])
                    improved = True
    return order


def _exact_path(dist: np.ndarray) -> list[int]:
    """Held-Karp shortest open path over all nodes (small n only)."""
    n = dist.shape[0]
    full = (1 << n) - 1
    best = {(1 << i, i): (0.0, -1) for i in range(n)}
    for mask in range(1, full + 1):
        for last in range(n):
            if (mask, last) not in best:
                continue
            base, _ = best[(mask, last)]
            for nxt in range(n):
                if mask & (1 << nxt):
                    continue
                cand = base + dist[last, nxt]
                key = (mask | (1 << nxt), nxt)
                if key not in best or cand < best[key][0]:
                    best[key] = (cand, last)
    end = min(range(n), key=lambda i: best[(full, i)][0])
    order = [end]
    mask = full
    while best[(mask, order[-1])][1] >= 0:
        prev = best[(mask, order[-1])][1]
        mask ^= 1 << order[-1]
        order.append(prev)
    return order[::-1]


def order_tour(configs, weights=None) -> list[int]:
    """Permutation that (heuristically) minimizes joint-space travel.

    Distance is the weighted L-inf norm between consecutive configurations
    on an open path. Small instances (n <= 10) are solved exactly; larger
    ones use nearest-neighbor construction plus 2-opt, never returning an
    ordering worse than the input order.
    """
    arr = np.array([np.asarray(c.q if isinstance(c, PoseConfig) else c, dtype=float) for c in configs])
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need at least one configuration")
    n = arr.shape[0]
    if n == 1:
        return [0]
    weights = np.ones(arr.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    dist = _pairwise_dist(arr, weights)
    if n <= 10:
        return _exact_path(dist)
    order = _two_opt(_nearest_neighbor(dist), dist)
    identity = list(range(n))
    if _path_length(dist, order) > _path_length(dist, identity):
        order = _two_opt(identity, dist)
    return order
