"""Ground-truth world and an idealized point probe.

The estimator only ever sees a :class:`Probe`; truth model and pose stay
behind it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import OrientedPoint, Pose, compose_transform, inverse_transform
from .measurement import Observation
from .sdf import ObjectModel

WORKSPACE = 6.0  # half-width of the cubic workspace [-6, 6]^3


@dataclass(frozen=True)
class World:
    truth_model: ObjectModel
    truth_pose: Pose
    contact_tol: float = 1e-4
    normal_noise: float = 0.0
    seed: int = 0

    def sdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        return self.truth_model.exact_sdf(inverse_transform(self.truth_pose, x))

    def gradient(self, x, h: float = 1e-6) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        if self.truth_model.primitive is None:
            _, g = self.truth_model.field.evaluate_with_gradient(inverse_transform(self.truth_pose, x))
            return g @ self.truth_pose.rotation.T
        g = np.empty_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[:, k] = (self.sdf(x + e) - self.sdf(x - e)) / (2 * h)
        return g

    def normal(self, x) -> np.ndarray:
        g = self.gradient(x)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)

    def project(self, x, iters: int = 20) -> np.ndarray:
        """Newton projection onto the true surface to within contact_tol."""
        x = np.array(x, dtype=float).reshape(-1, 3)
        for _ in range(iters):
            d = self.sdf(x)
            if np.all(np.abs(d) <= 0.5 * self.contact_tol):
                break
            g = self.gradient(x)
            x = x - (d / np.maximum((g * g).sum(axis=1), 1e-12))[:, None] * g
        return x


def _noisy_normal(world: World, x, n, rng):
    if world.normal_noise <= 0:
        return n
    if rng is None:
        # deterministic per contact location; seed words must be non-negative
        key = np.round(np.asarray(x) * 1e6).astype(np.int64).view(np.uint64)
        rng = np.random.default_rng([world.seed, *(int(k) for k in key)])
    m = n + rng.normal(scale=world.normal_noise, size=3)
    return m / np.linalg.norm(m)


def probe_point(world: World, x, rng=None, t: int = 0) -> Observation:
    """Contact iff |true SDF| <= contact_tol; contacts are projected onto the surface."""
    x = np.asarray(x, dtype=float).reshape(3)
    d = float(world.sdf(x)[0])
    if abs(d) > world.contact_tol:
        return Observation.non_contact(x, t)
    g = world.gradient(x)[0]
    y = x - d * g / max(g @ g, 1e-12)
    if abs(float(world.sdf(y)[0])) > world.contact_tol:
        y = world.project(y)[0]
    n = world.normal(y)[0]
    return Observation.contact(y, _noisy_normal(world, y, n, rng), t)


def _contact_at(world: World, x) -> OrientedPoint:
    x = world.project(x)[0]
    return OrientedPoint(x, _noisy_normal(world, x, world.normal(x)[0], None))


def ray_march_contact(world: World, start, direction, max_len: float, step: float = 0.05) -> OrientedPoint | None:
    """Sphere-trace from ``start`` along ``direction``; first surface crossing refined by bisection.

    Steps are never shorter than ``step`` so grazing rays terminate; a sign
    change between samples is bisected down to contact_tol.
    """
    p0 = np.asarray(start, dtype=float).reshape(3)
    u = np.asarray(direction, dtype=float).reshape(3)
    u = u / np.linalg.norm(u)
    tol = world.contact_tol
    s_prev = 0.0
    d_prev = float(world.sdf(p0)[0])
    if abs(d_prev) <= tol:
        return _contact_at(world, p0)
    if d_prev < 0:
        return None  # a physical probe cannot start inside the object
    while s_prev < max_len:
        s = min(s_prev + max(d_prev, step), max_len)
        d = float(world.sdf(p0 + s * u)[0])
        if abs(d) <= tol:
            return _contact_at(world, p0 + s * u)
        if d < 0:
            lo, hi = s_prev, s
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                dm = float(world.sdf(p0 + mid * u)[0])
                if abs(dm) <= tol:
                    return _contact_at(world, p0 + mid * u)
                if dm > 0:
                    lo = mid
                else:
                    hi = mid
            return _contact_at(world, p0 + lo * u)
        s_prev, d_prev = s, d
    return None


def surface_walk(world: World, start, toward, step: float = 0.15, budget: float = 3.0,
                 stop_when_closest: bool = True) -> tuple[OrientedPoint, float]:
    """Walk on the true surface from ``start`` toward ``toward`` along tangent planes.

    Each step moves ``step`` along the to-target direction projected onto the
    local tangent plane, then re-projects onto the surface along the normal.
    Stops when the budget is used, the target is reached, or the distance to
    the target stops decreasing.  Without ``stop_when_closest`` a step that
    overshoots is retried at half length, so the walk settles on the surface
    point closest to the target instead of oscillating around it.  Returns the
    end contact and the walked path length.
    """
    p = world.project(start)[0]
    goal = np.asarray(toward, dtype=float).reshape(3)
    walked = 0.0
    best = np.linalg.norm(goal - p)
    h_cap = step
    while walked < budget - 1e-12:
        n = world.normal(p)[0]
        v = goal - p
        v = v - (v @ n) * n
        nv = np.linalg.norm(v)
        if nv < 1e-9:
            break
        h = min(h_cap, budget - walked, nv)
        q = world.project(p + h * v / nv)[0]
        moved = np.linalg.norm(q - p)
        if moved < 1e-9:
            break
        dist = np.linalg.norm(goal - q)
        if dist >= best:
            if stop_when_closest:
                break
            h_cap *= 0.5
            if h_cap < 1e-6:
                break
            continue
        p, walked, best = q, walked + moved, dist
        if dist < 1e-6:
            break
    return _contact_at(world, p), walked


def surface_slide(world: World, start, direction, length: float, step: float = 0.15) -> tuple[OrientedPoint, float]:
    """Slide ``length`` along the true surface from ``start``, keeping the initial heading.

    The heading is re-projected onto each new tangent plane, so on a smooth
    surface the path follows a geodesic.  Returns the end contact and the
    distance actually slid (shorter if the heading becomes normal to the surface).
    """
    p = world.project(start)[0]
    u = np.asarray(direction, dtype=float).reshape(3)
    slid = 0.0
    while slid < length - 1e-12:
        n = world.normal(p)[0]
        v = u - (u @ n) * n
        nv = np.linalg.norm(v)
        if nv < 1e-9:
            break
        v = v / nv
        q = world.project(p + min(step, length - slid) * v)[0]
        moved = np.linalg.norm(q - p)
        if moved < 1e-9:
            break
        u = (q - p) / moved
        p, slid = q, slid + moved
    return _contact_at(world, p), slid


def sample_surface_point(world: World, rng: np.random.Generator) -> OrientedPoint:
    mesh = world.truth_model.display_mesh
    x, _ = mesh.sample_surface(1, rng)
    y = compose_transform(world.truth_pose, x)
    return _contact_at(world, y)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a uniformly distributed unit quaternion."""
    q = rng.normal(size=4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def random_pose(rng: np.random.Generator, model: ObjectModel | None = None,
                half_width: float = WORKSPACE, max_offset: float = 1.0) -> Pose:
    """Uniform SO(3) rotation and a uniform translation that keeps the object in the workspace."""
    R = random_rotation(rng)
    if model is None:
        return Pose.from_matrix(R, rng.uniform(-max_offset, max_offset, 3))
    v = model.display_mesh.vertices @ R.T
    lo = np.maximum(-half_width - v.min(axis=0), -max_offset)
    hi = np.minimum(half_width - v.max(axis=0), max_offset)
    if np.any(lo > hi):
        raise ValueError("object does not fit in the workspace")
    return Pose.from_matrix(R, rng.uniform(lo, hi))


class Probe:
    """The estimator's only window onto the world: touch, ray, walk and first-contact sampling."""

    def __init__(self, world: World, march_step: float = 0.05):
        self._world = world
        self.march_step = march_step
        self.path_length = 0.0

    @property
    def contact_tol(self) -> float:
        return self._world.contact_tol

    def touch(self, x, t: int = 0) -> Observation:
        return probe_point(self._world, x, t=t)

    def ray(self, start, direction, max_len: float) -> OrientedPoint | None:
        hit = ray_march_contact(self._world, start, direction, max_len, self.march_step)
        self.path_length += max_len if hit is None else float(np.linalg.norm(hit.x - np.asarray(start)))
        return hit

    def approach(self, x, outward, clearance: float = 1.0) -> OrientedPoint | None:
        """Come in from free space along -outward and stop at ``x`` unless touched first."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(outward, dtype=float)
        u = u / np.linalg.norm(u)
        c = clearance
        if c <= 0:
            return None
        while float(self._world.sdf(x + c * u)[0]) <= self._world.contact_tol and c < 4 * WORKSPACE:
            c *= 2
        return self.ray(x + c * u, -u, c)

    def walk(self, start, toward, step: float, budget: float, stop_when_closest: bool = True):
        hit, walked = surface_walk(self._world, start, toward, step, budget, stop_when_closest)
        self.path_length += walked
        return hit, walked

    def slide(self, start, direction, length: float, step: float):
        hit, slid = surface_slide(self._world, start, direction, length, step)
        self.path_length += slid
        return hit, slid

    def first_contact(self, rng: np.random.Generator) -> OrientedPoint:
        return sample_surface_point(self._world, rng)
